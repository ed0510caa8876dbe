#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "advex/attack.hpp"
#include "advex/data.hpp"
#include "advex/nn.hpp"

namespace advex {

/// ||delta||_2 / sqrt(N).
double rmse(std::span<const double> delta);

enum class BaselineMode { Naive, Random };

/// Naive: majority-class frequency. Random: 1/V.
double naive_baseline(std::span<const std::size_t> labels, std::size_t classes, BaselineMode mode);

struct AraCurve {
  std::vector<double> radii;  // 0 = misclassified, cap = censored
  double cap = 0.2;
  double naive_accuracy = 0.0;
  double clean_accuracy = 0.0;
  double area = 0.0;
  std::size_t quota = 0;
  std::size_t attacked = 0;
  std::size_t censored = 0;
  bool partial = false;  // dataset ran out before the quota was reached

  /// Fraction of radii strictly above r.
  double accuracy_at(double r) const;
};

/// Area between the accuracy curve and the naive baseline over [0, cap],
/// integrated exactly from the step function the radii define.
double ara(const AraCurve& curve);
double ara_from_radii(std::vector<double> radii, double naive_accuracy, double cap);

/// Piecewise-linear accuracy curve through (r_i, acc_i), clipped at the
/// baseline (crossings are located exactly) and integrated up to the last r.
double ara_from_points(std::span<const double> r, std::span<const double> accuracy, double naive_accuracy);

struct CurveOptions {
  std::size_t quota = 200;
  double cap = 0.2;
  std::uint64_t seed = 0;
  std::size_t batch = 64;  // rows attacked together
  unsigned threads = 1;
};

/// Walks the dataset in a seeded order. Misclassified examples score 0;
/// correctly classified ones are attacked (goal adv or btr) until `quota` of
/// them are done. Radii are clipped to the cap.
AraCurve build_curve(const Network& net, const Dataset& data, Goal goal, const AttackConfig& attack_cfg,
                     const CurveOptions& opt);

/// Rows "r,accuracy" at every step of the curve, starting from r = 0.
std::string curve_csv(const AraCurve& curve);
/// JSON object with clean_accuracy, naive, cap, area, quota, attacked,
/// censored, partial, radii_count.
std::string curve_summary_json(const AraCurve& curve);

}  // namespace advex
