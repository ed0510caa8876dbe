#include "advex/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <sstream>

#include <json.hpp>

#include "advex/error.hpp"

namespace advex {

double rmse(std::span<const double> delta) {
  if (delta.empty()) return 0.0;
  return l2_norm(delta) / std::sqrt(double(delta.size()));
}

double naive_baseline(std::span<const std::size_t> labels, std::size_t classes, BaselineMode mode) {
  if (classes == 0) throw ConfigError("naive_baseline: no classes");
  if (mode == BaselineMode::Random) return 1.0 / double(classes);
  if (labels.empty()) throw ConfigError("naive_baseline: empty dataset");
  std::vector<std::size_t> counts(classes, 0);
  for (auto t : labels) {
    if (t >= classes) throw ConfigError("naive_baseline: label out of range");
    ++counts[t];
  }
  return double(*std::max_element(counts.begin(), counts.end())) / double(labels.size());
}

double AraCurve::accuracy_at(double r) const {
  if (radii.empty()) return 0.0;
  const auto above = std::count_if(radii.begin(), radii.end(), [r](double x) { return x > r; });
  return double(above) / double(radii.size());
}

double ara_from_radii(std::vector<double> radii, double naive_accuracy, double cap) {
  if (!(cap >= 0.0)) throw ConfigError("ara: cap must be >= 0");
  if (radii.empty()) return 0.0;
  std::sort(radii.begin(), radii.end());
  const double M = double(radii.size());
  double area = 0.0, prev = 0.0;
  for (std::size_t i = 0; i <= radii.size() && prev < cap; ++i) {
    const double next = i < radii.size() ? std::clamp(radii[i], prev, cap) : cap;
    const double above = (M - double(i)) / M;
    area += std::max(above - naive_accuracy, 0.0) * (next - prev);
    prev = next;
  }
  return area;
}

double ara(const AraCurve& curve) { return ara_from_radii(curve.radii, curve.naive_accuracy, curve.cap); }

double ara_from_points(std::span<const double> r, std::span<const double> accuracy, double naive_accuracy) {
  if (r.size() != accuracy.size()) throw ShapeError("ara_from_points: r and accuracy lengths differ");
  double area = 0.0;
  for (std::size_t i = 1; i < r.size(); ++i) {
    const double w = r[i] - r[i - 1];
    if (w < 0.0) throw ConfigError("ara_from_points: r must be non-decreasing");
    const double a = accuracy[i - 1] - naive_accuracy, b = accuracy[i] - naive_accuracy;
    if (a >= 0.0 && b >= 0.0) {
      area += 0.5 * w * (a + b);
    } else if (a > 0.0 || b > 0.0) {
      const double hi = std::max(a, b);
      area += 0.5 * w * hi * hi / (hi - std::min(a, b));
    }
  }
  return area;
}

AraCurve build_curve(const Network& net, const Dataset& data, Goal goal, const AttackConfig& attack_cfg,
                     const CurveOptions& opt) {
  if (goal != Goal::Adv && goal != Goal::Btr) throw ConfigError("build_curve: goal must be adv or btr");
  if (opt.quota < 1) throw ConfigError("build_curve: quota must be >= 1");
  if (!(opt.cap > 0.0)) throw ConfigError("build_curve: cap must be > 0");
  if (data.classes != net.classes() || data.image_shape != net.input_shape()) {
    throw ShapeError("build_curve: dataset does not match the network");
  }
  AttackConfig cfg = attack_cfg;
  cfg.goal = goal;
  cfg.target.reset();
  cfg.validate(net.classes());

  AraCurve curve;
  curve.cap = opt.cap;
  curve.quota = opt.quota;
  curve.naive_accuracy = naive_baseline(data.all_labels(), data.classes, BaselineMode::Naive);

  Rng rng(opt.seed);
  const auto order = shuffled_indices(data.size(), rng);
  std::vector<std::size_t> to_attack;       // dataset indices
  std::vector<std::size_t> slot;            // position in curve.radii
  std::size_t correct = 0, pos = 0;
  const std::size_t V = net.classes(), chunk = 256;
  while (pos < order.size() && to_attack.size() < opt.quota) {
    const std::size_t end = std::min(order.size(), pos + chunk);
    std::span<const std::size_t> idx(order.data() + pos, end - pos);
    const Tensor y = net.logits(data.batch(idx));
    for (std::size_t i = 0; i < idx.size() && to_attack.size() < opt.quota; ++i) {
      const bool ok = argmax(y.data().subspan(i * V, V)) == data.examples[idx[i]].label;
      if (ok) {
        ++correct;
        to_attack.push_back(idx[i]);
        slot.push_back(curve.radii.size());
      }
      curve.radii.push_back(0.0);
      ++pos;
    }
  }
  curve.partial = to_attack.size() < opt.quota;
  curve.attacked = to_attack.size();
  curve.clean_accuracy = curve.radii.empty() ? 0.0 : double(correct) / double(curve.radii.size());

  const std::size_t bs = std::max<std::size_t>(1, opt.batch);
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t s = 0; s < to_attack.size(); s += bs) jobs.emplace_back(s, std::min(to_attack.size(), s + bs));

  std::vector<AttackOutcome> outcomes(to_attack.size());
  auto run = [&](std::size_t worker, std::size_t workers) {
    for (std::size_t j = worker; j < jobs.size(); j += workers) {
      auto [s, e] = jobs[j];
      std::span<const std::size_t> idx(to_attack.data() + s, e - s);
      const auto labels = data.labels(idx);
      auto res = attack_batch(net, data.batch(idx), labels, cfg);
      std::move(res.begin(), res.end(), outcomes.begin() + std::ptrdiff_t(s));
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(opt.threads, 1, std::max<std::size_t>(1, jobs.size()));
  if (workers == 1) {
    run(0, 1);
  } else {
    std::vector<std::future<void>> futs;
    for (std::size_t w = 0; w < workers; ++w) futs.push_back(std::async(std::launch::async, run, w, workers));
    for (auto& f : futs) f.get();
  }

  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    if (o.censored()) ++curve.censored;
    curve.radii[slot[i]] = o.censored() ? opt.cap : std::min(o.rmse, opt.cap);
  }
  curve.area = ara(curve);
  return curve;
}

std::string curve_csv(const AraCurve& curve) {
  std::vector<double> r = curve.radii;
  std::sort(r.begin(), r.end());
  std::ostringstream os;
  os.precision(10);
  os << "r,accuracy\n";
  os << 0.0 << ',' << curve.accuracy_at(0.0) << '\n';
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (r[i] <= 0.0 || (i + 1 < r.size() && r[i + 1] == r[i])) continue;
    os << r[i] << ',' << curve.accuracy_at(r[i]) << '\n';
  }
  return os.str();
}

std::string curve_summary_json(const AraCurve& curve) {
  nlohmann::json j{{"clean_accuracy", curve.clean_accuracy},
                   {"naive", curve.naive_accuracy},
                   {"cap", curve.cap},
                   {"area", curve.area},
                   {"quota", curve.quota},
                   {"attacked", curve.attacked},
                   {"censored", curve.censored},
                   {"partial", curve.partial},
                   {"radii_count", curve.radii.size()}};
  return j.dump();
}

}  // namespace advex
