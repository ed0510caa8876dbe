#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "advex/adv_train.hpp"
#include "advex/data.hpp"
#include "advex/nn.hpp"
#include "advex/regularizers.hpp"

namespace advex {

// Random streams of one run, see derive_seed.
enum RngStream : std::uint64_t { kStreamInit = 0, kStreamShuffle, kStreamLipschitz, kStreamNoise, kStreamAugment };

struct TrainConfig {
  std::string preset = "mlp-2d";
  Activation activation = Activation::HHRelu;
  double d = 1.0;
  int epochs = 60;
  std::size_t batch_size = 32;
  LrSchedule schedule{0.05, 3.0, {45.0, 55.0}, 0.1};
  SgdConfig sgd;
  LipschitzConfig lipschitz;  // lipschitz.psi is the fixed strength
  std::optional<AdaptivePsiConfig> adaptive_psi;
  OutputZeroConfig output_zero;
  AdvTrainConfig adversarial;
  AugmentConfig augment;
  std::uint64_t seed = 0;

  /// Throws ConfigError; a fixed psi > 0 together with adaptive psi is
  /// rejected.
  void validate(std::size_t classes) const;
};

std::string to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are an error.
TrainConfig train_config_from_json(const std::string& text);

struct EpochStats {
  int epoch = 0;
  double classification = 0.0;  // batch means, averaged over the epoch
  double lipschitz = 0.0;
  double output_zero = 0.0;
  double total = 0.0;
  double psi = 0.0;      // at the end of the epoch
  double min_psi = 0.0;  // smallest psi applied to any batch of the epoch
  double accuracy = 0.0; // on the training batches as fed
  double learning_rate = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::string checkpoint;

  const EpochStats& final() const { return epochs.back(); }
};

std::string to_json(const TrainReport& report);

struct TrainResult {
  Network net;
  TrainReport report;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Plain cross-entropy SGD extended by whatever the config switches on; a
/// disabled extension is skipped entirely.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const EpochCallback& on_epoch = {});

struct EvalResult {
  double accuracy = 0.0;
  double mean_abs_grad = 0.0;  // E|dy_i/dx_j| over examples, outputs and inputs
  double mean_max_grad = 0.0;  // E over examples of max_{i,j} |dy_i/dx_j|
  std::size_t examples = 0;    // entering the gradient statistics
};

/// `limit` caps how many examples (in dataset order) enter the gradient
/// statistics; 0 means all. Accuracy always covers the full dataset.
EvalResult evaluate(const Network& net, const Dataset& data, std::size_t limit = 0);

}  // namespace advex
