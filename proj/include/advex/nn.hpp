#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "advex/autodiff.hpp"
#include "advex/tensor.hpp"

namespace advex {

enum class Activation { HHRelu, Relu };

struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
};

struct ConvLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  int stride = 1;
  int pad = 0;
};

struct PoolLayer {
  int window = 2;
};

struct FlattenLayer {};

struct ActivationLayer {
  Activation kind = Activation::HHRelu;
  double d = 1.0;
};

using Layer = std::variant<DenseLayer, ConvLayer, PoolLayer, FlattenLayer, ActivationLayer>;

enum class ParamKind { Weight, Bias };

struct Parameter {
  std::string name;
  ParamKind kind = ParamKind::Weight;
  Tensor value;
};

/// Ordered stack of layers over a fixed per-example input shape. Inputs to
/// forward() carry a leading batch dimension. Parameters are listed in layer
/// order and their names are unique.
class Network {
 public:
  Network(Shape input_shape, std::vector<Layer> layers, std::string preset = "custom");

  /// 2 -> hidden -> hidden -> classes dense stack.
  static Network mlp_2d(std::size_t classes, Activation act = Activation::HHRelu, double d = 1.0,
                        std::size_t hidden = 32);
  /// Three conv blocks, global average pool, dense head. input_shape = {C,H,W}
  /// with H == W divisible by 4.
  static Network cnn_tiny(const Shape& input_shape, std::size_t classes, Activation act = Activation::HHRelu,
                          double d = 1.0);
  static Network from_preset(const std::string& preset, const Shape& input_shape, std::size_t classes,
                             Activation act = Activation::HHRelu, double d = 1.0);

  /// Fan-in scaled uniform weights, zero biases, zero output-layer weights.
  void initialize(std::uint64_t seed);

  const Shape& input_shape() const { return input_shape_; }
  std::size_t input_size() const { return numel(input_shape_); }
  std::size_t classes() const { return classes_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const std::string& preset() const { return preset_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Places every parameter on `g` as a leaf.
  std::vector<Var> bind(Graph& g, bool requires_grad = true) const;
  /// x: [B, input_shape...] -> pre-softmax outputs [B, classes].
  Var forward(Var x, std::span<const Var> params) const;
  /// Plain evaluation of pre-softmax outputs for a batch.
  Tensor logits(const Tensor& batch) const;

 private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::string preset_;
  std::size_t classes_ = 0;
  std::vector<Parameter> params_;
};

Tensor hhrelu(const Tensor& x, double d);

/// Max-shifted softmax of one output vector.
std::vector<double> softmax(std::span<const double> y);
inline constexpr double kLogFloor = 1e-12;
/// -log(max(s[t], 1e-12)).
double cross_entropy(std::span<const double> s, std::size_t t);

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes);
/// Row-wise softmax of [B,V].
Var softmax_rows(Var y);
Var log_softmax_rows(Var y);
/// Mean over the batch of -log(max(s_t, 1e-12)).
Var cross_entropy_loss(Var logits, std::span<const std::size_t> labels);

std::size_t argmax(std::span<const double> v);

// ---------------------------------------------------------------------------
// Optimizer

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double bias_decay = 1e-4;
};

struct OptimizerState {
  std::vector<Tensor> momentum;
  double learning_rate = 0.1;
  SgdConfig config;
};

OptimizerState make_optimizer(const Network& net, const SgdConfig& cfg, double learning_rate);

/// v <- mu*v + g + decay*theta; theta <- theta - lr*v. `grads` is in
/// parameter order.
void sgd_step(Network& net, OptimizerState& state, std::span<const Tensor> grads);
void sgd_step(Network& net, OptimizerState& state, const std::map<std::string, Tensor>& grads);

/// Linear warmup from base/10 to base, then multiplied by step_factor at each
/// step epoch reached.
struct LrSchedule {
  double base = 0.2;
  double warmup_epochs = 10.0;
  std::vector<double> step_epochs{170.0, 195.0};
  double step_factor = 0.1;

  double rate(double epoch) const;
};

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.json plus one AETN file per parameter.

void save_checkpoint(const Network& net, const std::string& dir);
Network load_checkpoint(const std::string& dir);

}  // namespace advex
