#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace advex {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. A rank-0 tensor (shape []) holds one
/// value.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// The single element of a size-1 tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Plain (non-differentiable) helpers used by optimizers and attacks.
double l2_norm(std::span<const double> v);
double sum(std::span<const double> v);
Tensor clamp(const Tensor& t, double lo, double hi);

/// Copies row `row` of a batch tensor [B, ...] into a tensor of the
/// per-example shape.
Tensor slice_row(const Tensor& batch, std::size_t row);
/// Stacks equally-shaped tensors into [N, ...].
Tensor stack(std::span<const Tensor> items);

// AETN binary format: magic "AETN", u32 rank, rank x u32 dims, then f64
// payload, all little-endian.
std::string encode_aetn(const Tensor& t);
Tensor decode_aetn(std::string_view bytes);
void write_aetn(std::ostream& os, const Tensor& t);
Tensor read_aetn(std::istream& is);
void save_aetn(const std::string& path, const Tensor& t);
Tensor load_aetn(const std::string& path);

}  // namespace advex
