#include "advex/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>

#include "advex/error.hpp"

namespace advex {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(numel(shape_), fill) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  if (numel(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_str(shape_) + " needs " + std::to_string(numel(shape_)) +
                     " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor(Shape{rows, cols}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double sum(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

Tensor clamp(const Tensor& t, double lo, double hi) {
  Tensor out = t;
  for (double& v : out.data()) v = std::clamp(v, lo, hi);
  return out;
}

Tensor slice_row(const Tensor& batch, std::size_t row) {
  if (batch.rank() < 1 || row >= batch.dim(0)) {
    throw ShapeError("row " + std::to_string(row) + " out of range for " + shape_str(batch.shape()));
  }
  Shape inner(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = numel(inner);
  auto src = batch.data().subspan(row * n, n);
  return Tensor(std::move(inner), std::vector<double>(src.begin(), src.end()));
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("cannot stack zero tensors");
  Shape shape{items.size()};
  const Shape& inner = items.front().shape();
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<double> data;
  data.reserve(numel(shape));
  for (const auto& t : items) {
    if (t.shape() != inner) {
      throw ShapeError("stack: mismatched shapes " + shape_str(inner) + " vs " + shape_str(t.shape()));
    }
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

namespace {

constexpr char kMagic[4] = {'A', 'E', 'T', 'N'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::string_view b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(b[at + i])) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::string_view b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(b[at + i])) << (8 * i);
  return v;
}

}  // namespace

std::string encode_aetn(const Tensor& t) {
  std::string out(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 8 * t.size());
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Tensor decode_aetn(std::string_view b) {
  if (b.size() < 8 || std::memcmp(b.data(), kMagic, 4) != 0) {
    throw FormatError("not an AETN tensor (bad magic)");
  }
  const std::uint32_t rank = get_u32(b, 4);
  const std::size_t header = 8 + 4 * std::size_t(rank);
  if (b.size() < header) throw FormatError("AETN header truncated");
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = get_u32(b, 8 + 4 * i);
    if (shape[i] == 0) throw FormatError("AETN dimension " + std::to_string(i) + " is zero");
  }
  const std::size_t n = numel(shape);
  if (b.size() != header + 8 * n) {
    throw FormatError("AETN payload is " + std::to_string(b.size() - header) + " bytes, expected " +
                      std::to_string(8 * n));
  }
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(get_u64(b, header + 8 * i));
  return Tensor(std::move(shape), std::move(data));
}

void write_aetn(std::ostream& os, const Tensor& t) {
  const std::string bytes = encode_aetn(t);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor read_aetn(std::istream& is) {
  auto take = [&is](std::string& buf, std::size_t n) {
    const std::size_t at = buf.size();
    buf.resize(at + n);
    is.read(buf.data() + at, std::streamsize(n));
    if (std::size_t(is.gcount()) != n) throw FormatError("AETN stream truncated");
  };
  std::string bytes;
  take(bytes, 8);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not an AETN tensor (bad magic)");
  const std::uint32_t rank = get_u32(bytes, 4);
  take(bytes, 4 * std::size_t(rank));
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) n *= get_u32(bytes, 8 + 4 * i);
  take(bytes, 8 * n);
  return decode_aetn(bytes);
}

void save_aetn(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_aetn(os, t);
  if (!os) throw Error("failed writing " + path);
}

Tensor load_aetn(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  try {
    return read_aetn(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace advex
