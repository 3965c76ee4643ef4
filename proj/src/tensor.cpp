// SPDX-License-Identifier: Apache-2.0
#include "spanlab/tensor.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace spanlab {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " +
                            shape_str(b)) {}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " needs " +
                     std::to_string(shape_numel(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor(Shape{rows, cols}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(v));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return data_[r * shape_.at(1) + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return data_[r * shape_.at(1) + c];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item: expected one element, shape " + shape_str(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("reshape", shape_, shape);
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::ostream& operator<<(std::ostream& os, const Tensor& t) {
  os << "Tensor" << shape_str(t.shape()) << "[";
  const std::size_t shown = std::min<std::size_t>(t.size(), 16);
  for (std::size_t i = 0; i < shown; ++i) os << (i ? ", " : "") << t[i];
  if (shown < t.size()) os << ", ...";
  return os << "]";
}

namespace {

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  }
  os.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf{};
  is.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!is) throw FormatError("tensor blob: truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensor_blob(std::ostream& os, const Tensor& t) {
  os.write("SPTN", 4);
  put_le<std::uint32_t>(os, kTensorBlobVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_le<std::uint64_t>(os, e);
  for (double v : t.data()) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
}

Tensor read_tensor_blob(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "SPTN") {
    throw FormatError("tensor blob: bad magic");
  }
  const auto version = get_le<std::uint32_t>(is);
  if (version != kTensorBlobVersion) {
    throw FormatError("tensor blob: unsupported version " + std::to_string(version));
  }
  const auto rank = get_le<std::uint32_t>(is);
  if (rank > 16) throw FormatError("tensor blob: implausible rank");
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(get_le<std::uint64_t>(is));
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = std::bit_cast<double>(get_le<std::uint64_t>(is));
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor_blob(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_tensor_blob(is);
}

}  // namespace spanlab
