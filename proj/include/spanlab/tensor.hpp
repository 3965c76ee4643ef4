// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spanlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes do not conform for an op.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when an input lies outside the domain of an op (log of a
/// non-positive value, non-finite input where finiteness is required).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised on malformed files (tensor blobs, IDX, datasets).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major float64 array.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  /// Same buffer, new shape; element count must match.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::ostream& operator<<(std::ostream& os, const Tensor& t);

// Blob format: "SPTN", u32 version (1), u32 rank, u64 extent per axis,
// then the row-major payload as little-endian IEEE-754 doubles.
inline constexpr std::uint32_t kTensorBlobVersion = 1;

void write_tensor_blob(std::ostream& os, const Tensor& t);
Tensor read_tensor_blob(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace spanlab
