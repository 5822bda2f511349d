#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dsd/errors.hpp"

namespace dsd {

using Shape = std::vector<std::size_t>;

// Dense row-major tensor of doubles, rank 1 to 4.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor from(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;
  double& at(std::size_t i, std::size_t j, std::size_t k);
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  // Returns a copy with a new shape of equal element count.
  Tensor reshaped(Shape shape) const;
  // Copy of slice `index` along the leading axis.
  Tensor slice(std::size_t index) const;
  void set_slice(std::size_t index, const Tensor& value);

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double scale);
  void axpy(double alpha, const Tensor& x);  // this += alpha * x

  double sum() const;
  double dot(const Tensor& other) const;
  double norm() const;
  double max_abs() const;
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(double s, Tensor a);

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

// Scalar loss value together with gradients keyed by input slot.
struct GradPair {
  double value = 0.0;
  std::map<std::string, Tensor> grads;
};

inline constexpr double kDefaultEps = 1e-12;

// v / max(||v||_2, eps) over the flattened tensor.
Tensor l2_normalize(const Tensor& v, double eps = kDefaultEps);
// Backward of l2_normalize given the forward input and upstream gradient.
Tensor l2_normalize_backward(const Tensor& v, const Tensor& upstream,
                             double eps = kDefaultEps);

// softmax(z / tau) along the channel axis of a C x H x W tensor.
Tensor softmax_over_channels(const Tensor& z, double tau);
// Gradient w.r.t. z given q = softmax_over_channels(z, tau) and dL/dq.
Tensor softmax_over_channels_backward(const Tensor& q, const Tensor& upstream,
                                      double tau);

// Bilinear resize with the align-corners convention. Accepts H x W or
// C x H x W; channels are resized independently.
Tensor resize_bilinear(const Tensor& m, std::size_t out_h, std::size_t out_w);
// Adjoint of resize_bilinear: maps a gradient of the output shape back onto
// the input shape.
Tensor resize_bilinear_backward(const Tensor& upstream, std::size_t in_h,
                                std::size_t in_w);

// DST1 tensor serialization: "DST1", u8 rank, rank x u32 LE extents,
// then little-endian f64 values.
void write_dst1(std::ostream& out, const Tensor& t);
Tensor read_dst1(std::istream& in);
void save_dst1(const std::string& path, const Tensor& t);
Tensor load_dst1(const std::string& path);

}  // namespace dsd
