#include "dsd/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace dsd {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(std::string(what) + ": shape mismatch " +
                          shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

namespace {

void check_rank(const Shape& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw InvalidArgument("tensor rank must be 1..4, got " +
                          std::to_string(shape.size()));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_rank(shape_);
  data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_rank(shape_);
  if (data_.size() != element_count(shape_)) {
    throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

double& Tensor::at(std::size_t i, std::size_t j) {
  return data_[i * shape_[1] + j];
}
double Tensor::at(std::size_t i, std::size_t j) const {
  return data_[i * shape_[1] + j];
}
double& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}
double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice(std::size_t index) const {
  if (rank() < 2 || index >= shape_[0]) {
    throw InvalidArgument("slice index out of range");
  }
  Shape inner(shape_.begin() + 1, shape_.end());
  const std::size_t n = element_count(inner);
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(index * n);
  return Tensor(std::move(inner), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

void Tensor::set_slice(std::size_t index, const Tensor& value) {
  if (rank() < 2 || index >= shape_[0]) {
    throw InvalidArgument("slice index out of range");
  }
  Shape inner(shape_.begin() + 1, shape_.end());
  if (value.shape() != inner) {
    throw InvalidArgument("set_slice: shape mismatch " +
                          shape_string(value.shape()) + " vs " +
                          shape_string(inner));
  }
  std::copy(value.data_.begin(), value.data_.end(),
            data_.begin() + static_cast<std::ptrdiff_t>(index * value.size()));
}

Tensor& Tensor::operator+=(const Tensor& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  require_same_shape(*this, other, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double scale) {
  for (double& x : data_) x *= scale;
  return *this;
}

void Tensor::axpy(double alpha, const Tensor& x) {
  require_same_shape(*this, x, "axpy");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * x.data_[i];
}

double Tensor::sum() const {
  double s = 0.0;
  for (double x : data_) s += x;
  return s;
}

double Tensor::dot(const Tensor& other) const {
  if (size() != other.size()) throw InvalidArgument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < data_.size(); ++i) s += data_[i] * other.data_[i];
  return s;
}

double Tensor::norm() const { return std::sqrt(dot(*this)); }

double Tensor::max_abs() const {
  double m = 0.0;
  for (double x : data_) m = std::max(m, std::abs(x));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double x) { return std::isfinite(x); });
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(double s, Tensor a) { return a *= s; }

Tensor l2_normalize(const Tensor& v, double eps) {
  if (!(eps > 0.0)) throw InvalidArgument("l2_normalize: eps must be > 0");
  const double n = std::max(v.norm(), eps);
  Tensor out = v;
  out *= 1.0 / n;
  return out;
}

Tensor l2_normalize_backward(const Tensor& v, const Tensor& upstream,
                             double eps) {
  require_same_shape(v, upstream, "l2_normalize_backward");
  const double n = v.norm();
  if (n <= eps) {
    Tensor g = upstream;
    g *= 1.0 / eps;
    return g;
  }
  // d(v/|v|) = (g - y (y.g)) / |v|
  const double inv = 1.0 / n;
  const double proj = v.dot(upstream) * inv * inv;
  Tensor g(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    g[i] = (upstream[i] - v[i] * proj) * inv;
  }
  return g;
}

Tensor softmax_over_channels(const Tensor& z, double tau) {
  if (!(tau > 0.0)) {
    throw InvalidArgument("softmax_over_channels: tau must be > 0");
  }
  if (z.rank() != 3) {
    throw InvalidArgument("softmax_over_channels: expected C x H x W, got " +
                          shape_string(z.shape()));
  }
  const std::size_t channels = z.dim(0);
  const std::size_t sites = z.dim(1) * z.dim(2);
  Tensor q(z.shape());
  for (std::size_t s = 0; s < sites; ++s) {
    double peak = z[s] / tau;
    for (std::size_t c = 1; c < channels; ++c) {
      peak = std::max(peak, z[c * sites + s] / tau);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const double e = std::exp(z[c * sites + s] / tau - peak);
      q[c * sites + s] = e;
      total += e;
    }
    for (std::size_t c = 0; c < channels; ++c) q[c * sites + s] /= total;
  }
  return q;
}

Tensor softmax_over_channels_backward(const Tensor& q, const Tensor& upstream,
                                      double tau) {
  require_same_shape(q, upstream, "softmax_over_channels_backward");
  const std::size_t channels = q.dim(0);
  const std::size_t sites = q.dim(1) * q.dim(2);
  Tensor g(q.shape());
  for (std::size_t s = 0; s < sites; ++s) {
    double inner = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      inner += q[c * sites + s] * upstream[c * sites + s];
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t i = c * sites + s;
      g[i] = q[i] * (upstream[i] - inner) / tau;
    }
  }
  return g;
}

namespace {

struct Tap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

// Source coordinates for each output index under align-corners sampling.
std::vector<Tap> sample_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double pos =
        out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) /
                      static_cast<double>(out - 1)
                : 0.0;
    std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    lo = std::min(lo, in - 1);
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, pos - static_cast<double>(lo)};
  }
  return taps;
}

struct PlaneDims {
  std::size_t channels;
  std::size_t h;
  std::size_t w;
};

PlaneDims plane_dims(const Tensor& m, const char* what) {
  if (m.rank() == 2) return {1, m.dim(0), m.dim(1)};
  if (m.rank() == 3) return {m.dim(0), m.dim(1), m.dim(2)};
  throw InvalidArgument(std::string(what) + ": expected rank 2 or 3, got " +
                        shape_string(m.shape()));
}

Shape with_plane(const Tensor& like, std::size_t h, std::size_t w) {
  if (like.rank() == 2) return {h, w};
  return {like.dim(0), h, w};
}

}  // namespace

Tensor resize_bilinear(const Tensor& m, std::size_t out_h, std::size_t out_w) {
  const PlaneDims d = plane_dims(m, "resize_bilinear");
  if (out_h == 0 || out_w == 0 || d.h == 0 || d.w == 0) {
    throw InvalidArgument("resize_bilinear: zero extent");
  }
  if (out_h == d.h && out_w == d.w) return m;
  const auto ty = sample_taps(d.h, out_h);
  const auto tx = sample_taps(d.w, out_w);
  Tensor out(with_plane(m, out_h, out_w));
  for (std::size_t c = 0; c < d.channels; ++c) {
    const double* src = m.data().data() + c * d.h * d.w;
    double* dst = out.data().data() + c * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const Tap& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const Tap& b = tx[x];
        const double top = src[a.lo * d.w + b.lo] * (1.0 - b.frac) +
                           src[a.lo * d.w + b.hi] * b.frac;
        const double bottom = src[a.hi * d.w + b.lo] * (1.0 - b.frac) +
                              src[a.hi * d.w + b.hi] * b.frac;
        dst[y * out_w + x] = top * (1.0 - a.frac) + bottom * a.frac;
      }
    }
  }
  return out;
}

Tensor resize_bilinear_backward(const Tensor& upstream, std::size_t in_h,
                                std::size_t in_w) {
  const PlaneDims d = plane_dims(upstream, "resize_bilinear_backward");
  if (in_h == 0 || in_w == 0) {
    throw InvalidArgument("resize_bilinear_backward: zero extent");
  }
  if (in_h == d.h && in_w == d.w) return upstream;
  const auto ty = sample_taps(in_h, d.h);
  const auto tx = sample_taps(in_w, d.w);
  Tensor grad(with_plane(upstream, in_h, in_w));
  for (std::size_t c = 0; c < d.channels; ++c) {
    const double* src = upstream.data().data() + c * d.h * d.w;
    double* dst = grad.data().data() + c * in_h * in_w;
    for (std::size_t y = 0; y < d.h; ++y) {
      const Tap& a = ty[y];
      for (std::size_t x = 0; x < d.w; ++x) {
        const Tap& b = tx[x];
        const double g = src[y * d.w + x];
        dst[a.lo * in_w + b.lo] += g * (1.0 - a.frac) * (1.0 - b.frac);
        dst[a.lo * in_w + b.hi] += g * (1.0 - a.frac) * b.frac;
        dst[a.hi * in_w + b.lo] += g * a.frac * (1.0 - b.frac);
        dst[a.hi * in_w + b.hi] += g * a.frac * b.frac;
      }
    }
  }
  return grad;
}

namespace {

constexpr std::array<char, 4> kMagic = {'D', 'S', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b.data(), b.size());
}

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b.data(), b.size());
}

template <std::size_t N>
std::array<unsigned char, N> get_bytes(std::istream& in) {
  std::array<unsigned char, N> b{};
  in.read(reinterpret_cast<char*>(b.data()), N);
  if (!in) throw FormatError("DST1: unexpected end of stream");
  return b;
}

std::uint32_t get_u32(std::istream& in) {
  const auto b = get_bytes<4>(in);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint64_t get_u64(std::istream& in) {
  const auto b = get_bytes<8>(in);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

void write_dst1(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  out.put(static_cast<char>(t.rank()));
  for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  for (double x : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(x));
  if (!out) throw FormatError("DST1: write failed");
}

Tensor read_dst1(std::istream& in) {
  const auto magic = get_bytes<4>(in);
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin(),
                  [](unsigned char a, char b) { return a == static_cast<unsigned char>(b); })) {
    throw FormatError("DST1: bad magic");
  }
  const auto rank = get_bytes<1>(in)[0];
  if (rank < 1 || rank > 4) throw FormatError("DST1: bad rank");
  Shape shape(rank);
  for (auto& e : shape) e = get_u32(in);
  std::vector<double> data(element_count(shape));
  for (double& x : data) x = std::bit_cast<double>(get_u64(in));
  return Tensor(std::move(shape), std::move(data));
}

void save_dst1(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  write_dst1(out, t);
}

Tensor load_dst1(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return read_dst1(in);
}

}  // namespace dsd
