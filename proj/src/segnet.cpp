#include "dsd/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

namespace dsd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t out_extent(std::size_t in, const ConvSpec& c) {
  const std::size_t pad = c.kernel / 2;
  return (in + 2 * pad - c.kernel) / c.stride + 1;
}

// Output columns [lo, hi) whose input column ox * stride + offset lies in [0, w).
std::pair<std::size_t, std::size_t> valid_range(std::size_t w, std::size_t ow,
                                                std::size_t stride, long offset) {
  long lo = 0;
  if (offset < 0) lo = (-offset + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  long hi = (static_cast<long>(w) - 1 - offset) / static_cast<long>(stride) + 1;
  if (static_cast<long>(w) - 1 - offset < 0) hi = 0;
  hi = std::min(hi, static_cast<long>(ow));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

void im2col(const double* x, std::size_t channels, std::size_t h, std::size_t w,
            const ConvSpec& c, std::size_t oh, std::size_t ow, double* cols) {
  const std::size_t k = c.kernel;
  const long pad = static_cast<long>(k / 2);
  const std::size_t plane = oh * ow;
  for (std::size_t ch = 0; ch < channels; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((ch * k + ky) * k + kx) * plane;
        const long off = static_cast<long>(kx) - pad;
        const auto [lo, hi] = valid_range(w, ow, c.stride, off);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          double* dst = row + oy * ow;
          const long iy = static_cast<long>(oy * c.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill_n(dst, ow, 0.0);
            continue;
          }
          const double* src = x + (ch * h + static_cast<std::size_t>(iy)) * w;
          std::fill_n(dst, lo, 0.0);
          if (c.stride == 1) {
            std::copy_n(src + static_cast<long>(lo) + off, hi - lo, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) {
              dst[ox] = src[static_cast<long>(ox * c.stride) + off];
            }
          }
          std::fill(dst + hi, dst + ow, 0.0);
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t channels, std::size_t h,
            std::size_t w, const ConvSpec& c, std::size_t oh, std::size_t ow,
            double* x) {
  const std::size_t k = c.kernel;
  const long pad = static_cast<long>(k / 2);
  const std::size_t plane = oh * ow;
  for (std::size_t ch = 0; ch < channels; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((ch * k + ky) * k + kx) * plane;
        const long off = static_cast<long>(kx) - pad;
        const auto [lo, hi] = valid_range(w, ow, c.stride, off);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * c.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          double* dst = x + (ch * h + static_cast<std::size_t>(iy)) * w;
          const double* src = row + oy * ow;
          for (std::size_t ox = lo; ox < hi; ++ox) {
            dst[static_cast<long>(ox * c.stride) + off] += src[ox];
          }
        }
      }
    }
  }
}

nlohmann::ordered_json conv_json(const ConvSpec& c) {
  return {{"out_channels", c.out_channels}, {"kernel", c.kernel},
          {"stride", c.stride}, {"relu", c.relu}};
}

ConvSpec conv_from_json(const nlohmann::json& j) {
  return {j.at("out_channels").get<std::size_t>(), j.at("kernel").get<std::size_t>(),
          j.at("stride").get<std::size_t>(), j.at("relu").get<bool>()};
}

}  // namespace

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::size_t SegNetSpec::output_stride() const {
  std::size_t s = 1;
  for (const ConvSpec& c : layers()) s *= c.stride;
  return s;
}

std::vector<ConvSpec> SegNetSpec::layers() const {
  std::vector<ConvSpec> all = backbone;
  all.insert(all.end(), head.begin(), head.end());
  all.push_back({classes, 1, 1, false});
  return all;
}

std::size_t SegNetSpec::tap_channels(const std::string& tap) const {
  if (tap == "backbone") return backbone.back().out_channels;
  if (tap == "head") return head.back().out_channels;
  if (tap == "logits") return classes;
  throw InvalidArgument("unknown tap '" + tap + "'");
}

void SegNetSpec::validate() const {
  if (backbone.empty() || head.empty()) {
    throw InvalidArgument("network needs at least one backbone and one head layer");
  }
  if (classes < 2) throw InvalidArgument("network needs at least 2 classes");
  if (!std::isfinite(input_mean) || !std::isfinite(input_scale) || input_scale == 0.0) {
    throw InvalidArgument("input normalization must be finite with a nonzero scale");
  }
  for (const ConvSpec& c : layers()) {
    if (c.out_channels == 0 || c.kernel == 0 || c.kernel % 2 == 0 || c.stride == 0) {
      throw InvalidArgument("invalid conv layer in " + name);
    }
  }
  for (const ConvSpec& c : head) {
    if (c.stride != 1) {
      throw InvalidArgument("head layers must keep the backbone resolution");
    }
  }
}

std::string SegNetSpec::to_json() const {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["in_channels"] = in_channels;
  j["classes"] = classes;
  j["input_mean"] = input_mean;
  j["input_scale"] = input_scale;
  j["backbone"] = nlohmann::ordered_json::array();
  for (const ConvSpec& c : backbone) j["backbone"].push_back(conv_json(c));
  j["head"] = nlohmann::ordered_json::array();
  for (const ConvSpec& c : head) j["head"].push_back(conv_json(c));
  return j.dump();
}

SegNetSpec SegNetSpec::from_json(const std::string& text) {
  SegNetSpec s;
  try {
    const auto j = nlohmann::json::parse(text);
    s.name = j.at("name").get<std::string>();
    s.in_channels = j.at("in_channels").get<std::size_t>();
    s.classes = j.at("classes").get<std::size_t>();
    s.input_mean = j.value("input_mean", 0.0);
    s.input_scale = j.value("input_scale", 1.0);
    for (const auto& c : j.at("backbone")) s.backbone.push_back(conv_from_json(c));
    for (const auto& c : j.at("head")) s.head.push_back(conv_from_json(c));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad network spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::uint64_t SegNetSpec::digest() const { return fnv1a64(to_json()); }

SegNetSpec SegNetSpec::teacher(std::size_t classes, std::size_t width) {
  SegNetSpec s;
  s.name = "teacher";
  s.classes = classes;
  s.input_mean = 0.5;
  s.input_scale = 2.0;
  s.backbone = {{width, 3, 2, true}, {width, 3, 1, true}, {width, 3, 1, true},
                {width, 3, 1, true}};
  s.head = {{width, 3, 1, true}};
  return s;
}

SegNetSpec SegNetSpec::student(std::size_t classes, std::size_t width) {
  SegNetSpec s;
  s.name = "student";
  s.classes = classes;
  s.input_mean = 0.5;
  s.input_scale = 2.0;
  s.backbone = {{width, 3, 2, true}};
  s.head = {{width, 3, 1, true}};
  return s;
}

SegNet::SegNet(SegNetSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  std::size_t in = spec_.in_channels;
  for (const ConvSpec& c : spec_.layers()) {
    const std::size_t fan_in = in * c.kernel * c.kernel;
    const double gain = c.relu ? 2.0 : 1.0;
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
    Tensor weight({c.out_channels, in, c.kernel, c.kernel});
    for (double& x : weight.data()) x = dist(rng);
    params_.push_back(std::move(weight));
    params_.emplace_back(Shape{c.out_channels});
    in = c.out_channels;
  }
}

SegNet::SegNet(SegNetSpec spec, std::vector<Tensor> params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  std::size_t in = spec_.in_channels;
  const auto layers = spec_.layers();
  if (params_.size() != 2 * layers.size()) {
    throw InvalidArgument("parameter count does not match network spec");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ConvSpec& c = layers[l];
    if (params_[2 * l].shape() != Shape{c.out_channels, in, c.kernel, c.kernel} ||
        params_[2 * l + 1].shape() != Shape{c.out_channels}) {
      throw InvalidArgument("parameter shape does not match network spec");
    }
    in = c.out_channels;
  }
}

NetOutputs SegNet::forward(const Tensor& images) {
  cache_valid_ = false;
  NetOutputs out = run(images, &cache_);
  cache_valid_ = true;
  return out;
}

NetOutputs SegNet::infer(const Tensor& images) const { return run(images, nullptr); }

NetOutputs SegNet::run(const Tensor& images, std::vector<LayerCache>* cache) const {
  if (images.rank() != 4 || images.dim(1) != spec_.in_channels) {
    throw InvalidArgument("forward: expected B x " + std::to_string(spec_.in_channels) +
                          " x H x W images, got " + shape_string(images.shape()));
  }
  const std::size_t stride = spec_.output_stride();
  if (images.dim(2) % stride != 0 || images.dim(3) % stride != 0) {
    throw InvalidArgument("forward: image size " + std::to_string(images.dim(2)) + "x" +
                          std::to_string(images.dim(3)) +
                          " is not divisible by the output stride " +
                          std::to_string(stride));
  }
  const auto layers = spec_.layers();
  const std::size_t batch = images.dim(0);
  const std::size_t backbone_end = spec_.backbone.size() - 1;
  const std::size_t head_end = backbone_end + spec_.head.size();

  NetOutputs out;
  if (cache) cache->resize(layers.size());
  Tensor x = images;
  if (spec_.input_mean != 0.0 || spec_.input_scale != 1.0) {
    for (double& v : x.data()) v = (v - spec_.input_mean) * spec_.input_scale;
  }
  std::vector<double> cols;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ConvSpec& c = layers[l];
    const std::size_t cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = out_extent(h, c), ow = out_extent(w, c);
    const std::size_t kdim = cin * c.kernel * c.kernel;
    const std::size_t plane = oh * ow;
    Tensor y({batch, c.out_channels, oh, ow});
    LayerCache scratch;
    LayerCache& entry = cache ? (*cache)[l] : scratch;
    entry.in_channels = cin;
    entry.in_h = h;
    entry.in_w = w;
    Eigen::Map<const RowMat> weight(params_[2 * l].data().data(),
                                    static_cast<Eigen::Index>(c.out_channels),
                                    static_cast<Eigen::Index>(kdim));
    const Tensor& bias = params_[2 * l + 1];
    if (cache) entry.cols.resize(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<double>& buf = cache ? entry.cols[b] : cols;
      buf.resize(kdim * plane);
      im2col(x.data().data() + b * cin * h * w, cin, h, w, c, oh, ow, buf.data());
      Eigen::Map<const RowMat> colm(buf.data(), static_cast<Eigen::Index>(kdim),
                                    static_cast<Eigen::Index>(plane));
      Eigen::Map<RowMat> ym(y.data().data() + b * c.out_channels * plane,
                            static_cast<Eigen::Index>(c.out_channels),
                            static_cast<Eigen::Index>(plane));
      ym.noalias() = weight * colm;
      for (std::size_t o = 0; o < c.out_channels; ++o) {
        double* row = ym.data() + o * plane;
        for (std::size_t s = 0; s < plane; ++s) {
          const double v = row[s] + bias[o];
          row[s] = c.relu ? std::max(v, 0.0) : v;
        }
      }
    }
    if (cache) entry.output = y;
    if (l == backbone_end) out.backbone = y;
    if (l == head_end) out.head = y;
    x = std::move(y);
  }
  out.logits = std::move(x);
  return out;
}

std::vector<Tensor> SegNet::backward(const NetOutputs& upstream) {
  if (!cache_valid_) {
    throw StateError("backward called without a preceding forward pass");
  }
  const auto layers = spec_.layers();
  const std::size_t backbone_end = spec_.backbone.size() - 1;
  const std::size_t head_end = backbone_end + spec_.head.size();
  const std::size_t batch = cache_.back().output.dim(0);

  std::vector<Tensor> grads;
  for (const Tensor& p : params_) grads.emplace_back(p.shape());

  auto tap_grad = [](const Tensor& g, const Tensor& like) -> const Tensor* {
    if (g.empty()) return nullptr;
    require_same_shape(g, like, "backward upstream");
    return &g;
  };

  Tensor g(cache_.back().output.shape());
  for (std::size_t l = layers.size(); l-- > 0;) {
    const ConvSpec& c = layers[l];
    LayerCache& entry = cache_[l];
    const Tensor& y = entry.output;
    const Tensor* extra = nullptr;
    if (l == layers.size() - 1) extra = tap_grad(upstream.logits, y);
    if (l == head_end) extra = tap_grad(upstream.head, y);
    if (l == backbone_end) extra = tap_grad(upstream.backbone, y);
    if (extra) g += *extra;
    if (c.relu) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (y[i] <= 0.0) g[i] = 0.0;
      }
    }
    const std::size_t cin = entry.in_channels, h = entry.in_h, w = entry.in_w;
    const std::size_t oh = y.dim(2), ow = y.dim(3);
    const std::size_t kdim = cin * c.kernel * c.kernel;
    const std::size_t plane = oh * ow;
    Eigen::Map<RowMat> dweight(grads[2 * l].data().data(),
                               static_cast<Eigen::Index>(c.out_channels),
                               static_cast<Eigen::Index>(kdim));
    Eigen::Map<const RowMat> weight(params_[2 * l].data().data(),
                                    static_cast<Eigen::Index>(c.out_channels),
                                    static_cast<Eigen::Index>(kdim));
    Tensor& dbias = grads[2 * l + 1];
    Tensor gin;
    if (l > 0) gin = Tensor({batch, cin, h, w});
    for (std::size_t b = 0; b < batch; ++b) {
      Eigen::Map<const RowMat> gm(g.data().data() + b * c.out_channels * plane,
                                  static_cast<Eigen::Index>(c.out_channels),
                                  static_cast<Eigen::Index>(plane));
      Eigen::Map<const RowMat> colm(entry.cols[b].data(),
                                    static_cast<Eigen::Index>(kdim),
                                    static_cast<Eigen::Index>(plane));
      dweight.noalias() += gm * colm.transpose();
      for (std::size_t o = 0; o < c.out_channels; ++o) {
        const double* row = gm.data() + o * plane;
        double acc = 0.0;
        for (std::size_t s = 0; s < plane; ++s) acc += row[s];
        dbias[o] += acc;
      }
      if (l > 0) {
        dcols_.resize(kdim * plane);
        Eigen::Map<RowMat> dcm(dcols_.data(), static_cast<Eigen::Index>(kdim),
                               static_cast<Eigen::Index>(plane));
        dcm.noalias() = weight.transpose() * gm;
        col2im(dcols_.data(), cin, h, w, c, oh, ow,
               gin.data().data() + b * cin * h * w);
      }
    }
    g = std::move(gin);
  }
  cache_valid_ = false;
  return grads;
}

std::vector<LabelMap> predict_labels(const Tensor& logits, std::size_t out_h,
                                     std::size_t out_w) {
  if (logits.rank() != 4) throw InvalidArgument("predict_labels: expected B x C x h x w");
  std::vector<LabelMap> out;
  const std::size_t classes = logits.dim(1);
  const std::size_t sites = out_h * out_w;
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    const Tensor up = resize_bilinear(logits.slice(b), out_h, out_w);
    LabelMap m(out_h, out_w);
    for (std::size_t s = 0; s < sites; ++s) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < classes; ++k) {
        if (up[k * sites + s] > up[best * sites + s]) best = k;
      }
      m.labels[s] = static_cast<int>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace dsd
