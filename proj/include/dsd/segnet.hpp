#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsd/labels.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

struct ConvSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool relu = true;

  bool operator==(const ConvSpec&) const = default;
};

// Three-stage fully convolutional segmentation network. The outputs of the
// last backbone layer, the last head layer and the 1x1 logits layer are the
// distillation taps; all three share one spatial size.
struct SegNetSpec {
  std::string name = "net";
  std::size_t in_channels = 3;
  std::vector<ConvSpec> backbone;
  std::vector<ConvSpec> head;
  std::size_t classes = 0;
  // Fixed preprocessing applied to the images: (x - input_mean) * input_scale.
  double input_mean = 0.0;
  double input_scale = 1.0;

  std::size_t output_stride() const;
  std::size_t layer_count() const { return backbone.size() + head.size() + 1; }
  // Every layer in network order, logits last.
  std::vector<ConvSpec> layers() const;
  std::size_t tap_channels(const std::string& tap) const;
  void validate() const;

  std::string to_json() const;
  static SegNetSpec from_json(const std::string& text);
  std::uint64_t digest() const;

  bool operator==(const SegNetSpec&) const = default;

  // The factories centre [0, 1] images on [-1, 1]. Uncentred inputs leave
  // the small student with dead first-layer units on some seeds.
  // 6 conv layers (4 backbone, 1 head, 1x1 logits).
  static SegNetSpec teacher(std::size_t classes, std::size_t width = 16);
  // 3 conv layers (1 backbone, 1 head, 1x1 logits).
  static SegNetSpec student(std::size_t classes, std::size_t width = 8);
};

std::uint64_t fnv1a64(const std::string& text);

// Batched tap outputs, each B x channels x h x w.
struct NetOutputs {
  Tensor backbone;
  Tensor head;
  Tensor logits;
};

class SegNet {
 public:
  SegNet(SegNetSpec spec, std::uint64_t seed);
  SegNet(SegNetSpec spec, std::vector<Tensor> params);

  const SegNetSpec& spec() const { return spec_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }

  // Forward pass that keeps the activations needed by backward().
  NetOutputs forward(const Tensor& images);
  // Forward pass without caching; used for frozen networks and evaluation.
  NetOutputs infer(const Tensor& images) const;

  // Gradients of the loss with respect to the tap outputs of the last
  // forward() call. Empty tensors stand for zero gradients. Returns one
  // gradient per parameter tensor and clears the cached activations.
  std::vector<Tensor> backward(const NetOutputs& upstream);

  bool has_cache() const { return cache_valid_; }

 private:
  struct LayerCache {
    std::vector<std::vector<double>> cols;  // per sample im2col buffer
    Tensor output;                          // post-activation, B x C x h x w
    std::size_t in_channels = 0;
    std::size_t in_h = 0;
    std::size_t in_w = 0;
  };

  NetOutputs run(const Tensor& images, std::vector<LayerCache>* cache) const;

  SegNetSpec spec_;
  std::vector<Tensor> params_;  // weight (out x in x k x k), bias (out) per layer
  std::vector<LayerCache> cache_;  // buffers are reused across steps
  bool cache_valid_ = false;
  std::vector<double> dcols_;
};

// Per-pixel argmax of B x C x h x w logits after bilinear upsampling to
// (out_h, out_w); one label map per batch entry.
std::vector<LabelMap> predict_labels(const Tensor& logits, std::size_t out_h,
                                     std::size_t out_w);

}  // namespace dsd
