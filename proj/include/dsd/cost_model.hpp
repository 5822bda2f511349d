#pragma once

#include <cstdint>
#include <string>

#include "dsd/attention.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

// Shapes that drive the knowledge-extraction cost of each distillation
// method. Z = h * w is derived on demand.
struct LayerGeometry {
  std::uint64_t n = 256;   // channels of the tapped feature maps
  std::uint64_t h = 80;
  std::uint64_t w = 45;
  std::uint64_t c = 19;    // categories
  std::uint64_t hp = 65;   // logits height
  std::uint64_t wp = 65;   // logits width
  std::uint64_t k = 2;     // number of tapped feature maps

  std::uint64_t z() const { return h * w; }
  void validate() const;
};

// (2N - 1) * H * W * H * W
std::uint64_t flops_affinity(const LayerGeometry& g);
// (2 K N - 1) * H * W; requires K >= 2.
std::uint64_t flops_psd(const LayerGeometry& g);
// (2 H' W' - 1) * C * C
std::uint64_t flops_csd(const LayerGeometry& g);

struct FlopsRatio {
  double psd_over_affinity = 0.0;
  double affinity_over_psd = 0.0;
  double k_over_z = 0.0;  // closed-form approximation of psd_over_affinity
};
FlopsRatio flops_ratio(const LayerGeometry& g);

struct FlopsReport {
  LayerGeometry geometry;
  std::uint64_t affinity = 0;
  std::uint64_t psd = 0;
  std::uint64_t csd = 0;
  FlopsRatio ratio;
};

FlopsReport flops_report(const LayerGeometry& g);
std::string flops_report_json(const FlopsReport& r);
std::string flops_report_table(const FlopsReport& r);

// Instrumented knowledge extraction. These run the same kernels as the loss
// implementations with a scalar that counts every multiply and add; the
// normalizations are evaluated uncounted.
std::uint64_t count_psd_ops(const TapSet& taps, double eps = kDefaultEps);
std::uint64_t count_affinity_ops(const Tensor& features, double eps = kDefaultEps);
std::uint64_t count_csd_ops(const Tensor& logits, double tau = 1.0,
                            double eps = kDefaultEps);

// Convenience overloads that build seeded random inputs for a geometry. PSD
// uses K taps of N x H x W with adjacent pairs; CSD uses C x H' x W'.
std::uint64_t count_psd_ops(const LayerGeometry& g, std::uint64_t seed = 0);
std::uint64_t count_affinity_ops(const LayerGeometry& g, std::uint64_t seed = 0);
std::uint64_t count_csd_ops(const LayerGeometry& g, std::uint64_t seed = 0);

}  // namespace dsd
