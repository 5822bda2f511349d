#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd {

namespace taps {
inline const std::string kBackbone = "backbone";
inline const std::string kHead = "head";
inline const std::string kLogits = "logits";
}  // namespace taps

enum class AttentionMode { kSum, kMax };

// Channel-collapsed spatial map of a N x H x W feature map.
struct AttentionMap {
  Tensor values;  // H x W
  std::string source_layer;
};

// N(F(A^m)) - N(F(A^n)) for a later tap m and an earlier tap n.
struct ResidualAttentionMap {
  Tensor values;  // H x W at the larger of the two spatial sizes
  std::pair<std::string, std::string> pair;
};

// Out[h, w] = sum_i |A[i, h, w]|^p (kSum) or max_i |A[i, h, w]|^p (kMax).
AttentionMap attention_map(const Tensor& features,
                           AttentionMode mode = AttentionMode::kSum,
                           double p = 2.0, std::string source = {});
Tensor attention_map_backward(const Tensor& features, const Tensor& upstream,
                              AttentionMode mode = AttentionMode::kSum,
                              double p = 2.0);

// The l2-normalized attention map, resized to (out_h, out_w) before the
// normalization when the sizes differ.
Tensor normalized_attention(const Tensor& features, std::size_t out_h,
                            std::size_t out_w, double eps);
Tensor normalized_attention_backward(const Tensor& features,
                                     const Tensor& upstream, double eps);

ResidualAttentionMap residual_attention(const Tensor& later,
                                        const Tensor& earlier,
                                        double eps = kDefaultEps);

struct ResidualGrads {
  Tensor later;
  Tensor earlier;
};
ResidualGrads residual_attention_backward(const Tensor& later,
                                          const Tensor& earlier,
                                          const Tensor& upstream,
                                          double eps = kDefaultEps);

enum class PairPolicy { kAdjacent, kAllPairs, kExplicit };

PairPolicy parse_pair_policy(const std::string& name);
std::string to_string(PairPolicy policy);

// An ordered set of named feature maps (network order, earliest first) and
// the (later, earlier) index pairs whose residual attention is compared.
struct TapSet {
  std::vector<std::string> names;
  std::vector<Tensor> features;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;

  std::size_t size() const { return names.size(); }
  std::size_t index_of(const std::string& name) const;
};

using NamedPair = std::pair<std::string, std::string>;

TapSet build_taps(std::vector<std::pair<std::string, Tensor>> outputs,
                  PairPolicy policy,
                  const std::vector<NamedPair>& explicit_pairs = {});

}  // namespace dsd
