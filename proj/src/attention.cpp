#include "dsd/attention.hpp"

#include <algorithm>
#include <cmath>

#include "dsd/kernels.hpp"

namespace dsd {

namespace {

void require_features(const Tensor& a, const char* what) {
  if (a.rank() != 3 || a.dim(0) == 0) {
    throw InvalidArgument(std::string(what) + ": expected N x H x W with N >= 1, got " +
                          shape_string(a.shape()));
  }
}

}  // namespace

AttentionMap attention_map(const Tensor& features, AttentionMode mode,
                           double p, std::string source) {
  require_features(features, "attention_map");
  if (!(p >= 1.0)) throw InvalidArgument("attention_map: p must be >= 1");
  const std::size_t channels = features.dim(0);
  const std::size_t h = features.dim(1);
  const std::size_t w = features.dim(2);
  const std::size_t sites = h * w;
  Tensor out({h, w});
  if (mode == AttentionMode::kSum && p == 2.0) {
    kernels::attention_sum_sq(features.data().data(), channels, sites,
                              out.data().data());
  } else {
    for (std::size_t s = 0; s < sites; ++s) {
      double acc = mode == AttentionMode::kSum ? 0.0 : -1.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double v = std::pow(std::abs(features[c * sites + s]), p);
        acc = mode == AttentionMode::kSum ? acc + v : std::max(acc, v);
      }
      out[s] = acc;
    }
  }
  return {std::move(out), std::move(source)};
}

Tensor attention_map_backward(const Tensor& features, const Tensor& upstream,
                              AttentionMode mode, double p) {
  require_features(features, "attention_map_backward");
  const std::size_t channels = features.dim(0);
  const std::size_t sites = features.dim(1) * features.dim(2);
  if (upstream.size() != sites) {
    throw InvalidArgument("attention_map_backward: upstream size mismatch");
  }
  // d|a|^p / da = p |a|^(p-1) sign(a)
  auto dpow = [p](double a) {
    if (p == 2.0) return 2.0 * a;
    if (a == 0.0) return 0.0;
    return p * std::pow(std::abs(a), p - 1.0) * (a > 0.0 ? 1.0 : -1.0);
  };
  Tensor grad(features.shape());
  for (std::size_t s = 0; s < sites; ++s) {
    if (mode == AttentionMode::kSum) {
      for (std::size_t c = 0; c < channels; ++c) {
        grad[c * sites + s] = upstream[s] * dpow(features[c * sites + s]);
      }
    } else {
      std::size_t best = 0;
      for (std::size_t c = 1; c < channels; ++c) {
        if (std::abs(features[c * sites + s]) >
            std::abs(features[best * sites + s])) {
          best = c;
        }
      }
      grad[best * sites + s] = upstream[s] * dpow(features[best * sites + s]);
    }
  }
  return grad;
}

Tensor normalized_attention(const Tensor& features, std::size_t out_h,
                            std::size_t out_w, double eps) {
  Tensor map = attention_map(features).values;
  map = resize_bilinear(map, out_h, out_w);
  return l2_normalize(map, eps);
}

Tensor normalized_attention_backward(const Tensor& features,
                                     const Tensor& upstream, double eps) {
  const Tensor raw = attention_map(features).values;
  const Tensor resized = resize_bilinear(raw, upstream.dim(0), upstream.dim(1));
  Tensor g = l2_normalize_backward(resized, upstream, eps);
  g = resize_bilinear_backward(g, raw.dim(0), raw.dim(1));
  return attention_map_backward(features, g);
}

namespace {

// Extent-wise maximum, so the result is the larger input plane whenever one
// contains the other and the choice does not depend on argument order.
std::pair<std::size_t, std::size_t> larger_plane(const Tensor& a,
                                                 const Tensor& b) {
  return {std::max(a.dim(1), b.dim(1)), std::max(a.dim(2), b.dim(2))};
}

}  // namespace

ResidualAttentionMap residual_attention(const Tensor& later,
                                        const Tensor& earlier, double eps) {
  require_features(later, "residual_attention");
  require_features(earlier, "residual_attention");
  const auto [h, w] = larger_plane(later, earlier);
  const Tensor m = normalized_attention(later, h, w, eps);
  const Tensor n = normalized_attention(earlier, h, w, eps);
  Tensor out({h, w});
  kernels::subtract(m.data().data(), n.data().data(), out.size(),
                    out.data().data());
  return {std::move(out), {}};
}

ResidualGrads residual_attention_backward(const Tensor& later,
                                          const Tensor& earlier,
                                          const Tensor& upstream, double eps) {
  Tensor neg = upstream;
  neg *= -1.0;
  return {normalized_attention_backward(later, upstream, eps),
          normalized_attention_backward(earlier, neg, eps)};
}

PairPolicy parse_pair_policy(const std::string& name) {
  if (name == "adjacent") return PairPolicy::kAdjacent;
  if (name == "all" || name == "all-pairs") return PairPolicy::kAllPairs;
  if (name == "explicit") return PairPolicy::kExplicit;
  throw InvalidArgument("unknown pair policy '" + name + "'");
}

std::string to_string(PairPolicy policy) {
  switch (policy) {
    case PairPolicy::kAdjacent: return "adjacent";
    case PairPolicy::kAllPairs: return "all";
    case PairPolicy::kExplicit: return "explicit";
  }
  return "adjacent";
}

std::size_t TapSet::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) {
    throw InvalidArgument("tap '" + name + "' is not in the tap set");
  }
  return static_cast<std::size_t>(it - names.begin());
}

TapSet build_taps(std::vector<std::pair<std::string, Tensor>> outputs,
                  PairPolicy policy,
                  const std::vector<NamedPair>& explicit_pairs) {
  if (outputs.size() < 2) {
    throw InvalidArgument("build_taps: at least two taps are required");
  }
  TapSet set;
  for (auto& [name, features] : outputs) {
    require_features(features, "build_taps");
    set.names.push_back(name);
    set.features.push_back(std::move(features));
  }
  const std::size_t k = set.size();
  switch (policy) {
    case PairPolicy::kAdjacent:
      for (std::size_t i = 1; i < k; ++i) set.pairs.emplace_back(i, i - 1);
      break;
    case PairPolicy::kAllPairs:
      for (std::size_t i = 1; i < k; ++i) set.pairs.emplace_back(i, i - 1);
      for (std::size_t gap = 2; gap < k; ++gap) {
        for (std::size_t i = gap; i < k; ++i) set.pairs.emplace_back(i, i - gap);
      }
      break;
    case PairPolicy::kExplicit:
      if (explicit_pairs.empty()) {
        throw InvalidArgument("build_taps: explicit policy needs pairs");
      }
      for (const auto& [later, earlier] : explicit_pairs) {
        const std::size_t m = set.index_of(later);
        const std::size_t n = set.index_of(earlier);
        if (m <= n) {
          throw InvalidArgument("build_taps: pair (" + later + ", " + earlier +
                                ") must name the later tap first");
        }
        set.pairs.emplace_back(m, n);
      }
      break;
  }
  return set;
}

}  // namespace dsd
