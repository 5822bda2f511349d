#include "dsd/losses.hpp"

#include <algorithm>
#include <cmath>

#include "dsd/kernels.hpp"

namespace dsd {

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) {
    throw InvalidArgument("loss weights must be non-negative");
  }
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
}

std::string student_slot(const std::string& tap) { return "student." + tap; }

namespace {

Tensor resize_plane(const Tensor& m, std::size_t h, std::size_t w) {
  return resize_bilinear(m, h, w);
}

void require_logits(const Tensor& z, const char* what) {
  if (z.rank() != 3) {
    throw InvalidArgument(std::string(what) + ": logits must be C x H x W, got " +
                          shape_string(z.shape()));
  }
}

// Row-wise l2 normalization of a rows x len block.
Tensor normalize_rows(const Tensor& m, std::size_t rows, std::size_t len,
                      double eps) {
  Tensor out({rows, len});
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t i = 0; i < len; ++i) sq += m[r * len + i] * m[r * len + i];
    const double inv = 1.0 / std::max(std::sqrt(sq), eps);
    for (std::size_t i = 0; i < len; ++i) out[r * len + i] = m[r * len + i] * inv;
  }
  return out;
}

Tensor normalize_rows_backward(const Tensor& m, const Tensor& upstream,
                               std::size_t rows, std::size_t len, double eps) {
  Tensor g({rows, len});
  for (std::size_t r = 0; r < rows; ++r) {
    Tensor row({len}), up({len});
    std::copy_n(m.data().begin() + r * len, len, row.data().begin());
    std::copy_n(upstream.data().begin() + r * len, len, up.data().begin());
    const Tensor gr = l2_normalize_backward(row, up, eps);
    std::copy(gr.data().begin(), gr.data().end(), g.data().begin() + r * len);
  }
  return g;
}

Tensor transpose(const Tensor& m, std::size_t rows, std::size_t cols) {
  Tensor t({cols, rows});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = m[r * cols + c];
  }
  return t;
}

// Gradient of (1/n^2) ||U U^T - T||^2 with respect to the rows of U, given
// D = U U^T - T (symmetric): 4 D U / n^2.
Tensor gram_loss_grad(const Tensor& diff, const Tensor& rows,
                      std::size_t count, std::size_t len) {
  const double scale = 4.0 / static_cast<double>(count * count);
  Tensor g({count, len});
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < count; ++j) {
      const double d = diff[i * count + j] * scale;
      if (d == 0.0) continue;
      const double* src = rows.data().data() + j * len;
      double* dst = g.data().data() + i * len;
      for (std::size_t k = 0; k < len; ++k) dst[k] += d * src[k];
    }
  }
  return g;
}

}  // namespace

GradPair psd_loss(const TapSet& student, const TapSet& teacher, double eps) {
  if (student.pairs.empty() || student.pairs.size() != teacher.pairs.size()) {
    throw InvalidArgument("psd_loss: student and teacher pair lists must be "
                          "non-empty and of equal length");
  }
  const std::size_t k = student.size();
  GradPair out;
  for (std::size_t t = 0; t < k; ++t) {
    out.grads[student_slot(student.names[t])] = Tensor(student.features[t].shape());
  }
  for (std::size_t p = 0; p < student.pairs.size(); ++p) {
    const auto [sm, sn] = student.pairs[p];
    const auto [tm, tn] = teacher.pairs[p];
    const Tensor ra_s =
        residual_attention(student.features[sm], student.features[sn], eps).values;
    const Tensor ra_t =
        residual_attention(teacher.features[tm], teacher.features[tn], eps).values;
    const std::size_t h = std::max(ra_s.dim(0), ra_t.dim(0));
    const std::size_t w = std::max(ra_s.dim(1), ra_t.dim(1));
    const Tensor ra_s_big = resize_plane(ra_s, h, w);
    const Tensor u_s = l2_normalize(ra_s_big, eps);
    const Tensor u_t = l2_normalize(resize_plane(ra_t, h, w), eps);
    const Tensor diff = u_s - u_t;
    const double scale = 1.0 / (static_cast<double>(k - 1) * static_cast<double>(h * w));
    out.value += scale * diff.dot(diff);

    Tensor g = 2.0 * scale * diff;
    g = l2_normalize_backward(ra_s_big, g, eps);
    g = resize_bilinear_backward(g, ra_s.dim(0), ra_s.dim(1));
    const ResidualGrads rg = residual_attention_backward(
        student.features[sm], student.features[sn], g, eps);
    out.grads[student_slot(student.names[sm])] += rg.later;
    out.grads[student_slot(student.names[sn])] += rg.earlier;
  }
  return out;
}

CorrelationMatrix correlation_matrix(const Tensor& q, double eps) {
  if (q.rank() < 2 || q.dim(0) == 0) {
    throw InvalidArgument("correlation_matrix: expected C x ... input");
  }
  const std::size_t c = q.dim(0);
  const std::size_t len = q.size() / c;
  const Tensor rows = normalize_rows(q, c, len, eps);
  Tensor cm({c, c});
  kernels::gram_rows(rows.data().data(), c, len, cm.data().data());
  return {std::move(cm)};
}

GradPair csd_loss(const Tensor& z_s, const Tensor& z_t, double tau,
                  double eps) {
  require_logits(z_s, "csd_loss");
  require_same_shape(z_s, z_t, "csd_loss");
  const std::size_t c = z_s.dim(0);
  const std::size_t len = z_s.size() / c;
  const Tensor q_s = softmax_over_channels(z_s, tau);
  const Tensor q_t = softmax_over_channels(z_t, tau);
  const Tensor rows_s = normalize_rows(q_s, c, len, eps);
  const Tensor cm_s = correlation_matrix(q_s, eps).values;
  const Tensor cm_t = correlation_matrix(q_t, eps).values;
  const Tensor diff = cm_s - cm_t;

  GradPair out;
  out.value = diff.dot(diff) / static_cast<double>(c * c);
  Tensor g = gram_loss_grad(diff, rows_s, c, len);
  g = normalize_rows_backward(q_s, g, c, len, eps);
  out.grads["z_s"] = softmax_over_channels_backward(q_s, g.reshaped(q_s.shape()), tau);
  return out;
}

GradPair kd_loss(const Tensor& z_s, const Tensor& z_t, double tau) {
  require_logits(z_s, "kd_loss");
  require_same_shape(z_s, z_t, "kd_loss");
  if (!(tau > 0.0)) throw InvalidArgument("kd_loss: tau must be > 0");
  const std::size_t c = z_s.dim(0);
  const std::size_t sites = z_s.dim(1) * z_s.dim(2);
  auto log_softmax = [&](const Tensor& z, std::size_t s, std::vector<double>& out) {
    double peak = z[s] / tau;
    for (std::size_t k = 1; k < c; ++k) peak = std::max(peak, z[k * sites + s] / tau);
    double total = 0.0;
    for (std::size_t k = 0; k < c; ++k) total += std::exp(z[k * sites + s] / tau - peak);
    const double log_total = std::log(total);
    for (std::size_t k = 0; k < c; ++k) out[k] = z[k * sites + s] / tau - peak - log_total;
  };
  GradPair out;
  Tensor grad(z_s.shape());
  std::vector<double> ls(c), lt(c);
  const double scale = tau * tau / static_cast<double>(sites);
  double total = 0.0;
  for (std::size_t s = 0; s < sites; ++s) {
    log_softmax(z_s, s, ls);
    log_softmax(z_t, s, lt);
    double kl = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double pt = std::exp(lt[k]);
      if (pt > 0.0) kl += pt * (lt[k] - ls[k]);
      grad[k * sites + s] = scale * (std::exp(ls[k]) - pt) / tau;
    }
    total += kl;
  }
  out.value = scale * total;
  out.grads["z_s"] = std::move(grad);
  return out;
}

GradPair at_loss(const TapSet& student, const TapSet& teacher, double eps) {
  if (student.size() == 0 || student.size() != teacher.size()) {
    throw InvalidArgument("at_loss: tap lists must be aligned");
  }
  const std::size_t k = student.size();
  GradPair out;
  for (std::size_t t = 0; t < k; ++t) {
    const Tensor& fs = student.features[t];
    const Tensor& ft = teacher.features[t];
    const std::size_t h = std::max(fs.dim(1), ft.dim(1));
    const std::size_t w = std::max(fs.dim(2), ft.dim(2));
    const Tensor u_s = normalized_attention(fs, h, w, eps);
    const Tensor u_t = normalized_attention(ft, h, w, eps);
    const Tensor diff = u_s - u_t;
    out.value += diff.dot(diff) / static_cast<double>(k);
    out.grads[student_slot(student.names[t])] = normalized_attention_backward(
        fs, (2.0 / static_cast<double>(k)) * diff, eps);
  }
  return out;
}

GradPair fitnet_loss(const Tensor& a_s, const Tensor& a_t,
                     const std::optional<Tensor>& adapter) {
  if (a_s.rank() != 3 || a_t.rank() != 3) {
    throw InvalidArgument("fitnet_loss: feature maps must be N x H x W");
  }
  const std::size_t ns = a_s.dim(0);
  const std::size_t nt = a_t.dim(0);
  const std::size_t h = a_s.dim(1);
  const std::size_t w = a_s.dim(2);
  const std::size_t z = h * w;
  Tensor mapped;
  if (adapter) {
    if (adapter->rank() != 2 || adapter->dim(0) != nt || adapter->dim(1) != ns) {
      throw InvalidArgument("fitnet_loss: adapter must be " + std::to_string(nt) +
                            " x " + std::to_string(ns) + ", got " +
                            shape_string(adapter->shape()));
    }
    mapped = Tensor({nt, h, w});
    for (std::size_t o = 0; o < nt; ++o) {
      for (std::size_t i = 0; i < ns; ++i) {
        const double wt = adapter->at(o, i);
        for (std::size_t s = 0; s < z; ++s) mapped[o * z + s] += wt * a_s[i * z + s];
      }
    }
  } else {
    if (ns != nt) {
      throw InvalidArgument("fitnet_loss: identity adapter needs equal channel "
                            "counts, got " + std::to_string(ns) + " and " +
                            std::to_string(nt));
    }
    mapped = a_s;
  }
  const Tensor resized = resize_bilinear(mapped, a_t.dim(1), a_t.dim(2));
  const Tensor diff = resized - a_t;
  const double count = static_cast<double>(a_t.size());

  GradPair out;
  out.value = diff.dot(diff) / count;
  Tensor g_mapped = resize_bilinear_backward((2.0 / count) * diff, h, w);
  if (adapter) {
    Tensor g_adapter({nt, ns});
    Tensor g_in({ns, h, w});
    for (std::size_t o = 0; o < nt; ++o) {
      for (std::size_t i = 0; i < ns; ++i) {
        const double wt = adapter->at(o, i);
        double acc = 0.0;
        for (std::size_t s = 0; s < z; ++s) {
          acc += g_mapped[o * z + s] * a_s[i * z + s];
          g_in[i * z + s] += wt * g_mapped[o * z + s];
        }
        g_adapter.at(o, i) = acc;
      }
    }
    out.grads["A_s"] = std::move(g_in);
    out.grads["adapter"] = std::move(g_adapter);
  } else {
    out.grads["A_s"] = std::move(g_mapped);
  }
  return out;
}

Tensor affinity_matrix(const Tensor& features, double eps) {
  if (features.rank() != 3) {
    throw InvalidArgument("affinity_matrix: expected N x H x W");
  }
  const std::size_t n = features.dim(0);
  const std::size_t z = features.dim(1) * features.dim(2);
  const Tensor pixels = normalize_rows(transpose(features, n, z), z, n, eps);
  Tensor s({z, z});
  kernels::gram_rows(pixels.data().data(), z, n, s.data().data());
  return s;
}

GradPair affinity_loss(const Tensor& a_s, const Tensor& a_t, double eps) {
  if (a_s.rank() != 3 || a_t.rank() != 3 || a_s.dim(1) != a_t.dim(1) ||
      a_s.dim(2) != a_t.dim(2)) {
    throw InvalidArgument("affinity_loss: feature maps must share spatial size");
  }
  const std::size_t n = a_s.dim(0);
  const std::size_t z = a_s.dim(1) * a_s.dim(2);
  const Tensor pix_raw = transpose(a_s, n, z);
  const Tensor pixels = normalize_rows(pix_raw, z, n, eps);
  Tensor s({z, z});
  kernels::gram_rows(pixels.data().data(), z, n, s.data().data());
  const Tensor diff = s - affinity_matrix(a_t, eps);

  GradPair out;
  out.value = diff.dot(diff) / static_cast<double>(z * z);
  Tensor g = gram_loss_grad(diff, pixels, z, n);
  g = normalize_rows_backward(pix_raw, g, z, n, eps);
  out.grads["A_s"] = transpose(g, z, n).reshaped(a_s.shape());
  return out;
}

GradPair total_loss(const GradPair& ce, const GradPair& psd,
                    const GradPair& csd, const LossWeights& w) {
  GradPair out = ce;
  auto add = [&out](const GradPair& term, double weight) {
    if (weight == 0.0) return;
    out.value += weight * term.value;
    for (const auto& [slot, g] : term.grads) {
      auto it = out.grads.find(slot);
      if (it == out.grads.end()) {
        out.grads.emplace(slot, weight * g);
      } else {
        it->second.axpy(weight, g);
      }
    }
  };
  add(psd, w.alpha);
  add(csd, w.beta);
  return out;
}

GradPair cross_entropy(const Tensor& logits, const LabelMap& labels,
                       int ignore_label) {
  require_logits(logits, "cross_entropy");
  const std::size_t c = logits.dim(0);
  const Tensor up = resize_bilinear(logits, labels.height, labels.width);
  const Tensor q = softmax_over_channels(up, 1.0);
  const std::size_t sites = labels.size();
  std::size_t valid = 0;
  for (int y : labels.labels) {
    if (y == ignore_label) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw InvalidArgument("cross_entropy: label " + std::to_string(y) +
                            " out of range for " + std::to_string(c) + " classes");
    }
    ++valid;
  }
  GradPair out;
  Tensor g(up.shape());
  if (valid > 0) {
    const double inv = 1.0 / static_cast<double>(valid);
    double total = 0.0;
    for (std::size_t s = 0; s < sites; ++s) {
      const int y = labels.labels[s];
      if (y == ignore_label) continue;
      total -= std::log(std::max(q[static_cast<std::size_t>(y) * sites + s], 1e-300));
      for (std::size_t k = 0; k < c; ++k) g[k * sites + s] = q[k * sites + s] * inv;
      g[static_cast<std::size_t>(y) * sites + s] -= inv;
    }
    out.value = total * inv;
  }
  out.grads["logits"] = resize_bilinear_backward(g, logits.dim(1), logits.dim(2));
  return out;
}

}  // namespace dsd
