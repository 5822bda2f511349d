#pragma once

#include <optional>
#include <string>

#include "dsd/attention.hpp"
#include "dsd/labels.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

// C x C cosine similarity between per-category probability maps.
struct CorrelationMatrix {
  Tensor values;
};

struct LossWeights {
  double alpha = 1000.0;  // pixel-wise similarity weight
  double beta = 10.0;     // category-wise similarity weight
  double tau = 4.0;       // softening temperature

  void validate() const;
};

// Gradient slot naming. Student taps are reported as "student.<tap name>".
std::string student_slot(const std::string& tap);

// Residual-attention matching between aligned student and teacher tap sets:
//   L = 1/((K-1) Z) * sum_pairs || RA_S/|RA_S| - RA_T/|RA_T| ||^2
// Teacher quantities are constants. Gradients cover every student tap.
GradPair psd_loss(const TapSet& student, const TapSet& teacher,
                  double eps = kDefaultEps);

// Rows of q (C x H x W or C x Z) are l2-normalized and multiplied with the
// transpose of the normalized matrix.
CorrelationMatrix correlation_matrix(const Tensor& q, double eps = kDefaultEps);

// (1/C^2) ||CM(softmax(z_s/tau)) - CM(softmax(z_t/tau))||_F^2, grad slot "z_s".
GradPair csd_loss(const Tensor& z_s, const Tensor& z_t, double tau,
                  double eps = kDefaultEps);

// tau^2 * mean over sites of KL(q_t || q_s), grad slot "z_s".
GradPair kd_loss(const Tensor& z_s, const Tensor& z_t, double tau);

// Mean over aligned taps of ||N(F(A_S)) - N(F(A_T))||^2.
GradPair at_loss(const TapSet& student, const TapSet& teacher,
                 double eps = kDefaultEps);

// Mean squared error between adapter(A_s) and A_t. `adapter` is a
// N_t x N_s 1x1 convolution (no bias); std::nullopt means identity.
// Grad slots "A_s" and, when an adapter is given, "adapter".
GradPair fitnet_loss(const Tensor& a_s, const Tensor& a_t,
                     const std::optional<Tensor>& adapter);

// Z x Z cosine similarity between per-pixel channel vectors.
Tensor affinity_matrix(const Tensor& features, double eps = kDefaultEps);

// (1/Z^2) ||S_s - S_t||^2, grad slot "A_s".
GradPair affinity_loss(const Tensor& a_s, const Tensor& a_t,
                       double eps = kDefaultEps);

// ce + alpha * psd + beta * csd. Terms with a zero weight are skipped
// entirely so that disabling distillation leaves the task gradient untouched.
GradPair total_loss(const GradPair& ce, const GradPair& psd,
                    const GradPair& csd, const LossWeights& w);

// Pixel-averaged cross-entropy of C x h x w logits against an H x W label
// map. Logits are bilinearly upsampled to the label size; ignore-labelled
// pixels are skipped. Grad slot "logits".
GradPair cross_entropy(const Tensor& logits, const LabelMap& labels,
                       int ignore_label = kIgnoreLabel);

}  // namespace dsd
