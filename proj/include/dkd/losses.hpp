#pragma once

#include <vector>

#include "dkd/tensor.hpp"

namespace dkd {

/// Scalar summary of one loss evaluation, for training history and the
/// decomposition invariant (total == (1-zeta)*ce + zeta*diversity).
struct LossTerms {
  double total = 0.0;
  double ce = 0.0;
  double diversity = 0.0;  // mean pairwise cosine (DKD) or T^2-scaled KL (KD)
  int zero_norm_rows = 0;  // latent rows skipped by the cosine mask
};

/// Diversity-regularized loss for one training member:
///   (1-zeta) * CE(probs, labels) + (zeta/k) * sum_j cos_mean(own, frozen_j)
/// where k = frozen_latents.size() >= 1 and every frozen latent is a
/// detached [N,D] tensor from a predecessor's tap. zeta in [0,1].
Tensor dkd_loss(const Tensor& probs, const std::vector<int>& labels, const Tensor& own_latent,
                const std::vector<Tensor>& frozen_latents, double zeta,
                LossTerms* terms = nullptr);

/// Response-distillation baseline:
///   (1-zeta) * CE(softmax(student), labels)
///   + zeta * T^2 * KL(mean_j softmax(teacher_j / T) || softmax(student / T))
/// Teacher logits are plain values (no gradients flow into teachers).
Tensor kd_loss(const Tensor& student_logits, const std::vector<int>& labels,
               const std::vector<std::vector<double>>& teacher_logits, double zeta,
               double temperature = 4.0, LossTerms* terms = nullptr);

/// Plain cross-entropy on probabilities; the RI-mode and main-member loss.
Tensor ce_loss(const Tensor& probs, const std::vector<int>& labels, LossTerms* terms = nullptr);

}  // namespace dkd
