#include "dkd/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dkd {

namespace {

void check_zeta(double zeta) {
  if (!(zeta >= 0.0 && zeta <= 1.0))
    throw std::invalid_argument("loss: zeta must lie in [0,1], got " + std::to_string(zeta));
}

}  // namespace

Tensor ce_loss(const Tensor& probs, const std::vector<int>& labels, LossTerms* terms) {
  Tensor ce = cross_entropy_mean(probs, labels);
  if (terms) {
    terms->total = ce.value();
    terms->ce = ce.value();
    terms->diversity = 0.0;
    terms->zero_norm_rows = 0;
  }
  return ce;
}

Tensor dkd_loss(const Tensor& probs, const std::vector<int>& labels, const Tensor& own_latent,
                const std::vector<Tensor>& frozen_latents, double zeta, LossTerms* terms) {
  check_zeta(zeta);
  if (frozen_latents.empty())
    throw std::invalid_argument("dkd_loss: needs at least one frozen latent");
  const int k = static_cast<int>(frozen_latents.size());

  Tensor ce = cross_entropy_mean(probs, labels);
  Tensor div;
  int zero_rows = 0;
  for (const auto& fl : frozen_latents) {
    CosineStats stats;
    Tensor c = cosine_similarity_mean(own_latent, fl, &stats);
    zero_rows += stats.zero_norm_rows;
    div = div.defined() ? add(div, c) : c;
  }
  div = mul_scalar(div, 1.0 / k);  // mean pairwise similarity
  Tensor total = add(mul_scalar(ce, 1.0 - zeta), mul_scalar(div, zeta));
  if (terms) {
    terms->total = total.value();
    terms->ce = ce.value();
    terms->diversity = div.value();
    terms->zero_norm_rows = zero_rows;
  }
  return total;
}

Tensor kd_loss(const Tensor& student_logits, const std::vector<int>& labels,
               const std::vector<std::vector<double>>& teacher_logits, double zeta,
               double temperature, LossTerms* terms) {
  check_zeta(zeta);
  if (temperature <= 0.0)
    throw std::invalid_argument("kd_loss: temperature must be positive");
  if (teacher_logits.empty()) throw std::invalid_argument("kd_loss: needs at least one teacher");
  if (student_logits.shape().size() != 2)
    throw std::invalid_argument("kd_loss: student logits must be [N,K]");
  const int n = student_logits.shape()[0];
  const int kcls = student_logits.shape()[1];
  const std::size_t total_sz = static_cast<std::size_t>(n) * kcls;
  for (const auto& t : teacher_logits)
    if (t.size() != total_sz)
      throw std::invalid_argument("kd_loss: teacher logits size mismatch");

  // Soft targets: mean over teachers of softmax(teacher / T). Plain doubles;
  // no gradient flows into teachers.
  std::vector<double> soft(total_sz, 0.0);
  for (const auto& t : teacher_logits) {
    for (int i = 0; i < n; ++i) {
      const double* row = t.data() + static_cast<std::size_t>(i) * kcls;
      double mx = row[0];
      for (int j = 1; j < kcls; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (int j = 0; j < kcls; ++j) denom += std::exp((row[j] - mx) / temperature);
      for (int j = 0; j < kcls; ++j)
        soft[static_cast<std::size_t>(i) * kcls + j] +=
            std::exp((row[j] - mx) / temperature) / denom;
    }
  }
  for (auto& v : soft) v /= static_cast<double>(teacher_logits.size());

  // KL(p || q) = sum p log p - sum p log q ;  sum p log p is a constant.
  double p_log_p = 0.0;
  for (double p : soft)
    if (p > 0.0) p_log_p += p * std::log(p);

  Tensor ce = cross_entropy_mean(softmax_rows(student_logits), labels);
  Tensor log_q = log_softmax_rows(mul_scalar(student_logits, 1.0 / temperature));
  Tensor p_log_q = sum(mul(Tensor::from(std::move(soft), {n, kcls}), log_q));
  Tensor kl = mul_scalar(add_scalar(neg(p_log_q), p_log_p), 1.0 / n);
  Tensor total = add(mul_scalar(ce, 1.0 - zeta), mul_scalar(kl, zeta * temperature * temperature));
  if (terms) {
    terms->total = total.value();
    terms->ce = ce.value();
    // T^2-scaled so the decomposition invariant holds for every mode.
    terms->diversity = temperature * temperature * kl.value();
    terms->zero_norm_rows = 0;
  }
  return total;
}

}  // namespace dkd
