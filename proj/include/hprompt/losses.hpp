#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hprompt/prompts.hpp"
#include "hprompt/tensor.hpp"

namespace hprompt {

/// Row-Gram orthonormality penalty: mean squared distance between W W^T and
/// the identity. Zero iff the head's class weight rows are orthonormal.
template <typename T>
Tensor<T> head_orthogonality_loss(const LinearHead<T>& head) {
  Tensor<T> w = head.weight();
  std::size_t c = w.rows();
  std::vector<T> eye(c * c, T(0));
  for (std::size_t i = 0; i < c; ++i) eye[i * c + i] = T(1);
  return mean_squared(matmul_nt(w, w), Tensor<T>::from({c, c}, std::move(eye)));
}

/// Discriminator objective of the adversarial alignment, one optimizer step's
/// worth: classify real representations with their true local label m and
/// virtual ones with the shifted label m + classes_per_task over a
/// 2*classes_per_task-way head, plus the row-orthonormality penalty.
/// Virtual representations must arrive detached: only the head trains here.
template <typename T>
Tensor<T> bda_classifier_loss(const Tensor<T>& real_reps, const std::vector<std::size_t>& real_local_labels,
                              const Tensor<T>& virt_reps, const std::vector<std::size_t>& virt_local_labels,
                              const LinearHead<T>& disc) {
  check(disc.num_classes() % 2 == 0, "bda_classifier_loss: discriminator head must be 2*|Y| wide");
  std::size_t cpt = disc.num_classes() / 2;
  check(!virt_reps.needs_grad(), "bda_classifier_loss: virtual representations must be detached");
  for (std::size_t l : real_local_labels)
    check(l < cpt, "bda_classifier_loss: real label " + std::to_string(l) + " out of task range");
  std::vector<std::size_t> shifted(virt_local_labels);
  for (auto& l : shifted) {
    check(l < cpt, "bda_classifier_loss: virtual label " + std::to_string(l) + " out of task range");
    l += cpt;
  }
  Tensor<T> ce = add(cross_entropy_mean(disc.logits(real_reps), real_local_labels),
                     cross_entropy_mean(disc.logits(virt_reps), shifted));
  return add(ce, head_orthogonality_loss(disc));
}

/// Generator objective: virtual representations should fool the discriminator
/// into the true local label m. The head is read through detached weights, so
/// no gradient ever reaches it; gradients flow back through the
/// representations into the class prompt parameters.
template <typename T>
Tensor<T> bda_deception_loss(const Tensor<T>& virt_reps, const std::vector<std::size_t>& virt_local_labels,
                             const LinearHead<T>& disc) {
  return cross_entropy_mean(disc.logits_detached(virt_reps), virt_local_labels);
}

/// Joint current/past objective for the task prompt and classifier: real
/// samples with their global labels, plus (from the second task on) virtual
/// samples replayed from past class Gaussians, weighted by lambda.
template <typename T>
Tensor<T> cke_loss(const Tensor<T>& real_reps, const std::vector<std::size_t>& real_global_labels,
                   const Tensor<T>& virt_past_reps, const std::vector<std::size_t>& virt_past_global_labels,
                   const LinearHead<T>& cls, T lambda) {
  Tensor<T> rea = cross_entropy_mean(cls.logits(real_reps), real_global_labels);
  if (!virt_past_reps.defined() || virt_past_reps.rows() == 0) return rea;
  return add(rea, scale(cross_entropy_mean(cls.logits(virt_past_reps), virt_past_global_labels), lambda));
}

/// Supervised contrastive loss over an even-sized batch of two-view
/// representations [2N, D]. Pairwise cosine similarities at temperature tau;
/// each anchor averages -log p over its same-label positives, the denominator
/// running over every other sample. A two-view batch of one image scores
/// exactly 0; an anchor with no positive is a malformed batch.
template <typename T>
Tensor<T> gke_loss(const Tensor<T>& reps, const std::vector<std::size_t>& labels, T tau) {
  check(reps.shape().size() == 2, "gke_loss: 2-D representations required");
  std::size_t n2 = reps.rows();
  check(n2 >= 2 && n2 % 2 == 0, "gke_loss: need an even batch of at least two views");
  check(labels.size() == n2, "gke_loss: label count mismatch");
  check(tau > T(0), "gke_loss: temperature must be positive");

  Tensor<T> xn = normalize_rows(reps);
  Tensor<T> sim = scale(matmul_nt(xn, xn), T(1) / tau);

  // weights on positive-pair entries: 1 / (2N * |P(n)|)
  std::vector<T> wpos(n2 * n2, T(0));
  for (std::size_t n = 0; n < n2; ++n) {
    std::size_t pos = 0;
    for (std::size_t k = 0; k < n2; ++k)
      if (k != n && labels[k] == labels[n]) ++pos;
    check(pos > 0, "gke_loss: sample " + std::to_string(n) + " has no positive counterpart");
    for (std::size_t k = 0; k < n2; ++k)
      if (k != n && labels[k] == labels[n])
        wpos[n * n2 + k] = T(1) / (static_cast<T>(n2) * static_cast<T>(pos));
  }

  Tensor<T> lse = logsumexp_rows_offdiag(sim);
  Tensor<T> pos_term = sum(mul(sim, Tensor<T>::from({n2, n2}, std::move(wpos))));
  return sub(scale(sum(lse), T(1) / static_cast<T>(n2)), pos_term);
}

/// Logging record for one step: which objectives were active and their sum.
struct LossReport {
  std::optional<double> bda;  // l_cls + l_dis + l_dec
  std::optional<double> cke;
  std::optional<double> gke;

  double total() const { return bda.value_or(0.0) + cke.value_or(0.0) + gke.value_or(0.0); }
};

inline LossReport total_loss_report(std::optional<double> bda, std::optional<double> cke,
                                    std::optional<double> gke) {
  return LossReport{bda, cke, gke};
}

}  // namespace hprompt
