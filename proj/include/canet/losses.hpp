// SPDX-License-Identifier: Apache-2.0
//
// Training objective: next-item cross entropy plus the two router
// regularizers (uniform route usage, and size guidance from the smallest
// submodel's recall).
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "canet/backbone.hpp"
#include "canet/numerics.hpp"

namespace canet {

struct LossConfig {
  double lambda_uniform = 0.01;
  double lambda_guide = 0.01;
  std::size_t recall_k = 5;
  double beta = 1.0;
  double eps_log = 1e-12;

  void validate() const;
};

/// Mean cross entropy over positions with a nonzero target; the softmax
/// runs over every catalogue item.
Tensor sr_loss(const Tensor& logits, std::span<const std::size_t> targets);

/// d/ds of sr_loss(s * logits) at s = 1, computed from values only. This is
/// the signal a ratio gate on the logits sends to the routing weight (times
/// the weight's reciprocal).
double sr_scale_sensitivity(const Tensor& logits, std::span<const std::size_t> targets);

/// Cross entropy of `probs` against the uniform distribution:
/// -(1/n) * sum_i log(max(p_i, eps)).
Tensor uniform_loss(const Tensor& probs, double eps_log = 1e-12);

/// Normalized exp(-beta * distance from the peak) over m ascending
/// candidates; the peak is the first candidate for easy users and the last
/// one for hard users.
std::vector<double> guide_targets(bool easy, std::size_t m, double beta);

struct GuideLabels {
  bool easy = false;
  std::vector<double> y_emb;
  std::vector<double> y_hidden;
  std::vector<double> y_depth;

  const std::vector<double>& target(Dimension dim) const;
};

GuideLabels make_guide_labels(bool easy, const RoutingSpace& space, double beta);

/// Sum over the three dimensions of CE(marginal of probs, target).
Tensor guide_loss(const Tensor& probs, const GuideLabels& labels, const RoutingSpace& space,
                  double eps_log = 1e-12);

/// Sum of target entropies; the lower bound of `guide_loss`.
double guide_entropy(const GuideLabels& labels);

/// Marks a sequence easy when the smallest route ranks its target within
/// the top `k`. Runs without recording gradients.
std::vector<bool> label_users(std::span<const std::vector<std::size_t>> inputs,
                              std::span<const std::size_t> targets, const Route& smallest_route,
                              const SupernetParams& params, std::size_t k);

/// sr + lambda_uniform * uniform + lambda_guide * guide. Undefined component
/// tensors count as absent. Non-finite components raise NumericError naming
/// the component.
Tensor total_loss(const Tensor& sr, const Tensor& uniform, const Tensor& guide,
                  const LossConfig& cfg);

}  // namespace canet
