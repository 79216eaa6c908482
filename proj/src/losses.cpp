// SPDX-License-Identifier: Apache-2.0
#include "canet/losses.hpp"

#include <algorithm>
#include <cmath>

#include "canet/errors.hpp"
#include "canet/metrics.hpp"

namespace canet {

void LossConfig::validate() const {
  if (lambda_uniform < 0.0 || lambda_guide < 0.0) throw ConfigError("loss weights must be >= 0");
  if (recall_k < 1) throw ConfigError("recall_k must be >= 1");
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  if (!(eps_log > 0.0)) throw ConfigError("eps_log must be > 0");
}

Tensor sr_loss(const Tensor& logits, std::span<const std::size_t> targets) {
  return cross_entropy(logits, targets);
}

double sr_scale_sensitivity(const Tensor& logits, std::span<const std::size_t> targets) {
  if (logits.shape().size() != 2 || logits.dim(0) != targets.size() || logits.dim(1) < 2) {
    throw DimensionError("sr_scale_sensitivity: logits " + shape_string(logits.shape()) + " for " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t cols = logits.dim(1);
  const auto lv = logits.values();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == 0) continue;
    if (targets[r] >= cols) throw DataError("sr_scale_sensitivity: target out of range");
    const double* row = lv.data() + r * cols;
    const double mx = *std::max_element(row + 1, row + cols);
    double z = 0.0, ez = 0.0;
    for (std::size_t c = 1; c < cols; ++c) {
      const double e = std::exp(row[c] - mx);
      z += e;
      ez += e * row[c];
    }
    total += ez / z - row[targets[r]];
    ++count;
  }
  if (count == 0) throw DataError("sr_scale_sensitivity: every position is padding");
  return total / static_cast<double>(count);
}

Tensor uniform_loss(const Tensor& probs, double eps_log) {
  return scale(mean(log_clamped(probs, eps_log)), -1.0);
}

std::vector<double> guide_targets(bool easy, std::size_t m, double beta) {
  if (m == 0) throw ConfigError("guide_targets: no candidates");
  if (!(beta > 0.0)) throw ConfigError("guide_targets: beta must be > 0");
  std::vector<double> y(m);
  double z = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double distance = easy ? static_cast<double>(i) : static_cast<double>(m - 1 - i);
    y[i] = std::exp(-beta * distance);
    z += y[i];
  }
  for (double& v : y) v /= z;
  return y;
}

const std::vector<double>& GuideLabels::target(Dimension dim) const {
  switch (dim) {
    case Dimension::kEmbedding:
      return y_emb;
    case Dimension::kHidden:
      return y_hidden;
    case Dimension::kDepth:
      return y_depth;
  }
  throw UsageError("unknown dimension");
}

GuideLabels make_guide_labels(bool easy, const RoutingSpace& space, double beta) {
  GuideLabels labels;
  labels.easy = easy;
  labels.y_emb = guide_targets(easy, space.emb_candidates().size(), beta);
  labels.y_hidden = guide_targets(easy, space.hidden_candidates().size(), beta);
  labels.y_depth = guide_targets(easy, space.depth_candidates().size(), beta);
  return labels;
}

Tensor guide_loss(const Tensor& probs, const GuideLabels& labels, const RoutingSpace& space,
                  double eps_log) {
  Tensor total;
  for (Dimension dim : kAllDimensions) {
    const std::vector<double>& y = labels.target(dim);
    const Tensor marginal = marginalize(probs, dim, space);
    if (y.size() != marginal.numel()) {
      throw DimensionError(std::string("guide target for ") + dimension_name(dim) + " has " +
                           std::to_string(y.size()) + " entries");
    }
    const Tensor target = Tensor::from_values({y.size()}, y);
    const Tensor ce = scale(sum(mul(log_clamped(marginal, eps_log), target)), -1.0);
    total = total.defined() ? add(total, ce) : ce;
  }
  return total;
}

double guide_entropy(const GuideLabels& labels) {
  double h = 0.0;
  for (Dimension dim : kAllDimensions) {
    for (double y : labels.target(dim)) {
      if (y > 0.0) h -= y * std::log(y);
    }
  }
  return h;
}

std::vector<bool> label_users(std::span<const std::vector<std::size_t>> inputs,
                              std::span<const std::size_t> targets, const Route& smallest_route,
                              const SupernetParams& params, std::size_t k) {
  if (inputs.size() != targets.size()) {
    throw DimensionError("label_users: " + std::to_string(inputs.size()) + " inputs for " +
                         std::to_string(targets.size()) + " targets");
  }
  NoGradGuard no_grad;
  std::vector<bool> easy(inputs.size());
  for (std::size_t u = 0; u < inputs.size(); ++u) {
    const Tensor logits = supernet_final_logits(inputs[u], smallest_route, params);
    easy[u] = rank_target(logits.values(), targets[u]) <= k;
  }
  return easy;
}

Tensor total_loss(const Tensor& sr, const Tensor& uniform, const Tensor& guide,
                  const LossConfig& cfg) {
  if (!sr.defined()) throw UsageError("total_loss: missing next-item loss");
  auto check = [](const Tensor& t, const char* name) {
    if (t.defined() && !std::isfinite(t.item())) {
      throw NumericError(std::string("non-finite ") + name + " loss: " + std::to_string(t.item()));
    }
  };
  check(sr, "sr");
  check(uniform, "uniform");
  check(guide, "guide");
  Tensor total = sr;
  if (uniform.defined() && cfg.lambda_uniform != 0.0) {
    total = add(total, scale(uniform, cfg.lambda_uniform));
  }
  if (guide.defined() && cfg.lambda_guide != 0.0) {
    total = add(total, scale(guide, cfg.lambda_guide));
  }
  return total;
}

}  // namespace canet
