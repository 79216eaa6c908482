// SPDX-License-Identifier: Apache-2.0
//
// Route predictor and the Gumbel sampler that turns its distribution into
// one hard route per sequence while keeping a relaxed gradient path.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "canet/backbone.hpp"
#include "canet/dynlayers.hpp"
#include "canet/numerics.hpp"
#include "canet/rng.hpp"

namespace canet {

inline constexpr std::size_t kRouterWidth = 32;
inline constexpr double kGumbelClamp = 1e-10;
inline constexpr double kProbabilityFloor = 1e-12;

struct RouterConfig {
  std::size_t num_items = 0;
  std::size_t max_len = 0;
  std::size_t routes = 0;
  std::size_t width = kRouterWidth;
  std::size_t heads = 4;
};

/// Single-block self-attentive encoder with its own embeddings and a linear
/// head from the final position to one logit per route.
struct RouterParams {
  RouterConfig config;
  Tensor item_embedding;      // [num_items + 1, width]
  Tensor position_embedding;  // [max_len, width]
  LayerParams block;
  SliceableParam head;  // width -> routes, zero-initialized

  static RouterParams create(const RouterConfig& config, Rng& rng);
  NamedTensors named_parameters() const;
};

/// Route logits [n] for one (left-padded) sequence.
Tensor route_logits(std::span<const std::size_t> seq, const RouterParams& router);
/// softmax(route_logits) - p(r|u).
Tensor route_probabilities(std::span<const std::size_t> seq, const RouterParams& router);

/// -log(-log(a)) with a clamped to [1e-10, 1 - 1e-10].
double gumbel_from_uniform(double a) noexcept;
double gumbel_noise(Rng& rng) noexcept;
std::vector<double> gumbel_noise(std::size_t n, Rng& rng);

struct RouteSample {
  std::size_t hard = 0;  // argmax_i(log p_i + g_i), lowest index on ties
  Tensor soft_weights;   // softmax((log p + g) / temperature)
};

RouteSample sample_route(const Tensor& probs, double temperature, std::span<const double> noise);
RouteSample sample_route(const Tensor& probs, double temperature, Rng& rng);

/// Deterministic inference routing: argmax of p(r|u), lowest index on ties.
std::size_t argmax_route(std::span<const double> probs);

/// Value-preserving gate: forward equals `backbone_output`, backward routes
/// d(loss)/d(output) * output / alpha_R into the relaxed weight of the
/// sampled route.
Tensor straight_through_gate(const Tensor& backbone_output, const Tensor& soft_weights,
                             std::size_t hard);
/// Same gate with the stop-gradient copy of alpha_R pinned to `reference`.
Tensor straight_through_gate(const Tensor& backbone_output, const Tensor& soft_weights,
                             std::size_t hard, double reference);

struct RouterOutput {
  Tensor logits;
  Tensor probs;
  Route hard_route;
  Tensor soft_weights;
  double temperature = 1.0;
};

RouterOutput run_router(std::span<const std::size_t> seq, const RouterParams& router,
                        const RoutingSpace& space, double temperature, std::span<const double> noise);

}  // namespace canet
