// SPDX-License-Identifier: Apache-2.0
#include "canet/router.hpp"

#include <algorithm>
#include <cmath>

#include "canet/errors.hpp"

namespace canet {

RouterParams RouterParams::create(const RouterConfig& config, Rng& rng) {
  if (config.num_items == 0 || config.max_len == 0 || config.routes == 0) {
    throw ConfigError("router needs a non-empty catalogue, sequence length and routing space");
  }
  if (config.heads == 0 || config.width % config.heads != 0) {
    throw ConfigError("router width " + std::to_string(config.width) + " not divisible by " +
                      std::to_string(config.heads) + " heads");
  }
  RouterParams r;
  r.config = config;
  std::vector<double> items((config.num_items + 1) * config.width, 0.0);
  for (std::size_t i = config.width; i < items.size(); ++i) items[i] = rng.truncated_normal(kInitStddev);
  r.item_embedding = Tensor::from_values({config.num_items + 1, config.width}, std::move(items), true);
  std::vector<double> pos(config.max_len * config.width);
  for (double& v : pos) v = rng.truncated_normal(kInitStddev);
  r.position_embedding = Tensor::from_values({config.max_len, config.width}, std::move(pos), true);
  r.block = make_layer_params("router.block0", config.width, rng);
  r.head = make_zero_linear_param("router.head", config.width, config.routes);
  return r;
}

NamedTensors RouterParams::named_parameters() const {
  NamedTensors out;
  out.emplace_back("router.item_embedding", item_embedding);
  out.emplace_back("router.position_embedding", position_embedding);
  append_parameters(block, out);
  append_parameters(head, out);
  return out;
}

Tensor route_logits(std::span<const std::size_t> seq, const RouterParams& router) {
  const RouterConfig& cfg = router.config;
  if (seq.empty() || std::all_of(seq.begin(), seq.end(), [](std::size_t id) { return id == 0; })) {
    throw DataError("router input has no items");
  }
  if (seq.size() > cfg.max_len) {
    throw DataError("router input of length " + std::to_string(seq.size()) + " exceeds max_len " +
                    std::to_string(cfg.max_len));
  }
  std::vector<std::size_t> positions(seq.size());
  std::vector<std::uint8_t> valid(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) {
    positions[t] = t;
    valid[t] = seq[t] != 0;
  }
  Tensor x = add(embedding_slice(router.item_embedding, seq, cfg.width),
                 embedding_slice(router.position_embedding, positions, cfg.width));
  x = mask_rows(x, valid);
  const Tensor h = transformer_block(x, router.block, cfg.heads, cfg.width, valid);
  const Tensor last = slice_rows(h, seq.size() - 1, seq.size());
  return reshape(dynamic_linear(last, router.head, cfg.width, cfg.routes), {cfg.routes});
}

Tensor route_probabilities(std::span<const std::size_t> seq, const RouterParams& router) {
  return softmax(route_logits(seq, router));
}

double gumbel_from_uniform(double a) noexcept {
  a = std::clamp(a, kGumbelClamp, 1.0 - kGumbelClamp);
  return -std::log(-std::log(a));
}

double gumbel_noise(Rng& rng) noexcept { return gumbel_from_uniform(rng.uniform()); }

std::vector<double> gumbel_noise(std::size_t n, Rng& rng) {
  std::vector<double> g(n);
  for (double& v : g) v = gumbel_noise(rng);
  return g;
}

RouteSample sample_route(const Tensor& probs, double temperature, std::span<const double> noise) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  const std::size_t n = probs.numel();
  if (noise.size() != n) {
    throw DimensionError("sample_route: " + std::to_string(noise.size()) + " noises for " +
                         std::to_string(n) + " routes");
  }
  const Tensor noise_t = Tensor::from_values({n}, std::vector<double>(noise.begin(), noise.end()));
  const Tensor perturbed = add(log_clamped(reshape(probs, {n}), kProbabilityFloor), noise_t);
  RouteSample s;
  const auto pv = perturbed.values();
  s.hard = static_cast<std::size_t>(std::max_element(pv.begin(), pv.end()) - pv.begin());
  s.soft_weights = softmax(scale(perturbed, 1.0 / temperature));
  return s;
}

RouteSample sample_route(const Tensor& probs, double temperature, Rng& rng) {
  const std::vector<double> noise = gumbel_noise(probs.numel(), rng);
  return sample_route(probs, temperature, noise);
}

std::size_t argmax_route(std::span<const double> probs) {
  if (probs.empty()) throw DimensionError("argmax_route: empty distribution");
  return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

Tensor straight_through_gate(const Tensor& backbone_output, const Tensor& soft_weights,
                             std::size_t hard) {
  return ratio_gate(backbone_output, select(soft_weights, hard), kProbabilityFloor);
}

Tensor straight_through_gate(const Tensor& backbone_output, const Tensor& soft_weights,
                             std::size_t hard, double reference) {
  return ratio_gate(backbone_output, select(soft_weights, hard), reference, kProbabilityFloor);
}

RouterOutput run_router(std::span<const std::size_t> seq, const RouterParams& router,
                        const RoutingSpace& space, double temperature, std::span<const double> noise) {
  if (router.config.routes != space.size()) {
    throw ConfigError("router emits " + std::to_string(router.config.routes) +
                      " routes but the space has " + std::to_string(space.size()));
  }
  RouterOutput out;
  out.logits = route_logits(seq, router);
  out.probs = softmax(out.logits);
  RouteSample s = sample_route(out.probs, temperature, noise);
  out.hard_route = space.route(s.hard);
  out.soft_weights = std::move(s.soft_weights);
  out.temperature = temperature;
  return out;
}

}  // namespace canet
