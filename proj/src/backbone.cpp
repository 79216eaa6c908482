// SPDX-License-Identifier: Apache-2.0
#include "canet/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "canet/errors.hpp"

namespace canet {

namespace {

void check_candidates(const std::vector<std::size_t>& values, const char* what) {
  if (values.empty()) throw ConfigError(std::string(what) + " candidates must not be empty");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == 0) throw ConfigError(std::string(what) + " candidates must be positive");
    if (i > 0 && values[i] <= values[i - 1]) {
      throw ConfigError(std::string(what) + " candidates must be strictly ascending");
    }
  }
}

std::size_t position_of(const std::vector<std::size_t>& values, std::size_t v, const char* what) {
  const auto it = std::find(values.begin(), values.end(), v);
  if (it == values.end()) {
    throw ConfigError(std::to_string(v) + " is not a " + what + " candidate");
  }
  return static_cast<std::size_t>(it - values.begin());
}

std::vector<std::uint8_t> key_mask(std::span<const std::size_t> seq) {
  std::vector<std::uint8_t> mask(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) mask[t] = seq[t] != 0;
  return mask;
}

// Shared trunk: embeddings, input transformation and the first route.depth
// blocks. Returns hidden states [T, route.hidden].
Tensor supernet_trunk(std::span<const std::size_t> seq, const Route& route,
                      const SupernetParams& params) {
  const SupernetConfig& cfg = params.config;
  cfg.space.validate(route);
  if (seq.empty()) throw DataError("empty input sequence");
  if (seq.size() > cfg.max_len) {
    throw DataError("sequence of length " + std::to_string(seq.size()) + " exceeds max_len " +
                    std::to_string(cfg.max_len));
  }
  for (std::size_t id : seq) {
    if (id > cfg.num_items) {
      throw DataError("unknown item id " + std::to_string(id) + " (catalogue has " +
                      std::to_string(cfg.num_items) + " items)");
    }
  }
  std::vector<std::size_t> positions(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) positions[t] = t;
  const std::vector<std::uint8_t> valid = key_mask(seq);

  Tensor x = add(embedding_slice(params.item_embedding, seq, route.emb),
                 embedding_slice(params.position_embedding, positions, route.emb));
  x = mask_rows(x, valid);
  Tensor h = dynamic_linear(x, params.input_transform, route.emb, route.hidden);
  for (std::size_t l = 0; l < route.depth; ++l) {
    h = transformer_block(h, params.layers[l], cfg.heads, route.hidden, valid);
  }
  return h;
}

}  // namespace

const char* dimension_name(Dimension dim) {
  switch (dim) {
    case Dimension::kEmbedding:
      return "emb";
    case Dimension::kHidden:
      return "hidden";
    case Dimension::kDepth:
      return "depth";
  }
  return "?";
}

std::string to_string(const Route& route) {
  return "(" + std::to_string(route.emb) + "," + std::to_string(route.hidden) + "," +
         std::to_string(route.depth) + ")#" + std::to_string(route.index);
}

RoutingSpace::RoutingSpace(std::vector<std::size_t> emb, std::vector<std::size_t> hidden,
                           std::vector<std::size_t> depth)
    : emb_(std::move(emb)), hidden_(std::move(hidden)), depth_(std::move(depth)) {
  check_candidates(emb_, "embedding");
  check_candidates(hidden_, "hidden");
  check_candidates(depth_, "depth");
}

RoutingSpace RoutingSpace::standard() { return RoutingSpace({64, 96, 128}, {64, 96, 128}, {2, 4, 6, 8}); }

RoutingSpace RoutingSpace::desk() { return RoutingSpace({16, 24, 32}, {16, 24, 32}, {2, 4, 6, 8}); }

const std::vector<std::size_t>& RoutingSpace::candidates(Dimension dim) const {
  switch (dim) {
    case Dimension::kEmbedding:
      return emb_;
    case Dimension::kHidden:
      return hidden_;
    case Dimension::kDepth:
      return depth_;
  }
  throw UsageError("unknown dimension");
}

Route RoutingSpace::route(std::size_t index) const {
  const std::size_t n = size();
  if (index >= n) {
    throw IndexError("route index " + std::to_string(index) + " outside [0, " + std::to_string(n) + ")");
  }
  const std::size_t c = depth_.size();
  const std::size_t bc = hidden_.size() * c;
  return Route{emb_[index / bc], hidden_[(index % bc) / c], depth_[index % c], index};
}

std::size_t RoutingSpace::index_of(std::size_t emb, std::size_t hidden, std::size_t depth) const {
  const std::size_t e = position_of(emb_, emb, "embedding");
  const std::size_t h = position_of(hidden_, hidden, "hidden");
  const std::size_t d = position_of(depth_, depth, "depth");
  return e * hidden_.size() * depth_.size() + h * depth_.size() + d;
}

Route RoutingSpace::find(std::size_t emb, std::size_t hidden, std::size_t depth) const {
  return route(index_of(emb, hidden, depth));
}

std::size_t RoutingSpace::candidate_index(const Route& r, Dimension dim) const {
  switch (dim) {
    case Dimension::kEmbedding:
      return position_of(emb_, r.emb, "embedding");
    case Dimension::kHidden:
      return position_of(hidden_, r.hidden, "hidden");
    case Dimension::kDepth:
      return position_of(depth_, r.depth, "depth");
  }
  throw UsageError("unknown dimension");
}

void RoutingSpace::validate(const Route& r) const {
  if (index_of(r.emb, r.hidden, r.depth) != r.index) {
    throw ConfigError("route " + to_string(r) + " does not match its index in the routing space");
  }
}

void RoutingSpace::validate_heads(std::size_t heads) const {
  if (heads == 0) throw ConfigError("head count must be positive");
  for (std::size_t h : hidden_) {
    if (h % heads != 0) {
      throw ConfigError("hidden candidate " + std::to_string(h) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
  }
}

Route route_from_index(const RoutingSpace& space, std::size_t index) { return space.route(index); }

std::size_t route_to_index(const RoutingSpace& space, const Route& route) {
  return space.index_of(route.emb, route.hidden, route.depth);
}

SupernetParams SupernetParams::create(const SupernetConfig& config, Rng& rng) {
  if (config.num_items == 0) throw ConfigError("item catalogue must not be empty");
  if (config.max_len == 0) throw ConfigError("max_len must be positive");
  if (config.space.size() == 0) throw ConfigError("routing space is empty");
  config.space.validate_heads(config.heads);

  const std::size_t e = config.space.max_emb();
  const std::size_t h = config.space.max_hidden();
  SupernetParams p;
  p.config = config;

  std::vector<double> items((config.num_items + 1) * e);
  for (std::size_t i = e; i < items.size(); ++i) items[i] = rng.truncated_normal(kInitStddev);
  p.item_embedding = Tensor::from_values({config.num_items + 1, e}, std::move(items), true);

  std::vector<double> pos(config.max_len * e);
  for (double& v : pos) v = rng.truncated_normal(kInitStddev);
  p.position_embedding = Tensor::from_values({config.max_len, e}, std::move(pos), true);

  p.input_transform = make_linear_param("backbone.input_transform", e, h, rng);
  for (std::size_t l = 0; l < config.space.max_depth(); ++l) {
    p.layers.push_back(make_layer_params("backbone.block" + std::to_string(l), h, rng));
  }
  p.classifier = make_linear_param("backbone.classifier", h, config.num_items + 1, rng);
  return p;
}

NamedTensors SupernetParams::named_parameters() const {
  NamedTensors out;
  out.emplace_back("backbone.item_embedding", item_embedding);
  out.emplace_back("backbone.position_embedding", position_embedding);
  append_parameters(input_transform, out);
  for (const LayerParams& layer : layers) append_parameters(layer, out);
  append_parameters(classifier, out);
  return out;
}

std::size_t SupernetParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

Tensor supernet_forward(std::span<const std::size_t> seq, const Route& route,
                        const SupernetParams& params) {
  const Tensor h = supernet_trunk(seq, route, params);
  return shared_classifier(h, params.classifier, route.hidden);
}

Tensor supernet_final_logits(std::span<const std::size_t> seq, const Route& route,
                             const SupernetParams& params) {
  const Tensor h = supernet_trunk(seq, route, params);
  return item_scores(slice_rows(h, seq.size() - 1, seq.size()), params.classifier, route.hidden);
}

Tensor marginalize(const Tensor& route_probs, Dimension dim, const RoutingSpace& space) {
  if (route_probs.numel() != space.size()) {
    throw DimensionError("marginalize: " + std::to_string(route_probs.numel()) +
                         " probabilities for a space of " + std::to_string(space.size()) + " routes");
  }
  double total = 0.0;
  for (double p : route_probs.values()) total += p;
  if (std::abs(total - 1.0) > 1e-9) {
    throw NumericError("marginalize: route probabilities sum to " + std::to_string(total));
  }
  std::vector<std::size_t> group(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) group[i] = space.candidate_index(space.route(i), dim);
  return group_sum(route_probs, group, space.candidates(dim).size());
}

}  // namespace canet
