// SPDX-License-Identifier: Apache-2.0
#include "canet/model.hpp"

#include <algorithm>
#include <map>

#include "canet/errors.hpp"

namespace canet {

nlohmann::json space_to_json(const RoutingSpace& space) {
  return {{"emb", space.emb_candidates()},
          {"hidden", space.hidden_candidates()},
          {"depth", space.depth_candidates()}};
}

RoutingSpace space_from_json(const nlohmann::json& j) {
  try {
    return RoutingSpace(j.at("emb").get<std::vector<std::size_t>>(),
                        j.at("hidden").get<std::vector<std::size_t>>(),
                        j.at("depth").get<std::vector<std::size_t>>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid routing space: ") + e.what());
  }
}

nlohmann::json route_to_json(const Route& route) {
  return {{"emb", route.emb}, {"hidden", route.hidden}, {"depth", route.depth}, {"index", route.index}};
}

nlohmann::json ModelConfig::to_json() const {
  return {{"num_items", num_items},
          {"max_len", max_len},
          {"heads", heads},
          {"router_width", router_width},
          {"space", space_to_json(space)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.num_items = j.at("num_items").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.heads = j.value("heads", c.heads);
    c.router_width = j.value("router_width", c.router_width);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  if (j.contains("space")) c.space = space_from_json(j.at("space"));
  return c;
}

CanetModel CanetModel::create(const ModelConfig& config, const std::optional<Route>& static_route,
                              Rng& rng) {
  config.space.validate_heads(config.heads);
  if (static_route) config.space.validate(*static_route);
  CanetModel m;
  m.config = config;
  m.backbone = SupernetParams::create({config.num_items, config.max_len, config.heads, config.space}, rng);
  m.router = RouterParams::create(
      {config.num_items, config.max_len, config.space.size(), config.router_width, config.heads}, rng);
  m.static_route = static_route;
  return m;
}

NamedTensors CanetModel::named_parameters() const {
  NamedTensors out = backbone.named_parameters();
  NamedTensors r = router.named_parameters();
  out.insert(out.end(), std::make_move_iterator(r.begin()), std::make_move_iterator(r.end()));
  return out;
}

Route CanetModel::infer_route(std::span<const std::size_t> seq) const {
  if (static_route) return *static_route;
  NoGradGuard no_grad;
  const Tensor probs = route_probabilities(seq, router);
  return config.space.route(argmax_route(probs.values()));
}

CanetModel CanetModel::clone() const {
  // Rebuild the structure with a throwaway generator, then overwrite values.
  Rng scratch(0);
  CanetModel copy = create(config, static_route, scratch);
  copy_parameter_values(named_parameters(), copy.named_parameters());
  return copy;
}

void copy_parameter_values(const NamedTensors& src, const NamedTensors& dst) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : src) by_name[name] = &t;
  if (by_name.size() != dst.size()) {
    throw FormatError("parameter sets differ: " + std::to_string(src.size()) + " vs " +
                      std::to_string(dst.size()) + " tensors");
  }
  for (const auto& [name, t] : dst) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("missing parameter " + name);
    if (it->second->shape() != t.shape()) {
      throw FormatError("parameter " + name + " has shape " + shape_string(it->second->shape()) +
                        ", expected " + shape_string(t.shape()));
    }
    Tensor target = t;
    const auto values = it->second->values();
    std::copy(values.begin(), values.end(), target.mutable_values().begin());
  }
}

}  // namespace canet
