// SPDX-License-Identifier: Apache-2.0
//
// Supernet plus router, with an optional fixed route that bypasses the
// router (static baselines).
#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include <nlohmann/json.hpp>

#include "canet/backbone.hpp"
#include "canet/router.hpp"

namespace canet {

struct ModelConfig {
  std::size_t num_items = 0;
  std::size_t max_len = 0;
  std::size_t heads = 4;
  std::size_t router_width = kRouterWidth;
  RoutingSpace space = RoutingSpace::desk();

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

nlohmann::json route_to_json(const Route& route);
RoutingSpace space_from_json(const nlohmann::json& j);
nlohmann::json space_to_json(const RoutingSpace& space);

struct CanetModel {
  ModelConfig config;
  SupernetParams backbone;
  RouterParams router;
  std::optional<Route> static_route;

  static CanetModel create(const ModelConfig& config, const std::optional<Route>& static_route,
                           Rng& rng);

  /// Backbone parameters followed by router parameters, in a fixed order.
  NamedTensors named_parameters() const;

  /// Inference routing: argmax of the router distribution, or the static route.
  Route infer_route(std::span<const std::size_t> seq) const;

  /// Deep copy; the copy shares no storage with this model.
  CanetModel clone() const;
};

/// Copies values from `src` into the equally named and shaped tensors of `dst`.
void copy_parameter_values(const NamedTensors& src, const NamedTensors& dst);

}  // namespace canet
