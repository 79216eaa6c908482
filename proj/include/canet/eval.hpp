// SPDX-License-Identifier: Apache-2.0
//
// Full-catalogue ranking evaluation, analytic FLOPs and routing statistics.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "canet/data.hpp"
#include "canet/metrics.hpp"
#include "canet/model.hpp"

namespace canet {

/// Forward FLOPs of one inference under `route` at sequence length T
/// (1 multiply-accumulate = 2 FLOPs, layer norm 5 per element):
///   input transform  2*T*e*h
///   per block        8*T*h^2 + 4*T^2*h + 10*T*h + 4*T*h^2
///   classifier       2*h*num_items at the final position
/// Embedding lookups, softmax and activations are free.
std::uint64_t flops_of_route(const Route& route, std::size_t seq_len, std::size_t num_items,
                             std::size_t heads);

/// Cost of one router pass under the same convention (one block at the
/// router width plus the route head at the final position).
std::uint64_t router_flops(const RouterConfig& config, std::size_t seq_len);

struct GroupMetrics {
  double ndcg10 = 0.0;
  double ndcg20 = 0.0;
  double recall10 = 0.0;
  double recall20 = 0.0;
  std::size_t users = 0;

  nlohmann::json to_json() const;
};

struct MetricsReport {
  GroupMetrics overall;
  std::optional<GroupMetrics> head;
  std::optional<GroupMetrics> tail;

  nlohmann::json to_json() const;
};

struct FlopsReport {
  std::vector<Route> routes;
  std::vector<std::uint64_t> route_flops;
  std::vector<std::size_t> usage;
  double average = 0.0;
  std::uint64_t static_flops = 0;  // maximal route
  double savings = 0.0;            // 1 - average / static_flops
  std::uint64_t router_flops = 0;  // per input, not part of `average`

  nlohmann::json to_json() const;
};

/// Builds the report from per-route usage counts.
FlopsReport make_flops_report(const RoutingSpace& space, std::span<const std::size_t> usage,
                              std::size_t seq_len, std::size_t num_items, std::size_t heads,
                              std::uint64_t router_cost);

struct EvalResult {
  MetricsReport metrics;
  FlopsReport flops;
  std::vector<std::size_t> route_of_example;  // route index used per example
  std::vector<std::size_t> rank_of_example;
};

/// Ranks every example's target over the whole catalogue using the model's
/// inference route. With a partition, metrics are also broken down by
/// head/tail user.
EvalResult evaluate(const CanetModel& model, std::span<const EvalExample> examples,
                    const HeadTailPartition* partition = nullptr);

/// Metrics only; cheaper variant used for validation during training.
double evaluate_ndcg10(const CanetModel& model, std::span<const EvalExample> examples);

/// Inference routes for a set of inputs.
std::vector<std::size_t> infer_routes(const CanetModel& model, std::span<const EvalExample> examples);

/// Shannon entropy (nats) of the empirical distribution of route indices.
double route_usage_entropy(std::span<const std::size_t> routes, std::size_t num_routes);

struct HistogramRow {
  std::string dimension;
  std::size_t candidate = 0;
  double fraction = 0.0;
  std::string group;
};

/// Per-dimension usage fractions of the given routes for all users and,
/// with a tail mask (indexed like `routes`), for the tail users alone.
std::vector<HistogramRow> routing_histogram(const RoutingSpace& space,
                                            std::span<const std::size_t> routes,
                                            std::span<const std::uint8_t> tail_mask = {});

/// Routes every example with the model and tabulates the result; tail
/// membership is looked up through `partition` when given.
std::vector<HistogramRow> routing_histogram(const CanetModel& model,
                                            std::span<const EvalExample> examples,
                                            const HeadTailPartition* partition = nullptr);

/// `dimension,candidate,fraction,group` with a header line.
std::string histogram_csv(std::span<const HistogramRow> rows);

}  // namespace canet
