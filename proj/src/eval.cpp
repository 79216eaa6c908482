// SPDX-License-Identifier: Apache-2.0
#include "canet/eval.hpp"

#include <cmath>
#include <cstdio>

#include "canet/errors.hpp"

namespace canet {

namespace {

std::uint64_t block_flops(std::uint64_t t, std::uint64_t h) {
  return 8 * t * h * h + 4 * t * t * h + 10 * t * h + 4 * t * h * h;
}

struct Accumulator {
  double ndcg10 = 0.0, ndcg20 = 0.0, recall10 = 0.0, recall20 = 0.0;
  std::size_t users = 0;

  void add(std::size_t rank) {
    ndcg10 += ndcg_at_n(rank, 10);
    ndcg20 += ndcg_at_n(rank, 20);
    recall10 += recall_at_n(rank, 10);
    recall20 += recall_at_n(rank, 20);
    ++users;
  }

  GroupMetrics finish() const {
    GroupMetrics g;
    g.users = users;
    if (users == 0) return g;
    const auto n = static_cast<double>(users);
    g.ndcg10 = ndcg10 / n;
    g.ndcg20 = ndcg20 / n;
    g.recall10 = recall10 / n;
    g.recall20 = recall20 / n;
    return g;
  }
};

std::string format_fraction(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::uint64_t flops_of_route(const Route& route, std::size_t seq_len, std::size_t num_items,
                             std::size_t heads) {
  if (heads == 0 || route.hidden % heads != 0) {
    throw ConfigError("hidden size " + std::to_string(route.hidden) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::uint64_t t = seq_len;
  const std::uint64_t e = route.emb;
  const std::uint64_t h = route.hidden;
  return 2 * t * e * h + route.depth * block_flops(t, h) + 2 * h * num_items;
}

std::uint64_t router_flops(const RouterConfig& config, std::size_t seq_len) {
  return block_flops(seq_len, config.width) + 2 * config.width * config.routes;
}

nlohmann::json GroupMetrics::to_json() const {
  return {{"ndcg@10", ndcg10}, {"ndcg@20", ndcg20}, {"recall@10", recall10},
          {"recall@20", recall20}, {"users", users}};
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j = {{"overall", overall.to_json()}};
  if (head) j["head_users"] = head->to_json();
  if (tail) j["tail_users"] = tail->to_json();
  return j;
}

nlohmann::json FlopsReport::to_json() const {
  nlohmann::json per_route = nlohmann::json::array();
  for (std::size_t i = 0; i < routes.size(); ++i) {
    per_route.push_back({{"route", route_to_json(routes[i])},
                         {"flops", route_flops[i]},
                         {"usage", usage[i]}});
  }
  return {{"routes", per_route},
          {"average_flops", average},
          {"static_flops", static_flops},
          {"savings", savings},
          {"router_flops", router_flops}};
}

FlopsReport make_flops_report(const RoutingSpace& space, std::span<const std::size_t> usage,
                              std::size_t seq_len, std::size_t num_items, std::size_t heads,
                              std::uint64_t router_cost) {
  if (usage.size() != space.size()) {
    throw DimensionError("usage has " + std::to_string(usage.size()) + " entries for " +
                         std::to_string(space.size()) + " routes");
  }
  FlopsReport r;
  r.usage.assign(usage.begin(), usage.end());
  double weighted = 0.0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < space.size(); ++i) {
    r.routes.push_back(space.route(i));
    r.route_flops.push_back(flops_of_route(r.routes.back(), seq_len, num_items, heads));
    weighted += static_cast<double>(usage[i]) * static_cast<double>(r.route_flops.back());
    total += usage[i];
  }
  r.static_flops = flops_of_route(space.largest(), seq_len, num_items, heads);
  r.average = total ? weighted / static_cast<double>(total) : 0.0;
  r.savings = 1.0 - r.average / static_cast<double>(r.static_flops);
  r.router_flops = router_cost;
  return r;
}

std::vector<std::size_t> infer_routes(const CanetModel& model, std::span<const EvalExample> examples) {
  std::vector<std::size_t> routes;
  routes.reserve(examples.size());
  for (const auto& ex : examples) routes.push_back(model.infer_route(ex.input).index);
  return routes;
}

EvalResult evaluate(const CanetModel& model, std::span<const EvalExample> examples,
                    const HeadTailPartition* partition) {
  NoGradGuard no_grad;
  const ModelConfig& cfg = model.config;
  EvalResult result;
  Accumulator all, head, tail;
  std::vector<std::size_t> usage(cfg.space.size(), 0);
  for (const auto& ex : examples) {
    const Route route = model.infer_route(ex.input);
    const Tensor logits = supernet_final_logits(ex.input, route, model.backbone);
    const std::size_t rank = rank_target(logits.values(), ex.target);
    all.add(rank);
    if (partition) (partition->tail_user(ex.user) ? tail : head).add(rank);
    ++usage[route.index];
    result.route_of_example.push_back(route.index);
    result.rank_of_example.push_back(rank);
  }
  result.metrics.overall = all.finish();
  if (partition) {
    result.metrics.head = head.finish();
    result.metrics.tail = tail.finish();
  }
  const std::uint64_t router_cost =
      model.static_route ? 0 : router_flops(model.router.config, cfg.max_len);
  result.flops = make_flops_report(cfg.space, usage, cfg.max_len, cfg.num_items, cfg.heads, router_cost);
  return result;
}

double evaluate_ndcg10(const CanetModel& model, std::span<const EvalExample> examples) {
  NoGradGuard no_grad;
  if (examples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : examples) {
    const Tensor logits = supernet_final_logits(ex.input, model.infer_route(ex.input), model.backbone);
    total += ndcg_at_n(rank_target(logits.values(), ex.target), 10);
  }
  return total / static_cast<double>(examples.size());
}

double route_usage_entropy(std::span<const std::size_t> routes, std::size_t num_routes) {
  if (routes.empty()) return 0.0;
  std::vector<std::size_t> counts(num_routes, 0);
  for (std::size_t r : routes) {
    if (r >= num_routes) throw IndexError("route index " + std::to_string(r) + " out of range");
    ++counts[r];
  }
  double h = 0.0;
  const auto n = static_cast<double>(routes.size());
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

std::vector<HistogramRow> routing_histogram(const RoutingSpace& space,
                                            std::span<const std::size_t> routes,
                                            std::span<const std::uint8_t> tail_mask) {
  if (!tail_mask.empty() && tail_mask.size() != routes.size()) {
    throw DimensionError("tail mask has " + std::to_string(tail_mask.size()) + " entries for " +
                         std::to_string(routes.size()) + " routes");
  }
  std::vector<HistogramRow> rows;
  auto tabulate = [&](const char* group, bool tail_only) {
    for (Dimension dim : kAllDimensions) {
      const auto& cands = space.candidates(dim);
      std::vector<std::size_t> counts(cands.size(), 0);
      std::size_t n = 0;
      for (std::size_t i = 0; i < routes.size(); ++i) {
        if (tail_only && !tail_mask[i]) continue;
        ++counts[space.candidate_index(space.route(routes[i]), dim)];
        ++n;
      }
      for (std::size_t c = 0; c < cands.size(); ++c) {
        const double fraction = n ? static_cast<double>(counts[c]) / static_cast<double>(n) : 0.0;
        rows.push_back({dimension_name(dim), cands[c], fraction, group});
      }
    }
  };
  tabulate("all", false);
  if (!tail_mask.empty()) tabulate("tail", true);
  return rows;
}

std::vector<HistogramRow> routing_histogram(const CanetModel& model,
                                            std::span<const EvalExample> examples,
                                            const HeadTailPartition* partition) {
  const std::vector<std::size_t> routes = infer_routes(model, examples);
  std::vector<std::uint8_t> mask;
  if (partition) {
    for (const auto& ex : examples) mask.push_back(partition->tail_user(ex.user) ? 1 : 0);
  }
  return routing_histogram(model.config.space, routes, mask);
}

std::string histogram_csv(std::span<const HistogramRow> rows) {
  std::string out = "dimension,candidate,fraction,group\n";
  for (const auto& r : rows) {
    out += r.dimension + "," + std::to_string(r.candidate) + "," + format_fraction(r.fraction) + "," +
           r.group + "\n";
  }
  return out;
}

}  // namespace canet
