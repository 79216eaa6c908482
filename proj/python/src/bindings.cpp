// SPDX-License-Identifier: Apache-2.0
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "canet/data.hpp"
#include "canet/errors.hpp"
#include "canet/eval.hpp"
#include "canet/losses.hpp"
#include "canet/metrics.hpp"
#include "canet/router.hpp"
#include "canet/trainer.hpp"

namespace py = pybind11;

namespace {

canet::Tensor vector_tensor(const std::vector<double>& v) {
  return canet::Tensor::from_values({v.size()}, v);
}

py::dict dataset_dict(const canet::Dataset& ds) {
  py::list seqs;
  for (const auto& s : ds.sequences) seqs.append(s.active_items());
  py::list classes;
  for (auto c : ds.user_class) classes.append(c == canet::UserClass::kEasy ? "easy" : "hard");
  py::dict d;
  d["sequences"] = seqs;
  d["user_class"] = classes;
  d["num_items"] = ds.num_items;
  d["max_len"] = ds.max_len;
  d["stats"] = py::dict(py::arg("actions") = ds.stats().actions, py::arg("sequences") = ds.stats().sequences,
                        py::arg("items") = ds.stats().items, py::arg("length") = ds.stats().length);
  return d;
}

canet::Dataset dataset_from_lists(const std::vector<std::vector<std::size_t>>& seqs) {
  std::string text;
  for (std::size_t u = 0; u < seqs.size(); ++u) {
    text += std::to_string(u + 1) + "\t";
    for (std::size_t i = 0; i < seqs[u].size(); ++i) {
      if (i) text += ",";
      text += std::to_string(seqs[u][i]);
    }
    text += "\n";
  }
  canet::LoadOptions opts;
  opts.min_item_users = 1;
  return canet::parse_sequences(text, opts);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Adaptive supernet sequential recommender (C++ core)";

  static py::exception<canet::Error> error(m, "CanetError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const canet::Error& e) {
      error((std::string(e.code()) + ": " + e.what()).c_str());
    }
  });

  m.def(
      "generate_synthetic",
      [](std::size_t users, std::size_t items, std::size_t length, std::uint64_t seed, double zipf,
         double easy_fraction) {
        canet::SyntheticConfig cfg;
        cfg.users = users;
        cfg.items = items;
        cfg.length = length;
        cfg.seed = seed;
        cfg.zipf_exponent = zipf;
        cfg.easy_fraction = easy_fraction;
        return dataset_dict(canet::generate_synthetic(cfg));
      },
      py::arg("users") = 1000, py::arg("items") = 1000, py::arg("length") = 20, py::arg("seed") = 0,
      py::arg("zipf") = 1.1, py::arg("easy_fraction") = 0.5);

  m.def(
      "desk_routes",
      []() {
        const canet::RoutingSpace space = canet::RoutingSpace::desk();
        py::list out;
        for (std::size_t i = 0; i < space.size(); ++i) {
          const canet::Route r = space.route(i);
          out.append(py::make_tuple(r.emb, r.hidden, r.depth));
        }
        return out;
      },
      "(emb, hidden, depth) of every route of the desk-scale space, in index order");

  m.def(
      "flops_of_route",
      [](std::size_t emb, std::size_t hidden, std::size_t depth, std::size_t seq_len, std::size_t num_items,
         std::size_t heads) {
        return canet::flops_of_route({emb, hidden, depth, 0}, seq_len, num_items, heads);
      },
      py::arg("emb"), py::arg("hidden"), py::arg("depth"), py::arg("seq_len"), py::arg("num_items"),
      py::arg("heads") = 4);

  m.def(
      "rank_target",
      [](const std::vector<double>& logits, std::size_t target) { return canet::rank_target(logits, target); },
      py::arg("logits"), py::arg("target"));
  m.def(
      "ndcg_at_n", [](std::optional<std::size_t> rank, std::size_t n) { return canet::ndcg_at_n(rank, n); },
      py::arg("rank"), py::arg("n"));
  m.def(
      "recall_at_n",
      [](std::optional<std::size_t> rank, std::size_t n) { return canet::recall_at_n(rank, n); },
      py::arg("rank"), py::arg("n"));

  m.def(
      "sample_routes",
      [](const std::vector<double>& probs, std::size_t samples, std::uint64_t seed, double temperature) {
        canet::NoGradGuard no_grad;
        canet::Rng rng(seed);
        const canet::Tensor p = vector_tensor(probs);
        std::vector<std::size_t> out;
        out.reserve(samples);
        for (std::size_t i = 0; i < samples; ++i) out.push_back(canet::sample_route(p, temperature, rng).hard);
        return out;
      },
      py::arg("probs"), py::arg("samples"), py::arg("seed") = 0, py::arg("temperature") = 1.0);

  m.def(
      "uniform_loss", [](const std::vector<double>& probs) { return canet::uniform_loss(vector_tensor(probs)).item(); },
      py::arg("probs"));
  m.def("guide_targets", &canet::guide_targets, py::arg("easy"), py::arg("m"), py::arg("beta") = 1.0);

  m.def(
      "train_and_evaluate",
      [](const std::vector<std::vector<std::size_t>>& sequences, const std::string& config_json) {
        const canet::Dataset ds = dataset_from_lists(sequences);
        const canet::Split split = canet::leave_one_out_split(ds);
        const canet::TrainConfig cfg =
            canet::TrainConfig::from_json(nlohmann::json::parse(config_json.empty() ? "{}" : config_json));
        canet::FitResult result;
        {
          py::gil_scoped_release release;
          result = canet::fit(split, cfg);
        }
        const canet::EvalResult ev = canet::evaluate(result.best, split.test);
        py::dict out;
        out["history"] = py::module_::import("json").attr("loads")(canet::history_to_json(result.history).dump());
        out["metrics"] = py::module_::import("json").attr("loads")(ev.metrics.to_json().dump());
        out["flops"] = py::module_::import("json").attr("loads")(ev.flops.to_json().dump());
        return out;
      },
      py::arg("sequences"), py::arg("config_json") = "{}",
      "Train on raw item-id sequences (leave-one-out split) and evaluate on the test targets.");
}
