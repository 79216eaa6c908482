// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "canet/errors.hpp"
#include "canet/eval.hpp"
#include "canet/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/reference_model.hpp"

using namespace canet;

namespace {

Split toy_split(std::uint64_t seed, std::size_t users = 60) {
  SyntheticConfig cfg;
  cfg.users = users;
  cfg.items = 30;
  cfg.length = 8;
  cfg.seed = seed;
  return leave_one_out_split(generate_synthetic(cfg));
}

TrainConfig toy_config(std::uint64_t seed = 3) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = seed;
  return cfg;
}

std::vector<const TrainExample*> first_batch(const Split& split, std::size_t n) {
  std::vector<const TrainExample*> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(&split.train[i]);
  return out;
}

bool same_values(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a[i].second.values();
    const auto y = b[i].second.values();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config validation and JSON round trip") {
  TrainConfig cfg = toy_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = toy_config();
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = toy_config(17);
  cfg.lr = 3e-4;
  cfg.center_gate = false;
  cfg.disable_guide = true;
  cfg.static_route = cfg.space.route(13);
  const TrainConfig back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  REQUIRE(back.static_route);
  CHECK(*back.static_route == cfg.space.route(13));
  CHECK_FALSE(back.center_gate);
  CHECK(back.effective_loss().lambda_guide == 0.0);

  const TrainConfig partial = TrainConfig::from_json({{"epochs", 7}}, cfg);
  CHECK(partial.epochs == 7);
  CHECK(partial.lr == 3e-4);
  CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", "many"}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json::array()), ConfigError);
}

TEST_CASE("ablation switches zero the matching loss weights") {
  TrainConfig cfg = toy_config();
  cfg.disable_uniform = true;
  CHECK(cfg.effective_loss().lambda_uniform == 0.0);
  CHECK(cfg.effective_loss().lambda_guide == cfg.loss.lambda_guide);
}

TEST_CASE("a static route never touches the router") {
  const Split split = toy_split(1);
  TrainConfig cfg = toy_config();
  cfg.static_route = cfg.space.largest();
  Rng rng(2);
  CanetModel model = CanetModel::create(model_config_for(split, cfg), cfg.static_route, rng);
  const auto batch = first_batch(split, 8);
  Rng draw_rng(4);
  const auto draws = draw_batch(model, batch, cfg, draw_rng);
  BatchStats stats;
  backward(batch_loss(model, batch, draws, cfg, &stats));
  for (const auto& [name, t] : model.router.named_parameters()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) CHECK(g == 0.0);
  }
  for (std::size_t r : stats.routes) CHECK(r == 35);
  CHECK(stats.uniform == 0.0);
  CHECK(stats.guide == 0.0);
}

TEST_CASE("batch loss input checks") {
  const Split split = toy_split(1);
  const TrainConfig cfg = toy_config();
  Rng rng(2);
  const CanetModel model = CanetModel::create(model_config_for(split, cfg), std::nullopt, rng);
  const auto batch = first_batch(split, 4);
  std::vector<SequenceDraw> draws(3);
  CHECK_THROWS_AS(batch_loss(model, batch, draws, cfg), DimensionError);
  Rng draw_rng(3);
  const auto ok = draw_batch(model, batch, cfg, draw_rng);
  GateFreeze freeze;
  freeze.alpha = {0.5};
  CHECK_THROWS_AS(batch_loss(model, batch, ok, cfg, nullptr, &freeze), DimensionError);
  CHECK_THROWS_AS(batch_loss(model, {}, {}, cfg), UsageError);
}

TEST_CASE("the centered gate term leaves the loss value unchanged") {
  const Split split = toy_split(5);
  TrainConfig centered = toy_config();
  TrainConfig raw = centered;
  raw.center_gate = false;
  Rng rng(6);
  CanetModel model = CanetModel::create(model_config_for(split, centered), std::nullopt, rng);
  canet::testing::perturb_parameters(model.router.named_parameters(), 7, 0.3);
  const auto batch = first_batch(split, 12);
  Rng draw_rng(8);
  const auto draws = draw_batch(model, batch, centered, draw_rng);
  BatchStats s1, s2;
  const double a = batch_loss(model, batch, draws, centered, &s1).item();
  const double b = batch_loss(model, batch, draws, raw, &s2).item();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
  CHECK(s1.routes == s2.routes);
  CHECK(s1.gate.baseline != 0.0);
  CHECK(s2.gate.baseline == 0.0);
}

TEST_CASE("batch loss gradient matches finite differences with the gate frozen") {
  const Split split = toy_split(9);
  TrainConfig cfg = toy_config();
  Rng rng(10);
  CanetModel model = CanetModel::create(model_config_for(split, cfg), std::nullopt, rng);
  canet::testing::perturb_parameters(model.named_parameters(), 11, 0.3);
  const auto batch = first_batch(split, 6);
  Rng draw_rng(12);
  const auto draws = draw_batch(model, batch, cfg, draw_rng);
  BatchStats stats;
  (void)batch_loss(model, batch, draws, cfg, &stats);
  const GateFreeze freeze = stats.gate;
  std::vector<Tensor> leaves = {model.router.head.weight, model.router.head.bias, model.router.block.attn_scale,
                                model.backbone.layers[0].ffn_scale, model.backbone.input_transform.bias};
  const double err = canet::testing::max_gradient_error(leaves, [&] {
    BatchStats s;
    const Tensor loss = batch_loss(model, batch, draws, cfg, &s, &freeze);
    // The sampled routes must not move under the perturbations.
    REQUIRE(s.routes == stats.routes);
    return loss;
  });
  CHECK(err < 1e-4);
}

TEST_CASE("lazy Adam only moves entries with a gradient") {
  Tensor w = Tensor::from_values({4}, {1.0, 2.0, 3.0, 4.0}, true);
  LazyAdam adam({{"w", w}}, 0.1, 0.9, 0.999, 1e-8);
  const Tensor mask = Tensor::from_values({4}, {1.0, 0.0, -2.0, 0.0});
  backward(sum(mul(w, mask)));
  adam.step();
  const auto v = w.values();
  // First bias-corrected step moves by lr * sign(g).
  CHECK(v[0] == doctest::Approx(0.9));
  CHECK(v[1] == 2.0);
  CHECK(v[2] == doctest::Approx(3.1));
  CHECK(v[3] == 4.0);
  CHECK(adam.steps() == 1);
  const auto state = adam.export_state();
  REQUIRE(state.size() == 2);
  CHECK(state[0].name == "adam.m/w");
  CHECK(state[0].values[1] == 0.0);
}

TEST_CASE("a small route updates only its prefix slices") {
  const Split split = toy_split(13);
  TrainConfig cfg = toy_config();
  cfg.static_route = cfg.space.smallest();
  Trainer trainer(split, cfg);
  const CanetModel before = trainer.model().clone();
  trainer.run_epoch();
  const Route r = cfg.space.smallest();
  const auto& after = trainer.model().backbone;
  CHECK(same_values(NamedTensors{{"q", after.layers[r.depth].query.weight}},
                    NamedTensors{{"q", before.backbone.layers[r.depth].query.weight}}));
  const auto w0 = before.backbone.input_transform.weight.values();
  const auto w1 = after.input_transform.weight.values();
  const std::size_t cols = after.input_transform.weight.dim(1);
  bool prefix_moved = false;
  for (std::size_t i = 0; i < w0.size(); ++i) {
    const std::size_t row = i / cols, col = i % cols;
    if (row >= r.hidden || col >= r.emb) {
      CHECK(w1[i] == w0[i]);
    } else {
      prefix_moved |= w1[i] != w0[i];
    }
  }
  CHECK(prefix_moved);
}

TEST_CASE("training is deterministic for a seed") {
  const Split split = toy_split(14);
  const TrainConfig cfg = toy_config(21);
  Trainer a(split, cfg), b(split, cfg);
  a.fit();
  b.fit();
  CHECK(same_values(a.model().named_parameters(), b.model().named_parameters()));
  CHECK(a.history().size() == 2);
  CHECK(history_to_json(a.history()) == history_to_json(b.history()));
  Trainer c(split, toy_config(22));
  c.fit();
  CHECK_FALSE(same_values(a.model().named_parameters(), c.model().named_parameters()));
}

TEST_CASE("training lowers the next-item loss") {
  const Split split = toy_split(15, 50);
  TrainConfig cfg = toy_config(4);
  cfg.batch_size = 10;
  cfg.epochs = 40;  // 5 steps per epoch, 200 steps
  cfg.validate_each_epoch = false;
  Trainer t(split, cfg);
  t.fit();
  const auto& h = t.history();
  REQUIRE(h.size() == 40);
  CHECK(h.back().sr < h.front().sr);
  CHECK(h.back().sr < 0.9 * h.front().sr);
  for (const auto& rec : h) {
    CHECK(std::isfinite(rec.total));
    CHECK(rec.sampled_route_entropy >= 0.0);
    CHECK(rec.sampled_route_entropy <= std::log(36.0) + 1e-12);
  }
  CHECK(t.best_epoch() == 40);
}

TEST_CASE("checkpoint container") {
  CheckpointData d;
  d.meta = {{"k", 1}};
  d.tensors.push_back({"a", {2, 2}, {1.0, -2.0, 3.5, 0.0}});
  d.tensors.push_back({"b", {3}, {0.1, 0.2, 0.3}});
  d.rng_state = 0xDEADBEEFCAFEULL;
  d.epoch = 7;
  const std::string bytes = encode_checkpoint(d);
  CHECK(bytes.substr(0, 4) == "CANT");
  const CheckpointData back = decode_checkpoint(bytes);
  CHECK(back.meta == d.meta);
  CHECK(back.rng_state == d.rng_state);
  CHECK(back.epoch == 7);
  CHECK(back.tensor("a").values == d.tensors[0].values);
  CHECK(back.tensor("b").shape == Shape{3});
  CHECK_FALSE(back.has_tensor("c"));
  CHECK_THROWS_AS(back.tensor("c"), FormatError);

  CHECK_THROWS_AS(decode_checkpoint("NOPE" + bytes.substr(4)), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), FormatError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), FormatError);
  CheckpointData wrong;
  wrong.tensors.push_back({"a", {2, 2}, {1.0}});
  CHECK_THROWS_AS(encode_checkpoint(wrong), FormatError);
}

TEST_CASE("resuming from a checkpoint reproduces uninterrupted training") {
  const Split split = toy_split(16);
  TrainConfig cfg = toy_config(5);
  cfg.epochs = 3;
  Trainer straight(split, cfg);
  straight.fit();

  Trainer first(split, cfg);
  first.run_epoch();
  const CheckpointData ck = decode_checkpoint(encode_checkpoint(first.checkpoint()));
  Trainer resumed = Trainer::resume(split, ck);
  CHECK(resumed.epoch() == 1);
  CHECK(resumed.rng_state() == first.rng_state());
  resumed.fit();
  CHECK(resumed.epoch() == 3);
  CHECK(same_values(resumed.model().named_parameters(), straight.model().named_parameters()));
  CHECK(history_to_json(resumed.history()) == history_to_json(straight.history()));
  CHECK(same_values(resumed.best_model().named_parameters(), straight.best_model().named_parameters()));

  SyntheticConfig bigger;
  bigger.users = 40;
  bigger.items = 50;
  bigger.length = 8;
  const Split mismatched = leave_one_out_split(generate_synthetic(bigger));
  CHECK_THROWS_AS(Trainer::resume(mismatched, ck), ConfigError);
}

TEST_CASE("fit returns best and last models") {
  const Split split = toy_split(18);
  const FitResult r = fit(split, toy_config(6));
  CHECK(r.history.size() == 2);
  double best = -1.0;
  for (const auto& rec : r.history) best = std::max(best, rec.valid_ndcg10);
  CHECK(evaluate_ndcg10(r.best, split.valid) == doctest::Approx(best));
}
