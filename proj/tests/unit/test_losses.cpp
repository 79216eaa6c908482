// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "canet/errors.hpp"
#include "canet/losses.hpp"
#include "support/gradcheck.hpp"
#include "support/reference_model.hpp"

using namespace canet;
using canet::testing::random_values;

namespace {

std::vector<double> random_distribution(std::size_t n, Rng& rng, double spread = 1.5) {
  std::vector<double> p(n);
  double z = 0.0;
  for (double& v : p) z += (v = std::exp(spread * (2.0 * rng.uniform() - 1.0)));
  for (double& v : p) v /= z;
  return p;
}

double cross_entropy(const std::vector<double>& p, const std::vector<double>& y) {
  double h = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) h -= y[i] * std::log(std::max(p[i], 1e-12));
  return h;
}

/// Route distribution whose marginals equal the given per-dimension targets
/// (independent product).
std::vector<double> product_distribution(const GuideLabels& y, const RoutingSpace& space) {
  std::vector<double> p(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) {
    const Route r = space.route(i);
    p[i] = y.y_emb[space.candidate_index(r, Dimension::kEmbedding)] *
           y.y_hidden[space.candidate_index(r, Dimension::kHidden)] *
           y.y_depth[space.candidate_index(r, Dimension::kDepth)];
  }
  return p;
}

}  // namespace

TEST_CASE("sr loss closed forms") {
  const std::vector<std::size_t> targets = {3, 0, 7};
  const Tensor flat = Tensor::zeros({3, 11});
  CHECK(std::abs(sr_loss(flat, targets).item() - std::log(10.0)) < 1e-12);

  std::vector<double> v(3 * 11, 0.0);
  v[0 * 11 + 3] = 800.0;
  v[2 * 11 + 7] = 800.0;
  CHECK(sr_loss(Tensor::from_values({3, 11}, v), targets).item() < 1e-300);

  const std::vector<std::size_t> pad = {0, 0, 0};
  CHECK_THROWS_AS(sr_loss(flat, pad), DataError);
}

TEST_CASE("sr loss on a two-position toy") {
  Rng rng(1);
  const std::vector<double> z = random_values(2 * 5, rng, 2.0);
  const std::vector<std::size_t> targets = {4, 2};
  double expected = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    double denom = 0.0;
    for (std::size_t c = 1; c < 5; ++c) denom += std::exp(z[r * 5 + c]);
    expected += -std::log(std::exp(z[r * 5 + targets[r]]) / denom);
  }
  CHECK(std::abs(sr_loss(Tensor::from_values({2, 5}, z), targets).item() - expected / 2.0) < 1e-12);
}

TEST_CASE("scale sensitivity equals the gate gradient and a finite difference") {
  Rng rng(2);
  const std::vector<double> z = random_values(4 * 9, rng, 3.0);
  const std::vector<std::size_t> targets = {0, 3, 8, 1};
  const double c = sr_scale_sensitivity(Tensor::from_values({4, 9}, z), targets);

  Tensor w = Tensor::scalar(1.0, true);
  backward(sr_loss(ratio_gate(Tensor::from_values({4, 9}, z), w), targets));
  CHECK(std::abs(w.grad()[0] - c) < 1e-12);

  auto loss_at = [&](double s) {
    std::vector<double> scaled = z;
    for (double& v : scaled) v *= s;
    return sr_loss(Tensor::from_values({4, 9}, scaled), targets).item();
  };
  const double h = 1e-5;
  CHECK(canet::testing::relative_error(c, (loss_at(1 + h) - loss_at(1 - h)) / (2 * h)) < 1e-6);
}

TEST_CASE("uniform loss") {
  CHECK(std::abs(uniform_loss(Tensor::full({36}, 1.0 / 36.0)).item() - std::log(36.0)) < 1e-12);
  CHECK(std::abs(uniform_loss(Tensor::full({2}, 0.5)).item() - std::log(2.0)) < 1e-12);
  const Tensor skew = Tensor::from_values({2}, {1.0 - 1e-12, 1e-12});
  CHECK(std::abs(uniform_loss(skew, 1e-12).item() - (-0.5 * (std::log(1.0 - 1e-12) + std::log(1e-12)))) < 1e-9);
  CHECK(std::abs(uniform_loss(skew, 1e-12).item() - 13.8155) < 1e-4);
  const Tensor zero = Tensor::from_values({2}, {1.0, 0.0});
  CHECK(std::isfinite(uniform_loss(zero, 1e-12).item()));
}

TEST_CASE("uniform loss is minimized only at the uniform distribution") {
  Rng rng(3);
  for (std::size_t n : {2u, 7u, 36u}) {
    const double floor = uniform_loss(Tensor::full({n}, 1.0 / static_cast<double>(n))).item();
    CHECK(std::abs(floor - std::log(static_cast<double>(n))) < 1e-9);
    for (int trial = 0; trial < 100; ++trial) {
      const std::vector<double> p = random_distribution(n, rng, 0.3);
      CHECK(uniform_loss(Tensor::from_values({n}, p)).item() > floor);
    }
  }
}

TEST_CASE("guide targets") {
  const std::vector<double> easy = guide_targets(true, 4, 1.0);
  const double z = 1 + std::exp(-1.0) + std::exp(-2.0) + std::exp(-3.0);
  const double expected[4] = {1 / z, std::exp(-1.0) / z, std::exp(-2.0) / z, std::exp(-3.0) / z};
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(easy[i] - expected[i]) < 1e-15);
  CHECK(std::abs(easy[0] - 0.6439) < 1e-4);
  CHECK(std::abs(easy[3] - 0.0321) < 1e-4);

  const std::vector<double> hard = guide_targets(false, 4, 1.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(hard[i] == easy[3 - i]);

  const std::vector<double> sharp = guide_targets(true, 3, 800.0);
  CHECK(sharp[0] == 1.0);
  CHECK(sharp[2] == 0.0);
  CHECK_THROWS_AS(guide_targets(true, 0, 1.0), ConfigError);
  CHECK_THROWS_AS(guide_targets(true, 3, 0.0), ConfigError);
}

TEST_CASE("guide labels peak at the extreme candidates") {
  const RoutingSpace space = RoutingSpace::desk();
  const GuideLabels easy = make_guide_labels(true, space, 1.0);
  const GuideLabels hard = make_guide_labels(false, space, 1.0);
  for (Dimension dim : kAllDimensions) {
    const auto& e = easy.target(dim);
    const auto& h = hard.target(dim);
    CHECK(e.size() == space.candidates(dim).size());
    CHECK(std::max_element(e.begin(), e.end()) == e.begin());
    CHECK(std::max_element(h.begin(), h.end()) == h.end() - 1);
    double total = 0.0;
    for (double v : e) total += v;
    CHECK(std::abs(total - 1.0) < 1e-15);
  }
}

TEST_CASE("guide loss equals the target entropy at the target and exceeds it elsewhere") {
  const RoutingSpace space = RoutingSpace::desk();
  Rng rng(4);
  for (bool easy : {true, false}) {
    const GuideLabels y = make_guide_labels(easy, space, 1.0);
    const std::vector<double> p = product_distribution(y, space);
    const double at_target = guide_loss(Tensor::from_values({36}, p), y, space).item();
    CHECK(std::abs(at_target - guide_entropy(y)) < 1e-12);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> q = p;
      double z = 0.0;
      for (double& v : q) z += (v *= std::exp(0.3 * (2.0 * rng.uniform() - 1.0)));
      for (double& v : q) v /= z;
      CHECK(guide_loss(Tensor::from_values({36}, q), y, space).item() > at_target);
    }
  }
}

TEST_CASE("guide loss matches the three-term formula") {
  const RoutingSpace space = RoutingSpace::desk();
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<double> p = random_distribution(36, rng);
    const GuideLabels y = make_guide_labels(trial % 2 == 0, space, 0.7);
    double expected = 0.0;
    for (Dimension dim : kAllDimensions) {
      std::vector<double> marginal(space.candidates(dim).size(), 0.0);
      for (std::size_t i = 0; i < 36; ++i) marginal[space.candidate_index(space.route(i), dim)] += p[i];
      expected += cross_entropy(marginal, y.target(dim));
    }
    CHECK(std::abs(guide_loss(Tensor::from_values({36}, p), y, space).item() - expected) < 1e-12);
  }
}

TEST_CASE("loss gradients match finite differences") {
  const RoutingSpace space = RoutingSpace::desk();
  Rng rng(6);
  Tensor logits = Tensor::from_values({36}, random_values(36, rng), true);
  const GuideLabels y = make_guide_labels(false, space, 1.0);
  CHECK(canet::testing::max_gradient_error({logits}, [&] { return uniform_loss(softmax(logits)); }) < 1e-5);
  CHECK(canet::testing::max_gradient_error({logits}, [&] { return guide_loss(softmax(logits), y, space); }) < 1e-5);
}

TEST_CASE("total loss") {
  LossConfig cfg;
  const Tensor sr = Tensor::scalar(2.0);
  const Tensor uni = Tensor::scalar(3.5835);
  const Tensor guide = Tensor::scalar(4.0);
  CHECK(std::abs(total_loss(sr, uni, guide, cfg).item() - 2.075835) < 1e-12);
  CHECK(std::abs(total_loss(sr, uni, guide, cfg).item() - 2.0758) < 1e-4);
  LossConfig none = cfg;
  none.lambda_uniform = none.lambda_guide = 0.0;
  CHECK(total_loss(sr, uni, guide, none).item() == 2.0);
  CHECK(total_loss(sr, Tensor(), Tensor(), cfg).item() == 2.0);
  LossConfig no_uni = cfg;
  no_uni.lambda_uniform = 0.0;
  CHECK(std::abs(total_loss(sr, uni, guide, no_uni).item() - 2.04) < 1e-12);
  LossConfig no_guide = cfg;
  no_guide.lambda_guide = 0.0;
  CHECK(std::abs(total_loss(sr, uni, guide, no_guide).item() - 2.035835) < 1e-12);

  const Tensor bad = Tensor::scalar(std::numeric_limits<double>::infinity());
  try {
    total_loss(sr, bad, guide, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("uniform") != std::string::npos);
  }
}

TEST_CASE("loss config validation") {
  LossConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda_uniform = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.recall_k = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.beta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("user labeling") {
  SupernetConfig sc;
  sc.num_items = 12;
  sc.max_len = 5;
  sc.space = RoutingSpace::desk();
  Rng rng(7);
  SupernetParams params = SupernetParams::create(sc, rng);
  canet::testing::perturb_parameters(params.named_parameters(), 8, 0.2);
  const std::vector<std::vector<std::size_t>> inputs = {{0, 1, 2, 3, 4}, {5, 6, 7, 8, 9}, {0, 0, 11, 3, 2}};
  const Route smallest = sc.space.smallest();

  SUBCASE("full-recall cutoff marks everyone easy") {
    const std::vector<std::size_t> targets = {5, 10, 12};
    const auto easy = label_users(inputs, targets, smallest, params, 12);
    for (bool e : easy) CHECK(e);
  }
  SUBCASE("top-1 cutoff agrees with the arg-max item") {
    std::vector<std::size_t> best(3), worst(3);
    {
      NoGradGuard guard;
      for (std::size_t u = 0; u < 3; ++u) {
        const Tensor logits = supernet_forward(inputs[u], smallest, params);
        std::size_t hi = 1, lo = 1;
        for (std::size_t c = 1; c <= 12; ++c) {
          if (logits.at(4, c) > logits.at(4, hi)) hi = c;
          if (logits.at(4, c) < logits.at(4, lo)) lo = c;
        }
        best[u] = hi;
        worst[u] = lo;
      }
    }
    for (bool e : label_users(inputs, best, smallest, params, 1)) CHECK(e);
    for (bool e : label_users(inputs, worst, smallest, params, 1)) CHECK_FALSE(e);
  }
  SUBCASE("labeling records no gradient") {
    const NamedTensors named = params.named_parameters();
    for (auto& [n, t] : named) {
      Tensor leaf = t;
      leaf.zero_grad();
    }
    const std::vector<std::size_t> targets = {5, 10, 12};
    label_users(inputs, targets, smallest, params, 3);
    CHECK(grad_enabled());
    for (const auto& [n, t] : named) {
      if (!t.has_grad()) continue;
      for (double g : t.grad()) CHECK(g == 0.0);
    }
  }
}

TEST_CASE("losses do not depend on batch order") {
  const RoutingSpace space = RoutingSpace::desk();
  Rng rng(9);
  std::vector<std::vector<double>> probs;
  for (int i = 0; i < 6; ++i) probs.push_back(random_distribution(36, rng));
  const GuideLabels y = make_guide_labels(true, space, 1.0);
  auto batch_mean = [&](const std::vector<std::size_t>& order) {
    double total = 0.0;
    for (std::size_t i : order) {
      const Tensor p = Tensor::from_values({36}, probs[i]);
      total += uniform_loss(p).item() + guide_loss(p, y, space).item();
    }
    return total / static_cast<double>(order.size());
  };
  const double a = batch_mean({0, 1, 2, 3, 4, 5});
  const double b = batch_mean({5, 3, 1, 0, 2, 4});
  CHECK(std::abs(a - b) < 1e-12);
}
