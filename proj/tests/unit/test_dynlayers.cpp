// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "canet/dynlayers.hpp"
#include "canet/errors.hpp"
#include "support/gradcheck.hpp"
#include "support/reference_model.hpp"

using namespace canet;
using canet::testing::Matrix;
using canet::testing::random_values;

namespace {

SliceableParam fixed_linear() {
  SliceableParam p;
  p.name = "toy";
  p.d_in = 2;
  p.d_out = 2;
  p.weight = Tensor::from_values({2, 2}, {1, 2, 3, 4}, true);
  p.bias = Tensor::from_values({2}, {0.5, -0.5}, true);
  return p;
}

Matrix to_matrix(const Tensor& t) {
  Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < t.dim(1); ++c) m[r][c] = t.at(r, c);
  }
  return m;
}

double max_abs_diff(const Tensor& a, const Matrix& b) {
  double worst = 0.0;
  for (std::size_t r = 0; r < b.size(); ++r) {
    for (std::size_t c = 0; c < b[r].size(); ++c) worst = std::max(worst, std::abs(a.at(r, c) - b[r][c]));
  }
  return worst;
}

LayerParams perturbed_layer(std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  LayerParams layer = make_layer_params("layer", width, rng);
  NamedTensors params;
  append_parameters(layer, params);
  canet::testing::perturb_parameters(params, seed + 1);
  return layer;
}

}  // namespace

TEST_CASE("dynamic linear on the 1x1 and full slices") {
  const SliceableParam p = fixed_linear();
  const Tensor x1 = Tensor::from_values({1, 1}, {1.0});
  CHECK(dynamic_linear(x1, p, 1, 1).item() == 1.5);
  const Tensor x2 = Tensor::from_values({1, 2}, {1.0, 1.0});
  const Tensor y = dynamic_linear(x2, p, 2, 2);
  CHECK(y.at(0, 0) == 3.5);
  CHECK(y.at(0, 1) == 6.5);
}

TEST_CASE("dynamic linear rejects out-of-range slices") {
  const SliceableParam p = fixed_linear();
  const Tensor x = Tensor::from_values({1, 3}, {1, 1, 1});
  CHECK_THROWS_AS(dynamic_linear(x, p, 3, 2), SliceError);
  const Tensor x0 = Tensor::zeros({1, 2});
  CHECK_THROWS_AS(dynamic_linear(x0, p, 2, 0), SliceError);
}

TEST_CASE("full-slice linear equals a plain affine map") {
  Rng rng(1);
  const SliceableParam p = make_linear_param("lin", 5, 4, rng);
  const Tensor x = Tensor::from_values({3, 5}, random_values(15, rng));
  const Matrix ref = canet::testing::affine_apply(canet::testing::copy_prefix(p, 5, 4), to_matrix(x));
  CHECK(max_abs_diff(dynamic_linear(x, p, 5, 4), ref) < 1e-12);
}

TEST_CASE("layer norm closed forms") {
  SliceableParam norm = make_norm_param("ln", 3);
  norm.bias.mutable_values()[0] = 0.25;
  norm.bias.mutable_values()[1] = -1.0;
  const Tensor constant = Tensor::from_values({1, 2}, {4.0, 4.0});
  const Tensor y = dynamic_layernorm(constant, norm, 2);
  CHECK(y.at(0, 0) == 0.25);
  CHECK(y.at(0, 1) == -1.0);

  const SliceableParam unit = make_norm_param("ln2", 2);
  const Tensor z = dynamic_layernorm(Tensor::from_values({1, 2}, {1.0, -1.0}), unit, 2);
  const double expected = 1.0 / std::sqrt(1.0 + kLayerNormEps);
  CHECK(std::abs(z.at(0, 0) - expected) < 1e-15);
  CHECK(std::abs(z.at(0, 1) + expected) < 1e-15);
  CHECK_THROWS_AS(dynamic_layernorm(Tensor::zeros({1, 4}), unit, 4), SliceError);
}

TEST_CASE("full-width layer norm matches the loop reference") {
  Rng rng(2);
  SliceableParam norm = make_norm_param("ln", 6);
  canet::testing::perturb_parameters({{"w", norm.weight}, {"b", norm.bias}}, 3);
  const Tensor x = Tensor::from_values({4, 6}, random_values(24, rng, 2.0));
  const Matrix ref = canet::testing::layer_norm(canet::testing::copy_prefix(norm, 1, 6), to_matrix(x), kLayerNormEps);
  CHECK(max_abs_diff(dynamic_layernorm(x, norm, 6), ref) < 1e-12);
}

TEST_CASE("residual sublayer") {
  Rng rng(4);
  SliceableParam norm = make_norm_param("ln", 4);
  canet::testing::perturb_parameters({{"w", norm.weight}, {"b", norm.bias}}, 5);
  const Tensor h = Tensor::from_values({3, 4}, random_values(12, rng));
  const Tensor sub1 = Tensor::from_values({3, 4}, random_values(12, rng));
  const Tensor sub2 = Tensor::from_values({3, 4}, random_values(12, rng));
  const Tensor base = dynamic_layernorm(h, norm, 4);

  SUBCASE("zero scale ignores the sublayer") {
    const Tensor zero = Tensor::scalar(0.0);
    const Tensor a = residual_sublayer(h, sub1, zero, norm, 4);
    const Tensor b = residual_sublayer(h, sub2, zero, norm, 4);
    for (std::size_t i = 0; i < 12; ++i) {
      CHECK(a.values()[i] == base.values()[i]);
      CHECK(b.values()[i] == base.values()[i]);
    }
  }
  SUBCASE("zero sublayer output with unit scale") {
    const Tensor a = residual_sublayer(h, Tensor::zeros({3, 4}), Tensor::scalar(1.0), norm, 4);
    for (std::size_t i = 0; i < 12; ++i) CHECK(a.values()[i] == base.values()[i]);
  }
  SUBCASE("half scale matches manual composition") {
    const Tensor a = residual_sublayer(h, sub1, Tensor::scalar(0.5), norm, 4);
    Matrix mixed = to_matrix(h);
    const Matrix s = to_matrix(sub1);
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 4; ++c) mixed[r][c] += 0.5 * s[r][c];
    }
    const Matrix ref = canet::testing::layer_norm(canet::testing::copy_prefix(norm, 1, 4), mixed, kLayerNormEps);
    CHECK(max_abs_diff(a, ref) < 1e-12);
  }
}

TEST_CASE("residual scales start at zero") {
  Rng rng(6);
  const LayerParams layer = make_layer_params("blk", 8, rng);
  CHECK(layer.attn_scale.item() == 0.0);
  CHECK(layer.ffn_scale.item() == 0.0);
}

TEST_CASE("attention with a single position returns the value projection") {
  const LayerParams layer = perturbed_layer(8, 7);
  Rng rng(8);
  const Tensor x = Tensor::from_values({1, 8}, random_values(8, rng));
  const std::vector<std::uint8_t> valid = {1};
  const Tensor out = causal_attention(x, layer, 4, 8, valid);
  const Tensor v = dynamic_linear(x, layer.value, 8, 8);
  const Tensor expected = dynamic_linear(v, layer.output, 8, 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(out.values()[i] - expected.values()[i]) < 1e-14);
}

TEST_CASE("attention on two positions matches a step-by-step computation") {
  // Hand-set weights for T=2, k=4, one head.
  LayerParams layer = perturbed_layer(4, 9);
  auto set = [](SliceableParam& p, double diag, double off) {
    auto w = p.weight.mutable_values();
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t c = 0; c < 4; ++c) w[r * 4 + c] = r == c ? diag : off;
    }
    for (double& b : p.bias.mutable_values()) b = 0.0;
  };
  set(layer.query, 0.5, 0.0);
  set(layer.key, 1.0, 0.1);
  set(layer.value, 2.0, 0.0);
  set(layer.output, 1.0, 0.0);
  const Tensor x = Tensor::from_values({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  const std::vector<std::uint8_t> valid = {1, 1};
  const Tensor out = causal_attention(x, layer, 1, 4, valid);

  // q = 0.5 x, k = x + 0.1 * (sum(x) - x) elementwise, v = 2 x.
  const double k0[4] = {1.0, 0.1, 0.1, 0.1};
  const double k1[4] = {0.1, 1.0, 0.1, 0.1};
  const double q1[4] = {0.0, 0.5, 0.0, 0.0};
  double s0 = 0.0, s1 = 0.0;
  for (int c = 0; c < 4; ++c) {
    s0 += q1[c] * k0[c];
    s1 += q1[c] * k1[c];
  }
  s0 /= 2.0;  // sqrt(4)
  s1 /= 2.0;
  const double a0 = std::exp(s0) / (std::exp(s0) + std::exp(s1));
  const double a1 = 1.0 - a0;
  // Position 0 sees only itself: v0 = (2,0,0,0).
  CHECK(std::abs(out.at(0, 0) - 2.0) < 1e-14);
  CHECK(std::abs(out.at(0, 1)) < 1e-14);
  CHECK(std::abs(out.at(1, 0) - 2.0 * a0) < 1e-14);
  CHECK(std::abs(out.at(1, 1) - 2.0 * a1) < 1e-14);
  CHECK(std::abs(out.at(1, 2)) < 1e-14);
}

TEST_CASE("attention is causal") {
  const LayerParams layer = perturbed_layer(8, 10);
  Rng rng(11);
  std::vector<double> xv = random_values(5 * 8, rng);
  const std::vector<std::uint8_t> valid(5, 1);
  const Tensor base = causal_attention(Tensor::from_values({5, 8}, xv), layer, 4, 8, valid);
  for (std::size_t t = 0; t < 5; ++t) {
    std::vector<double> moved = xv;
    for (std::size_t c = 0; c < 8; ++c) moved[t * 8 + c] += 0.37;
    const Tensor out = causal_attention(Tensor::from_values({5, 8}, moved), layer, 4, 8, valid);
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t c = 0; c < 8; ++c) CHECK(out.at(r, c) == base.at(r, c));
    }
    bool changed = false;
    for (std::size_t c = 0; c < 8; ++c) changed |= out.at(t, c) != base.at(t, c);
    CHECK(changed);
  }
}

TEST_CASE("attention matches the loop reference on a sliced width") {
  const LayerParams layer = perturbed_layer(12, 12);
  Rng rng(13);
  const Tensor x = Tensor::from_values({4, 8}, random_values(32, rng));
  const std::vector<std::uint8_t> valid = {0, 1, 1, 1};
  const Tensor out = causal_attention(x, layer, 4, 8, valid);
  using canet::testing::affine_apply;
  using canet::testing::copy_prefix;
  const Matrix xm = to_matrix(x);
  const Matrix mixed = canet::testing::attention(affine_apply(copy_prefix(layer.query, 8, 8), xm),
                                                 affine_apply(copy_prefix(layer.key, 8, 8), xm),
                                                 affine_apply(copy_prefix(layer.value, 8, 8), xm), 4,
                                                 std::vector<std::uint8_t>(valid));
  CHECK(max_abs_diff(out, affine_apply(copy_prefix(layer.output, 8, 8), mixed)) < 1e-12);
}

TEST_CASE("attention width must split across heads") {
  const LayerParams layer = perturbed_layer(8, 14);
  const Tensor x = Tensor::zeros({2, 6});
  const std::vector<std::uint8_t> valid = {1, 1};
  CHECK_THROWS_AS(causal_attention(x, layer, 4, 6, valid), ConfigError);
}

TEST_CASE("shared classifier") {
  Rng rng(15);
  const SliceableParam cls = make_linear_param("cls", 8, 11, rng);
  const Tensor h = Tensor::from_values({3, 6}, random_values(18, rng));
  const Tensor a = shared_classifier(h, cls, 6);
  const Tensor b = shared_classifier(h, cls, 6);
  CHECK(a.shape() == Shape{3, 11});
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == b.values()[i]);

  SUBCASE("gradients from two exits accumulate into one buffer") {
    const Tensor h1 = Tensor::from_values({2, 4}, random_values(8, rng));
    const Tensor h2 = Tensor::from_values({2, 8}, random_values(16, rng));
    const Tensor r1 = Tensor::from_values({2, 11}, random_values(22, rng));
    const Tensor r2 = Tensor::from_values({2, 11}, random_values(22, rng));
    auto loss1 = [&] { return sum(mul(shared_classifier(h1, cls, 4), r1)); };
    auto loss2 = [&] { return sum(mul(shared_classifier(h2, cls, 8), r2)); };
    Tensor w = cls.weight;
    w.zero_grad();
    backward(loss1());
    std::vector<double> g1(w.grad().begin(), w.grad().end());
    w.zero_grad();
    backward(loss2());
    std::vector<double> g2(w.grad().begin(), w.grad().end());
    w.zero_grad();
    backward(add(loss1(), loss2()));
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(std::abs(w.grad()[i] - (g1[i] + g2[i])) < 1e-14);
  }
}

TEST_CASE("gradients through a slice stay in the prefix region") {
  Rng rng(16);
  const LayerParams layer = perturbed_layer(12, 17);
  const Tensor x = Tensor::from_values({3, 8}, random_values(24, rng));
  const std::vector<std::uint8_t> valid = {1, 1, 1};
  NamedTensors params;
  append_parameters(layer, params);
  for (auto& [name, t] : params) {
    Tensor leaf = t;
    leaf.zero_grad();
  }
  backward(sum(transformer_block(x, layer, 4, 8, valid)));
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    if (t.rank() == 2) {
      for (std::size_t r = 0; r < t.dim(0); ++r) {
        for (std::size_t c = 0; c < t.dim(1); ++c) {
          if (r >= 8 || c >= 8) CHECK_MESSAGE(g[r * t.dim(1) + c] == 0.0, name);
        }
      }
    } else if (t.numel() > 1) {
      for (std::size_t i = 8; i < t.numel(); ++i) CHECK_MESSAGE(g[i] == 0.0, name);
    }
  }
}

TEST_CASE("transformer block gradients match finite differences") {
  Rng rng(18);
  const LayerParams layer = perturbed_layer(8, 19);
  Tensor x = Tensor::from_values({3, 8}, random_values(24, rng), true);
  const Tensor r = Tensor::from_values({3, 8}, random_values(24, rng));
  const std::vector<std::uint8_t> valid = {0, 1, 1};
  std::vector<Tensor> leaves = {x, layer.attn_scale, layer.ffn_scale, layer.query.weight, layer.ffn_in.bias,
                                layer.attn_norm.weight};
  CHECK(canet::testing::max_gradient_error(leaves, [&] {
          return sum(mul(transformer_block(x, layer, 4, 8, valid), r));
        }) < 1e-4);
}
