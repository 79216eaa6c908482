// SPDX-License-Identifier: Apache-2.0
#include "canet/dynlayers.hpp"

#include "canet/errors.hpp"

namespace canet {

namespace {

Tensor truncated_normal_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.truncated_normal(kInitStddev);
  return Tensor::from_values({rows, cols}, std::move(values), true);
}

}  // namespace

SliceableParam make_linear_param(std::string name, std::size_t d_in, std::size_t d_out, Rng& rng) {
  SliceableParam p;
  p.name = std::move(name);
  p.weight = truncated_normal_matrix(d_out, d_in, rng);
  p.bias = Tensor::zeros({d_out}, true);
  p.d_in = d_in;
  p.d_out = d_out;
  return p;
}

SliceableParam make_zero_linear_param(std::string name, std::size_t d_in, std::size_t d_out) {
  SliceableParam p;
  p.name = std::move(name);
  p.weight = Tensor::zeros({d_out, d_in}, true);
  p.bias = Tensor::zeros({d_out}, true);
  p.d_in = d_in;
  p.d_out = d_out;
  return p;
}

SliceableParam make_norm_param(std::string name, std::size_t d) {
  SliceableParam p;
  p.name = std::move(name);
  p.weight = Tensor::full({d}, 1.0, true);
  p.bias = Tensor::zeros({d}, true);
  p.d_in = d;
  p.d_out = d;
  return p;
}

LayerParams make_layer_params(const std::string& prefix, std::size_t width, Rng& rng) {
  LayerParams layer;
  layer.name = prefix;
  layer.query = make_linear_param(prefix + ".attn.query", width, width, rng);
  layer.key = make_linear_param(prefix + ".attn.key", width, width, rng);
  layer.value = make_linear_param(prefix + ".attn.value", width, width, rng);
  layer.output = make_linear_param(prefix + ".attn.output", width, width, rng);
  layer.ffn_in = make_linear_param(prefix + ".ffn.in", width, width, rng);
  layer.ffn_out = make_linear_param(prefix + ".ffn.out", width, width, rng);
  layer.attn_norm = make_norm_param(prefix + ".attn.norm", width);
  layer.ffn_norm = make_norm_param(prefix + ".ffn.norm", width);
  layer.attn_scale = Tensor::scalar(0.0, true);
  layer.ffn_scale = Tensor::scalar(0.0, true);
  return layer;
}

void append_parameters(const SliceableParam& p, NamedTensors& out) {
  out.emplace_back(p.name + ".weight", p.weight);
  out.emplace_back(p.name + ".bias", p.bias);
}

void append_parameters(const LayerParams& layer, NamedTensors& out) {
  for (const SliceableParam* p : {&layer.query, &layer.key, &layer.value, &layer.output,
                                  &layer.ffn_in, &layer.ffn_out, &layer.attn_norm, &layer.ffn_norm}) {
    append_parameters(*p, out);
  }
  out.emplace_back(layer.name + ".attn.scale", layer.attn_scale);
  out.emplace_back(layer.name + ".ffn.scale", layer.ffn_scale);
}

Tensor dynamic_linear(const Tensor& x, const SliceableParam& p, std::size_t in, std::size_t out) {
  if (in < 1 || in > p.d_in || out < 1 || out > p.d_out) {
    throw SliceError(p.name + ": slice (in=" + std::to_string(in) + ", out=" + std::to_string(out) +
                     ") outside (" + std::to_string(p.d_in) + ", " + std::to_string(p.d_out) + ")");
  }
  return linear_slice(x, p.weight, p.bias, in, out);
}

Tensor dynamic_layernorm(const Tensor& x, const SliceableParam& p, std::size_t width) {
  if (width < 1 || width > p.d_in) {
    throw SliceError(p.name + ": width " + std::to_string(width) + " outside [1, " +
                     std::to_string(p.d_in) + "]");
  }
  return layernorm_slice(x, p.weight, p.bias, width, kLayerNormEps);
}

Tensor residual_sublayer(const Tensor& h, const Tensor& sublayer_output, const Tensor& scale,
                         const SliceableParam& norm, std::size_t width) {
  return dynamic_layernorm(add(h, mul_scalar(sublayer_output, scale)), norm, width);
}

Tensor causal_attention(const Tensor& x, const LayerParams& layer, std::size_t heads,
                        std::size_t width, std::span<const std::uint8_t> key_valid) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("hidden width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const Tensor q = dynamic_linear(x, layer.query, width, width);
  const Tensor k = dynamic_linear(x, layer.key, width, width);
  const Tensor v = dynamic_linear(x, layer.value, width, width);
  const Tensor mixed = causal_attention_core(q, k, v, heads, key_valid);
  return dynamic_linear(mixed, layer.output, width, width);
}

Tensor feed_forward(const Tensor& x, const LayerParams& layer, std::size_t width) {
  return dynamic_linear(gelu(dynamic_linear(x, layer.ffn_in, width, width)), layer.ffn_out, width,
                        width);
}

Tensor transformer_block(const Tensor& x, const LayerParams& layer, std::size_t heads,
                         std::size_t width, std::span<const std::uint8_t> key_valid) {
  const Tensor attended = residual_sublayer(x, causal_attention(x, layer, heads, width, key_valid),
                                            layer.attn_scale, layer.attn_norm, width);
  return residual_sublayer(attended, feed_forward(attended, layer, width), layer.ffn_scale,
                           layer.ffn_norm, width);
}

Tensor shared_classifier(const Tensor& h, const SliceableParam& classifier, std::size_t width) {
  return dynamic_linear(h, classifier, width, classifier.d_out);
}

Tensor item_scores(const Tensor& h, const SliceableParam& classifier, std::size_t width) {
  if (width < 1 || width > classifier.d_in) {
    throw SliceError(classifier.name + ": width " + std::to_string(width) + " outside [1, " +
                     std::to_string(classifier.d_in) + "]");
  }
  return linear_slice(h, classifier.weight, classifier.bias, width, classifier.d_out, 1);
}

}  // namespace canet
