// SPDX-License-Identifier: Apache-2.0
//
// Weight-sliced building blocks. Every layer owns one full-size parameter
// set; a narrower submodel reads and trains the leading prefix
// weight[:out, :in], bias[:out] of it.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "canet/numerics.hpp"
#include "canet/rng.hpp"

namespace canet {

inline constexpr double kLayerNormEps = 1e-8;
inline constexpr double kInitStddev = 0.02;

/// A full-size affine parameter. Linear layers hold weight [d_out, d_in];
/// layer norms hold weight [d] with d_in == d_out == d.
struct SliceableParam {
  std::string name;
  Tensor weight;
  Tensor bias;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
};

/// Linear parameter: truncated normal weights, zero bias.
SliceableParam make_linear_param(std::string name, std::size_t d_in, std::size_t d_out, Rng& rng);
/// Linear parameter with all-zero weight and bias.
SliceableParam make_zero_linear_param(std::string name, std::size_t d_in, std::size_t d_out);
/// Layer-norm parameter: unit gain, zero bias.
SliceableParam make_norm_param(std::string name, std::size_t d);

/// One self-attention block with learnable residual scales.
struct LayerParams {
  std::string name;
  SliceableParam query;
  SliceableParam key;
  SliceableParam value;
  SliceableParam output;
  SliceableParam ffn_in;
  SliceableParam ffn_out;
  SliceableParam attn_norm;
  SliceableParam ffn_norm;
  Tensor attn_scale;  // lambda of the attention sublayer, starts at 0
  Tensor ffn_scale;   // lambda of the feed-forward sublayer, starts at 0
};

LayerParams make_layer_params(const std::string& prefix, std::size_t width, Rng& rng);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
void append_parameters(const SliceableParam& p, NamedTensors& out);
void append_parameters(const LayerParams& layer, NamedTensors& out);

Tensor dynamic_linear(const Tensor& x, const SliceableParam& p, std::size_t in, std::size_t out);
Tensor dynamic_layernorm(const Tensor& x, const SliceableParam& p, std::size_t width);

/// LN(h + scale * sublayer_output) with the norm sliced to `width`.
Tensor residual_sublayer(const Tensor& h, const Tensor& sublayer_output, const Tensor& scale,
                         const SliceableParam& norm, std::size_t width);

/// Multi-head causal self-attention with all four projections sliced to
/// `width`; heads partition the sliced width. `key_valid` masks padding.
Tensor causal_attention(const Tensor& x, const LayerParams& layer, std::size_t heads,
                        std::size_t width, std::span<const std::uint8_t> key_valid);

/// Two sliced linear maps with GELU in between; inner width equals `width`.
Tensor feed_forward(const Tensor& x, const LayerParams& layer, std::size_t width);

/// Attention sublayer followed by feed-forward sublayer, both residual.
Tensor transformer_block(const Tensor& x, const LayerParams& layer, std::size_t heads,
                         std::size_t width, std::span<const std::uint8_t> key_valid);

/// Item logits from hidden states through the shared classifier; only the
/// input side is sliced.
Tensor shared_classifier(const Tensor& h, const SliceableParam& classifier, std::size_t width);
/// Same classifier for ranking: the padding column (id 0) is not computed
/// and reads -inf.
Tensor item_scores(const Tensor& h, const SliceableParam& classifier, std::size_t width);

}  // namespace canet
