// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "canet/dynlayers.hpp"
#include "canet/numerics.hpp"
#include "canet/rng.hpp"

namespace canet {

enum class Dimension { kEmbedding = 0, kHidden = 1, kDepth = 2 };

inline constexpr std::array<Dimension, 3> kAllDimensions = {Dimension::kEmbedding,
                                                           Dimension::kHidden, Dimension::kDepth};

const char* dimension_name(Dimension dim);

/// One architecture choice and its flat position in the routing space.
struct Route {
  std::size_t emb = 0;
  std::size_t hidden = 0;
  std::size_t depth = 0;
  std::size_t index = 0;

  friend bool operator==(const Route&, const Route&) = default;
};

std::string to_string(const Route& route);

/// Product space of ascending candidate lists. Routes are enumerated
/// embedding-major, then hidden, then depth:
///   index = e_idx * (b * c) + h_idx * c + d_idx.
class RoutingSpace {
 public:
  RoutingSpace() = default;
  RoutingSpace(std::vector<std::size_t> emb, std::vector<std::size_t> hidden,
               std::vector<std::size_t> depth);

  /// Embedding {64,96,128} x hidden {64,96,128} x depth {2,4,6,8}.
  static RoutingSpace standard();
  /// Same layout at a quarter of the width: {16,24,32} x {16,24,32} x {2,4,6,8}.
  static RoutingSpace desk();

  std::size_t size() const noexcept { return emb_.size() * hidden_.size() * depth_.size(); }
  const std::vector<std::size_t>& candidates(Dimension dim) const;
  const std::vector<std::size_t>& emb_candidates() const noexcept { return emb_; }
  const std::vector<std::size_t>& hidden_candidates() const noexcept { return hidden_; }
  const std::vector<std::size_t>& depth_candidates() const noexcept { return depth_; }

  std::size_t max_emb() const { return emb_.back(); }
  std::size_t max_hidden() const { return hidden_.back(); }
  std::size_t max_depth() const { return depth_.back(); }

  Route route(std::size_t index) const;
  /// Route with the given sizes; ConfigError when a size is not a candidate.
  Route find(std::size_t emb, std::size_t hidden, std::size_t depth) const;
  std::size_t index_of(std::size_t emb, std::size_t hidden, std::size_t depth) const;
  Route smallest() const { return route(0); }
  Route largest() const { return route(size() - 1); }
  /// Candidate position of `route` along `dim`.
  std::size_t candidate_index(const Route& route, Dimension dim) const;
  /// Checks that `route` belongs to this space (sizes and index agree).
  void validate(const Route& route) const;
  /// Hidden candidates must split evenly across `heads`.
  void validate_heads(std::size_t heads) const;

  friend bool operator==(const RoutingSpace&, const RoutingSpace&) = default;

 private:
  std::vector<std::size_t> emb_;
  std::vector<std::size_t> hidden_;
  std::vector<std::size_t> depth_;
};

Route route_from_index(const RoutingSpace& space, std::size_t index);
std::size_t route_to_index(const RoutingSpace& space, const Route& route);

struct SupernetConfig {
  std::size_t num_items = 0;  // item ids are 1..num_items, 0 is padding
  std::size_t max_len = 0;
  std::size_t heads = 4;
  RoutingSpace space;
};

/// The single full-size parameter set every route is sliced from.
struct SupernetParams {
  SupernetConfig config;
  Tensor item_embedding;      // [num_items + 1, max_emb]
  Tensor position_embedding;  // [max_len, max_emb]
  SliceableParam input_transform;  // max_emb -> max_hidden
  std::vector<LayerParams> layers;  // max_depth blocks of width max_hidden
  SliceableParam classifier;        // max_hidden -> num_items + 1

  static SupernetParams create(const SupernetConfig& config, Rng& rng);

  NamedTensors named_parameters() const;
  std::size_t parameter_count() const;
};

/// Item logits [T, num_items + 1] for every position of `seq` under `route`.
Tensor supernet_forward(std::span<const std::size_t> seq, const Route& route,
                        const SupernetParams& params);

/// Logits [1, num_items + 1] of the final position only, padding column at
/// -inf; the inference path whose cost `flops_of_route` describes.
Tensor supernet_final_logits(std::span<const std::size_t> seq, const Route& route,
                             const SupernetParams& params);

/// Marginal of route probabilities over the candidates of one dimension.
Tensor marginalize(const Tensor& route_probs, Dimension dim, const RoutingSpace& space);

}  // namespace canet
