// SPDX-License-Identifier: Apache-2.0
//
// Single-target ranking metrics over the whole item catalogue.
#pragma once

#include <cstddef>
#include <optional>
#include <span>

namespace canet {

/// 1-based rank of `target` among items 1..n of `logits` (index 0 is the
/// padding id and never competes). Ties count against the target: every
/// other item scoring >= the target is ranked ahead of it.
std::size_t rank_target(std::span<const double> logits, std::size_t target);

/// 1 / log2(rank + 1) when rank <= cutoff, else 0. An absent rank scores 0.
double ndcg_at_n(std::optional<std::size_t> rank, std::size_t cutoff);

/// 1 when rank <= cutoff, else 0 (hit rate for a single held-out item).
double recall_at_n(std::optional<std::size_t> rank, std::size_t cutoff);

}  // namespace canet
