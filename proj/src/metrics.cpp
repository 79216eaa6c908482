// SPDX-License-Identifier: Apache-2.0
#include "canet/metrics.hpp"

#include <cmath>
#include <string>

#include "canet/errors.hpp"

namespace canet {

std::size_t rank_target(std::span<const double> logits, std::size_t target) {
  if (target == 0) throw DataError("rank_target: target is the padding id");
  if (target >= logits.size()) {
    throw DataError("rank_target: target " + std::to_string(target) + " outside " +
                    std::to_string(logits.size() - 1) + " items");
  }
  const double score = logits[target];
  std::size_t ahead = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (i != target && logits[i] >= score) ++ahead;
  }
  return ahead + 1;
}

double ndcg_at_n(std::optional<std::size_t> rank, std::size_t cutoff) {
  if (!rank || *rank == 0 || *rank > cutoff) return 0.0;
  return 1.0 / std::log2(static_cast<double>(*rank) + 1.0);
}

double recall_at_n(std::optional<std::size_t> rank, std::size_t cutoff) {
  return (rank && *rank >= 1 && *rank <= cutoff) ? 1.0 : 0.0;
}

}  // namespace canet
