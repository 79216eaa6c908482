// SPDX-License-Identifier: Apache-2.0
//
// Interaction sequences: synthetic generation, file ingestion, leave-one-out
// splits and the popularity-based head/tail partition.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "canet/rng.hpp"

namespace canet {

/// One user's history, left-padded with 0 to the dataset length.
struct InteractionSequence {
  std::size_t user_id = 0;
  std::vector<std::size_t> items;

  std::size_t length() const;
  /// Items without padding, oldest first.
  std::vector<std::size_t> active_items() const;
};

enum class UserClass : std::uint8_t { kEasy = 0, kHard = 1 };

struct DatasetStats {
  std::size_t actions = 0;
  std::size_t sequences = 0;
  std::size_t items = 0;
  std::size_t length = 0;

  nlohmann::json to_json() const;
  friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

struct Dataset {
  std::vector<InteractionSequence> sequences;
  std::size_t num_items = 0;
  std::size_t max_len = 0;
  /// Ground-truth generator class per sequence; empty for loaded data.
  std::vector<UserClass> user_class;
  /// Original id of every dense item id (index 0 is padding). Empty when the
  /// ids were never remapped.
  std::vector<std::size_t> original_ids;

  DatasetStats stats() const;
};

struct SyntheticConfig {
  std::size_t users = 1000;
  std::size_t items = 1000;
  std::size_t length = 20;
  double zipf_exponent = 1.1;
  double easy_fraction = 0.5;
  double head_share = 0.2;
  /// Probability an easy user follows the fixed successor of its last item.
  double follow_prob = 0.9;
  /// Tail items are grouped into clusters of this size; each hard user
  /// prefers one cluster.
  std::size_t cluster_size = 20;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t head_items() const;
};

/// Easy users walk a low-entropy successor chain over the head items; hard
/// users mix draws from a preferred tail cluster, the Zipf tail and the Zipf
/// head, and always touch at least one tail item. Items are ranked by
/// popularity: id 1 is the most popular and ids 1..ceil(head_share*items)
/// form the head.
Dataset generate_synthetic(const SyntheticConfig& cfg, Rng& rng);
Dataset generate_synthetic(const SyntheticConfig& cfg);

struct LoadOptions {
  /// Items seen by fewer distinct users are removed.
  std::size_t min_item_users = 5;
  /// 0 uses the longest sequence; longer sequences keep their latest items.
  std::size_t max_len = 0;
};

struct LoadReport {
  std::size_t lines = 0;
  std::size_t dropped_items = 0;
  std::size_t dropped_interactions = 0;
  std::size_t dropped_sequences = 0;
  std::size_t truncated_sequences = 0;
};

/// Reads `user_id<TAB>item,item,...` lines ('#' lines ignored), filters cold
/// items to a fixed point, and re-indexes surviving items densely from 1 in
/// ascending original id order.
Dataset load_sequences(const std::filesystem::path& path, const LoadOptions& options = {},
                       LoadReport* report = nullptr);
Dataset parse_sequences(const std::string& text, const LoadOptions& options = {},
                        LoadReport* report = nullptr);

/// Applies the cold-item filter and re-indexing to an in-memory dataset.
Dataset filter_dataset(const Dataset& ds, std::size_t min_item_users, LoadReport* report = nullptr);

void write_sequences(const std::filesystem::path& path, const Dataset& ds);
std::string format_sequences(const Dataset& ds);

struct TrainExample {
  std::size_t user = 0;                 // index into Dataset::sequences
  std::vector<std::size_t> input;       // left-padded to max_len
  std::vector<std::size_t> targets;     // next item per position, 0 at padding
};

struct EvalExample {
  std::size_t user = 0;
  std::vector<std::size_t> input;
  std::size_t target = 0;
};

struct Split {
  std::vector<TrainExample> train;
  std::vector<EvalExample> valid;
  std::vector<EvalExample> test;
  std::size_t excluded = 0;
  std::size_t num_items = 0;
  std::size_t max_len = 0;
};

/// Last item -> test target, second to last -> validation target; training
/// predicts every next item of the sequence without its last item.
Split leave_one_out_split(const Dataset& ds);

struct HeadTailPartition {
  std::vector<std::uint8_t> is_head_item;  // indexed by item id
  std::vector<std::size_t> head_items;
  std::vector<std::size_t> tail_items;
  std::vector<std::size_t> head_users;  // indices into Dataset::sequences
  std::vector<std::size_t> tail_users;
  std::vector<std::uint8_t> is_tail_user;

  bool tail_user(std::size_t user) const { return is_tail_user.at(user) != 0; }
};

/// Top ceil(head_share * |I|) items by interaction count (ties -> smaller
/// id) are head items; users with any tail interaction are tail users.
HeadTailPartition head_tail_partition(const Dataset& ds, double head_share = 0.2);

void write_user_classes(const std::filesystem::path& path, const Dataset& ds);

}  // namespace canet
