// SPDX-License-Identifier: Apache-2.0
#include "canet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "canet/errors.hpp"

namespace canet {

namespace {

// Inverse-CDF sampler over a contiguous id range with weights rank^-s,
// where rank is the id itself (id 1 is the most popular item overall).
class ZipfTable {
 public:
  ZipfTable(std::size_t first_id, std::size_t last_id, double exponent) : first_(first_id) {
    cdf_.reserve(last_id - first_id + 1);
    double acc = 0.0;
    for (std::size_t id = first_id; id <= last_id; ++id) {
      acc += std::pow(static_cast<double>(id), -exponent);
      cdf_.push_back(acc);
    }
    for (double& c : cdf_) c /= acc;
    cdf_.back() = 1.0;
  }

  std::size_t sample(Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return first_ + static_cast<std::size_t>(std::min<std::ptrdiff_t>(
                        it - cdf_.begin(), static_cast<std::ptrdiff_t>(cdf_.size()) - 1));
  }

 private:
  std::size_t first_;
  std::vector<double> cdf_;
};

std::vector<std::size_t> left_pad(std::span<const std::size_t> items, std::size_t len) {
  std::vector<std::size_t> out(len, 0);
  std::copy(items.begin(), items.end(), out.begin() + static_cast<std::ptrdiff_t>(len - items.size()));
  return out;
}

struct RawSequence {
  std::size_t user_id;
  std::vector<std::size_t> items;
};

Dataset build_dataset(std::vector<RawSequence> raw, std::size_t min_item_users,
                      std::size_t max_len, LoadReport* report) {
  LoadReport local;
  LoadReport& rep = report ? *report : local;

  // Filter to a fixed point: dropping short sequences can push more items
  // under the threshold.
  std::size_t original_items = 0;
  {
    std::vector<std::size_t> seen;
    for (const auto& s : raw) seen.insert(seen.end(), s.items.begin(), s.items.end());
    std::sort(seen.begin(), seen.end());
    original_items = static_cast<std::size_t>(std::unique(seen.begin(), seen.end()) - seen.begin());
  }
  bool changed = true;
  while (changed) {
    changed = false;
    std::map<std::size_t, std::size_t> users_per_item;
    for (const auto& s : raw) {
      std::vector<std::size_t> distinct = s.items;
      std::sort(distinct.begin(), distinct.end());
      distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
      for (std::size_t id : distinct) ++users_per_item[id];
    }
    for (auto& s : raw) {
      const std::size_t before = s.items.size();
      std::erase_if(s.items, [&](std::size_t id) { return users_per_item[id] < min_item_users; });
      if (s.items.size() != before) {
        rep.dropped_interactions += before - s.items.size();
        changed = true;
      }
    }
    const std::size_t before = raw.size();
    std::erase_if(raw, [&](const RawSequence& s) {
      if (s.items.size() < 3) {
        rep.dropped_interactions += s.items.size();
        return true;
      }
      return false;
    });
    if (raw.size() != before) {
      rep.dropped_sequences += before - raw.size();
      changed = true;
    }
  }
  if (raw.empty()) throw DataError("dataset is empty after filtering");

  std::vector<std::size_t> ids;
  for (const auto& s : raw) ids.insert(ids.end(), s.items.begin(), s.items.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  rep.dropped_items = original_items - ids.size();

  Dataset ds;
  ds.num_items = ids.size();
  ds.original_ids.assign(1, 0);
  ds.original_ids.insert(ds.original_ids.end(), ids.begin(), ids.end());
  std::size_t longest = 0;
  for (const auto& s : raw) longest = std::max(longest, s.items.size());
  ds.max_len = max_len ? max_len : longest;
  if (ds.max_len < 3) throw ConfigError("max_len must be at least 3");
  for (auto& s : raw) {
    for (std::size_t& id : s.items) {
      id = static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin()) + 1;
    }
    if (s.items.size() > ds.max_len) {
      s.items.erase(s.items.begin(), s.items.end() - static_cast<std::ptrdiff_t>(ds.max_len));
      ++rep.truncated_sequences;
    }
    ds.sequences.push_back({s.user_id, left_pad(s.items, ds.max_len)});
  }
  return ds;
}

}  // namespace

std::size_t InteractionSequence::length() const {
  return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [](std::size_t id) { return id != 0; }));
}

std::vector<std::size_t> InteractionSequence::active_items() const {
  std::vector<std::size_t> out;
  out.reserve(items.size());
  for (std::size_t id : items) {
    if (id != 0) out.push_back(id);
  }
  return out;
}

nlohmann::json DatasetStats::to_json() const {
  return {{"actions", actions}, {"sequences", sequences}, {"items", items}, {"length", length}};
}

DatasetStats Dataset::stats() const {
  DatasetStats s;
  s.sequences = sequences.size();
  s.items = num_items;
  s.length = max_len;
  for (const auto& seq : sequences) s.actions += seq.length();
  return s;
}

void SyntheticConfig::validate() const {
  if (users == 0) throw ConfigError("synthetic data needs at least one user");
  if (length < 3) throw ConfigError("sequence length must be at least 3, got " + std::to_string(length));
  if (items < 5) throw ConfigError("synthetic data needs at least 5 items");
  if (!(zipf_exponent > 0.0)) throw ConfigError("zipf exponent must be positive");
  if (easy_fraction < 0.0 || easy_fraction > 1.0) throw ConfigError("easy fraction must be in [0, 1]");
  if (head_share <= 0.0 || head_share >= 1.0) throw ConfigError("head share must be in (0, 1)");
  if (follow_prob < 0.0 || follow_prob > 1.0) throw ConfigError("follow probability must be in [0, 1]");
  if (cluster_size == 0) throw ConfigError("cluster size must be positive");
  const std::size_t head = head_items();
  if (head < 2 || head >= items) throw ConfigError("head share leaves no head or no tail items");
}

std::size_t SyntheticConfig::head_items() const {
  return static_cast<std::size_t>(std::ceil(head_share * static_cast<double>(items) - 1e-9));
}

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  Rng rng(cfg.seed);
  return generate_synthetic(cfg, rng);
}

Dataset generate_synthetic(const SyntheticConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t head = cfg.head_items();
  const std::size_t tail = cfg.items - head;
  const ZipfTable head_zipf(1, head, cfg.zipf_exponent);
  const ZipfTable tail_zipf(head + 1, cfg.items, cfg.zipf_exponent);

  // Successor chain: one random cycle through the head items.
  std::vector<std::size_t> cycle(head);
  std::iota(cycle.begin(), cycle.end(), 1);
  rng.shuffle(std::span<std::size_t>(cycle));
  std::vector<std::size_t> successor(head + 1, 0);
  for (std::size_t i = 0; i < head; ++i) successor[cycle[i]] = cycle[(i + 1) % head];

  // Tail clusters over a random permutation of the tail ids.
  std::vector<std::size_t> tail_order(tail);
  std::iota(tail_order.begin(), tail_order.end(), head + 1);
  rng.shuffle(std::span<std::size_t>(tail_order));
  const std::size_t clusters = (tail + cfg.cluster_size - 1) / cfg.cluster_size;

  const auto easy_count = static_cast<std::size_t>(std::llround(cfg.easy_fraction * static_cast<double>(cfg.users)));
  std::vector<UserClass> classes(cfg.users, UserClass::kHard);
  std::fill_n(classes.begin(), easy_count, UserClass::kEasy);
  rng.shuffle(std::span<UserClass>(classes));

  Dataset ds;
  ds.num_items = cfg.items;
  ds.max_len = cfg.length;
  ds.user_class = classes;
  ds.sequences.reserve(cfg.users);
  for (std::size_t u = 0; u < cfg.users; ++u) {
    std::vector<std::size_t> items(cfg.length);
    if (classes[u] == UserClass::kEasy) {
      items[0] = head_zipf.sample(rng);
      for (std::size_t t = 1; t < cfg.length; ++t) {
        items[t] = rng.bernoulli(cfg.follow_prob) ? successor[items[t - 1]] : head_zipf.sample(rng);
      }
    } else {
      const std::size_t cluster = rng.uniform_index(clusters);
      const std::size_t begin = cluster * cfg.cluster_size;
      const std::size_t size = std::min(cfg.cluster_size, tail - begin);
      bool touched_tail = false;
      for (std::size_t t = 0; t < cfg.length; ++t) {
        const double r = rng.uniform();
        if (r < 0.5) {
          items[t] = tail_order[begin + rng.uniform_index(size)];
        } else if (r < 0.8) {
          items[t] = tail_zipf.sample(rng);
        } else {
          items[t] = head_zipf.sample(rng);
        }
        touched_tail = touched_tail || items[t] > head;
      }
      if (!touched_tail) items[cfg.length - 1] = tail_order[begin + rng.uniform_index(size)];
    }
    ds.sequences.push_back({u + 1, std::move(items)});
  }
  return ds;
}

Dataset parse_sequences(const std::string& text, const LoadOptions& options, LoadReport* report) {
  std::vector<RawSequence> raw;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto parse_int = [&](std::string_view token, const char* what) {
    std::size_t value = 0;
    const auto* end = token.data() + token.size();
    const auto [ptr, ec] = std::from_chars(token.data(), end, value);
    if (ec != std::errc() || ptr != end || token.empty()) {
      throw ParseError("line " + std::to_string(line_no) + ": invalid " + what + " '" +
                       std::string(token) + "'");
    }
    return value;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ParseError("line " + std::to_string(line_no) + ": expected user_id<TAB>item list");
    }
    RawSequence seq;
    seq.user_id = parse_int(std::string_view(line).substr(0, tab), "user id");
    std::string_view rest = std::string_view(line).substr(tab + 1);
    while (true) {
      const auto comma = rest.find(',');
      const std::size_t id = parse_int(rest.substr(0, comma), "item id");
      if (id == 0) throw ParseError("line " + std::to_string(line_no) + ": item id 0 is reserved for padding");
      seq.items.push_back(id);
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    raw.push_back(std::move(seq));
  }
  if (report) report->lines = line_no;
  if (raw.empty()) throw DataError("no sequences in input");
  return build_dataset(std::move(raw), options.min_item_users, options.max_len, report);
}

Dataset load_sequences(const std::filesystem::path& path, const LoadOptions& options, LoadReport* report) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_sequences(buffer.str(), options, report);
}

Dataset filter_dataset(const Dataset& ds, std::size_t min_item_users, LoadReport* report) {
  std::vector<RawSequence> raw;
  raw.reserve(ds.sequences.size());
  for (const auto& s : ds.sequences) {
    RawSequence r{s.user_id, s.active_items()};
    if (!ds.original_ids.empty()) {
      for (std::size_t& id : r.items) id = ds.original_ids.at(id);
    }
    raw.push_back(std::move(r));
  }
  return build_dataset(std::move(raw), min_item_users, ds.max_len, report);
}

std::string format_sequences(const Dataset& ds) {
  std::string out = "# user_id\titem_ids\n";
  for (const auto& s : ds.sequences) {
    out += std::to_string(s.user_id);
    out += '\t';
    bool first = true;
    for (std::size_t id : s.items) {
      if (id == 0) continue;
      if (!first) out += ',';
      out += std::to_string(ds.original_ids.empty() ? id : ds.original_ids[id]);
      first = false;
    }
    out += '\n';
  }
  return out;
}

void write_sequences(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << format_sequences(ds);
  if (!out) throw IoError("failed writing " + path.string());
}

void write_user_classes(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# user_id\tclass\n";
  for (std::size_t i = 0; i < ds.user_class.size(); ++i) {
    out << ds.sequences[i].user_id << '\t'
        << (ds.user_class[i] == UserClass::kEasy ? "easy" : "hard") << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Split leave_one_out_split(const Dataset& ds) {
  Split split;
  split.num_items = ds.num_items;
  split.max_len = ds.max_len;
  for (std::size_t u = 0; u < ds.sequences.size(); ++u) {
    const std::vector<std::size_t> items = ds.sequences[u].active_items();
    const std::size_t n = items.size();
    if (n < 3) {
      ++split.excluded;
      continue;
    }
    const std::span<const std::size_t> all(items);
    TrainExample train;
    train.user = u;
    train.input = left_pad(all.first(n - 2), ds.max_len);
    train.targets = left_pad(all.subspan(1, n - 2), ds.max_len);
    split.train.push_back(std::move(train));
    split.valid.push_back({u, left_pad(all.first(n - 2), ds.max_len), items[n - 2]});
    split.test.push_back({u, left_pad(all.first(n - 1), ds.max_len), items[n - 1]});
  }
  return split;
}

HeadTailPartition head_tail_partition(const Dataset& ds, double head_share) {
  if (ds.sequences.empty() || ds.num_items == 0) throw DataError("head_tail_partition: empty dataset");
  std::vector<std::size_t> counts(ds.num_items + 1, 0);
  for (const auto& s : ds.sequences) {
    for (std::size_t id : s.items) {
      if (id != 0) ++counts.at(id);
    }
  }
  std::vector<std::size_t> order(ds.num_items);
  std::iota(order.begin(), order.end(), 1);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  const auto head_n = static_cast<std::size_t>(std::ceil(head_share * static_cast<double>(ds.num_items) - 1e-9));

  HeadTailPartition p;
  p.is_head_item.assign(ds.num_items + 1, 0);
  for (std::size_t i = 0; i < head_n && i < order.size(); ++i) p.is_head_item[order[i]] = 1;
  for (std::size_t id = 1; id <= ds.num_items; ++id) {
    (p.is_head_item[id] ? p.head_items : p.tail_items).push_back(id);
  }
  p.is_tail_user.assign(ds.sequences.size(), 0);
  for (std::size_t u = 0; u < ds.sequences.size(); ++u) {
    const auto& items = ds.sequences[u].items;
    const bool tail = std::any_of(items.begin(), items.end(),
                                  [&](std::size_t id) { return id != 0 && !p.is_head_item[id]; });
    p.is_tail_user[u] = tail;
    (tail ? p.tail_users : p.head_users).push_back(u);
  }
  return p;
}

}  // namespace canet
