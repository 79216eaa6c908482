// SPDX-License-Identifier: Apache-2.0
//
// canet: generate data, train, evaluate and inspect routing.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "canet/data.hpp"
#include "canet/errors.hpp"
#include "canet/eval.hpp"
#include "canet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw canet::IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw canet::ParseError(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw canet::IoError("cannot write " + path.string());
  out << text;
  if (!out) throw canet::IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path prepare_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw canet::IoError("cannot create output directory " + dir);
  return fs::path(dir);
}

template <typename T>
void take(const json& j, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw canet::ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string config;
  std::string out = "data";
  std::optional<std::size_t> users, items, length, cluster_size;
  std::optional<double> zipf, easy_fraction, follow_prob;
  std::optional<std::uint64_t> seed;
};

int cmd_gen_data(const GenArgs& a) {
  canet::SyntheticConfig cfg;
  if (!a.config.empty()) {
    const json j = read_json_file(a.config);
    take(j, "users", cfg.users);
    take(j, "items", cfg.items);
    take(j, "length", cfg.length);
    take(j, "zipf_exponent", cfg.zipf_exponent);
    take(j, "easy_fraction", cfg.easy_fraction);
    take(j, "follow_prob", cfg.follow_prob);
    take(j, "cluster_size", cfg.cluster_size);
    take(j, "seed", cfg.seed);
  }
  if (a.users) cfg.users = *a.users;
  if (a.items) cfg.items = *a.items;
  if (a.length) cfg.length = *a.length;
  if (a.zipf) cfg.zipf_exponent = *a.zipf;
  if (a.easy_fraction) cfg.easy_fraction = *a.easy_fraction;
  if (a.follow_prob) cfg.follow_prob = *a.follow_prob;
  if (a.cluster_size) cfg.cluster_size = *a.cluster_size;
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();

  const canet::Dataset ds = canet::generate_synthetic(cfg);
  const fs::path out = prepare_out_dir(a.out);
  canet::write_sequences(out / "sequences.tsv", ds);
  canet::write_user_classes(out / "user_classes.tsv", ds);
  write_json(out / "stats.json", ds.stats().to_json());
  write_json(out / "config.json", {{"command", "gen-data"},
                                   {"users", cfg.users},
                                   {"items", cfg.items},
                                   {"length", cfg.length},
                                   {"zipf_exponent", cfg.zipf_exponent},
                                   {"easy_fraction", cfg.easy_fraction},
                                   {"head_share", cfg.head_share},
                                   {"follow_prob", cfg.follow_prob},
                                   {"cluster_size", cfg.cluster_size},
                                   {"seed", cfg.seed}});
  std::cout << "wrote " << ds.sequences.size() << " sequences over " << ds.num_items << " items to "
            << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct DataArgs {
  std::string data;
  std::optional<std::size_t> min_item_users;
};

canet::Split load_split(const std::string& path, std::size_t min_item_users, std::size_t max_len) {
  canet::LoadOptions opts;
  opts.min_item_users = min_item_users;
  opts.max_len = max_len;
  canet::LoadReport report;
  const canet::Dataset ds = canet::load_sequences(path, opts, &report);
  canet::Split split = canet::leave_one_out_split(ds);
  if (report.dropped_items || report.dropped_sequences || split.excluded) {
    std::cerr << "note: dropped " << report.dropped_items << " cold items, " << report.dropped_interactions
              << " interactions, " << report.dropped_sequences << " sequences; " << split.excluded
              << " sequences too short\n";
  }
  return split;
}

struct TrainArgs {
  DataArgs data;
  std::string out = "run";
  std::string config;
  std::string resume;
  std::string ablation;
  std::string static_route;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size, recall_k, max_len;
  std::optional<double> lr, lambda_uniform, lambda_guide, beta, temperature;
  bool quiet = false;
  bool raw_gate = false;
};

canet::Route parse_route(const std::string& text, const canet::RoutingSpace& space) {
  std::size_t e = 0, h = 0, d = 0;
  char c1 = 0, c2 = 0;
  std::istringstream in(text);
  if (!(in >> e >> c1 >> h >> c2 >> d) || c1 != ',' || c2 != ',' || !in.eof()) {
    throw canet::ConfigError("route must look like emb,hidden,depth; got '" + text + "'");
  }
  return space.find(e, h, d);
}

void print_epoch(const canet::EpochRecord& r, std::size_t total) {
  std::printf("epoch %zu/%zu  sr=%.4f uni=%.4f guide=%.4f total=%.4f  valid_ndcg@10=%.4f  "
              "H(train routes)=%.3f H(valid routes)=%.3f  easy=%.2f  flops=%.0f\n",
              r.epoch, total, r.sr, r.uniform, r.guide, r.total, r.valid_ndcg10, r.sampled_route_entropy,
              r.route_entropy, r.easy_fraction, r.train_avg_flops);
  std::fflush(stdout);
}

int cmd_train(const TrainArgs& a) {
  const fs::path out = prepare_out_dir(a.out);
  canet::Split split;
  std::optional<canet::Trainer> trainer;
  if (!a.resume.empty()) {
    canet::CheckpointData ck = canet::read_checkpoint(a.resume);
    if (a.epochs) ck.meta["train_config"]["epochs"] = *a.epochs;
    const json run = ck.meta.value("run", json::object());
    const std::string data = a.data.data.empty() ? run.value("data", std::string()) : a.data.data;
    if (data.empty()) throw canet::ConfigError("--data is required to resume");
    split = load_split(data, a.data.min_item_users.value_or(run.value("min_item_users", std::size_t{5})),
                       run.value("max_len", std::size_t{0}));
    trainer.emplace(canet::Trainer::resume(split, ck));
  } else {
    if (a.data.data.empty()) throw canet::ConfigError("--data is required");
    canet::TrainConfig cfg;
    if (!a.config.empty()) cfg = canet::TrainConfig::from_json(read_json_file(a.config));
    if (a.seed) cfg.seed = *a.seed;
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.batch_size) cfg.batch_size = *a.batch_size;
    if (a.lr) cfg.lr = *a.lr;
    if (a.lambda_uniform) cfg.loss.lambda_uniform = *a.lambda_uniform;
    if (a.lambda_guide) cfg.loss.lambda_guide = *a.lambda_guide;
    if (a.recall_k) cfg.loss.recall_k = *a.recall_k;
    if (a.beta) cfg.loss.beta = *a.beta;
    if (a.temperature) cfg.temperature = *a.temperature;
    if (a.raw_gate) cfg.center_gate = false;
    if (!a.ablation.empty()) {
      if (a.ablation == "u") {
        cfg.disable_uniform = true;
      } else if (a.ablation == "g") {
        cfg.disable_guide = true;
      } else if (a.ablation == "ug") {
        cfg.disable_uniform = cfg.disable_guide = true;
      } else {
        throw canet::ConfigError("--ablation must be one of u, g, ug");
      }
      // The ablations drop the terms outright.
      if (cfg.disable_uniform) cfg.loss.lambda_uniform = 0.0;
      if (cfg.disable_guide) cfg.loss.lambda_guide = 0.0;
    }
    if (!a.static_route.empty()) cfg.static_route = parse_route(a.static_route, cfg.space);
    cfg.validate();
    const std::size_t min_users = a.data.min_item_users.value_or(5);
    const std::size_t max_len = a.max_len.value_or(0);
    split = load_split(a.data.data, min_users, max_len);
    trainer.emplace(split, cfg);
    trainer->set_run_info({{"data", fs::absolute(a.data.data).string()},
                           {"min_item_users", min_users},
                           {"max_len", max_len}});
  }

  const canet::TrainConfig& cfg = trainer->config();
  write_json(out / "config.json", {{"command", "train"},
                                   {"train", cfg.to_json()},
                                   {"run", trainer->run_info()},
                                   {"model", trainer->model().config.to_json()}});
  while (trainer->epoch() < cfg.epochs) {
    const canet::EpochRecord& r = trainer->run_epoch();
    if (!a.quiet) print_epoch(r, cfg.epochs);
  }
  trainer->save(out / "model.ckpt");
  write_json(out / "history.json", canet::history_to_json(trainer->history()));
  std::cout << "best epoch " << trainer->best_epoch() << "; checkpoint " << (out / "model.ckpt").string()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  DataArgs data;
  std::string checkpoint;
  std::string out = "eval";
  std::string config;
  bool tail_split = false;
  bool last = false;
};

struct LoadedModel {
  canet::CanetModel model;
  canet::Split split;
  canet::Dataset dataset;
};

LoadedModel load_model(const EvalArgs& a) {
  const canet::CheckpointData ck = canet::read_checkpoint(a.checkpoint);
  json run = ck.meta.value("run", json::object());
  if (!a.config.empty()) run.update(read_json_file(a.config));
  const std::string data = a.data.data.empty() ? run.value("data", std::string()) : a.data.data;
  if (data.empty()) throw canet::ConfigError("--data is required");
  canet::LoadOptions opts;
  opts.min_item_users = a.data.min_item_users.value_or(run.value("min_item_users", std::size_t{5}));
  opts.max_len = run.value("max_len", std::size_t{0});

  LoadedModel lm;
  lm.dataset = canet::load_sequences(data, opts);
  lm.split = canet::leave_one_out_split(lm.dataset);
  canet::Trainer trainer = canet::Trainer::resume(lm.split, ck);
  lm.model = a.last ? trainer.model().clone() : trainer.best_model();
  return lm;
}

int cmd_eval(const EvalArgs& a) {
  const LoadedModel lm = load_model(a);
  const fs::path out = prepare_out_dir(a.out);
  const canet::HeadTailPartition partition = canet::head_tail_partition(lm.dataset);
  const canet::EvalResult result =
      canet::evaluate(lm.model, lm.split.test, a.tail_split ? &partition : nullptr);
  json metrics = result.metrics.to_json();
  metrics["split"] = "test";
  write_json(out / "metrics.json", metrics);
  write_json(out / "flops.json", result.flops.to_json());
  std::vector<std::uint8_t> tail_mask;
  for (const auto& ex : lm.split.test) tail_mask.push_back(partition.tail_user(ex.user) ? 1 : 0);
  const auto rows = canet::routing_histogram(lm.model.config.space, result.route_of_example, tail_mask);
  write_text(out / "routing.csv", canet::histogram_csv(rows));
  std::printf("test users=%zu  ndcg@10=%.4f ndcg@20=%.4f recall@10=%.4f recall@20=%.4f\n",
              result.metrics.overall.users, result.metrics.overall.ndcg10, result.metrics.overall.ndcg20,
              result.metrics.overall.recall10, result.metrics.overall.recall20);
  std::printf("flops avg=%.0f static=%llu savings=%.4f (1 - avg/static)\n", result.flops.average,
              static_cast<unsigned long long>(result.flops.static_flops), result.flops.savings);
  return 0;
}

int cmd_route_stats(const EvalArgs& a) {
  const LoadedModel lm = load_model(a);
  const fs::path out = prepare_out_dir(a.out);
  const canet::HeadTailPartition partition = canet::head_tail_partition(lm.dataset);
  const auto rows = canet::routing_histogram(lm.model, lm.split.test, &partition);
  const std::string csv = canet::histogram_csv(rows);
  write_text(out / "routing.csv", csv);
  std::cout << csv;
  return 0;
}

void add_data_flags(CLI::App* cmd, DataArgs& d) {
  cmd->add_option("--data", d.data, "Sequence file (user_id<TAB>item,item,...)");
  cmd->add_option("--min-item-users", d.min_item_users, "Drop items seen by fewer users (default 5)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive-depth/width sequential recommender"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic easy/hard interaction dataset");
  g->add_option("--config", gen.config, "JSON config file");
  g->add_option("--out", gen.out, "Output directory")->capture_default_str();
  g->add_option("--users", gen.users, "Number of users");
  g->add_option("--items", gen.items, "Number of items");
  g->add_option("--len", gen.length, "Sequence length (>= 3)");
  g->add_option("--zipf", gen.zipf, "Zipf exponent");
  g->add_option("--easy-fraction", gen.easy_fraction, "Fraction of easy users");
  g->add_option("--follow-prob", gen.follow_prob, "Chain-following probability of easy users");
  g->add_option("--cluster-size", gen.cluster_size, "Tail cluster size of hard users");
  g->add_option("--seed", gen.seed, "Random seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and write model.ckpt and history.json");
  add_data_flags(t, tr.data);
  t->add_option("--config", tr.config, "JSON training config; flags override it");
  t->add_option("--out", tr.out, "Output directory")->capture_default_str();
  t->add_option("--seed", tr.seed, "Random seed");
  t->add_option("--epochs", tr.epochs, "Training epochs");
  t->add_option("--batch-size", tr.batch_size, "Batch size");
  t->add_option("--lr", tr.lr, "Adam learning rate");
  t->add_option("--lambda-uniform", tr.lambda_uniform, "Weight of the uniform routing loss");
  t->add_option("--lambda-guide", tr.lambda_guide, "Weight of the guide loss");
  t->add_option("--recall-k", tr.recall_k, "Top-k cutoff that labels a user easy");
  t->add_option("--beta", tr.beta, "Decay of the guide targets");
  t->add_option("--temperature", tr.temperature, "Gumbel-softmax temperature");
  t->add_option("--max-len", tr.max_len, "Sequence length after padding (0 = longest)");
  t->add_option("--ablation", tr.ablation, "Drop auxiliary losses: u, g or ug");
  t->add_option("--static-route", tr.static_route, "Fixed route emb,hidden,depth (bypasses the router)");
  t->add_option("--resume", tr.resume, "Continue from a checkpoint");
  t->add_flag("--raw-gate", tr.raw_gate, "Do not center the router's task-loss signal");
  t->add_flag("--quiet", tr.quiet, "No per-epoch output");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_data_flags(e, ev.data);
  e->add_option("--checkpoint", ev.checkpoint, "model.ckpt from train")->required();
  e->add_option("--out", ev.out, "Output directory")->capture_default_str();
  e->add_option("--config", ev.config, "JSON overrides for data loading");
  e->add_flag("--tail-split", ev.tail_split, "Break metrics down by head/tail users");
  e->add_flag("--last", ev.last, "Use the final parameters instead of the best-validation ones");

  EvalArgs rs;
  auto* r = app.add_subcommand("route-stats", "Write per-dimension routing usage (routing.csv)");
  add_data_flags(r, rs.data);
  r->add_option("--checkpoint", rs.checkpoint, "model.ckpt from train")->required();
  r->add_option("--out", rs.out, "Output directory")->capture_default_str();
  r->add_option("--config", rs.config, "JSON overrides for data loading");
  r->add_flag("--last", rs.last, "Use the final parameters instead of the best-validation ones");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::string msg = err.what();
    for (char& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::cerr << "error[usage]: " << msg << "\n";
    return 2;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    if (r->parsed()) return cmd_route_stats(rs);
  } catch (const canet::Error& err) {
    std::cerr << "error[" << err.code() << "]: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error[internal]: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
