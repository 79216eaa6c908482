// SPDX-License-Identifier: Apache-2.0
//
// End-to-end optimization of router and supernet, with lazy Adam,
// best-validation snapshots and resumable checkpoints.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "canet/checkpoint.hpp"
#include "canet/data.hpp"
#include "canet/losses.hpp"
#include "canet/model.hpp"

namespace canet {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossConfig loss;
  RoutingSpace space = RoutingSpace::desk();
  std::uint64_t seed = 0;
  bool disable_uniform = false;
  bool disable_guide = false;
  /// When set, every sequence uses this route and the router is never run.
  std::optional<Route> static_route;
  double temperature = 1.0;
  std::size_t heads = 4;
  std::size_t router_width = kRouterWidth;
  /// Score the validation split after every epoch.
  bool validate_each_epoch = true;
  /// Subtract the batch-mean gate signal from each sequence's router
  /// gradient. Without it the raw gate keeps reinforcing whichever route was
  /// sampled and routing collapses onto one large route.
  bool center_gate = true;

  void validate() const;
  /// Loss weights after applying the ablation switches.
  LossConfig effective_loss() const;
  bool uses_router() const { return !static_route.has_value(); }

  nlohmann::json to_json() const;
  /// Keys present in `j` override the fields of `base`.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double sr = 0.0;
  double uniform = 0.0;
  double guide = 0.0;
  double total = 0.0;
  double valid_ndcg10 = 0.0;
  /// Entropy (nats) of the inference routes chosen on the validation inputs.
  double route_entropy = 0.0;
  /// Entropy (nats) of the Gumbel-sampled training routes of the epoch.
  double sampled_route_entropy = 0.0;
  double easy_fraction = 0.0;
  double train_avg_flops = 0.0;

  nlohmann::json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
};

nlohmann::json history_to_json(std::span<const EpochRecord> history);

/// Adam that only touches entries whose gradient is nonzero in the current
/// step, so parameter regions outside the routed slices stay untouched.
/// Bias correction uses the global step count.
class LazyAdam {
 public:
  LazyAdam() = default;
  LazyAdam(NamedTensors params, double lr, double beta1, double beta2, double eps);

  void step();
  void zero_grad();

  std::uint64_t steps() const noexcept { return step_; }
  const NamedTensors& params() const noexcept { return params_; }
  std::vector<StoredTensor> export_state() const;
  void import_state(const CheckpointData& data, std::uint64_t steps);

 private:
  NamedTensors params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::uint64_t step_ = 0;
};

/// Frozen per-sequence randomness and labels for one batch.
struct SequenceDraw {
  std::vector<double> noise;  // Gumbel noise, one per route
  bool easy = false;
};

/// Stop-gradient values of one batch: the gate references alpha_R per
/// sequence and the batch baseline. Pinning them lets the objective be
/// evaluated at perturbed parameters (finite differences).
struct GateFreeze {
  std::vector<double> alpha;
  double baseline = 0.0;
};

struct BatchStats {
  double sr = 0.0;
  double uniform = 0.0;
  double guide = 0.0;
  double total = 0.0;
  std::vector<std::size_t> routes;  // sampled route per sequence
  std::size_t easy = 0;
  GateFreeze gate;  // stop-gradient values used by this evaluation
};

/// Mean over the batch of sr + l1 * uniform + l2 * guide for fixed draws,
/// plus the zero-valued baseline term of the centered gate. Builds the
/// graph but does not run backward. With `freeze` the stop-gradient values
/// come from it instead of the current parameters.
Tensor batch_loss(const CanetModel& model, std::span<const TrainExample* const> batch,
                  std::span<const SequenceDraw> draws, const TrainConfig& cfg,
                  BatchStats* stats = nullptr, const GateFreeze* freeze = nullptr);

/// Labels the batch with the smallest route and draws fresh Gumbel noise.
std::vector<SequenceDraw> draw_batch(const CanetModel& model,
                                     std::span<const TrainExample* const> batch,
                                     const TrainConfig& cfg, Rng& rng);

/// One optimization step on a batch: draws, loss, backward, Adam update.
BatchStats train_step(CanetModel& model, LazyAdam& optimizer,
                      std::span<const TrainExample* const> batch, const TrainConfig& cfg, Rng& rng);

/// Holds a reference to `split`, which must outlive the trainer.
class Trainer {
 public:
  Trainer(const Split& split, const TrainConfig& cfg);

  /// Restores a trainer from a checkpoint written by `save`.
  static Trainer resume(const Split& split, const CheckpointData& checkpoint);

  /// Runs one epoch and appends its record to the history.
  const EpochRecord& run_epoch();
  /// Runs the remaining epochs up to `config().epochs`.
  void fit();

  CheckpointData checkpoint() const;
  void save(const std::filesystem::path& path) const;

  const TrainConfig& config() const noexcept { return cfg_; }
  const CanetModel& model() const noexcept { return model_; }
  CanetModel& model() noexcept { return model_; }
  /// Model with the best validation NDCG@10 so far (the current one when
  /// validation is disabled).
  CanetModel best_model() const;
  const std::vector<EpochRecord>& history() const noexcept { return history_; }
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t best_epoch() const noexcept { return best_epoch_; }
  std::uint64_t rng_state() const noexcept { return rng_.state(); }

  /// Free-form run metadata stored alongside the checkpoint.
  const nlohmann::json& run_info() const noexcept { return run_info_; }
  void set_run_info(nlohmann::json info) { run_info_ = std::move(info); }

 private:
  const Split* split_;
  TrainConfig cfg_;
  CanetModel model_;
  LazyAdam adam_;
  Rng rng_;
  std::vector<EpochRecord> history_;
  std::size_t epoch_ = 0;
  double best_score_ = -1.0;
  std::size_t best_epoch_ = 0;
  std::vector<StoredTensor> best_params_;
  nlohmann::json run_info_ = nlohmann::json::object();
};

struct FitResult {
  CanetModel best;
  CanetModel last;
  std::vector<EpochRecord> history;
};

FitResult fit(const Split& split, const TrainConfig& cfg);

ModelConfig model_config_for(const Split& split, const TrainConfig& cfg);

}  // namespace canet
