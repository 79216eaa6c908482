// SPDX-License-Identifier: Apache-2.0
#include "canet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "canet/errors.hpp"
#include "canet/eval.hpp"

namespace canet {

namespace {

constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kTrainStream = 2;

template <typename T>
void override_from(const nlohmann::json& j, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

std::vector<StoredTensor> store(const NamedTensors& params, const std::string& prefix) {
  std::vector<StoredTensor> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) {
    out.push_back({prefix + name, t.shape(), std::vector<double>(t.values().begin(), t.values().end())});
  }
  return out;
}

void restore(const NamedTensors& params, const CheckpointData& data, const std::string& prefix) {
  for (const auto& [name, t] : params) {
    const StoredTensor& s = data.tensor(prefix + name);
    if (s.shape != t.shape()) {
      throw FormatError("checkpoint tensor " + s.name + " has shape " + shape_string(s.shape) +
                        ", expected " + shape_string(t.shape()));
    }
    Tensor target = t;
    std::copy(s.values.begin(), s.values.end(), target.mutable_values().begin());
  }
}

void restore(const NamedTensors& params, const std::vector<StoredTensor>& stored) {
  CheckpointData tmp;
  tmp.tensors = stored;
  restore(params, tmp, "");
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("Adam moment coefficients must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  loss.validate();
  space.validate_heads(heads);
  if (router_width == 0 || router_width % heads != 0) {
    throw ConfigError("router width " + std::to_string(router_width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (static_route) space.validate(*static_route);
}

LossConfig TrainConfig::effective_loss() const {
  LossConfig l = loss;
  if (disable_uniform) l.lambda_uniform = 0.0;
  if (disable_guide) l.lambda_guide = 0.0;
  return l;
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = {{"epochs", epochs},
                      {"batch_size", batch_size},
                      {"lr", lr},
                      {"beta1", beta1},
                      {"beta2", beta2},
                      {"adam_eps", adam_eps},
                      {"lambda_uniform", loss.lambda_uniform},
                      {"lambda_guide", loss.lambda_guide},
                      {"recall_k", loss.recall_k},
                      {"beta", loss.beta},
                      {"eps_log", loss.eps_log},
                      {"space", space_to_json(space)},
                      {"seed", seed},
                      {"disable_uniform", disable_uniform},
                      {"disable_guide", disable_guide},
                      {"temperature", temperature},
                      {"heads", heads},
                      {"router_width", router_width},
                      {"validate_each_epoch", validate_each_epoch},
                      {"center_gate", center_gate}};
  if (static_route) {
    j["static_route"] = {static_route->emb, static_route->hidden, static_route->depth};
  } else {
    j["static_route"] = nullptr;
  }
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& base) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  TrainConfig c = base;
  override_from(j, "epochs", c.epochs);
  override_from(j, "batch_size", c.batch_size);
  override_from(j, "lr", c.lr);
  override_from(j, "beta1", c.beta1);
  override_from(j, "beta2", c.beta2);
  override_from(j, "adam_eps", c.adam_eps);
  override_from(j, "lambda_uniform", c.loss.lambda_uniform);
  override_from(j, "lambda_guide", c.loss.lambda_guide);
  override_from(j, "recall_k", c.loss.recall_k);
  override_from(j, "beta", c.loss.beta);
  override_from(j, "eps_log", c.loss.eps_log);
  override_from(j, "seed", c.seed);
  override_from(j, "disable_uniform", c.disable_uniform);
  override_from(j, "disable_guide", c.disable_guide);
  override_from(j, "temperature", c.temperature);
  override_from(j, "heads", c.heads);
  override_from(j, "router_width", c.router_width);
  override_from(j, "validate_each_epoch", c.validate_each_epoch);
  override_from(j, "center_gate", c.center_gate);
  if (j.contains("space")) c.space = space_from_json(j.at("space"));
  if (j.contains("static_route")) {
    const auto& r = j.at("static_route");
    if (r.is_null()) {
      c.static_route.reset();
    } else {
      std::vector<std::size_t> sizes;
      override_from(j, "static_route", sizes);
      if (sizes.size() != 3) throw ConfigError("static_route needs [emb, hidden, depth]");
      c.static_route = c.space.find(sizes[0], sizes[1], sizes[2]);
    }
  }
  return c;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},
          {"sr", sr},
          {"uniform", uniform},
          {"guide", guide},
          {"total", total},
          {"valid_ndcg10", valid_ndcg10},
          {"route_entropy", route_entropy},
          {"sampled_route_entropy", sampled_route_entropy},
          {"easy_fraction", easy_fraction},
          {"train_avg_flops", train_avg_flops}};
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
  EpochRecord r;
  try {
    r.epoch = j.at("epoch").get<std::size_t>();
    r.sr = j.at("sr").get<double>();
    r.uniform = j.at("uniform").get<double>();
    r.guide = j.at("guide").get<double>();
    r.total = j.at("total").get<double>();
    r.valid_ndcg10 = j.at("valid_ndcg10").get<double>();
    r.route_entropy = j.at("route_entropy").get<double>();
    r.sampled_route_entropy = j.at("sampled_route_entropy").get<double>();
    r.easy_fraction = j.at("easy_fraction").get<double>();
    r.train_avg_flops = j.at("train_avg_flops").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid history record: ") + e.what());
  }
  return r;
}

nlohmann::json history_to_json(std::span<const EpochRecord> history) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : history) j.push_back(r.to_json());
  return j;
}

// ---------------------------------------------------------------------------
// LazyAdam

LazyAdam::LazyAdam(NamedTensors params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void LazyAdam::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    const auto w = p.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (g[j] == 0.0) continue;
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

void LazyAdam::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

std::vector<StoredTensor> LazyAdam::export_state() const {
  std::vector<StoredTensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({"adam.m/" + params_[i].first, params_[i].second.shape(), m_[i]});
    out.push_back({"adam.v/" + params_[i].first, params_[i].second.shape(), v_[i]});
  }
  return out;
}

void LazyAdam::import_state(const CheckpointData& data, std::uint64_t steps) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const StoredTensor& m = data.tensor("adam.m/" + params_[i].first);
    const StoredTensor& v = data.tensor("adam.v/" + params_[i].first);
    if (m.values.size() != m_[i].size() || v.values.size() != v_[i].size()) {
      throw FormatError("optimizer state for " + params_[i].first + " has the wrong size");
    }
    m_[i] = m.values;
    v_[i] = v.values;
  }
  step_ = steps;
}

// ---------------------------------------------------------------------------
// Steps

std::vector<SequenceDraw> draw_batch(const CanetModel& model,
                                     std::span<const TrainExample* const> batch,
                                     const TrainConfig& cfg, Rng& rng) {
  std::vector<SequenceDraw> draws(batch.size());
  if (!cfg.uses_router()) return draws;
  if (cfg.effective_loss().lambda_guide > 0.0) {
    std::vector<std::vector<std::size_t>> inputs;
    std::vector<std::size_t> targets;
    inputs.reserve(batch.size());
    for (const TrainExample* ex : batch) {
      inputs.push_back(ex->input);
      targets.push_back(ex->targets.back());
    }
    const std::vector<bool> easy = label_users(inputs, targets, cfg.space.smallest(), model.backbone,
                                               cfg.loss.recall_k);
    for (std::size_t i = 0; i < batch.size(); ++i) draws[i].easy = easy[i];
  }
  for (auto& d : draws) d.noise = gumbel_noise(cfg.space.size(), rng);
  return draws;
}

Tensor batch_loss(const CanetModel& model, std::span<const TrainExample* const> batch,
                  std::span<const SequenceDraw> draws, const TrainConfig& cfg, BatchStats* stats,
                  const GateFreeze* freeze) {
  if (batch.empty()) throw UsageError("empty batch");
  if (draws.size() != batch.size()) {
    throw DimensionError(std::to_string(draws.size()) + " draws for a batch of " +
                         std::to_string(batch.size()));
  }
  if (freeze && freeze->alpha.size() != batch.size()) {
    throw DimensionError("gate freeze holds " + std::to_string(freeze->alpha.size()) +
                         " references for a batch of " + std::to_string(batch.size()));
  }
  const LossConfig loss_cfg = cfg.effective_loss();
  BatchStats local;
  BatchStats& st = stats ? *stats : local;
  st = BatchStats{};
  Tensor sum_total;
  std::vector<Tensor> alphas;
  double signal_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainExample& ex = *batch[i];
    Tensor sr, uni, guide;
    if (!cfg.uses_router()) {
      sr = sr_loss(supernet_forward(ex.input, *cfg.static_route, model.backbone), ex.targets);
      st.routes.push_back(cfg.static_route->index);
    } else {
      const Tensor probs = route_probabilities(ex.input, model.router);
      const RouteSample sample = sample_route(probs, cfg.temperature, draws[i].noise);
      const Route route = cfg.space.route(sample.hard);
      const Tensor logits = supernet_forward(ex.input, route, model.backbone);
      const Tensor alpha = select(sample.soft_weights, sample.hard);
      const double ref = freeze ? freeze->alpha[i] : alpha.item();
      sr = sr_loss(straight_through_gate(logits, sample.soft_weights, sample.hard, ref), ex.targets);
      uni = uniform_loss(probs, loss_cfg.eps_log);
      if (loss_cfg.lambda_guide > 0.0) {
        guide = guide_loss(probs, make_guide_labels(draws[i].easy, cfg.space, loss_cfg.beta), cfg.space,
                           loss_cfg.eps_log);
      }
      st.routes.push_back(sample.hard);
      st.easy += draws[i].easy ? 1 : 0;
      st.gate.alpha.push_back(ref);
      alphas.push_back(alpha);
      if (cfg.center_gate && !freeze) signal_sum += sr_scale_sensitivity(logits, ex.targets);
    }
    const Tensor total = total_loss(sr, uni, guide, loss_cfg);
    st.sr += sr.item();
    if (uni.defined()) st.uniform += uni.item();
    if (guide.defined()) st.guide += guide.item();
    st.total += total.item();
    sum_total = sum_total.defined() ? add(sum_total, total) : total;
  }
  // Centered gate: -b * (alpha_R / sg(alpha_R) - 1) is zero in value and
  // moves the router coefficient from c_u to c_u - b, with b the batch mean
  // of the gate signal.
  if (cfg.uses_router() && cfg.center_gate) {
    const double b = freeze ? freeze->baseline : signal_sum / static_cast<double>(batch.size());
    st.gate.baseline = b;
    if (b != 0.0) {
      const Tensor one = Tensor::scalar(1.0);
      const Tensor offset = Tensor::scalar(-b);
      for (std::size_t i = 0; i < alphas.size(); ++i) {
        const Tensor term = sub(scale(ratio_gate(one, alphas[i], st.gate.alpha[i], kProbabilityFloor), -b), offset);
        sum_total = add(sum_total, term);
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  st.sr *= inv;
  st.uniform *= inv;
  st.guide *= inv;
  st.total *= inv;
  return scale(sum_total, inv);
}

BatchStats train_step(CanetModel& model, LazyAdam& optimizer,
                      std::span<const TrainExample* const> batch, const TrainConfig& cfg, Rng& rng) {
  const std::vector<SequenceDraw> draws = draw_batch(model, batch, cfg, rng);
  BatchStats stats;
  const Tensor loss = batch_loss(model, batch, draws, cfg, &stats);
  optimizer.zero_grad();
  backward(loss);
  optimizer.step();
  optimizer.zero_grad();
  return stats;
}

// ---------------------------------------------------------------------------
// Trainer

ModelConfig model_config_for(const Split& split, const TrainConfig& cfg) {
  ModelConfig m;
  m.num_items = split.num_items;
  m.max_len = split.max_len;
  m.heads = cfg.heads;
  m.router_width = cfg.router_width;
  m.space = cfg.space;
  return m;
}

Trainer::Trainer(const Split& split, const TrainConfig& cfg)
    : split_(&split), cfg_(cfg), rng_(derive_seed(cfg.seed, kTrainStream)) {
  cfg_.validate();
  if (split.train.empty()) throw DataError("no training sequences");
  Rng init(derive_seed(cfg_.seed, kModelStream));
  model_ = CanetModel::create(model_config_for(split, cfg_), cfg_.static_route, init);
  adam_ = LazyAdam(model_.named_parameters(), cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps);
}

const EpochRecord& Trainer::run_epoch() {
  const auto& train = split_->train;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  rng_.shuffle(std::span<std::size_t>(order));

  EpochRecord rec;
  rec.epoch = epoch_ + 1;
  std::vector<std::size_t> sampled;
  sampled.reserve(train.size());
  std::size_t easy = 0;
  std::vector<const TrainExample*> batch;
  for (std::size_t begin = 0; begin < order.size(); begin += cfg_.batch_size) {
    const std::size_t end = std::min(order.size(), begin + cfg_.batch_size);
    batch.clear();
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&train[order[i]]);
    const BatchStats st = train_step(model_, adam_, batch, cfg_, rng_);
    const auto n = static_cast<double>(batch.size());
    rec.sr += st.sr * n;
    rec.uniform += st.uniform * n;
    rec.guide += st.guide * n;
    rec.total += st.total * n;
    easy += st.easy;
    sampled.insert(sampled.end(), st.routes.begin(), st.routes.end());
  }
  const auto count = static_cast<double>(train.size());
  rec.sr /= count;
  rec.uniform /= count;
  rec.guide /= count;
  rec.total /= count;
  rec.easy_fraction = static_cast<double>(easy) / count;
  rec.sampled_route_entropy = route_usage_entropy(sampled, cfg_.space.size());
  double flops = 0.0;
  for (std::size_t r : sampled) {
    flops += static_cast<double>(flops_of_route(cfg_.space.route(r), split_->max_len, split_->num_items, cfg_.heads));
  }
  rec.train_avg_flops = flops / count;

  ++epoch_;
  if (cfg_.validate_each_epoch && !split_->valid.empty()) {
    const EvalResult valid = evaluate(model_, split_->valid);
    rec.valid_ndcg10 = valid.metrics.overall.ndcg10;
    rec.route_entropy = route_usage_entropy(valid.route_of_example, cfg_.space.size());
    if (rec.valid_ndcg10 > best_score_) {
      best_score_ = rec.valid_ndcg10;
      best_epoch_ = epoch_;
      best_params_ = store(model_.named_parameters(), "");
    }
  } else {
    best_epoch_ = epoch_;
    best_params_.clear();
  }
  history_.push_back(rec);
  return history_.back();
}

void Trainer::fit() {
  while (epoch_ < cfg_.epochs) run_epoch();
}

CanetModel Trainer::best_model() const {
  CanetModel m = model_.clone();
  if (!best_params_.empty()) restore(m.named_parameters(), best_params_);
  return m;
}

CheckpointData Trainer::checkpoint() const {
  CheckpointData data;
  data.meta = {{"format", "canet-checkpoint"},
               {"train_config", cfg_.to_json()},
               {"model_config", model_.config.to_json()},
               {"run", run_info_},
               {"state",
                {{"epoch", epoch_},
                 {"adam_steps", adam_.steps()},
                 {"best_score", best_score_},
                 {"best_epoch", best_epoch_},
                 {"has_best", !best_params_.empty()},
                 {"history", history_to_json(history_)}}}};
  data.tensors = store(model_.named_parameters(), "param/");
  std::vector<StoredTensor> adam = adam_.export_state();
  data.tensors.insert(data.tensors.end(), std::make_move_iterator(adam.begin()),
                      std::make_move_iterator(adam.end()));
  for (const auto& t : best_params_) data.tensors.push_back({"best/" + t.name, t.shape, t.values});
  data.rng_state = rng_.state();
  data.epoch = static_cast<std::uint32_t>(epoch_);
  return data;
}

void Trainer::save(const std::filesystem::path& path) const { write_checkpoint(path, checkpoint()); }

Trainer Trainer::resume(const Split& split, const CheckpointData& ck) {
  TrainConfig cfg;
  ModelConfig mc;
  try {
    cfg = TrainConfig::from_json(ck.meta.at("train_config"));
    mc = ModelConfig::from_json(ck.meta.at("model_config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata incomplete: ") + e.what());
  }
  if (mc.num_items != split.num_items || mc.max_len != split.max_len) {
    throw ConfigError("checkpoint was trained on " + std::to_string(mc.num_items) + " items / length " +
                      std::to_string(mc.max_len) + ", data has " + std::to_string(split.num_items) +
                      " / " + std::to_string(split.max_len));
  }
  Trainer t(split, cfg);
  restore(t.model_.named_parameters(), ck, "param/");
  try {
    const auto& state = ck.meta.at("state");
    t.adam_.import_state(ck, state.at("adam_steps").get<std::uint64_t>());
    t.best_score_ = state.at("best_score").get<double>();
    t.best_epoch_ = state.at("best_epoch").get<std::size_t>();
    for (const auto& r : state.at("history")) t.history_.push_back(EpochRecord::from_json(r));
    if (state.at("has_best").get<bool>()) {
      t.best_params_ = store(t.model_.named_parameters(), "");
      for (auto& p : t.best_params_) p.values = ck.tensor("best/" + p.name).values;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint state incomplete: ") + e.what());
  }
  if (ck.meta.contains("run")) t.run_info_ = ck.meta.at("run");
  t.epoch_ = ck.epoch;
  t.rng_.set_state(ck.rng_state);
  return t;
}

FitResult fit(const Split& split, const TrainConfig& cfg) {
  Trainer t(split, cfg);
  t.fit();
  return {t.best_model(), t.model().clone(), t.history()};
}

}  // namespace canet
