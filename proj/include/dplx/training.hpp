#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dplx/composite.hpp"
#include "dplx/evaluation.hpp"

namespace dplx {

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  std::size_t warmup = 200;
  double clip_norm = 1.0;

  /// Linear warmup, then inverse-square-root decay. `step` counts from 1.
  double rate(std::size_t step) const {
    const double s = static_cast<double>(std::max<std::size_t>(step, 1));
    if (warmup == 0) return lr;
    const double w = static_cast<double>(warmup);
    return lr * std::min(s / w, std::sqrt(w / s));
  }
};

struct DiffusionConfig {
  ScheduleKind kind = ScheduleKind::scaled_linear;
  std::size_t steps = 1000;
  double beta_start_x = 8.5e-4, beta_end_x = 1.2e-2;
  double beta_start_y = 8.5e-4, beta_end_y = 1.2e-2;
  double lambda1 = 0.5, lambda2 = 0.5;

  DiffusionSchedule schedule_x() const { return DiffusionSchedule::build(kind, steps, beta_start_x, beta_end_x); }
  DiffusionSchedule schedule_y() const { return DiffusionSchedule::build(kind, steps, beta_start_y, beta_end_y); }
};

struct TrainConfig {
  std::size_t k1 = 3000, k2 = 3000, k3 = 1000;
  AdamConfig adam;
  std::size_t batch_tokens = 192;
  std::uint64_t seed = 1;
  LossWeights weights;
  LossMode mode = LossMode::unit;
  DiffusionConfig diffusion;
  bool stage2_composite = false;  // add the composite objective (weight 1) to L_DDM in stage 2
  std::size_t log_interval = 10;
  std::size_t eval_interval = 500;
  std::size_t eval_pairs = 100;
  bool record_wallclock = true;
  bool save_checkpoints = true;

  std::size_t budget(int stage) const { return stage == 1 ? k1 : stage == 2 ? k2 : k3; }
};

/// Adam with per-parameter first/second moments keyed by parameter name.
template <class S>
class Adam {
 public:
  std::size_t steps = 0;
  std::map<std::string, std::vector<S>> m, v;

  /// Applies one update to every parameter that carries a gradient and is not
  /// excluded by `frozen`. Gradients are clipped by global norm first.
  /// Returns the pre-clip global gradient norm.
  double step(std::vector<std::pair<std::string, Tensor<S>>>& params, const AdamConfig& cfg,
              const std::function<bool(const std::string&)>& frozen) {
    ++steps;
    double sq = 0;
    for (auto& [name, t] : params)
      if (t.has_grad() && !frozen(name))
        for (auto g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    const double clip = cfg.clip_norm > 0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
    const double lr = cfg.rate(steps);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(steps));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(steps));
    for (auto& [name, t] : params) {
      if (!t.has_grad() || frozen(name)) continue;
      auto& mm = m[name];
      auto& vv = v[name];
      if (mm.empty()) {
        mm.assign(t.size(), S(0));
        vv.assign(t.size(), S(0));
      }
      auto& d = t.data();
      const auto& g = t.grad();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * clip;
        mm[i] = static_cast<S>(cfg.beta1 * static_cast<double>(mm[i]) + (1 - cfg.beta1) * gi);
        vv[i] = static_cast<S>(cfg.beta2 * static_cast<double>(vv[i]) + (1 - cfg.beta2) * gi * gi);
        const double mh = static_cast<double>(mm[i]) / bc1, vh = static_cast<double>(vv[i]) / bc2;
        d[i] = static_cast<S>(static_cast<double>(d[i]) - lr * mh / (std::sqrt(vh) + cfg.eps));
      }
    }
    return norm;
  }

  NamedTensors<S> state() const {
    NamedTensors<S> out;
    out.emplace_back("adam.steps", Tensor<S>({1}, {static_cast<S>(steps)}));
    for (auto& [k, val] : m) out.emplace_back("m/" + k, Tensor<S>({val.size()}, val));
    for (auto& [k, val] : v) out.emplace_back("v/" + k, Tensor<S>({val.size()}, val));
    return out;
  }

  void load(const NamedTensors<S>& items) {
    m.clear();
    v.clear();
    for (auto& [k, t] : items) {
      if (k == "adam.steps")
        steps = static_cast<std::size_t>(t.item());
      else if (k.rfind("m/", 0) == 0)
        m[k.substr(2)] = t.data();
      else if (k.rfind("v/", 0) == 0)
        v[k.substr(2)] = t.data();
      else
        throw CheckpointError("unexpected optimizer record '" + k + "'");
    }
  }
};

struct StepRecord {
  std::size_t step = 0;  // global optimizer step, 1-based
  int stage = 1;
  double loss = 0;
  double terms[6] = {0, 0, 0, 0, 0, 0};
  double ddm = 0, ddm_x = 0, ddm_y = 0;
  double lr = 0;
  double grad_norm = 0;
};

inline constexpr int kCheckpointVersion = 1;

/// Runs the three training stages over one model:
///   1. composite RDC objective,
///   2. duplex diffusion noise prediction (optionally plus the composite),
///   3. composite objective with the diffusion-only parameters frozen.
template <class S>
class Trainer {
 public:
  Trainer(DuplexModel<S>& model, TrainConfig cfg, CorpusSplits data, std::string config_hash = "")
      : model_(model), cfg_(std::move(cfg)), data_(std::move(data)), config_hash_(std::move(config_hash)),
        rng_(cfg_.seed), sched_x_(cfg_.diffusion.schedule_x()), sched_y_(cfg_.diffusion.schedule_y()) {
    cfg_.weights.validate();
    if (data_.train.empty()) throw DataError("training split is empty");
    reshuffle();
    start_ = std::chrono::steady_clock::now();
  }

  std::function<void(const nlohmann::ordered_json&)> on_metrics;
  std::function<void(const std::string& tag)> on_checkpoint;

  const TrainConfig& config() const { return cfg_; }
  DuplexModel<S>& model() { return model_; }
  std::size_t global_step() const { return global_step_; }
  std::size_t stage_done(int stage) const { return stage_done_[stage - 1]; }
  const std::vector<StepRecord>& history() const { return history_; }
  RngStreams& rng() { return rng_; }

  /// Runs the remaining budget of one stage.
  void run_stage(int stage) {
    while (stage_done_[stage - 1] < cfg_.budget(stage)) step(stage);
  }

  void run_all() {
    for (int s = 1; s <= 3; ++s) run_stage(s);
  }

  /// One optimizer step of the given stage.
  StepRecord step(int stage) {
    if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2, or 3");
    const auto& batch = next_batch();
    std::vector<ParallelPair> pairs;
    for (auto i : batch) pairs.push_back(data_.train[i]);

    RunContext<S> ctx;
    ctx.training = true;
    ctx.dropout_rng = &rng_["dropout"];

    StepRecord rec;
    rec.stage = stage;
    Tensor<S> loss;
    if (stage == 2) {
      auto d = ddm_batch_loss(pairs, ctx);
      rec.ddm = static_cast<double>(d.loss.item());
      rec.ddm_x = static_cast<double>(d.loss_x.item());
      rec.ddm_y = static_cast<double>(d.loss_y.item());
      loss = d.loss;
      if (cfg_.stage2_composite) {
        auto c = composite_loss(model_, pairs, cfg_.weights, cfg_.mode, ctx);
        std::copy(std::begin(c.term), std::end(c.term), rec.terms);
        loss = weighted_sum<S>({loss, c.total}, {S(1), S(1)});
      }
    } else {
      auto c = composite_loss(model_, pairs, cfg_.weights, cfg_.mode, ctx);
      std::copy(std::begin(c.term), std::end(c.term), rec.terms);
      loss = c.total;
    }
    rec.loss = static_cast<double>(loss.item());
    if (!std::isfinite(rec.loss))
      throw TrainingDiverged("non-finite loss " + std::to_string(rec.loss) + " at stage " + std::to_string(stage) +
                             ", step " + std::to_string(global_step_ + 1));

    auto params = model_.parameters();
    for (auto& [_, t] : params) t.zero_grad();
    backward(loss);
    const bool freeze_diffusion = stage == 3;
    rec.grad_norm = adam_.step(params, cfg_.adam, [&](const std::string& n) {
      return freeze_diffusion && DuplexModel<S>::is_diffusion_param(n);
    });
    for (auto& [_, t] : params) t.zero_grad();

    ++global_step_;
    ++stage_done_[stage - 1];
    rec.step = global_step_;
    rec.lr = cfg_.adam.rate(adam_.steps);
    history_.push_back(rec);

    if (cfg_.log_interval && global_step_ % cfg_.log_interval == 0) emit(rec);
    if (cfg_.eval_interval && global_step_ % cfg_.eval_interval == 0) {
      emit_eval(stage);
      if (on_checkpoint) on_checkpoint("ckpt-" + std::to_string(global_step_));
    }
    return rec;
  }

  /// Mean L_DDM over a batch; clean encodings are treated as fixed inputs.
  DdmTerms<S> ddm_batch_loss(const std::vector<ParallelPair>& pairs, const RunContext<S>& ctx) {
    const auto srcs = sources(pairs), tgts = targets(pairs);
    std::vector<std::size_t> lx, ly;
    for (auto& u : srcs) lx.push_back(u.size());
    for (auto& u : tgts) ly.push_back(u.size());
    Tensor<S> x0, y0;
    {
      NoGradGuard ng;
      x0 = model_.embed_batch(srcs, Direction::forward).detach();
      y0 = model_.embed_batch(tgts, Direction::reverse).detach();
    }
    return ddm_train_step<S>(x0, y0, sched_x_, sched_y_, model_.predictor(Direction::reverse, ctx, lx, ly),
                             model_.predictor(Direction::forward, ctx, ly, lx), static_cast<S>(cfg_.diffusion.lambda1),
                             static_cast<S>(cfg_.diffusion.lambda2), rng_["noise"]);
  }

  // -------------------------------------------------------------------------
  // checkpoints

  void save_checkpoint(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_tensors((dir / "model.dplx").string(), model_.state());
    save_tensors((dir / "optim.dplx").string(), adam_.state());
    nlohmann::ordered_json j;
    j["version"] = kCheckpointVersion;
    j["config_hash"] = config_hash_;
    j["parameter_count"] = model_.config().parameter_count();
    j["global_step"] = global_step_;
    j["stage_done"] = {stage_done_[0], stage_done_[1], stage_done_[2]};
    j["cursor"] = {{"epoch", epoch_}, {"position", position_}};
    j["rng_master"] = rng_.master();
    j["rng"] = rng_.save();
    std::ofstream os(dir / "state.json");
    os << j.dump(2) << '\n';
    if (!os) throw CheckpointError("failed to write checkpoint state in " + dir.string());
  }

  void load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream is(dir / "state.json");
    if (!is) throw CheckpointError("no checkpoint state in " + dir.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("corrupt checkpoint state: ") + e.what());
    }
    if (j.value("version", -1) != kCheckpointVersion) throw CheckpointError("checkpoint version mismatch");
    if (j.value("config_hash", std::string()) != config_hash_)
      throw CheckpointError("checkpoint config hash does not match the current configuration");
    if (j.value("parameter_count", std::size_t{0}) != model_.config().parameter_count())
      throw CheckpointError("checkpoint parameter count " + std::to_string(j.value("parameter_count", std::size_t{0})) +
                            " does not match the configured model (" +
                            std::to_string(model_.config().parameter_count()) + ")");
    auto state = load_tensors<S>((dir / "model.dplx").string());
    auto optim = load_tensors<S>((dir / "optim.dplx").string());
    model_.load_state(state);
    adam_.load(optim);
    global_step_ = j.at("global_step").get<std::size_t>();
    auto sd = j.at("stage_done").get<std::vector<std::size_t>>();
    std::copy(sd.begin(), sd.end(), stage_done_);
    epoch_ = j.at("cursor").at("epoch").get<std::size_t>();
    position_ = j.at("cursor").at("position").get<std::size_t>();
    rng_ = RngStreams(j.at("rng_master").get<std::uint64_t>());
    rng_.restore(j.at("rng").get<std::map<std::string, std::string>>());
    reshuffle();
  }

 private:
  const std::vector<std::size_t>& next_batch() {
    if (position_ >= batches_.size()) {
      ++epoch_;
      position_ = 0;
      reshuffle();
    }
    return batches_[position_++];
  }

  void reshuffle() {
    batches_ = make_packed_batches(data_.train, cfg_.batch_tokens, splitmix64(cfg_.seed + epoch_));
  }

  void emit(const StepRecord& r) {
    if (!on_metrics) return;
    nlohmann::ordered_json j;
    j["kind"] = "train";
    j["step"] = r.step;
    j["stage"] = r.stage;
    j["loss"] = r.loss;
    static const char* names_unit[6] = {"ctc_fwd", "ctc_rev", "fba_fwd", "fba_rev", "cc_y", "cc_x"};
    static const char* names_mel[6] = {"mse_fwd", "mse_rev", "fba_fwd", "fba_rev", "cc_y", "cc_x"};
    const auto& names = cfg_.mode == LossMode::unit ? names_unit : names_mel;
    for (int k = 0; k < 6; ++k) j[names[k]] = r.terms[k];
    j["ddm"] = r.ddm;
    j["ddm_x"] = r.ddm_x;
    j["ddm_y"] = r.ddm_y;
    j["lr"] = r.lr;
    j["grad_norm"] = r.grad_norm;
    if (cfg_.record_wallclock)
      j["wallclock"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    on_metrics(j);
  }

  void emit_eval(int stage) {
    if (!on_metrics || data_.dev.empty()) return;
    std::vector<ParallelPair> dev(data_.dev.begin(),
                                  data_.dev.begin() + static_cast<std::ptrdiff_t>(std::min(cfg_.eval_pairs, data_.dev.size())));
    nlohmann::ordered_json j;
    j["kind"] = "eval";
    j["step"] = global_step_;
    j["stage"] = stage;
    j["acc_fwd"] = heldout_accuracy(model_, dev, Direction::forward);
    j["acc_rev"] = heldout_accuracy(model_, dev, Direction::reverse);
    {
      NoGradGuard ng;
      RunContext<S> eval;
      j["heldout_composite"] = static_cast<double>(composite_loss(model_, dev, cfg_.weights, cfg_.mode, eval).total.item());
    }
    on_metrics(j);
  }

  DuplexModel<S>& model_;
  TrainConfig cfg_;
  CorpusSplits data_;
  std::string config_hash_;
  RngStreams rng_;
  DiffusionSchedule sched_x_, sched_y_;
  Adam<S> adam_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t epoch_ = 0, position_ = 0;
  std::size_t global_step_ = 0;
  std::size_t stage_done_[3] = {0, 0, 0};
  std::vector<StepRecord> history_;
  std::chrono::steady_clock::time_point start_;
};

template <class S>
DuplexModel<S>& train_stage1_rdc(Trainer<S>& t) {
  t.run_stage(1);
  return t.model();
}

template <class S>
DuplexModel<S>& train_stage2_ddm(Trainer<S>& t) {
  t.run_stage(2);
  return t.model();
}

template <class S>
DuplexModel<S>& train_stage3_finetune(Trainer<S>& t) {
  t.run_stage(3);
  return t.model();
}

}  // namespace dplx
