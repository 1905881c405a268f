#include "amor/training.hpp"

#include <chrono>
#include <cmath>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "amor/errors.hpp"
#include "amor/ops.hpp"
#include "amor/rng.hpp"

namespace amor {

void TrainConfig::validate() const {
  auto positive = [](double x, const char* name) {
    if (!(x > 0.0)) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(lr, "lr");
  positive(clip_norm, "clip_norm");
  positive(eps, "eps");
  if (batch_size == 0 || epochs == 0 || steps_per_epoch == 0 || eval_size == 0) {
    throw ConfigError("batch_size, epochs, steps_per_epoch and eval_size must be at least 1");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (weight_decay < 0.0 || balance_weight < 0.0 || ssm_aux_weight < 0.0) {
    throw ConfigError("weight_decay, balance_weight and ssm_aux_weight must be non-negative");
  }
  if (!(target_rate >= 0.0 && target_rate <= 1.0)) throw ConfigError("target_rate must lie in [0, 1]");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"clip_norm", c.clip_norm},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"balance_weight", c.balance_weight},
          {"target_rate", c.target_rate},
          {"eval_size", c.eval_size},
          {"ssm_aux_weight", c.ssm_aux_weight}};
}

OptimState OptimState::zeros_like(const ParamStore& params) {
  OptimState s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params[i].size(), 0.0);
    s.v.emplace_back(params[i].size(), 0.0);
  }
  return s;
}

bool uses_balance_loss(const ModelConfig& cfg) {
  return cfg.arch == Architecture::Amor &&
         (cfg.gate_mode == GateMode::Entropy || cfg.gate_mode == GateMode::LearnedSte);
}

LossParts composite_loss(Var logits, const Batch& batch, Var soft_gate, const TrainConfig& cfg) {
  LossParts parts;
  parts.total = cross_entropy(logits, batch.targets, batch.loss_mask);
  parts.ce = parts.total.value().item();
  if (soft_gate.valid() && cfg.balance_weight > 0.0) {
    const Var gbar = mean(soft_gate);
    parts.soft_gate_mean = gbar.value().item();
    const Var dev = sub(gbar, soft_gate.tape()->constant(Tensor::scalar(cfg.target_rate)));
    const Var bal = scale(mul(dev, dev), cfg.balance_weight);
    parts.balance = bal.value().item();
    parts.total = add(parts.total, bal);
  }
  return parts;
}

double clip_grad_norm(std::span<std::vector<double>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (double& x : g) x *= s;
    }
  }
  return norm;
}

void adamw_step(ParamStore& params, std::span<const std::vector<double>> grads, OptimState& state,
                const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw DimensionError("adamw_step: gradient or state count differs from parameter count");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size()) {
      throw DimensionError("adamw_step: gradient for '" + params.name(i) + "' has the wrong size");
    }
    for (double g : grads[i]) {
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in parameter '" + params.name(i) + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      w[j] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[j]);
    }
  }
}

nlohmann::json to_json(const EpochRecord& r) {
  const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", r.epoch},
          {"loss", r.loss},
          {"overall_acc", r.eval.overall_acc},
          {"retrieval_acc", opt(r.eval.retrieval_acc)},
          {"gate_rate", opt(r.eval.gate_rate)},
          {"gate_f1", opt(r.eval.gate_f1)},
          {"entropy_gap", opt(r.eval.entropy_gap)},
          {"tau", opt(r.tau)},
          {"alpha", opt(r.alpha)},
          {"seed", r.seed},
          {"wallclock", r.wallclock}};
}

RunSeeds RunSeeds::from_master(std::uint64_t seed) {
  return RunSeeds{derive_seed(seed, "init"), derive_seed(seed, "data"), derive_seed(seed, "dropout"),
                  derive_seed(seed, "eval")};
}

std::vector<SequenceSample> eval_set(const TaskConfig& task, std::uint64_t master_seed, std::size_t n) {
  return make_batch(task, RunSeeds::from_master(master_seed).eval, n);
}

namespace {

// Every step allocates and frees the same tens of megabytes of activations.
// Served by mmap, each step would page-fault all of it back in.
void keep_freed_memory() {
#ifdef __GLIBC__
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

}  // namespace

TrainResult train(Model& model, const TaskConfig& task, const TrainConfig& cfg, std::uint64_t seed,
                  const EvalOptions& eval_opts, const EpochCallback& on_epoch) {
  keep_freed_memory();
  cfg.validate();
  task.validate();
  if (static_cast<std::size_t>(task.vocab_size()) != model.config().vocab_size) {
    throw ConfigError("task vocab " + std::to_string(task.vocab_size()) + " differs from model vocab " +
                      std::to_string(model.config().vocab_size));
  }
  const RunSeeds seeds = RunSeeds::from_master(seed);
  const std::vector<SequenceSample> held_out = eval_set(task, seed, cfg.eval_size);
  const bool balance = uses_balance_loss(model.config());
  const bool aux = cfg.ssm_aux_weight > 0.0 && model.config().arch == Architecture::Amor;
  ParamStore& params = model.params();
  OptimState state = OptimState::zeros_like(params);
  std::vector<std::vector<double>> grads(params.size());
  const auto start = std::chrono::steady_clock::now();

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s) {
      const std::uint64_t step = (epoch - 1) * cfg.steps_per_epoch + s;
      const Batch batch = Batch::from_samples(make_batch(task, derive_seed(seeds.data, step), cfg.batch_size));
      Tape tape;
      ForwardOptions fo;
      fo.train = true;
      fo.dropout_seed = derive_seed(seeds.dropout, step);
      const ForwardOutput out = model.forward(tape, batch, fo, true);
      LossParts loss = composite_loss(out.logits, batch, balance ? out.gate.soft : Var{}, cfg);
      if (aux) {
        const Var ssm_ce = cross_entropy(out.ssm_logits, batch.targets, batch.loss_mask);
        loss.total = add(loss.total, scale(ssm_ce, cfg.ssm_aux_weight));
      }
      const double value = loss.total.value().item();
      if (!std::isfinite(value)) {
        result.failure = "non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(s);
        result.final_metrics = result.history.empty() ? MetricsRecord{} : result.history.back().eval;
        return result;
      }
      tape.backward(loss.total);
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = out.params.vars[i].grad();
        if (g.empty()) {
          grads[i].assign(params[i].size(), 0.0);
        } else {
          grads[i].assign(g.begin(), g.end());
        }
      }
      clip_grad_norm(grads, cfg.clip_norm);
      try {
        adamw_step(params, grads, state, cfg);
      } catch (const DivergenceError& e) {
        result.failure = std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " + std::to_string(s);
        result.final_metrics = result.history.empty() ? MetricsRecord{} : result.history.back().eval;
        return result;
      }
      loss_sum += value;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(cfg.steps_per_epoch);
    rec.eval = evaluate(model, held_out, eval_opts);
    if (params.contains("gate.tau")) {
      rec.tau = params.get("gate.tau").item();
      rec.alpha = params.get("gate.alpha").item();
    }
    rec.seed = seed;
    rec.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.final_metrics = result.history.back().eval;
  return result;
}

}  // namespace amor
