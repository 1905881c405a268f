#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amor/metrics.hpp"
#include "amor/model.hpp"
#include "amor/tasks.hpp"
#include "json.hpp"

namespace amor {

struct TrainConfig {
  double lr = 5e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::size_t steps_per_epoch = 100;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double balance_weight = 0.1;  // lambda
  double target_rate = 0.2;
  std::size_t eval_size = 200;
  /// Weight of an auxiliary next-token loss on the SSM head logits. 0 keeps the
  /// loss to cross-entropy plus balance.
  double ssm_aux_weight = 0.0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);

struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static OptimState zeros_like(const ParamStore& params);
};

struct LossParts {
  Var total;
  double ce = 0.0;
  double balance = 0.0;
  double soft_gate_mean = 0.0;
};

/// Cross-entropy over scored positions plus lambda (mean(soft_gate) - r)^2.
/// The balance term is skipped when soft_gate is unbound.
LossParts composite_loss(Var logits, const Batch& batch, Var soft_gate, const TrainConfig& cfg);

/// Whether the balance penalty applies to a gate mode (it is meaningless for
/// fixed gates).
bool uses_balance_loss(const ModelConfig& cfg);

/// Scales all gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<std::vector<double>> grads, double max_norm);

/// One AdamW update with decoupled weight decay. Throws DivergenceError naming
/// the first parameter whose gradient is not finite; nothing is modified then.
void adamw_step(ParamStore& params, std::span<const std::vector<double>> grads, OptimState& state,
                const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean training loss over the epoch
  MetricsRecord eval;
  std::optional<double> tau, alpha;
  std::uint64_t seed = 0;
  double wallclock = 0.0;  // seconds since training start
};

nlohmann::json to_json(const EpochRecord& r);

struct TrainResult {
  std::vector<EpochRecord> history;
  MetricsRecord final_metrics;
  /// Set when training stopped early on a non-finite loss or gradient.
  std::optional<std::string> failure;
};

/// Seed branches of a run. Every model trained from the same master seed sees
/// the same batches and evaluation set.
struct RunSeeds {
  std::uint64_t init, data, dropout, eval;
  static RunSeeds from_master(std::uint64_t seed);
};

std::vector<SequenceSample> eval_set(const TaskConfig& task, std::uint64_t master_seed, std::size_t n);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains in place. Divergence ends training and is reported in `failure`,
/// with the history up to the last completed epoch.
TrainResult train(Model& model, const TaskConfig& task, const TrainConfig& cfg, std::uint64_t seed,
                  const EvalOptions& eval_opts = {}, const EpochCallback& on_epoch = {});

}  // namespace amor
