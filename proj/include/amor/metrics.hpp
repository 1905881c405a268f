#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amor/model.hpp"
#include "amor/tasks.hpp"
#include "json.hpp"

namespace amor {

struct GateConfusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
  /// 0 when the gate never fires.
  double precision() const;
  /// 0 when there are no positive labels.
  double recall() const;
  /// Harmonic mean of precision and recall, 0 if both are 0.
  double f1() const;
};

/// Counts over positions where `include` is set (all positions if empty).
GateConfusion gate_confusion(std::span<const std::uint8_t> gate, std::span<const std::uint8_t> truth,
                             std::span<const std::uint8_t> include = {});

/// Evaluation summary. Fields that have no supporting positions are left empty
/// rather than set to 0; gate fields are empty for architectures without a gate.
struct MetricsRecord {
  double overall_acc = 0.0;
  std::optional<double> retrieval_acc;
  std::optional<double> impossible_acc;
  std::optional<double> gate_rate;
  std::optional<double> gate_precision;
  std::optional<double> gate_recall;
  std::optional<double> gate_f1;
  std::optional<double> entropy_mean_retrieval;  // nats
  std::optional<double> entropy_mean_local;      // nats
  std::optional<double> entropy_gap;             // retrieval - local
  std::size_t n_positions = 0;
  std::size_t n_retrieval = 0;
  std::size_t n_local = 0;
  std::size_t n_impossible = 0;

  bool operator==(const MetricsRecord&) const = default;
};

nlohmann::json to_json(const MetricsRecord& m);

struct EvalOptions {
  /// Count impossible queries (target PLACEHOLDER) as retrieval positions.
  bool include_impossible = false;
};

/// Per-position quantities gathered from evaluation forward passes.
struct EvalTrace {
  std::vector<int> predictions;            // argmax, lowest index on ties
  std::vector<int> targets;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::uint8_t> retrieval;     // ground truth for gate scoring
  std::vector<std::uint8_t> impossible;
  std::vector<std::uint8_t> gate;          // empty without a gate
  std::vector<double> entropy;             // nats, gate-signal logits
  std::size_t vocab_size = 0;
};

/// Forward passes in eval mode over consecutive chunks of `samples`.
EvalTrace collect_trace(const Model& model, std::span<const SequenceSample> samples, std::size_t chunk = 50,
                        const EvalOptions& opts = {});

MetricsRecord compute_metrics(const EvalTrace& trace);

inline MetricsRecord evaluate(const Model& model, std::span<const SequenceSample> samples,
                              const EvalOptions& opts = {}) {
  return compute_metrics(collect_trace(model, samples, 50, opts));
}

/// Lowest index wins ties.
int argmax(std::span<const double> row);

struct EntropyHistogram {
  std::vector<double> edges;  // n_bins + 1 values spanning [0, 1]
  std::vector<std::size_t> count_local;
  std::vector<std::size_t> count_retrieval;

  /// Mean normalized entropy estimated from bin centres.
  double mean_local() const;
  double mean_retrieval() const;
  std::string to_csv() const;
};

/// Normalized-entropy histogram over [0, 1]; the top bin is closed.
EntropyHistogram entropy_histogram(const EvalTrace& trace, std::size_t n_bins);

}  // namespace amor
