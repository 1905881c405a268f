#include "amor/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace amor {

double GateConfusion::precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp); }
double GateConfusion::recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn); }
double GateConfusion::f1() const {
  const double p = precision(), r = recall();
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

GateConfusion gate_confusion(std::span<const std::uint8_t> gate, std::span<const std::uint8_t> truth,
                             std::span<const std::uint8_t> include) {
  if (gate.size() != truth.size() || (!include.empty() && include.size() != gate.size())) {
    throw DimensionError("gate_confusion: gate, truth and include lengths differ");
  }
  GateConfusion c;
  for (std::size_t i = 0; i < gate.size(); ++i) {
    if (!include.empty() && !include[i]) continue;
    const bool g = gate[i] != 0, y = truth[i] != 0;
    if (g && y) ++c.tp;
    else if (g) ++c.fp;
    else if (y) ++c.fn;
    else ++c.tn;
  }
  return c;
}

int argmax(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

EvalTrace collect_trace(const Model& model, std::span<const SequenceSample> samples, std::size_t chunk,
                        const EvalOptions& opts) {
  if (chunk == 0) throw ConfigError("evaluation chunk size must be positive");
  EvalTrace tr;
  tr.vocab_size = model.config().vocab_size;
  const bool gated = model.config().arch == Architecture::Amor;
  for (std::size_t first = 0; first < samples.size(); first += chunk) {
    const auto part = samples.subspan(first, std::min(chunk, samples.size() - first));
    const Batch batch = Batch::from_samples(part);
    Tape tape;
    const ForwardOutput out = model.forward(tape, batch, ForwardOptions{}, false);
    const Tensor& logits = out.logits.value();
    const std::size_t V = logits.cols();
    if (V != tr.vocab_size) throw DimensionError("model output width differs from its vocab size");
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      tr.predictions.push_back(argmax(logits.data().subspan(r * V, V)));
    }
    tr.targets.insert(tr.targets.end(), batch.targets.begin(), batch.targets.end());
    tr.loss_mask.insert(tr.loss_mask.end(), batch.loss_mask.begin(), batch.loss_mask.end());
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      tr.retrieval.push_back(batch.needs_retrieval[r] || (opts.include_impossible && batch.impossible[r]));
    }
    tr.impossible.insert(tr.impossible.end(), batch.impossible.begin(), batch.impossible.end());
    const auto ent = out.gate.entropy.value().data();
    tr.entropy.insert(tr.entropy.end(), ent.begin(), ent.end());
    if (gated) {
      for (double g : out.gate.hard.value().data()) tr.gate.push_back(g > 0.5);
    }
  }
  return tr;
}

MetricsRecord compute_metrics(const EvalTrace& tr) {
  MetricsRecord m;
  std::size_t correct = 0, correct_ret = 0, correct_imp = 0;
  double ent_ret = 0.0, ent_loc = 0.0;
  for (std::size_t i = 0; i < tr.targets.size(); ++i) {
    if (!tr.loss_mask[i]) continue;
    ++m.n_positions;
    const bool hit = tr.predictions[i] == tr.targets[i];
    correct += hit;
    if (tr.retrieval[i]) {
      ++m.n_retrieval;
      correct_ret += hit;
      ent_ret += tr.entropy[i];
    } else if (!tr.impossible[i]) {
      ++m.n_local;
      ent_loc += tr.entropy[i];
    }
    if (tr.impossible[i]) {
      ++m.n_impossible;
      correct_imp += hit;
    }
  }
  if (m.n_positions == 0) throw ConfigError("evaluation set has no scored positions");
  m.overall_acc = static_cast<double>(correct) / m.n_positions;
  if (m.n_retrieval > 0) {
    m.retrieval_acc = static_cast<double>(correct_ret) / m.n_retrieval;
    m.entropy_mean_retrieval = ent_ret / m.n_retrieval;
  }
  if (m.n_impossible > 0) m.impossible_acc = static_cast<double>(correct_imp) / m.n_impossible;
  if (m.n_local > 0) m.entropy_mean_local = ent_loc / m.n_local;
  if (m.entropy_mean_retrieval && m.entropy_mean_local) {
    m.entropy_gap = *m.entropy_mean_retrieval - *m.entropy_mean_local;
  }
  if (!tr.gate.empty()) {
    const GateConfusion c = gate_confusion(tr.gate, tr.retrieval, tr.loss_mask);
    m.gate_rate = static_cast<double>(c.tp + c.fp) / c.total();
    m.gate_precision = c.precision();
    if (m.n_retrieval > 0) {
      m.gate_recall = c.recall();
      m.gate_f1 = c.f1();
    }
  }
  return m;
}

namespace {

void put(nlohmann::json& j, const char* key, const std::optional<double>& v) {
  j[key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json to_json(const MetricsRecord& m) {
  nlohmann::json j{{"overall_acc", m.overall_acc},
                   {"n_positions", m.n_positions},
                   {"n_retrieval", m.n_retrieval},
                   {"n_local", m.n_local},
                   {"n_impossible", m.n_impossible}};
  put(j, "retrieval_acc", m.retrieval_acc);
  put(j, "impossible_acc", m.impossible_acc);
  put(j, "gate_rate", m.gate_rate);
  put(j, "gate_precision", m.gate_precision);
  put(j, "gate_recall", m.gate_recall);
  put(j, "gate_f1", m.gate_f1);
  put(j, "entropy_mean_retrieval", m.entropy_mean_retrieval);
  put(j, "entropy_mean_local", m.entropy_mean_local);
  put(j, "entropy_gap", m.entropy_gap);
  return j;
}

EntropyHistogram entropy_histogram(const EvalTrace& tr, std::size_t n_bins) {
  if (n_bins < 2) throw ConfigError("entropy histogram needs at least 2 bins");
  EntropyHistogram h;
  h.count_local.assign(n_bins, 0);
  h.count_retrieval.assign(n_bins, 0);
  for (std::size_t b = 0; b <= n_bins; ++b) h.edges.push_back(static_cast<double>(b) / n_bins);
  const double norm = std::log(static_cast<double>(tr.vocab_size));
  for (std::size_t i = 0; i < tr.targets.size(); ++i) {
    if (!tr.loss_mask[i] || (tr.impossible[i] && !tr.retrieval[i])) continue;
    const double x = std::clamp(tr.entropy[i] / norm, 0.0, 1.0);
    const auto bin = std::min(static_cast<std::size_t>(x * n_bins), n_bins - 1);
    ++(tr.retrieval[i] ? h.count_retrieval : h.count_local)[bin];
  }
  return h;
}

namespace {

double binned_mean(const std::vector<double>& edges, const std::vector<std::size_t>& counts) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < counts.size(); ++b) {
    s += counts[b] * 0.5 * (edges[b] + edges[b + 1]);
    n += counts[b];
  }
  return n == 0 ? 0.0 : s / n;
}

}  // namespace

double EntropyHistogram::mean_local() const { return binned_mean(edges, count_local); }
double EntropyHistogram::mean_retrieval() const { return binned_mean(edges, count_retrieval); }

std::string EntropyHistogram::to_csv() const {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count_local,count_retrieval\n";
  for (std::size_t b = 0; b < count_local.size(); ++b) {
    os << edges[b] << ',' << edges[b + 1] << ',' << count_local[b] << ',' << count_retrieval[b] << '\n';
  }
  return os.str();
}

}  // namespace amor
