#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "amor/errors.hpp"
#include "amor/tape.hpp"
#include "amor/tasks.hpp"
#include "json.hpp"

namespace amor {

enum class Architecture { Amor, SsmOnly, Transformer };
enum class GateMode { Entropy, Oracle, LearnedSte, AlwaysOn, AlwaysOff };
enum class KvSource { GhostSsm, RawEmbedding };

std::string to_string(Architecture a);
std::string to_string(GateMode g);
std::string to_string(KvSource k);
Architecture architecture_from_string(const std::string& s);
GateMode gate_mode_from_string(const std::string& s);
KvSource kv_source_from_string(const std::string& s);

struct ModelConfig {
  Architecture arch = Architecture::Amor;
  std::size_t vocab_size = 11;
  std::size_t d_model = 64;
  std::size_t n_ssm_layers = 2;
  std::size_t n_heads = 4;
  std::size_t top_k = 3;
  double dropout = 0.1;
  GateMode gate_mode = GateMode::Entropy;
  KvSource kv_source = KvSource::GhostSsm;
  double tau_init = 0.5;
  double alpha_init = 10.0;
  /// Compute the gate from detached SSM logits (no gate gradient into W_o or the GRU).
  bool detach_gate_logits = false;

  // Transformer baseline
  std::size_t n_transformer_layers = 2;
  std::size_t ffn_mult = 4;
  std::size_t max_positions = 1024;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Named learnable arrays in creation order.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value);
  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;

  Tensor& operator[](std::size_t i) { return values_[i]; }
  const Tensor& operator[](std::size_t i) const { return values_[i]; }
  Tensor& get(std::string_view name) { return values_[index(name)]; }
  const Tensor& get(std::string_view name) const { return values_[index(name)]; }
  const std::string& name(std::size_t i) const { return names_[i]; }

  std::size_t size() const noexcept { return values_.size(); }
  /// Total number of scalars across all arrays.
  std::size_t scalar_count() const;

  bool operator==(const ParamStore& o) const { return names_ == o.names_ && values_ == o.values_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

/// Parameters placed on a tape as leaves, in ParamStore order.
struct BoundParams {
  const ParamStore* store = nullptr;
  std::vector<Var> vars;
  Var operator()(std::string_view name) const { return vars[store->index(name)]; }
};

struct ForwardOptions {
  bool train = false;              // enables dropout
  std::uint64_t dropout_seed = 0;  // per-step dropout stream
  /// When false the hard gate enters as a constant: no STE gradient reaches the
  /// gate parameters or the entropy path.
  bool gate_gradient = true;
};

/// Per-position gate quantities, each of shape [rows]. Entries that a mode does
/// not produce are left unbound.
struct GateTrace {
  Var entropy;     // nats
  Var normalized;  // entropy / log|V|, in [0, 1]
  Var soft;        // sigmoid(alpha (normalized - tau)), or the probe probability
  Var hard;        // {0, 1}
};

struct SsmOutput {
  Var embedded;    // [rows x d]
  Var hidden;      // top-layer GRU states [rows x d]
  Var ssm_logits;  // [rows x V]
};

struct KvPair {
  Var keys;
  Var values;
};

struct ForwardOutput {
  Var logits;      // final logits [rows x V]
  Var ssm_logits;  // Amor / SsmOnly
  Var hidden;
  Var embedded;
  GateTrace gate;
  Var attention;   // o^attn [rows x d], Amor only
  BoundParams params;
};

GateTrace compute_entropy(Var logits);

/// Every architecture in the comparison roster. Which parameters exist and which
/// forward path runs is decided by config().arch.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t init_seed);
  Model(ModelConfig cfg, ParamStore params);

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  BoundParams bind(Tape& tape, bool requires_grad) const;

  /// Full forward pass for the configured architecture.
  ForwardOutput forward(Tape& tape, const Batch& batch, const ForwardOptions& opts, bool requires_grad = true) const;

  // Stages of the Amor forward pass, exposed for testing.
  SsmOutput ssm_forward(const BoundParams& p, const Batch& batch, const ForwardOptions& opts) const;
  GateTrace gate_decide(const BoundParams& p, GateTrace trace, Var hidden, const Batch& batch,
                        const ForwardOptions& opts) const;
  KvPair ghost_kv(const BoundParams& p, Var hidden, Var embedded) const;
  /// Multi-head sparse attention, output projection, then rows scaled by the hard gate.
  Var sparse_attention(const BoundParams& p, Var hidden, const KvPair& kv, Var hard_gate, const Batch& batch,
                       const ForwardOptions& opts) const;
  Var combine_predict(const BoundParams& p, Var hidden, Var attention) const;
  Var transformer_forward(const BoundParams& p, const Batch& batch, const ForwardOptions& opts) const;

 private:
  void init_params(std::uint64_t seed);

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace amor
