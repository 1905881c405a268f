#include "amor/model.hpp"

#include <cmath>
#include <numeric>

#include "amor/fused.hpp"
#include "amor/ops.hpp"
#include "amor/rng.hpp"

namespace amor {

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::Amor: return "amor";
    case Architecture::SsmOnly: return "ssm_only";
    case Architecture::Transformer: return "transformer";
  }
  return "?";
}

std::string to_string(GateMode g) {
  switch (g) {
    case GateMode::Entropy: return "entropy";
    case GateMode::Oracle: return "oracle";
    case GateMode::LearnedSte: return "learned_ste";
    case GateMode::AlwaysOn: return "always_on";
    case GateMode::AlwaysOff: return "always_off";
  }
  return "?";
}

std::string to_string(KvSource k) { return k == KvSource::GhostSsm ? "ghost" : "raw_embedding"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "amor") return Architecture::Amor;
  if (s == "ssm_only") return Architecture::SsmOnly;
  if (s == "transformer") return Architecture::Transformer;
  throw ConfigError("unknown architecture '" + s + "'");
}

GateMode gate_mode_from_string(const std::string& s) {
  if (s == "entropy") return GateMode::Entropy;
  if (s == "oracle") return GateMode::Oracle;
  if (s == "learned_ste") return GateMode::LearnedSte;
  if (s == "always_on") return GateMode::AlwaysOn;
  if (s == "always_off") return GateMode::AlwaysOff;
  throw ConfigError("unknown gate mode '" + s + "'");
}

KvSource kv_source_from_string(const std::string& s) {
  if (s == "ghost") return KvSource::GhostSsm;
  if (s == "raw_embedding") return KvSource::RawEmbedding;
  throw ConfigError("unknown kv source '" + s + "'");
}

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " must be a positive multiple of n_heads " +
                      std::to_string(n_heads));
  }
  if (top_k < 1) throw ConfigError("top_k must be at least 1");
  if (n_ssm_layers < 1) throw ConfigError("n_ssm_layers must be at least 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (arch == Architecture::Transformer && (n_transformer_layers < 1 || ffn_mult < 1 || max_positions < 1)) {
    throw ConfigError("transformer needs at least one layer, ffn_mult and max_positions");
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"arch", to_string(c.arch)},
          {"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"n_ssm_layers", c.n_ssm_layers},
          {"n_heads", c.n_heads},
          {"top_k", c.top_k},
          {"dropout", c.dropout},
          {"gate_mode", to_string(c.gate_mode)},
          {"kv_source", to_string(c.kv_source)},
          {"tau_init", c.tau_init},
          {"alpha_init", c.alpha_init},
          {"detach_gate_logits", c.detach_gate_logits},
          {"n_transformer_layers", c.n_transformer_layers},
          {"ffn_mult", c.ffn_mult},
          {"max_positions", c.max_positions}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.arch = architecture_from_string(j.at("arch").get<std::string>());
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_ssm_layers = j.at("n_ssm_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.top_k = j.at("top_k").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.gate_mode = gate_mode_from_string(j.at("gate_mode").get<std::string>());
  c.kv_source = kv_source_from_string(j.at("kv_source").get<std::string>());
  c.tau_init = j.at("tau_init").get<double>();
  c.alpha_init = j.at("alpha_init").get<double>();
  c.detach_gate_logits = j.at("detach_gate_logits").get<bool>();
  c.n_transformer_layers = j.at("n_transformer_layers").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  return c;
}

std::size_t ParamStore::add(std::string name, Tensor value) {
  if (lookup_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
  lookup_.emplace(name, values_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::size_t ParamStore::index(std::string_view name) const {
  const auto it = lookup_.find(std::string(name));
  if (it == lookup_.end()) throw ConfigError("no parameter named '" + std::string(name) + "'");
  return it->second;
}

bool ParamStore::contains(std::string_view name) const { return lookup_.count(std::string(name)) != 0; }

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

GateTrace compute_entropy(Var logits) {
  const std::size_t v = logits.value().cols();
  if (v < 2) throw DimensionError("entropy normalisation needs |V| >= 2");
  GateTrace tr;
  tr.entropy = entropy_lastdim(logits);
  tr.normalized = scale(tr.entropy, 1.0 / std::log(static_cast<double>(v)));
  return tr;
}

namespace {

Tensor uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  Tensor t(Shape{rows, cols});
  for (auto& x : t.data()) x = (2.0 * rng.uniform() - 1.0) * bound;
  return t;
}

Tensor normal_matrix(Rng& rng, std::size_t rows, std::size_t cols, double sd) {
  Tensor t(Shape{rows, cols});
  for (auto& x : t.data()) x = sd * rng.normal();
  return t;
}

Tensor gate_tensor(std::span<const std::uint8_t> bits) {
  Tensor t(Shape{bits.size()});
  for (std::size_t i = 0; i < bits.size(); ++i) t[i] = bits[i] ? 1.0 : 0.0;
  return t;
}

std::string gru_name(std::size_t layer, const char* suffix) { return "gru" + std::to_string(layer) + "." + suffix; }
std::string blk_name(std::size_t layer, const char* suffix) { return "blk" + std::to_string(layer) + "." + suffix; }

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  init_params(init_seed);
}

Model::Model(ModelConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  Model shape_ref(cfg_, std::uint64_t{0});
  if (shape_ref.params().size() != params_.size()) throw ConfigError("parameter set does not match model config");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (shape_ref.params().name(i) != params_.name(i) || shape_ref.params()[i].shape() != params_[i].shape()) {
      throw ConfigError("parameter '" + params_.name(i) + "' does not match model config");
    }
  }
}

void Model::init_params(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = cfg_.d_model, V = cfg_.vocab_size;
  if (cfg_.arch == Architecture::Transformer) {
    params_.add("tok_embed", normal_matrix(rng, V, d, 0.02));
    params_.add("pos_embed", normal_matrix(rng, cfg_.max_positions, d, 0.02));
    const std::size_t f = cfg_.ffn_mult * d;
    for (std::size_t l = 0; l < cfg_.n_transformer_layers; ++l) {
      params_.add(blk_name(l, "ln1.g"), Tensor(Shape{d}, 1.0));
      params_.add(blk_name(l, "ln1.b"), Tensor(Shape{d}));
      for (const char* w : {"attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"}) {
        params_.add(blk_name(l, w), uniform_matrix(rng, d, d));
        std::string b = blk_name(l, w);
        b.replace(b.size() - 3, 1, "b");  // attn.w_q -> attn.b_q
        params_.add(b, Tensor(Shape{d}));
      }
      params_.add(blk_name(l, "ln2.g"), Tensor(Shape{d}, 1.0));
      params_.add(blk_name(l, "ln2.b"), Tensor(Shape{d}));
      params_.add(blk_name(l, "ffn.w1"), uniform_matrix(rng, d, f));
      params_.add(blk_name(l, "ffn.b1"), Tensor(Shape{f}));
      params_.add(blk_name(l, "ffn.w2"), uniform_matrix(rng, f, d));
      params_.add(blk_name(l, "ffn.b2"), Tensor(Shape{d}));
    }
    params_.add("ln_f.g", Tensor(Shape{d}, 1.0));
    params_.add("ln_f.b", Tensor(Shape{d}));
    params_.add("out.w", uniform_matrix(rng, d, V));
    params_.add("out.b", Tensor(Shape{V}));
    return;
  }

  params_.add("embed", normal_matrix(rng, V, d, 0.02));
  for (std::size_t l = 0; l < cfg_.n_ssm_layers; ++l) {
    params_.add(gru_name(l, "w_ih"), uniform_matrix(rng, d, 3 * d));
    params_.add(gru_name(l, "w_hh"), uniform_matrix(rng, d, 3 * d));
    params_.add(gru_name(l, "b_ih"), Tensor(Shape{3 * d}));
    params_.add(gru_name(l, "b_hh"), Tensor(Shape{3 * d}));
  }
  params_.add("ssm_head.w", uniform_matrix(rng, d, V));
  params_.add("ssm_head.b", Tensor(Shape{V}));
  if (cfg_.arch == Architecture::SsmOnly) return;

  params_.add("gate.tau", Tensor::scalar(cfg_.tau_init));
  params_.add("gate.alpha", Tensor::scalar(cfg_.alpha_init));
  if (cfg_.gate_mode == GateMode::LearnedSte) {
    params_.add("probe.w", uniform_matrix(rng, d, 1));
    params_.add("probe.b", Tensor(Shape{1}));
  }
  for (const char* w : {"q", "k", "v", "o"}) {
    params_.add(std::string("attn.w_") + w, uniform_matrix(rng, d, d));
    params_.add(std::string("attn.b_") + w, Tensor(Shape{d}));
  }
  params_.add("combine.w", uniform_matrix(rng, 2 * d, d));
  params_.add("combine.b", Tensor(Shape{d}));
  params_.add("out.w", uniform_matrix(rng, d, V));
  params_.add("out.b", Tensor(Shape{V}));
}

BoundParams Model::bind(Tape& tape, bool requires_grad) const {
  BoundParams b;
  b.store = &params_;
  b.vars.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) b.vars.push_back(tape.leaf(params_[i], requires_grad));
  return b;
}

SsmOutput Model::ssm_forward(const BoundParams& p, const Batch& batch, const ForwardOptions& opts) const {
  SsmOutput out;
  out.embedded = embedding_lookup(p("embed"), batch.tokens);
  Var h = out.embedded;
  for (std::size_t l = 0; l < cfg_.n_ssm_layers; ++l) {
    if (l > 0 && opts.train && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, derive_seed(opts.dropout_seed, l));
    const GruWeights w{p(gru_name(l, "w_ih")), p(gru_name(l, "w_hh")), p(gru_name(l, "b_ih")),
                       p(gru_name(l, "b_hh"))};
    h = gru_sequence(h, w, batch.size, batch.seq_len);
  }
  out.hidden = h;
  out.ssm_logits = add_bias(matmul(h, p("ssm_head.w")), p("ssm_head.b"));
  return out;
}

GateTrace Model::gate_decide(const BoundParams& p, GateTrace trace, Var hidden, const Batch& batch,
                             const ForwardOptions& opts) const {
  Tape& tape = *hidden.tape();
  const std::size_t rows = batch.rows();
  switch (cfg_.gate_mode) {
    case GateMode::Entropy: {
      trace.soft = sigmoid(mul(p("gate.alpha"), sub(trace.normalized, p("gate.tau"))));
      break;
    }
    case GateMode::LearnedSte: {
      trace.soft = sigmoid(reshape(add_bias(matmul(hidden, p("probe.w")), p("probe.b")), Shape{rows}));
      break;
    }
    case GateMode::Oracle: {
      if (batch.needs_retrieval.size() != rows) throw ConfigError("oracle gate requires needs_retrieval labels");
      trace.hard = tape.constant(gate_tensor(batch.needs_retrieval));
      trace.soft = trace.hard;
      return trace;
    }
    case GateMode::AlwaysOn:
    case GateMode::AlwaysOff: {
      trace.hard = tape.constant(Tensor(Shape{rows}, cfg_.gate_mode == GateMode::AlwaysOn ? 1.0 : 0.0));
      trace.soft = trace.hard;
      return trace;
    }
  }
  trace.hard = opts.gate_gradient ? ste_threshold(trace.soft, 0.5) : ste_threshold(detach(trace.soft), 0.5);
  return trace;
}

KvPair Model::ghost_kv(const BoundParams& p, Var hidden, Var embedded) const {
  const Var src = cfg_.kv_source == KvSource::GhostSsm ? hidden : embedded;
  return KvPair{add_bias(matmul(src, p("attn.w_k")), p("attn.b_k")),
                add_bias(matmul(src, p("attn.w_v")), p("attn.b_v"))};
}

Var Model::sparse_attention(const BoundParams& p, Var hidden, const KvPair& kv, Var hard_gate, const Batch& batch,
                            const ForwardOptions& opts) const {
  const Var q = add_bias(matmul(hidden, p("attn.w_q")), p("attn.b_q"));
  SparseAttentionConfig ac;
  ac.shape = {batch.size, batch.seq_len, cfg_.n_heads};
  ac.top_k = cfg_.top_k;
  if (opts.train) {
    ac.dropout = cfg_.dropout;
    ac.dropout_seed = derive_seed(opts.dropout_seed, "attn");
  }
  const Var heads = sparse_topk_attention(q, kv.keys, kv.values, ac);
  const Var projected = add_bias(matmul(heads, p("attn.w_o")), p("attn.b_o"));
  return masked_scale(projected, hard_gate);
}

Var Model::combine_predict(const BoundParams& p, Var hidden, Var attention) const {
  const Var combined = add_bias(matmul(concat_lastdim(hidden, attention), p("combine.w")), p("combine.b"));
  return add_bias(matmul(combined, p("out.w")), p("out.b"));
}

Var Model::transformer_forward(const BoundParams& p, const Batch& batch, const ForwardOptions& opts) const {
  const std::size_t T = batch.seq_len;
  if (T > cfg_.max_positions) {
    throw ConfigError("sequence length " + std::to_string(T) + " exceeds max_positions " +
                      std::to_string(cfg_.max_positions));
  }
  std::vector<int> positions(batch.rows());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % T);
  Var x = add(embedding_lookup(p("tok_embed"), batch.tokens), embedding_lookup(p("pos_embed"), positions));
  const AttentionShape shape{batch.size, T, cfg_.n_heads};
  for (std::size_t l = 0; l < cfg_.n_transformer_layers; ++l) {
    const Var h = layer_norm(x, p(blk_name(l, "ln1.g")), p(blk_name(l, "ln1.b")));
    const Var q = add_bias(matmul(h, p(blk_name(l, "attn.w_q"))), p(blk_name(l, "attn.b_q")));
    const Var k = add_bias(matmul(h, p(blk_name(l, "attn.w_k"))), p(blk_name(l, "attn.b_k")));
    const Var v = add_bias(matmul(h, p(blk_name(l, "attn.w_v"))), p(blk_name(l, "attn.b_v")));
    Var a = add_bias(matmul(causal_attention(q, k, v, shape), p(blk_name(l, "attn.w_o"))), p(blk_name(l, "attn.b_o")));
    if (opts.train && cfg_.dropout > 0.0) a = dropout(a, cfg_.dropout, derive_seed(opts.dropout_seed, 2 * l));
    x = add(x, a);
    const Var h2 = layer_norm(x, p(blk_name(l, "ln2.g")), p(blk_name(l, "ln2.b")));
    const Var f1 = relu(add_bias(matmul(h2, p(blk_name(l, "ffn.w1"))), p(blk_name(l, "ffn.b1"))));
    Var f2 = add_bias(matmul(f1, p(blk_name(l, "ffn.w2"))), p(blk_name(l, "ffn.b2")));
    if (opts.train && cfg_.dropout > 0.0) f2 = dropout(f2, cfg_.dropout, derive_seed(opts.dropout_seed, 2 * l + 1));
    x = add(x, f2);
  }
  const Var hf = layer_norm(x, p("ln_f.g"), p("ln_f.b"));
  return add_bias(matmul(hf, p("out.w")), p("out.b"));
}

ForwardOutput Model::forward(Tape& tape, const Batch& batch, const ForwardOptions& opts, bool requires_grad) const {
  ForwardOutput out;
  out.params = bind(tape, requires_grad);
  const BoundParams& p = out.params;

  if (cfg_.arch == Architecture::Transformer) {
    out.logits = transformer_forward(p, batch, opts);
    out.gate = compute_entropy(detach(out.logits));
    return out;
  }

  const SsmOutput ssm = ssm_forward(p, batch, opts);
  out.embedded = ssm.embedded;
  out.hidden = ssm.hidden;
  out.ssm_logits = ssm.ssm_logits;
  if (cfg_.arch == Architecture::SsmOnly) {
    out.logits = ssm.ssm_logits;
    out.gate = compute_entropy(detach(ssm.ssm_logits));
    return out;
  }

  const bool entropy_in_graph = cfg_.gate_mode == GateMode::Entropy && !cfg_.detach_gate_logits;
  GateTrace trace = compute_entropy(entropy_in_graph ? ssm.ssm_logits : detach(ssm.ssm_logits));
  trace = gate_decide(p, trace, ssm.hidden, batch, opts);
  out.gate = trace;
  const KvPair kv = ghost_kv(p, ssm.hidden, ssm.embedded);
  out.attention = sparse_attention(p, ssm.hidden, kv, trace.hard, batch, opts);
  out.logits = combine_predict(p, ssm.hidden, out.attention);
  return out;
}

}  // namespace amor
