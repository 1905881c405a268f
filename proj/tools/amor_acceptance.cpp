// Runs the acceptance criteria at pinned tolerances and prints one PASS/FAIL
// line per criterion. Training-based criteria use the desk profile; their
// results documents are cached, keyed by the model library and the settings.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "amor/experiments.hpp"
#include "amor/fused.hpp"
#include "amor/grad_check.hpp"
#include "amor/ops.hpp"
#include "amor/rng.hpp"

namespace fs = std::filesystem;
using amor::Tape;
using amor::Tensor;
using amor::Var;
using nlohmann::json;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [x]");
    pass = pass && ok;
  }
};

std::string num(double v, int digits = 4) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Tensor random_tensor(amor::Shape shape, std::uint64_t seed, double scale = 1.0) {
  amor::Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

Var probe(Tape& tape, Var out, std::uint64_t seed) { return amor::sum(amor::mul(out, tape.constant(random_tensor(out.shape(), seed)))); }

amor::Batch toy_batch(std::size_t batch, std::size_t seq, int vocab, std::uint64_t seed) {
  amor::Rng rng(seed);
  amor::Batch b;
  b.size = batch;
  b.seq_len = seq;
  for (std::size_t i = 0; i < batch * seq; ++i) {
    b.tokens.push_back(static_cast<int>(rng.uniform_int(0, vocab - 1)));
    b.needs_retrieval.push_back(rng.bernoulli(0.25));
    b.impossible.push_back(0);
  }
  for (std::size_t i = 0; i < batch * seq; ++i) {
    const bool last = (i + 1) % seq == 0;
    b.targets.push_back(last ? amor::kIgnoreTarget : b.tokens[i + 1]);
    b.loss_mask.push_back(!last);
  }
  return b;
}

amor::ModelConfig tiny_model(amor::Architecture arch, amor::GateMode gate) {
  amor::ModelConfig c;
  c.arch = arch;
  c.gate_mode = gate;
  c.d_model = 8;
  c.n_heads = 2;
  c.dropout = 0.0;
  c.max_positions = 32;
  return c;
}

std::vector<double> logits_of(const amor::Model& m, const amor::Batch& b) {
  Tape tape;
  const auto d = m.forward(tape, b, {}, false).logits.value().data();
  return {d.begin(), d.end()};
}

// ---------------------------------------------------------------------------
// Criterion 1

Verdict gradient_integrity() {
  using namespace amor;
  struct Case {
    const char* name;
    GradFn f;
    std::vector<Tensor> inputs;
  };
  const Tensor a = random_tensor({3, 4}, 1), b = random_tensor({3, 4}, 2);
  Tensor pos = a, safe = a;
  for (auto& x : pos.data()) x = std::abs(x) + 0.5;
  for (auto& x : safe.data()) x = std::abs(x) < 1e-2 ? x + 0.05 : x;
  const std::vector<int> ids{4, 0, 4, 2};
  const std::vector<int> targets{1, 4, 0};
  const std::vector<std::uint8_t> mask{1, 0, 1};
  const std::vector<std::size_t> rows{2, 0, 2};
  const auto unary = [](Var (*op)(Var)) {
    return [op](Tape& t, std::span<const Var> v) { return probe(t, op(v[0]), 7); };
  };
  std::vector<Case> cases{
      {"add", [](Tape& t, std::span<const Var> v) { return probe(t, add(v[0], v[1]), 7); }, {a, b}},
      {"sub", [](Tape& t, std::span<const Var> v) { return probe(t, sub(v[0], v[1]), 7); }, {a, b}},
      {"mul", [](Tape& t, std::span<const Var> v) { return probe(t, mul(v[0], v[1]), 7); }, {a, b}},
      {"matmul", [](Tape& t, std::span<const Var> v) { return probe(t, matmul(v[0], v[1]), 7); },
       {a, random_tensor({4, 5}, 3)}},
      {"sigmoid", unary(sigmoid), {a}},
      {"tanh", unary(tanh), {a}},
      {"exp", unary(exp), {a}},
      {"log", unary(log), {pos}},
      {"relu", unary(relu), {safe}},
      {"scale", [](Tape& t, std::span<const Var> v) { return probe(t, scale(v[0], -1.7), 7); }, {a}},
      {"add_bias", [](Tape& t, std::span<const Var> v) { return probe(t, add_bias(v[0], v[1]), 7); },
       {a, random_tensor({4}, 4)}},
      {"softmax", unary(softmax_lastdim), {random_tensor({3, 6}, 5, 2.0)}},
      {"log_softmax", unary(log_softmax_lastdim), {random_tensor({3, 6}, 5, 2.0)}},
      {"entropy", unary(entropy_lastdim), {random_tensor({3, 6}, 5, 2.0)}},
      {"cross_entropy", [&](Tape&, std::span<const Var> v) { return cross_entropy(v[0], targets, mask); },
       {random_tensor({3, 5}, 6, 2.0)}},
      {"topk", [](Tape& t, std::span<const Var> v) { return probe(t, topk_lastdim(v[0], 3).values, 7); },
       {random_tensor({3, 7}, 8, 2.0)}},
      {"concat_lastdim", [](Tape& t, std::span<const Var> v) { return probe(t, concat_lastdim(v[0], v[1]), 7); },
       {a, random_tensor({3, 2}, 9)}},
      {"concat_rows",
       [](Tape& t, std::span<const Var> v) { return probe(t, concat_rows(std::vector<Var>{v[0], v[1]}), 7); }, {a, b}},
      {"slice_rows", [](Tape& t, std::span<const Var> v) { return probe(t, slice_rows(v[0], 1, 3), 7); }, {a}},
      {"slice_cols", [](Tape& t, std::span<const Var> v) { return probe(t, slice_cols(v[0], 1, 3), 7); }, {a}},
      {"gather_rows", [&](Tape& t, std::span<const Var> v) { return probe(t, gather_rows(v[0], rows), 7); }, {a}},
      {"transpose", unary(transpose), {a}},
      {"reshape", [](Tape& t, std::span<const Var> v) { return probe(t, reshape(v[0], Shape{2, 6}), 7); }, {a}},
      {"embedding", [&](Tape& t, std::span<const Var> v) { return probe(t, embedding_lookup(v[0], ids), 7); },
       {random_tensor({5, 3}, 10)}},
      {"masked_scale", [](Tape& t, std::span<const Var> v) { return probe(t, masked_scale(v[0], v[1]), 7); },
       {a, Tensor::vector({0.3, 1.0, 0.0})}},
      {"sum", [](Tape&, std::span<const Var> v) { return sum(mul(v[0], v[0])); }, {a}},
      {"mean", [](Tape&, std::span<const Var> v) { return mean(mul(v[0], v[0])); }, {a}},
      {"layer_norm", [](Tape& t, std::span<const Var> v) { return probe(t, layer_norm(v[0], v[1], v[2]), 7); },
       {random_tensor({3, 6}, 11, 2.0), random_tensor({6}, 12), random_tensor({6}, 13)}},
      {"dropout", [](Tape& t, std::span<const Var> v) { return probe(t, dropout(v[0], 0.3, 5), 7); }, {a}},
      {"gru_sequence",
       [](Tape& t, std::span<const Var> v) { return probe(t, gru_sequence(v[0], {v[1], v[2], v[3], v[4]}, 2, 3), 7); },
       {random_tensor({6, 2}, 14), random_tensor({2, 9}, 15), random_tensor({3, 9}, 16), random_tensor({9}, 17),
        random_tensor({9}, 18)}},
      {"sparse_attention",
       [](Tape& t, std::span<const Var> v) {
         return probe(t, sparse_topk_attention(v[0], v[1], v[2], {{2, 5, 2}, 2}), 7);
       },
       {random_tensor({10, 4}, 19), random_tensor({10, 4}, 20), random_tensor({10, 4}, 21)}},
      {"causal_attention",
       [](Tape& t, std::span<const Var> v) { return probe(t, causal_attention(v[0], v[1], v[2], {2, 4, 2}), 7); },
       {random_tensor({8, 4}, 22), random_tensor({8, 4}, 23), random_tensor({8, 4}, 24)}},
  };

  Verdict v;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    const double e = grad_check(c.f, c.inputs).max_rel_error;
    if (e > worst) worst = e, worst_name = c.name;
    if (!(e < 1e-4)) v.require(false, std::string(c.name) + " rel err " + num(e, 8));
  }
  v.require(worst < 1e-4, std::to_string(cases.size()) + " ops max rel err " + num(worst * 1e6, 3) + "e-6 (" +
                              worst_name + ") < 1e-4");

  // Full Amor forward at T=8, d=8, |V|=11 with the gate threshold moved to the
  // median so both gate states occur; the STE path itself is excluded.
  Model m(tiny_model(Architecture::Amor, GateMode::Entropy), 14);
  m.params().get("embed") = random_tensor({11, 8}, 15);
  const Batch batch = toy_batch(2, 8, 11, 16);
  {
    Tape tape;
    const auto d = m.forward(tape, batch, {}, false).gate.normalized.value().data();
    std::vector<double> n(d.begin(), d.end());
    std::nth_element(n.begin(), n.begin() + 8, n.end());
    m.params().get("gate.tau") = Tensor::scalar(0.5 * (n[7] + n[8]));
    m.params().get("gate.alpha") = Tensor::scalar(400.0);
  }
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < m.params().size(); ++i) params.push_back(m.params()[i]);
  const auto full = grad_check(
      [&](Tape&, std::span<const Var> vars) {
        const BoundParams p{&m.params(), {vars.begin(), vars.end()}};
        ForwardOptions opts;
        opts.gate_gradient = false;
        const SsmOutput ssm = m.ssm_forward(p, batch, opts);
        const GateTrace g = m.gate_decide(p, compute_entropy(ssm.ssm_logits), ssm.hidden, batch, opts);
        const Var attn = m.sparse_attention(p, ssm.hidden, m.ghost_kv(p, ssm.hidden, ssm.embedded), g.hard, batch, opts);
        const Var logits = m.combine_predict(p, ssm.hidden, attn);
        return add(cross_entropy(logits, batch.targets, batch.loss_mask), scale(mean(g.soft), 0.5));
      },
      params);
  v.require(full.max_rel_error < 1e-3, "full AMOR forward (" + std::to_string(full.checked) + " params) max rel err " +
                                           num(full.max_rel_error * 1e6, 3) + "e-6 < 1e-3");
  return v;
}

// ---------------------------------------------------------------------------
// Criteria 2-8: trained experiments

const json& run_of(const json& doc, const std::string& label) {
  for (const auto& r : doc.at("runs"))
    if (r.at("label") == label) return r;
  throw std::runtime_error("results have no run '" + label + "'");
}

double metric(const json& doc, const std::string& label, const char* key) {
  const json& r = run_of(doc, label);
  if (!r.at("error").is_null()) throw std::runtime_error(label + " failed: " + r.at("error").get<std::string>());
  const json& v = r.at("metrics").at(key);
  if (v.is_null()) throw std::runtime_error(label + " has no " + key);
  return v.get<double>();
}

Verdict entropy_gap(const json& doc) {
  Verdict v;
  const double ret = metric(doc, "ssm_only", "entropy_mean_retrieval");
  const double loc = metric(doc, "ssm_only", "entropy_mean_local");
  v.require(ret - loc > 0.5, "gap " + num(ret - loc) + " nats > 0.5");
  v.require(ret > loc, "retrieval " + num(ret) + " > local " + num(loc));
  return v;
}

Verdict simple_table(const json& doc) {
  Verdict v;
  const double amor = metric(doc, "amor_entropy", "retrieval_acc");
  const double ssm = metric(doc, "ssm_only", "retrieval_acc");
  const double amor_all = metric(doc, "amor_entropy", "overall_acc");
  const double ssm_all = metric(doc, "ssm_only", "overall_acc");
  const double rate = metric(doc, "amor_entropy", "gate_rate");
  v.require(amor >= 0.95, "AMOR-Entropy retrieval " + num(amor) + " >= 0.95");
  v.require(ssm <= amor - 0.15, "SSM-only retrieval " + num(ssm) + " <= AMOR - 0.15");
  v.require(amor_all >= ssm_all - 0.02, "overall " + num(amor_all) + " >= SSM-only " + num(ssm_all) + " - 0.02");
  v.require(rate >= 0.05 && rate <= 0.45, "gate rate " + num(rate) + " in [0.05, 0.45]");
  return v;
}

Verdict gate_recall(const json& doc) {
  Verdict v;
  const double r = metric(doc, "amor_entropy", "gate_recall");
  v.require(r >= 0.99, "AMOR-Entropy gate recall " + num(r) + " >= 0.99");
  return v;
}

Verdict ghost_kv(const json& doc) {
  Verdict v;
  const double ghost = metric(doc, "ghost_kv", "retrieval_acc");
  const double raw = metric(doc, "raw_embedding_kv", "retrieval_acc");
  v.require(ghost >= 3.0 * raw, "Ghost " + num(ghost) + " >= 3 x RawEmbedding " + num(raw));
  const double rg = metric(doc, "ghost_kv", "gate_rate"), rr = metric(doc, "raw_embedding_kv", "gate_rate");
  v.require(rg == rr, "gate rates identical (" + num(rg) + ")");
  return v;
}

Verdict needle_order(const json& doc) {
  Verdict v;
  const double oracle = metric(doc, "amor_oracle", "retrieval_acc");
  const double entropy = metric(doc, "amor_entropy", "retrieval_acc");
  const double full = metric(doc, "full_attention", "retrieval_acc");
  v.require(oracle > entropy && entropy > full,
            "Oracle " + num(oracle) + " > Entropy " + num(entropy) + " > Full-Attention " + num(full));
  const double ro = metric(doc, "amor_oracle", "gate_rate"), re = metric(doc, "amor_entropy", "gate_rate");
  v.require(ro < 0.05, "Oracle gate rate " + num(ro) + " < 0.05");
  v.require(re > 0.5, "Entropy gate rate " + num(re) + " > 0.5");
  return v;
}

Verdict sparsity(const json& doc, std::uint64_t seed) {
  Verdict v;
  const std::string s = "_seed" + std::to_string(seed);
  const double k3 = metric(doc, "topk3" + s, "retrieval_acc");
  const double k16 = metric(doc, "topk16" + s, "retrieval_acc");
  v.require(k3 > k16, "k=3 " + num(k3) + " > k=16 " + num(k16));
  return v;
}

Verdict horizon(const json& doc) {
  Verdict v;
  const json& sweep = doc.at("summary").at("noise_sweep");
  const json& lo = sweep.at("10");
  const json& hi = sweep.at("100");
  const double mlo = lo.at("retrieval_acc_mean"), mhi = hi.at("retrieval_acc_mean");
  v.require(lo.at("n_runs") == 5 && hi.at("n_runs") == 5, "5 seeds per noise level");
  v.require(mlo > mhi, "noise 10 mean " + num(mlo) + " > noise 100 mean " + num(mhi));
  const double slo = lo.at("retrieval_acc_std"), shi = hi.at("retrieval_acc_std");
  v.require(slo > 0.0 && shi > 0.0, "cross-seed std " + num(slo) + " / " + num(shi) + " nonzero");
  return v;
}

// ---------------------------------------------------------------------------
// Criterion 9

Verdict parameter_counts() {
  using namespace amor;
  Verdict v;
  const Settings full;  // full-scale defaults, Simple-task vocabulary
  const TaskConfig task = task_config(full, TaskKind::SimpleRetrieval);
  const auto count = [&](Architecture a) {
    return Model(model_config(full, a, GateMode::Entropy, task), 0).parameter_count();
  };
  const std::pair<const char*, std::pair<Architecture, double>> rows[] = {
      {"SSM-only", {Architecture::SsmOnly, 51e3}},
      {"Full Attention", {Architecture::Transformer, 167e3}},
      {"AMOR", {Architecture::Amor, 77e3}}};
  for (const auto& [name, spec] : rows) {
    const double n = static_cast<double>(count(spec.first));
    v.require(std::abs(n / spec.second - 1.0) <= 0.15,
              std::string(name) + " " + std::to_string(static_cast<long>(n)) + " within 15% of " +
                  std::to_string(static_cast<long>(spec.second / 1000)) + "K");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Criterion 10

// Digest of generated tokens and labels; pinned so any platform or compiler
// that changes a single draw fails.
std::uint64_t generator_digest(const amor::TaskConfig& cfg) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& s : amor::make_batch(cfg, 42, 64)) {
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      const std::string cell = std::to_string(s.tokens[t]) + ',' + std::to_string(s.targets[t]) + ',' +
                               std::to_string(s.needs_retrieval[t]) + std::to_string(s.impossible[t]) + ';';
      h = fnv1a(cell, h);
    }
  }
  return h;
}

constexpr std::uint64_t kSimpleDigest = 0x858464a2e6aa4952ull;
constexpr std::uint64_t kNeedleDigest = 0x2f852d76e3a18bddull;

amor::Settings micro_settings() {
  amor::Settings s;
  s.apply_text(R"(
model.d_model = 8
model.n_heads = 2
model.n_transformer_layers = 1
model.ffn_mult = 2
train.batch_size = 2
train.steps_per_epoch = 3
train.eval_size = 4
simple.epochs = 2
simple.seq_len = 64
needle.epochs = 2
needle.seq_len = 96
needle.noise_len = 10,30
diagnose.noise_levels = 10,30
diagnose.top_k = 3,16
)");
  return s;
}

Verdict determinism() {
  using namespace amor;
  Verdict v;
  std::size_t identical = 0;
  for (const auto& name : experiment_names()) {
    ExperimentRequest req{name, name == "diagnose" ? std::vector<std::uint64_t>{42, 43} : std::vector<std::uint64_t>{42},
                          micro_settings(), 1};
    const json a = strip_volatile(run_experiment(req).document);
    const json b = strip_volatile(run_experiment(req).document);
    if (a == b) {
      ++identical;
    } else {
      v.require(false, name + " rerun differs");
    }
  }
  v.require(identical == experiment_names().size(),
            std::to_string(identical) + "/" + std::to_string(experiment_names().size()) +
                " commands bit-identical on rerun");
  const std::uint64_t ds = generator_digest(TaskConfig::simple_retrieval());
  const std::uint64_t dn = generator_digest(TaskConfig::needle_haystack());
  char buf[96];
  std::snprintf(buf, sizeof buf, "generator digests %016llx/%016llx match pinned", static_cast<unsigned long long>(ds),
                static_cast<unsigned long long>(dn));
  v.require(ds == kSimpleDigest && dn == kNeedleDigest, buf);
  return v;
}

// ---------------------------------------------------------------------------
// Criterion 11

bool causality_holds() {
  using namespace amor;
  for (Architecture arch : {Architecture::Amor, Architecture::SsmOnly, Architecture::Transformer}) {
    for (GateMode gate : {GateMode::Entropy, GateMode::AlwaysOn}) {
      const Model m(tiny_model(arch, gate), 8);
      const std::size_t T = 10;
      const Batch b = toy_batch(2, T, 11, 9);
      const auto base = logits_of(m, b);
      for (std::size_t t0 = 0; t0 < T; ++t0) {
        Batch p = b;
        for (std::size_t s = 0; s < 2; ++s) p.tokens[s * T + t0] = (p.tokens[s * T + t0] + 5) % 11;
        const auto moved = logits_of(m, p);
        for (std::size_t s = 0; s < 2; ++s)
          for (std::size_t i = s * T * 11; i < (s * T + t0) * 11; ++i)
            if (moved[i] != base[i]) return false;
      }
    }
  }
  return true;
}

bool gate_off_equivalence() {
  using namespace amor;
  const Batch b = toy_batch(2, 7, 11, 4);
  const Model off(tiny_model(Architecture::Amor, GateMode::AlwaysOff), 5);
  Tape tape;
  const ForwardOutput out = off.forward(tape, b, {}, false);
  for (double x : out.attention.value().data())
    if (x != 0.0) return false;
  const Var zeros = tape.constant(Tensor(amor::Shape{14, 8}));
  const auto direct = off.combine_predict(out.params, out.hidden, zeros).value().data();
  const auto logits = out.logits.value().data();
  return std::equal(direct.begin(), direct.end(), logits.begin(), logits.end());
}

bool masked_gradient_zero() {
  using namespace amor;
  const Model m(tiny_model(Architecture::Amor, GateMode::Oracle), 6);
  Batch b = toy_batch(2, 8, 11, 7);
  std::fill(b.needs_retrieval.begin(), b.needs_retrieval.end(), 0);
  Tape tape;
  const ForwardOutput out = m.forward(tape, b, {}, true);
  tape.backward(cross_entropy(out.logits, b.targets, b.loss_mask));
  for (const char* name : {"attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "attn.b_q", "attn.b_k", "attn.b_v", "attn.b_o"})
    for (double g : out.params(name).grad())
      if (g != 0.0) return false;
  const auto g = out.logits.grad();
  for (std::size_t c = 0; c < 11; ++c)
    if (g[7 * 11 + c] != 0.0 || g[15 * 11 + c] != 0.0) return false;
  return true;
}

bool softmax_normalized() {
  Tape tape;
  const Tensor x = Tensor::matrix({{1000.0, 0.0, -1000.0}, {-5.0, -5.0, -5.0}, {0.1, 0.2, 0.3}});
  const Tensor p = amor::softmax_lastdim(tape.constant(x)).value();
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) s += p.at(r, c);
    if (std::abs(s - 1.0) > 1e-12) return false;
  }
  const Tensor big = random_tensor({50, 19}, 3, 30.0);
  const Tensor q = amor::softmax_lastdim(tape.constant(big)).value();
  for (std::size_t r = 0; r < q.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < q.cols(); ++c) s += q.at(r, c);
    if (std::abs(s - 1.0) > 1e-12) return false;
  }
  return true;
}

bool topk_ties() {
  Tape tape;
  const Var x = tape.constant(Tensor::matrix({{1.0, 3.0, 3.0, 2.0, 3.0}}));
  for (int rep = 0; rep < 10; ++rep) {
    if (amor::topk_lastdim(x, 2).indices != std::vector<std::size_t>{1, 2}) return false;
    if (amor::topk_lastdim(x, 4).indices != std::vector<std::size_t>{1, 2, 4, 3}) return false;
  }
  return true;
}

// Token-level re-derivation of every label; returns the number of sequences
// whose labels disagree.
std::size_t label_violations(const amor::TaskConfig& cfg, std::size_t n) {
  std::size_t bad = 0;
  for (const auto& s : amor::make_batch(cfg, 1234, n)) {
    bool ok = s.tokens.size() == cfg.seq_len;
    const std::size_t T = s.tokens.size();
    for (std::size_t t = 0; t < T; ++t) ok = ok && s.targets[t] == (t + 1 < T ? s.tokens[t + 1] : amor::kIgnoreTarget);
    if (cfg.kind == amor::TaskKind::SimpleRetrieval) {
      std::optional<std::size_t> value_pos;
      for (std::size_t t = 0; t < T && ok; ++t) {
        if (s.tokens[t] == cfg.special(0)) {
          ok = !value_pos && t + 1 < T && s.tokens[t + 1] < cfg.content_vocab;
          value_pos = t + 1;
        }
        const bool recall = s.tokens[t] == cfg.special(1);
        ok = ok && recall == (s.needs_retrieval[t] == 1) && s.impossible[t] == 0;
        if (recall) {
          ok = ok && value_pos && s.targets[t] == s.tokens[*value_pos];
          if (ok) {
            const auto dist = static_cast<int>(t - *value_pos);
            ok = dist >= cfg.retrieval_distance.lo && dist <= cfg.retrieval_distance.hi;
          }
          value_pos.reset();
        }
      }
      ok = ok && !value_pos;
    } else {
      std::map<int, int> store;
      std::size_t t = 0;
      while (ok && t + 2 < T && s.tokens[t] == cfg.special(0)) {
        ok = store.insert({s.tokens[t + 1], s.tokens[t + 2]}).second;
        t += 3;
      }
      for (std::size_t p = 0; p < T && ok; ++p) {
        const bool query = p >= t && p > 0 && s.tokens[p - 1] == cfg.special(1);
        if (!query) {
          ok = s.needs_retrieval[p] == 0 && s.impossible[p] == 0;
        } else if (store.count(s.tokens[p])) {
          ok = s.needs_retrieval[p] == 1 && s.impossible[p] == 0 && s.targets[p] == store[s.tokens[p]];
        } else {
          ok = s.needs_retrieval[p] == 0 && s.impossible[p] == 1 && s.targets[p] == cfg.special(2);
        }
      }
    }
    bad += !ok;
  }
  return bad;
}

Verdict property_suites() {
  Verdict v;
  v.require(causality_holds(), "causality (3 architectures, every position)");
  v.require(gate_off_equivalence(), "gate-off equivalence");
  v.require(masked_gradient_zero(), "masked-gradient zero");
  v.require(softmax_normalized(), "softmax normalization");
  v.require(topk_ties(), "top-k tie determinism");
  amor::TaskConfig needle = amor::TaskConfig::needle_haystack();
  needle.impossible_prob = 0.2;
  const std::size_t bs = label_violations(amor::TaskConfig::simple_retrieval(), 1000);
  const std::size_t bn = label_violations(needle, 1000);
  v.require(bs == 0 && bn == 0, "label soundness on 1000+1000 sequences (" + std::to_string(bs + bn) + " violations)");
  return v;
}

// ---------------------------------------------------------------------------

struct Runner {
  amor::Settings profile;
  std::uint64_t library_hash = 0;
  fs::path cache_dir;
  bool use_cache = true;
  std::size_t jobs = 1;

  json experiment(const std::string& name, std::vector<std::uint64_t> seeds, amor::Settings settings) const {
    std::ostringstream key;
    key << name;
    for (auto s : seeds) key << ':' << s;
    key << '\n' << settings.to_json().dump();
    char file[64];
    std::snprintf(file, sizeof file, "%016llx.json",
                  static_cast<unsigned long long>(fnv1a(key.str(), library_hash)));
    const fs::path path = cache_dir / (name + "-" + file);
    if (use_cache && fs::exists(path)) {
      std::printf("  (cached %s)\n", path.filename().c_str());
      return json::parse(read_file(path));
    }
    std::printf("  running %s ...\n", name.c_str());
    std::fflush(stdout);
    const auto t0 = std::chrono::steady_clock::now();
    const amor::ExperimentResult r = amor::run_experiment({name, std::move(seeds), std::move(settings), jobs});
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("  %s finished in %.0f s\n", name.c_str(), secs);
    fs::create_directories(cache_dir);
    std::ofstream(path) << r.document.dump(1) << '\n';
    return r.document;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AMOR acceptance criteria"};
  std::string profile_path = AMOR_DESK_PROFILE;
  std::string cache_dir = "acceptance-cache";
  bool no_cache = false;
  bool print_digests = false;
  std::vector<int> only;
  std::size_t jobs = 1;
  std::uint64_t seed = 42;
  app.add_option("--profile", profile_path, "settings file for the trained criteria")->capture_default_str();
  app.add_option("--cache-dir", cache_dir, "results cache")->capture_default_str();
  app.add_flag("--no-cache", no_cache, "ignore cached results");
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  app.add_option("--jobs", jobs, "worker threads for sub-runs")->capture_default_str();
  app.add_flag("--print-digests", print_digests, "print task generator digests and exit");
  CLI11_PARSE(app, argc, argv);

  if (print_digests) {
    std::printf("%016llx %016llx\n",
                static_cast<unsigned long long>(generator_digest(amor::TaskConfig::simple_retrieval())),
                static_cast<unsigned long long>(generator_digest(amor::TaskConfig::needle_haystack())));
    return 0;
  }

  Runner run;
  try {
    run.profile.apply_file(profile_path);
    run.library_hash = fnv1a(read_file(AMOR_LIBRARY_FILE));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance setup failed: %s\n", e.what());
    return 2;
  }
  run.cache_dir = cache_dir;
  run.use_cache = !no_cache;
  run.jobs = jobs;

  const auto with = [&](std::initializer_list<std::pair<const char*, const char*>> extra) {
    amor::Settings s = run.profile;
    for (const auto& [k, v] : extra) s.set(k, v);
    return s;
  };

  struct Criterion {
    int id;
    const char* name;
    std::function<Verdict()> check;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient integrity", gradient_integrity},
      {2, "entropy gap", [&] { return entropy_gap(run.experiment("verify-entropy", {seed}, run.profile)); }},
      {3, "simple-task table", [&] { return simple_table(run.experiment("run-baselines", {seed}, run.profile)); }},
      {4, "gate recall", [&] { return gate_recall(run.experiment("run-baselines", {seed}, run.profile)); }},
      {5, "ghost-kv superiority", [&] { return ghost_kv(run.experiment("compare-kv", {seed}, run.profile)); }},
      {6, "needlehaystack ordering", [&] { return needle_order(run.experiment("needlehaystack", {seed}, run.profile)); }},
      {7, "sparsity ablation",
       [&] {
         return sparsity(run.experiment("diagnose", {seed, seed + 1, seed + 2, seed + 3, seed + 4},
                                        with({{"diagnose.parts", "noise,topk"}})),
                         seed);
       }},
      {8, "horizon degradation",
       [&] {
         return horizon(run.experiment("diagnose", {seed, seed + 1, seed + 2, seed + 3, seed + 4},
                                       with({{"diagnose.parts", "noise,topk"}})));
       }},
      {9, "parameter counts", parameter_counts},
      {10, "determinism", determinism},
      {11, "property suites", property_suites},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("error: ") + e.what();
    }
    failed += !v.pass;
    std::printf("%s  %2d %-24s %s\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d criteria failed\n", failed);
  return failed ? 1 : 0;
}
