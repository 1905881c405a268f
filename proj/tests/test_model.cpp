#include <algorithm>
#include <cmath>
#include <filesystem>

#include "amor/checkpoint.hpp"
#include "amor/model.hpp"
#include "amor/ops.hpp"
#include "amor/rng.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace amor;
using amor::test::expect_gradients;
using amor::test::max_abs_diff;
using amor::test::random_tensor;

namespace {

Batch toy_batch(std::size_t batch, std::size_t seq, int vocab, std::uint64_t seed, double retrieval = 0.25) {
  Rng rng(seed);
  Batch b;
  b.size = batch;
  b.seq_len = seq;
  for (std::size_t i = 0; i < batch * seq; ++i) {
    b.tokens.push_back(static_cast<int>(rng.uniform_int(0, vocab - 1)));
    b.needs_retrieval.push_back(rng.bernoulli(retrieval) ? 1 : 0);
    b.impossible.push_back(0);
  }
  for (std::size_t i = 0; i < batch * seq; ++i) {
    const bool last = (i + 1) % seq == 0;
    b.targets.push_back(last ? kIgnoreTarget : b.tokens[i + 1]);
    b.loss_mask.push_back(last ? 0 : 1);
  }
  return b;
}

ModelConfig tiny(Architecture arch, GateMode gate = GateMode::Entropy) {
  ModelConfig c;
  c.arch = arch;
  c.gate_mode = gate;
  c.d_model = 8;
  c.n_heads = 2;
  c.dropout = 0.0;
  c.max_positions = 32;
  return c;
}

std::vector<double> values(Var v) { return {v.value().data().begin(), v.value().data().end()}; }

std::vector<double> logits_of(const Model& m, const Batch& b) {
  Tape tape;
  return values(m.forward(tape, b, {}, false).logits);
}

// Rebuilds the Amor forward from its public stages so finite differences can
// perturb parameters supplied as tape leaves.
Var amor_loss(const Model& m, const Batch& b, std::span<const Var> vars) {
  BoundParams p{&m.params(), {vars.begin(), vars.end()}};
  ForwardOptions opts;
  opts.gate_gradient = false;
  const SsmOutput ssm = m.ssm_forward(p, b, opts);
  const GateTrace gate = m.gate_decide(p, compute_entropy(ssm.ssm_logits), ssm.hidden, b, opts);
  const Var attn = m.sparse_attention(p, ssm.hidden, m.ghost_kv(p, ssm.hidden, ssm.embedded), gate.hard, b, opts);
  const Var logits = m.combine_predict(p, ssm.hidden, attn);
  return add(cross_entropy(logits, b.targets, b.loss_mask), scale(mean(gate.soft), 0.5));
}

std::vector<Tensor> param_values(const Model& m) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < m.params().size(); ++i) out.push_back(m.params()[i]);
  return out;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("parameter counts at the Simple-task vocabulary") {
    ModelConfig c;
    c.arch = Architecture::SsmOnly;
    const std::size_t ssm = Model(c, 1).parameter_count();
    c.arch = Architecture::Amor;
    const std::size_t amor = Model(c, 1).parameter_count();
    c.arch = Architecture::Transformer;
    const std::size_t transformer = Model(c, 1).parameter_count();
    MESSAGE("ssm_only " << ssm << ", amor " << amor << ", transformer " << transformer);
    CHECK(ssm == 51339);
    CHECK(amor == 76952);
    CHECK(transformer == 167051);
    CHECK(std::abs(static_cast<double>(ssm) / 51000.0 - 1.0) < 0.15);
    CHECK(std::abs(static_cast<double>(amor) / 77000.0 - 1.0) < 0.15);
    CHECK(std::abs(static_cast<double>(transformer) / 167000.0 - 1.0) < 0.15);
  }

  TEST_CASE("config validation and JSON round trip") {
    ModelConfig c;
    c.gate_mode = GateMode::LearnedSte;
    c.kv_source = KvSource::RawEmbedding;
    c.top_k = 16;
    CHECK(model_config_from_json(to_json(c)) == c);
    ModelConfig bad;
    bad.n_heads = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ModelConfig{};
    bad.dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(gate_mode_from_string("sometimes"), ConfigError);
    CHECK(architecture_from_string(to_string(Architecture::SsmOnly)) == Architecture::SsmOnly);
  }

  TEST_CASE("normalised entropy is 1 for uniform logits and entropy needs two classes") {
    Tape tape;
    const GateTrace g = compute_entropy(tape.constant(Tensor(Shape{3, 11}, 0.7)));
    for (double x : g.normalized.value().data()) CHECK(x == doctest::Approx(1.0).epsilon(1e-12));
    for (double x : g.entropy.value().data()) CHECK(x == doctest::Approx(std::log(11.0)).epsilon(1e-12));
    CHECK_THROWS(compute_entropy(tape.constant(Tensor(Shape{2, 1}))));
  }

  TEST_CASE("toy gating example: only the high-entropy positions fire") {
    const Model m(tiny(Architecture::Amor), 3);
    const Batch b = toy_batch(1, 9, 11, 1);
    Tape tape;
    const BoundParams p = m.bind(tape, false);
    const std::vector<double> entropy{0.2, 0.3, 1.9, 0.4, 0.2, 0.3, 2.1, 0.2, 0.3};
    Tensor normalized(Shape{9});
    for (std::size_t i = 0; i < 9; ++i) normalized[i] = entropy[i] / std::log(11.0);
    GateTrace trace;
    trace.normalized = tape.constant(normalized);
    const GateTrace g = m.gate_decide(p, trace, tape.constant(Tensor(Shape{9, 8})), b, {});
    CHECK(values(g.hard) == std::vector<double>{0, 0, 1, 0, 0, 0, 1, 0, 0});
  }

  TEST_CASE("oracle gate reproduces the labels") {
    const Model m(tiny(Architecture::Amor, GateMode::Oracle), 3);
    const Batch b = toy_batch(2, 6, 11, 2);
    Tape tape;
    const ForwardOutput out = m.forward(tape, b, {}, false);
    const std::vector<double> labels(b.needs_retrieval.begin(), b.needs_retrieval.end());
    CHECK(values(out.gate.hard) == labels);
  }

  TEST_CASE("gate off: the attention branch contributes exactly nothing") {
    const Batch b = toy_batch(2, 7, 11, 4);
    const Model off(tiny(Architecture::Amor, GateMode::AlwaysOff), 5);
    Tape tape;
    const ForwardOutput out = off.forward(tape, b, {}, false);
    for (double x : out.attention.value().data()) CHECK(x == 0.0);
    const Var zeros = tape.constant(Tensor(Shape{14, 8}));
    CHECK(values(out.logits) == values(off.combine_predict(out.params, out.hidden, zeros)));

    // An oracle gate with no retrieval positions is the same model as gate-off.
    Batch none = b;
    std::fill(none.needs_retrieval.begin(), none.needs_retrieval.end(), 0);
    const Model oracle(tiny(Architecture::Amor, GateMode::Oracle), 5);
    CHECK(logits_of(oracle, none) == logits_of(off, none));
  }

  TEST_CASE("closed gates and masked targets receive zero gradient") {
    const Model m(tiny(Architecture::Amor, GateMode::Oracle), 6);
    Batch b = toy_batch(2, 8, 11, 7);
    std::fill(b.needs_retrieval.begin(), b.needs_retrieval.end(), 0);
    Tape tape;
    const ForwardOutput out = m.forward(tape, b, {}, true);
    tape.backward(cross_entropy(out.logits, b.targets, b.loss_mask));
    for (const char* name : {"attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "attn.b_q", "attn.b_o"}) {
      CAPTURE(name);
      for (double g : out.params(name).grad()) CHECK(g == 0.0);
    }
    // Rows whose target is ignored contribute nothing to the logits gradient.
    const auto g = out.logits.grad();
    for (std::size_t r : {7u, 15u})
      for (std::size_t c = 0; c < 11; ++c) CHECK(g[r * 11 + c] == 0.0);
    double other = 0.0;
    for (std::size_t c = 0; c < 11; ++c) other += std::abs(g[3 * 11 + c]);
    CHECK(other > 0.0);
  }

  TEST_CASE("causality: perturbing position t never changes earlier logits") {
    for (Architecture arch : {Architecture::Amor, Architecture::SsmOnly, Architecture::Transformer}) {
      for (GateMode gate : {GateMode::Entropy, GateMode::AlwaysOn}) {
        CAPTURE(to_string(arch));
        CAPTURE(to_string(gate));
        const Model m(tiny(arch, gate), 8);
        const std::size_t T = 10;
        const Batch b = toy_batch(2, T, 11, 9);
        const auto base = logits_of(m, b);
        for (std::size_t t0 : {0u, 4u, 9u}) {
          Batch p = b;
          for (std::size_t s = 0; s < 2; ++s) p.tokens[s * T + t0] = (p.tokens[s * T + t0] + 5) % 11;
          const auto moved = logits_of(m, p);
          bool later_changed = false;
          for (std::size_t s = 0; s < 2; ++s)
            for (std::size_t t = 0; t < T; ++t)
              for (std::size_t c = 0; c < 11; ++c) {
                const std::size_t i = (s * T + t) * 11 + c;
                if (t < t0) CHECK(moved[i] == base[i]);
                if (t >= t0 && moved[i] != base[i]) later_changed = true;
              }
          CHECK(later_changed);
        }
      }
    }
  }

  TEST_CASE("kv source toggle") {
    const Batch b = toy_batch(2, 8, 11, 10);
    ModelConfig c = tiny(Architecture::Amor, GateMode::AlwaysOn);
    const Model ghost(c, 11);
    c.kv_source = KvSource::RawEmbedding;
    const Model raw(c, 11);
    CHECK(ghost.params() == raw.params());
    CHECK(logits_of(ghost, b) != logits_of(raw, b));

    Tape tape;
    const ForwardOutput out = ghost.forward(tape, b, {}, false);
    const KvPair kv = raw.ghost_kv(out.params, out.hidden, out.embedded);
    const Var expect = add_bias(matmul(out.embedded, out.params("attn.w_k")), out.params("attn.b_k"));
    CHECK(values(kv.keys) == values(expect));
    const KvPair gk = ghost.ghost_kv(out.params, out.hidden, out.embedded);
    CHECK(values(gk.values) == values(add_bias(matmul(out.hidden, out.params("attn.w_v")), out.params("attn.b_v"))));
  }

  TEST_CASE("SSM-only equals the Amor SSM path under a shared seed") {
    const Batch b = toy_batch(2, 9, 11, 12);
    const Model ssm(tiny(Architecture::SsmOnly), 13);
    const Model amor(tiny(Architecture::Amor), 13);
    for (std::size_t i = 0; i < ssm.params().size(); ++i) CHECK(ssm.params()[i] == amor.params()[i]);
    Tape tape;
    const ForwardOutput a = amor.forward(tape, b, {}, false);
    CHECK(logits_of(ssm, b) == values(a.ssm_logits));
  }

  TEST_CASE("full Amor forward agrees with finite differences (T=8, d=8, V=11)") {
    Model m(tiny(Architecture::Amor), 14);
    m.params().get("embed") = random_tensor({11, 8}, 15);  // O(1) embeddings keep every gradient well scaled
    const Batch b = toy_batch(2, 8, 11, 16);
    {
      // Put the threshold at the median normalised entropy so both gate states occur.
      Tape tape;
      auto n = values(m.forward(tape, b, {}, false).gate.normalized);
      std::nth_element(n.begin(), n.begin() + 8, n.end());
      m.params().get("gate.tau") = Tensor::scalar(0.5 * (n[7] + n[8]));
      m.params().get("gate.alpha") = Tensor::scalar(400.0);
    }
    {
      Tape tape;
      const ForwardOutput out = m.forward(tape, b, {}, false);
      double min_margin = 1.0;
      for (double s : out.gate.soft.value().data()) min_margin = std::min(min_margin, std::abs(s - 0.5));
      std::size_t fired = 0;
      for (double h : out.gate.hard.value().data()) fired += h > 0.5;
      MESSAGE("gate fired " << fired << " of 16, min |soft - 0.5| " << min_margin);
      REQUIRE(min_margin > 1e-3);  // no finite-difference step can flip a gate
      REQUIRE(fired > 0);
    }
    expect_gradients([&](Tape&, std::span<const Var> v) { return amor_loss(m, b, v); }, param_values(m), 1e-3);
  }

  TEST_CASE("full transformer agrees with finite differences") {
    ModelConfig c = tiny(Architecture::Transformer);
    c.n_transformer_layers = 1;
    c.ffn_mult = 2;
    c.max_positions = 6;
    const Model m(c, 17);
    const Batch b = toy_batch(2, 6, 11, 18);
    expect_gradients(
        [&](Tape&, std::span<const Var> v) {
          const BoundParams p{&m.params(), {v.begin(), v.end()}};
          return cross_entropy(m.transformer_forward(p, b, {}), b.targets, b.loss_mask);
        },
        param_values(m), 1e-3);
  }

  TEST_CASE("straight-through gate gradient reaches the learned probe") {
    const Model m(tiny(Architecture::Amor, GateMode::LearnedSte), 19);
    const Batch b = toy_batch(2, 8, 11, 20);
    Tape tape;
    const ForwardOutput out = m.forward(tape, b, {}, true);
    tape.backward(cross_entropy(out.logits, b.targets, b.loss_mask));
    double norm = 0.0;
    for (double g : out.params("probe.w").grad()) norm += std::abs(g);
    CHECK(norm > 0.0);
  }

  TEST_CASE("dropout is deterministic and only active in training") {
    ModelConfig c = tiny(Architecture::Amor, GateMode::AlwaysOn);
    c.dropout = 0.3;
    const Model m(c, 21);
    const Batch b = toy_batch(2, 8, 11, 22);
    const auto run = [&](bool train, std::uint64_t seed) {
      Tape tape;
      ForwardOptions o;
      o.train = train;
      o.dropout_seed = seed;
      return values(m.forward(tape, b, o, false).logits);
    };
    CHECK(run(true, 1) == run(true, 1));
    CHECK(run(true, 1) != run(true, 2));
    CHECK(run(false, 1) == run(false, 2));
    CHECK(run(false, 1) == logits_of(m, b));
  }

  TEST_CASE("checkpoint round trip is bit-exact") {
    const Model m(tiny(Architecture::Amor, GateMode::LearnedSte), 23);
    const auto path = std::filesystem::temp_directory_path() / "amor_test_checkpoint.json";
    save_checkpoint(m, path);
    const Model back = load_checkpoint(path);
    std::filesystem::remove(path);
    CHECK(back.config() == m.config());
    CHECK(back.params() == m.params());
    const Batch b = toy_batch(1, 8, 11, 24);
    CHECK(logits_of(back, b) == logits_of(m, b));

    ParamStore wrong = m.params();
    wrong.get("combine.w") = Tensor(Shape{3, 3});
    CHECK_THROWS_AS(Model(m.config(), wrong), ConfigError);
    nlohmann::json j = checkpoint_to_json(m);
    j["version"] = kCheckpointVersion + 1;
    CHECK_THROWS(checkpoint_from_json(j));
  }
}
