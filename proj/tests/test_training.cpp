#include <cmath>
#include <limits>

#include "amor/ops.hpp"
#include "amor/training.hpp"
#include "doctest.h"

using namespace amor;

namespace {

TaskConfig small_simple() {
  TaskConfig t = TaskConfig::simple_retrieval();
  t.seq_len = 24;
  t.retrieval_distance = {3, 6};
  t.block_len = {2, 3};
  t.retrieval_prob = 0.3;
  return t;
}

TrainConfig small_train() {
  TrainConfig c;
  c.epochs = 2;
  c.steps_per_epoch = 3;
  c.batch_size = 4;
  c.eval_size = 8;
  return c;
}

ModelConfig small_model(Architecture arch, GateMode gate = GateMode::Entropy) {
  ModelConfig m;
  m.arch = arch;
  m.gate_mode = gate;
  m.d_model = 8;
  m.n_heads = 2;
  m.max_positions = 24;
  return m;
}

ParamStore two_params() {
  ParamStore p;
  p.add("w", Tensor::vector({1.0, -2.0}));
  p.add("b", Tensor::scalar(0.5));
  return p;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("composite loss against a hand calculation") {
    Tape tape;
    // Two scored rows and one ignored. Row 0 logits (0, ln 2, 0) target 1; row 1 uniform target 0.
    const Var logits = tape.constant(Tensor::matrix({{0.0, std::log(2.0), 0.0}, {1.0, 1.0, 1.0}, {5.0, 0.0, 0.0}}));
    Batch b;
    b.size = 1;
    b.seq_len = 3;
    b.targets = {1, 0, kIgnoreTarget};
    b.loss_mask = {1, 1, 0};
    const Var soft = tape.constant(Tensor::vector({0.9, 0.1, 0.5}));
    TrainConfig cfg;
    const double ce = 0.5 * (-std::log(0.5) + std::log(3.0));
    const LossParts parts = composite_loss(logits, b, soft, cfg);
    CHECK(parts.ce == doctest::Approx(ce).epsilon(1e-12));
    CHECK(parts.soft_gate_mean == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(parts.balance == doctest::Approx(0.1 * 0.3 * 0.3).epsilon(1e-12));
    CHECK(parts.total.value().item() == doctest::Approx(ce + 0.009).epsilon(1e-12));
    const LossParts plain = composite_loss(logits, b, Var{}, cfg);
    CHECK(plain.balance == 0.0);
    CHECK(plain.total.value().item() == doctest::Approx(ce).epsilon(1e-12));
  }

  TEST_CASE("balance loss only applies to adaptive gates") {
    CHECK(uses_balance_loss(small_model(Architecture::Amor, GateMode::Entropy)));
    CHECK(uses_balance_loss(small_model(Architecture::Amor, GateMode::LearnedSte)));
    CHECK_FALSE(uses_balance_loss(small_model(Architecture::Amor, GateMode::Oracle)));
    CHECK_FALSE(uses_balance_loss(small_model(Architecture::Amor, GateMode::AlwaysOn)));
    CHECK_FALSE(uses_balance_loss(small_model(Architecture::SsmOnly)));
    CHECK_FALSE(uses_balance_loss(small_model(Architecture::Transformer)));
  }

  TEST_CASE("AdamW matches a hand calculation over two steps") {
    ParamStore p = two_params();
    OptimState st = OptimState::zeros_like(p);
    TrainConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    const std::vector<std::vector<double>> g1{{0.5, -0.1}, {2.0}};
    const std::vector<std::vector<double>> g2{{-0.3, 0.2}, {1.0}};
    adamw_step(p, g1, st, cfg);

    // Step 1: mhat = g, vhat = g^2, so the Adam direction is g / (|g| + eps).
    double w0 = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
    double w1 = -2.0 - 0.1 * (-0.1 / (0.1 + 1e-8) + 0.01 * -2.0);
    CHECK(std::abs(p.get("w")[0] - w0) < 1e-12);
    CHECK(std::abs(p.get("w")[1] - w1) < 1e-12);

    adamw_step(p, g2, st, cfg);
    const auto expect = [&](double w, double ga, double gb) {
      const double m = 0.9 * 0.1 * ga + 0.1 * gb;
      const double v = 0.999 * 0.001 * ga * ga + 0.001 * gb * gb;
      const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
      return w - 0.1 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * w);
    };
    CHECK(std::abs(p.get("w")[0] - expect(w0, 0.5, -0.3)) < 1e-12);
    CHECK(std::abs(p.get("w")[1] - expect(w1, -0.1, 0.2)) < 1e-12);
    CHECK(st.step == 2);
  }

  TEST_CASE("zero gradient leaves only weight decay") {
    ParamStore p = two_params();
    OptimState st = OptimState::zeros_like(p);
    TrainConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.1;
    adamw_step(p, std::vector<std::vector<double>>{{0.0, 0.0}, {0.0}}, st, cfg);
    CHECK(std::abs(p.get("w")[0] - 1.0 * (1 - 0.001)) < 1e-15);
    CHECK(std::abs(p.get("w")[1] + 2.0 * (1 - 0.001)) < 1e-15);
    cfg.weight_decay = 0.0;
    const ParamStore before = p;
    adamw_step(p, std::vector<std::vector<double>>{{0.0, 0.0}, {0.0}}, st, cfg);
    CHECK(p == before);
  }

  TEST_CASE("non-finite gradients name the parameter and change nothing") {
    ParamStore p = two_params();
    OptimState st = OptimState::zeros_like(p);
    const ParamStore before = p;
    const std::vector<std::vector<double>> g{{0.1, 0.2}, {std::numeric_limits<double>::quiet_NaN()}};
    try {
      adamw_step(p, g, st, TrainConfig{});
      FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("'b'") != std::string::npos);
    }
    CHECK(p == before);
    CHECK(st.step == 0);
  }

  TEST_CASE("gradient clipping") {
    std::vector<std::vector<double>> g{{3.0}, {0.0, 4.0}};
    CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
    CHECK(g[0][0] == doctest::Approx(0.6));
    CHECK(g[1][1] == doctest::Approx(0.8));
    std::vector<std::vector<double>> small{{0.3}, {0.4}};
    CHECK(clip_grad_norm(small, 1.0) == doctest::Approx(0.5));
    CHECK(small[0][0] == 0.3);
  }

  TEST_CASE("config validation") {
    TrainConfig c;
    c.lr = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.target_rate = 2.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("seed branches are distinct and stable") {
    const RunSeeds a = RunSeeds::from_master(42), b = RunSeeds::from_master(42);
    CHECK(a.init == b.init);
    CHECK(a.data == b.data);
    CHECK(a.init != a.data);
    CHECK(a.dropout != a.eval);
    CHECK(eval_set(small_simple(), 42, 5) == eval_set(small_simple(), 42, 5));
    CHECK_FALSE(eval_set(small_simple(), 42, 5) == eval_set(small_simple(), 43, 5));
  }

  TEST_CASE("training is deterministic for a seed") {
    for (auto [arch, gate] : {std::pair{Architecture::Amor, GateMode::Entropy},
                              std::pair{Architecture::Amor, GateMode::LearnedSte},
                              std::pair{Architecture::SsmOnly, GateMode::Entropy},
                              std::pair{Architecture::Transformer, GateMode::Entropy}}) {
      CAPTURE(to_string(arch));
      CAPTURE(to_string(gate));
      ModelConfig mc = small_model(arch, gate);
      TrainConfig tc = small_train();
      tc.ssm_aux_weight = 0.5;
      const auto run = [&](std::uint64_t seed) {
        Model m(mc, RunSeeds::from_master(seed).init);
        TrainResult r = train(m, small_simple(), tc, seed);
        REQUIRE_FALSE(r.failure.has_value());
        for (auto& e : r.history) e.wallclock = 0.0;
        return std::pair{r, m.params()};
      };
      const auto [r1, p1] = run(5);
      const auto [r2, p2] = run(5);
      const auto [r3, p3] = run(6);
      CHECK(p1 == p2);
      CHECK_FALSE(p1 == p3);
      REQUIRE(r1.history.size() == 2);
      for (std::size_t i = 0; i < 2; ++i) CHECK(to_json(r1.history[i]) == to_json(r2.history[i]));
      CHECK(r1.history[0].epoch == 1);
      CHECK(std::isfinite(r1.history[1].loss));
      CHECK(r1.history[0].tau.has_value() == (arch == Architecture::Amor));
    }
  }

  TEST_CASE("loss decreases over a short run") {
    TrainConfig tc = small_train();
    tc.epochs = 4;
    tc.steps_per_epoch = 10;
    tc.lr = 5e-3;
    Model m(small_model(Architecture::SsmOnly), 1);
    const TrainResult r = train(m, small_simple(), tc, 1);
    CHECK(r.history.back().loss < r.history.front().loss);
  }

  TEST_CASE("epoch callback sees every epoch") {
    Model m(small_model(Architecture::SsmOnly), 1);
    std::vector<std::size_t> seen;
    train(m, small_simple(), small_train(), 1, {}, [&](const EpochRecord& e) { seen.push_back(e.epoch); });
    CHECK(seen == std::vector<std::size_t>{1, 2});
  }

  TEST_CASE("divergence is reported with the partial history") {
    Model m(small_model(Architecture::SsmOnly), 2);
    m.params().get("ssm_head.w")[0] = std::numeric_limits<double>::infinity();
    const TrainResult r = train(m, small_simple(), small_train(), 2);
    REQUIRE(r.failure.has_value());
    CHECK(r.failure->find("epoch 1, step 0") != std::string::npos);
    CHECK(r.history.empty());
  }
}
