#include <filesystem>
#include <fstream>
#include <set>

#include "amor/experiments.hpp"
#include "doctest.h"

using namespace amor;

namespace {

// Settings small enough that a full experiment trains in well under a second.
Settings tiny_settings() {
  Settings s;
  s.apply_text(R"(
model.d_model = 8
model.n_heads = 2
model.n_transformer_layers = 1
model.ffn_mult = 2
model.max_positions = 256
train.batch_size = 2
train.steps_per_epoch = 2
train.eval_size = 3
simple.epochs = 1
simple.seq_len = 64
needle.epochs = 1
needle.seq_len = 96
needle.noise_len = 10,30
histogram.bins = 5
diagnose.noise_levels = 10,30
diagnose.top_k = 3,16
)");
  return s;
}

ExperimentRequest request(const std::string& name, std::vector<std::uint64_t> seeds = {42}) {
  return ExperimentRequest{name, std::move(seeds), tiny_settings(), 1};
}

std::vector<std::string> labels(const std::vector<RunSpec>& specs) {
  std::vector<std::string> out;
  for (const auto& s : specs) out.push_back(s.label);
  return out;
}

}  // namespace

TEST_SUITE("experiments") {
  TEST_CASE("settings layering, parsing and unknown keys") {
    Settings s;
    CHECK(s.count("train.steps_per_epoch") == 100);
    s.apply_text("# comment\n\ntrain.lr = 1e-3\nsimple.block_len = 3 , 5\n");
    CHECK(s.number("train.lr") == 1e-3);
    CHECK(s.range("simple.block_len") == IntRange{3, 5});
    s.set("needle.noise_len", "40");
    CHECK(s.range("needle.noise_len") == IntRange{40, 40});
    CHECK(s.words("ablations.gates") == std::vector<std::string>{"entropy", "learned_ste"});
    CHECK_THROWS_AS(s.set("train.learning_rate", "1"), ConfigError);
    CHECK_THROWS_AS(s.apply_text("model.d_model 64"), ConfigError);
    s.set("model.dropout", "abc");
    CHECK_THROWS_AS(s.number("model.dropout"), ConfigError);
    s.set("train.batch_size", "2.5");
    CHECK_THROWS_AS(s.count("train.batch_size"), ConfigError);
    s.set("model.detach_gate_logits", "maybe");
    CHECK_THROWS_AS(s.flag("model.detach_gate_logits"), ConfigError);
    CHECK_THROWS_AS(Settings{}.apply_file("/nonexistent/amor.conf"), ConfigError);
  }

  TEST_CASE("configs built from settings") {
    Settings s = tiny_settings();
    const TaskConfig t = task_config(s, TaskKind::NeedleHaystack);
    CHECK(t.seq_len == 96);
    CHECK(t.noise_len == IntRange{10, 30});
    const ModelConfig m = model_config(s, Architecture::Amor, GateMode::Oracle, t);
    CHECK(m.vocab_size == 19);
    CHECK(m.d_model == 8);
    CHECK(train_config(s, TaskKind::SimpleRetrieval).steps_per_epoch == 2);
    s.set("simple.seq_len", "10");
    CHECK_THROWS_AS(task_config(s, TaskKind::SimpleRetrieval), ConfigError);
  }

  TEST_CASE("experiment plans") {
    CHECK(labels(plan_experiment(request("verify-entropy"))) == std::vector<std::string>{"ssm_only"});
    const std::vector<std::string> four{"ssm_only", "full_attention", "amor_oracle", "amor_entropy"};
    CHECK(labels(plan_experiment(request("run-baselines"))) == four);
    const auto needle = plan_experiment(request("needlehaystack"));
    CHECK(labels(needle) == four);
    CHECK(needle[0].task.kind == TaskKind::NeedleHaystack);
    const auto kv = plan_experiment(request("compare-kv"));
    CHECK(labels(kv) == std::vector<std::string>{"ghost_kv", "raw_embedding_kv"});
    CHECK(kv[1].model.kv_source == KvSource::RawEmbedding);
    CHECK(kv[0].model.gate_mode == GateMode::Oracle);

    const auto ablations = plan_experiment(request("run-ablations"));
    CHECK(labels(ablations) ==
          std::vector<std::string>{"entropy_rate0.1", "entropy_rate0.2", "learned_ste_rate0.1", "learned_ste_rate0.2"});
    CHECK(ablations[2].model.gate_mode == GateMode::LearnedSte);
    CHECK(ablations[0].train.target_rate == 0.1);

    CHECK_THROWS_AS(plan_experiment(request("diagnose")), ConfigError);
    const auto diag = plan_experiment(request("diagnose", {1, 2, 3}));
    CHECK(labels(diag) == std::vector<std::string>{"noise10_seed1", "noise10_seed2", "noise10_seed3", "noise30_seed1",
                                                   "noise30_seed2", "noise30_seed3", "topk3_seed1", "topk16_seed1",
                                                   "ghost_kv_seed1", "raw_embedding_kv_seed1"});
    CHECK(diag[0].task.noise_len == IntRange{10, 10});
    CHECK(diag[0].task.impossible_prob == 0.2);
    CHECK(diag[7].model.top_k == 16);

    CHECK_THROWS_AS(plan_experiment(request("train-everything")), ConfigError);
    CHECK_THROWS_AS(plan_experiment(request("run-baselines", {})), ConfigError);
  }

  TEST_CASE("runs are reproducible and each model sees the same seed") {
    const ExperimentResult a = run_experiment(request("run-baselines"));
    const ExperimentResult b = run_experiment(request("run-baselines"));
    CHECK_FALSE(a.any_failed());
    CHECK(strip_volatile(a.document) == strip_volatile(b.document));
    CHECK(a.csv.at("runs") == b.csv.at("runs"));
    const auto& doc = a.document;
    for (const char* key : {"experiment", "timestamp", "seeds", "code_version", "config", "runs", "summary", "failed"})
      CHECK(doc.contains(key));
    CHECK(doc["runs"].size() == 4);
    CHECK(doc["runs"][0]["history"].size() == 1);
    CHECK(doc["runs"][2]["metrics"]["gate_rate"].is_number());
    CHECK(doc["runs"][0]["metrics"]["gate_rate"].is_null());
    CHECK_FALSE(strip_volatile(doc).dump().find("wallclock") != std::string::npos);

    ExperimentRequest other = request("run-baselines", {7});
    CHECK(strip_volatile(run_experiment(other).document)["runs"] != strip_volatile(doc)["runs"]);
  }

  TEST_CASE("parallel execution keeps declaration order and results") {
    ExperimentRequest serial = request("run-ablations");
    ExperimentRequest parallel = serial;
    parallel.jobs = 3;
    CHECK(strip_volatile(run_experiment(serial).document) == strip_volatile(run_experiment(parallel).document));
  }

  TEST_CASE("a failing run is isolated and reported") {
    ExperimentRequest req = request("run-baselines");
    req.settings.set("model.max_positions", "32");  // shorter than the sequence: only the transformer is affected
    const ExperimentResult r = run_experiment(req);
    CHECK(r.any_failed());
    CHECK(r.document["failed"] == true);
    REQUIRE(r.runs.size() == 4);
    CHECK(r.runs[1].error.has_value());
    CHECK(r.runs[1].error->find("max_positions") != std::string::npos);
    for (std::size_t i : {0u, 2u, 3u}) {
      CHECK_FALSE(r.runs[i].error.has_value());
      CHECK(r.runs[i].metrics.has_value());
    }
    CHECK(r.document["runs"][1]["error"].is_string());
  }

  TEST_CASE("verify-entropy summary and histogram") {
    const ExperimentResult r = run_experiment(request("verify-entropy"));
    const auto& s = r.document["summary"];
    CHECK(s["entropy_gap"].get<double>() ==
          doctest::Approx(s["entropy_mean_retrieval"].get<double>() - s["entropy_mean_local"].get<double>()));
    REQUIRE(r.csv.count("histogram"));
    CHECK(r.csv.at("histogram").rfind("bin_lo,bin_hi,count_local,count_retrieval", 0) == 0);
  }

  TEST_CASE("diagnose summary reports mean and spread per sweep point") {
    ExperimentRequest req = request("diagnose", {1, 2});
    req.settings.set("diagnose.parts", "noise");
    const ExperimentResult r = run_experiment(req);
    const auto& sweep = r.document["summary"]["noise_sweep"];
    REQUIRE(sweep.contains("10"));
    CHECK(sweep["10"]["n_runs"] == 2);
    const auto values = sweep["10"]["values"].get<std::vector<double>>();
    const auto [m, sd] = mean_std(values);
    CHECK(sweep["10"]["retrieval_acc_mean"].get<double>() == doctest::Approx(m));
    CHECK(sweep["10"]["retrieval_acc_std"].get<double>() == doctest::Approx(sd));
  }

  TEST_CASE("mean and sample standard deviation") {
    const auto [m, sd] = mean_std({1.0, 2.0, 3.0, 4.0});
    CHECK(m == doctest::Approx(2.5));
    CHECK(sd == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(mean_std({3.0}).second == 0.0);
  }

  TEST_CASE("results layout on disk") {
    const ExperimentResult r = run_experiment(request("compare-kv"));
    const auto dir = std::filesystem::temp_directory_path() / "amor_test_results";
    std::filesystem::remove_all(dir);
    const auto path = write_results(r, dir);
    CHECK(path.parent_path() == dir / "compare-kv");
    CHECK(path.filename().string().find("-seed42.json") != std::string::npos);
    std::set<std::string> files;
    for (const auto& e : std::filesystem::directory_iterator(dir / "compare-kv")) files.insert(e.path().filename());
    CHECK(files.size() == 3);  // json, runs csv, history csv
    std::ifstream in(path);
    const nlohmann::json back = nlohmann::json::parse(in);
    CHECK(back == r.document);
    std::filesystem::remove_all(dir);
  }
}
