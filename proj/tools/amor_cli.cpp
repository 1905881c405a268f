#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "amor/experiments.hpp"
#include "amor/tasks.hpp"

namespace {

std::string cell(const nlohmann::json& row, const char* key) {
  if (!row.contains(key) || row[key].is_null()) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", row[key].get<double>());
  return buf;
}

void print_table(const nlohmann::json& doc) {
  std::printf("%-28s %6s %9s %9s %9s %9s %9s %8s\n", "run", "seed", "overall", "retrieval", "gate_rate", "gate_rec",
              "ent_gap", "params");
  for (const auto& row : doc["summary"]["table"]) {
    std::printf("%-28s %6llu %9s %9s %9s %9s %9s %8llu%s\n", row["label"].get<std::string>().c_str(),
                static_cast<unsigned long long>(row["seed"].get<std::uint64_t>()), cell(row, "overall_acc").c_str(),
                cell(row, "retrieval_acc").c_str(), cell(row, "gate_rate").c_str(), cell(row, "gate_recall").c_str(),
                cell(row, "entropy_gap").c_str(),
                static_cast<unsigned long long>(row["parameter_count"].get<std::size_t>()),
                row["failed"].get<bool>() ? "  FAILED" : "");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AMOR experiment runner"};
  app.require_subcommand(1);

  std::uint64_t seed = 42;
  std::vector<std::uint64_t> seeds;
  std::string config_path;
  std::string out_dir = "experiments";
  std::size_t epochs = 0;
  std::size_t jobs = 1;
  std::vector<std::string> overrides;

  for (const auto& name : amor::experiment_names()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " experiment");
    sub->add_option("--seed", seed, "master seed")->capture_default_str();
    sub->add_option("--seeds", seeds, "seed list (diagnose defaults to 42..46)")->delimiter(',');
    sub->add_option("--config", config_path, "key = value settings file");
    sub->add_option("--out-dir", out_dir, "results root")->capture_default_str();
    sub->add_option("--epochs", epochs, "epochs for every sub-run (overrides simple.epochs and needle.epochs)");
    sub->add_option("--set", overrides, "extra key=value setting, repeatable");
    sub->add_option("--jobs", jobs, "worker threads for sub-runs")->capture_default_str();
  }

  std::string task_name = "simple";
  std::size_t count = 1;
  auto* gen = app.add_subcommand("generate", "print task samples as JSON lines");
  gen->add_option("--task", task_name, "simple or needle")->capture_default_str();
  gen->add_option("--seed", seed, "stream seed")->capture_default_str();
  gen->add_option("--count", count, "number of samples")->capture_default_str();
  gen->add_option("--config", config_path, "key = value settings file");
  gen->add_option("--set", overrides, "extra key=value setting, repeatable");

  CLI11_PARSE(app, argc, argv);
  const CLI::App* chosen = app.get_subcommands().front();

  try {
    amor::Settings settings;
    if (!config_path.empty()) settings.apply_file(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw amor::ConfigError("--set expects key=value, got '" + kv + "'");
      settings.set(kv.substr(0, eq), kv.substr(eq + 1));
    }

    if (chosen->get_name() == "generate") {
      const amor::TaskConfig task = amor::task_config(settings, amor::task_kind_from_string(task_name));
      for (const auto& s : amor::make_batch(task, seed, count)) std::cout << amor::to_json(s).dump() << '\n';
      return 0;
    }

    if (epochs > 0) {
      settings.set("simple.epochs", std::to_string(epochs));
      settings.set("needle.epochs", std::to_string(epochs));
    }
    amor::ExperimentRequest req;
    req.name = chosen->get_name();
    req.settings = settings;
    req.jobs = jobs;
    if (!seeds.empty()) {
      req.seeds = seeds;
    } else if (req.name == "diagnose") {
      req.seeds = {seed, seed + 1, seed + 2, seed + 3, seed + 4};
    } else {
      req.seeds = {seed};
    }

    const amor::ExperimentResult result = amor::run_experiment(req);
    const auto path = amor::write_results(result, out_dir);
    print_table(result.document);
    std::printf("results: %s\n", path.string().c_str());
    for (const auto& r : result.runs) {
      if (r.error) std::fprintf(stderr, "run %s failed: %s\n", r.spec.label.c_str(), r.error->c_str());
    }
    return result.any_failed() ? 1 : 0;
  } catch (const amor::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  }
}
