#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "amor/metrics.hpp"
#include "amor/model.hpp"
#include "amor/tasks.hpp"
#include "amor/training.hpp"
#include "json.hpp"

namespace amor {

inline constexpr const char* kCodeVersion = "amor-1.0.0";

/// Flat key/value configuration. Layers apply in order: built-in defaults, then a
/// `key = value` file, then explicit overrides. Every key must already exist in
/// the defaults; anything else is a ConfigError.
class Settings {
 public:
  Settings();

  void set(const std::string& key, const std::string& value);
  /// Lines of `key = value`; blank lines and lines starting with '#' are skipped.
  void apply_text(const std::string& text, const std::string& origin = "config");
  void apply_file(const std::filesystem::path& path);

  const std::string& raw(const std::string& key) const;
  double number(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  bool flag(const std::string& key) const;
  IntRange range(const std::string& key) const;
  std::vector<double> numbers(const std::string& key) const;
  std::vector<std::string> words(const std::string& key) const;

  const std::map<std::string, std::string>& all() const { return values_; }
  nlohmann::json to_json() const;

 private:
  std::map<std::string, std::string> values_;
};

ModelConfig model_config(const Settings& s, Architecture arch, GateMode gate, const TaskConfig& task);
TaskConfig task_config(const Settings& s, TaskKind kind);
TrainConfig train_config(const Settings& s, TaskKind kind);

/// One isolated training-plus-evaluation job.
struct RunSpec {
  std::string label;
  std::uint64_t seed = 42;
  ModelConfig model;
  TaskConfig task;
  TrainConfig train;
  EvalOptions eval;
  std::size_t histogram_bins = 0;  // 0 disables the entropy histogram
};

struct RunOutcome {
  RunSpec spec;
  std::size_t parameter_count = 0;
  std::optional<MetricsRecord> metrics;
  std::vector<EpochRecord> history;
  std::optional<EntropyHistogram> histogram;
  std::optional<std::string> error;
};

/// Never throws for failures inside the run; they land in `error`, together
/// with whatever history was recorded.
RunOutcome execute(const RunSpec& spec);

nlohmann::json to_json(const RunOutcome& r);

/// Executes runs on up to `jobs` worker threads; results keep declaration order.
std::vector<RunOutcome> execute_all(const std::vector<RunSpec>& specs, std::size_t jobs = 1);

struct ExperimentRequest {
  std::string name;  // CLI verb
  std::vector<std::uint64_t> seeds;
  Settings settings;
  std::size_t jobs = 1;
};

struct ExperimentResult {
  nlohmann::json document;  // the ResultsFile
  std::vector<RunOutcome> runs;
  /// Extra CSV files keyed by suffix, e.g. "histogram" -> contents.
  std::map<std::string, std::string> csv;
  bool any_failed() const;
};

const std::vector<std::string>& experiment_names();

/// Sub-runs an experiment would execute, without running them.
std::vector<RunSpec> plan_experiment(const ExperimentRequest& req);

ExperimentResult run_experiment(const ExperimentRequest& req);

/// Writes <out_dir>/<name>/<timestamp>-seed<seed>.json plus sibling CSVs and
/// returns the JSON path.
std::filesystem::path write_results(const ExperimentResult& result, const std::filesystem::path& out_dir);

/// Copy of a results document without wall-clock dependent fields (timestamp,
/// wallclock), for determinism comparisons.
nlohmann::json strip_volatile(const nlohmann::json& doc);

/// Mean and sample standard deviation (0 for fewer than two values).
std::pair<double, double> mean_std(const std::vector<double>& xs);

}  // namespace amor
