#include "amor/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "amor/errors.hpp"

namespace amor {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_number(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || !std::isfinite(v)) {
    throw ConfigError("setting " + key + " = '" + text + "' is not a number");
  }
  return v;
}

}  // namespace

Settings::Settings() {
  values_ = {
      {"model.d_model", "64"},
      {"model.n_ssm_layers", "2"},
      {"model.n_heads", "4"},
      {"model.top_k", "3"},
      {"model.dropout", "0.1"},
      {"model.tau_init", "0.5"},
      {"model.alpha_init", "10"},
      {"model.detach_gate_logits", "false"},
      {"model.n_transformer_layers", "2"},
      {"model.ffn_mult", "4"},
      {"model.max_positions", "1024"},
      {"train.lr", "5e-4"},
      {"train.batch_size", "32"},
      {"train.steps_per_epoch", "100"},
      {"train.clip_norm", "1.0"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.999"},
      {"train.eps", "1e-8"},
      {"train.weight_decay", "0.01"},
      {"train.balance_weight", "0.1"},
      {"train.target_rate", "0.2"},
      {"train.eval_size", "200"},
      {"train.ssm_aux_weight", "0"},
      {"simple.epochs", "20"},
      {"simple.seq_len", "128"},
      {"simple.retrieval_prob", "0.15"},
      {"simple.retrieval_distance", "20,50"},
      {"simple.block_len", "4,8"},
      {"needle.epochs", "30"},
      {"needle.seq_len", "256"},
      {"needle.n_pairs", "2,5"},
      {"needle.noise_len", "50,150"},
      {"needle.n_queries", "3,8"},
      {"needle.impossible_prob", "0"},
      {"eval.include_impossible", "false"},
      {"histogram.bins", "20"},
      {"diagnose.parts", "noise,topk,kv"},
      {"diagnose.noise_levels", "10,50,100"},
      {"diagnose.impossible_prob", "0.2"},
      {"diagnose.top_k", "3,8,16,32"},
      {"diagnose.sweep_seeds", "1"},
      {"ablations.gates", "entropy,learned_ste"},
      {"ablations.target_rates", "0.1,0.2"},
  };
}

void Settings::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown setting '" + key + "'");
  it->second = trim(value);
}

void Settings::apply_text(const std::string& text, const std::string& origin) {
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    set(trim(t.substr(0, eq)), t.substr(eq + 1));
  }
}

void Settings::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str(), path.string());
}

const std::string& Settings::raw(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown setting '" + key + "'");
  return it->second;
}

double Settings::number(const std::string& key) const { return parse_number(key, raw(key)); }

std::size_t Settings::count(const std::string& key) const {
  const double v = number(key);
  if (v < 0 || v != std::floor(v)) throw ConfigError("setting " + key + " must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

bool Settings::flag(const std::string& key) const {
  const std::string& v = raw(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("setting " + key + " = '" + v + "' is not a boolean");
}

IntRange Settings::range(const std::string& key) const {
  const auto parts = split(raw(key), ',');
  if (parts.size() == 1) {
    const int v = static_cast<int>(parse_number(key, parts[0]));
    return {v, v};
  }
  if (parts.size() != 2) throw ConfigError("setting " + key + " must be 'lo,hi' or a single value");
  return {static_cast<int>(parse_number(key, parts[0])), static_cast<int>(parse_number(key, parts[1]))};
}

std::vector<double> Settings::numbers(const std::string& key) const {
  std::vector<double> out;
  for (const auto& p : split(raw(key), ',')) out.push_back(parse_number(key, p));
  if (out.empty()) throw ConfigError("setting " + key + " must list at least one value");
  return out;
}

std::vector<std::string> Settings::words(const std::string& key) const { return split(raw(key), ','); }

nlohmann::json Settings::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

TaskConfig task_config(const Settings& s, TaskKind kind) {
  TaskConfig t = kind == TaskKind::SimpleRetrieval ? TaskConfig::simple_retrieval() : TaskConfig::needle_haystack();
  if (kind == TaskKind::SimpleRetrieval) {
    t.seq_len = s.count("simple.seq_len");
    t.retrieval_prob = s.number("simple.retrieval_prob");
    t.retrieval_distance = s.range("simple.retrieval_distance");
    t.block_len = s.range("simple.block_len");
  } else {
    t.seq_len = s.count("needle.seq_len");
    t.n_pairs = s.range("needle.n_pairs");
    t.noise_len = s.range("needle.noise_len");
    t.n_queries = s.range("needle.n_queries");
    t.impossible_prob = s.number("needle.impossible_prob");
  }
  t.validate();
  return t;
}

ModelConfig model_config(const Settings& s, Architecture arch, GateMode gate, const TaskConfig& task) {
  ModelConfig m;
  m.arch = arch;
  m.gate_mode = gate;
  m.vocab_size = static_cast<std::size_t>(task.vocab_size());
  m.d_model = s.count("model.d_model");
  m.n_ssm_layers = s.count("model.n_ssm_layers");
  m.n_heads = s.count("model.n_heads");
  m.top_k = s.count("model.top_k");
  m.dropout = s.number("model.dropout");
  m.tau_init = s.number("model.tau_init");
  m.alpha_init = s.number("model.alpha_init");
  m.detach_gate_logits = s.flag("model.detach_gate_logits");
  m.n_transformer_layers = s.count("model.n_transformer_layers");
  m.ffn_mult = s.count("model.ffn_mult");
  m.max_positions = s.count("model.max_positions");
  m.validate();
  return m;
}

TrainConfig train_config(const Settings& s, TaskKind kind) {
  TrainConfig c;
  c.lr = s.number("train.lr");
  c.batch_size = s.count("train.batch_size");
  c.epochs = s.count(kind == TaskKind::SimpleRetrieval ? "simple.epochs" : "needle.epochs");
  c.steps_per_epoch = s.count("train.steps_per_epoch");
  c.clip_norm = s.number("train.clip_norm");
  c.beta1 = s.number("train.beta1");
  c.beta2 = s.number("train.beta2");
  c.eps = s.number("train.eps");
  c.weight_decay = s.number("train.weight_decay");
  c.balance_weight = s.number("train.balance_weight");
  c.target_rate = s.number("train.target_rate");
  c.eval_size = s.count("train.eval_size");
  c.ssm_aux_weight = s.number("train.ssm_aux_weight");
  c.validate();
  return c;
}

RunOutcome execute(const RunSpec& spec) {
  RunOutcome out;
  out.spec = spec;
  try {
    Model model(spec.model, RunSeeds::from_master(spec.seed).init);
    out.parameter_count = model.parameter_count();
    TrainResult tr = train(model, spec.task, spec.train, spec.seed, spec.eval);
    out.history = std::move(tr.history);
    if (tr.failure) {
      out.error = "training diverged: " + *tr.failure;
      if (!out.history.empty()) out.metrics = out.history.back().eval;
      return out;
    }
    const auto held_out = eval_set(spec.task, spec.seed, spec.train.eval_size);
    const EvalTrace trace = collect_trace(model, held_out, 50, spec.eval);
    out.metrics = compute_metrics(trace);
    if (spec.histogram_bins > 0) out.histogram = entropy_histogram(trace, spec.histogram_bins);
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

nlohmann::json to_json(const RunOutcome& r) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : r.history) history.push_back(to_json(e));
  nlohmann::json j{{"label", r.spec.label},
                   {"seed", r.spec.seed},
                   {"model", to_json(r.spec.model)},
                   {"task", to_json(r.spec.task)},
                   {"train", to_json(r.spec.train)},
                   {"include_impossible", r.spec.eval.include_impossible},
                   {"parameter_count", r.parameter_count},
                   {"metrics", r.metrics ? to_json(*r.metrics) : nlohmann::json(nullptr)},
                   {"history", history},
                   {"error", r.error ? nlohmann::json(*r.error) : nlohmann::json(nullptr)}};
  return j;
}

std::vector<RunOutcome> execute_all(const std::vector<RunSpec>& specs, std::size_t jobs) {
  std::vector<RunOutcome> out(specs.size());
  jobs = std::max<std::size_t>(1, std::min(jobs, specs.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < specs.size(); ++i) out[i] = execute(specs[i]);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < specs.size(); i = next++) out[i] = execute(specs[i]);
    });
  }
  for (auto& t : pool) t.join();
  return out;
}

bool ExperimentResult::any_failed() const {
  return std::any_of(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.error.has_value(); });
}

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"verify-entropy", "run-baselines", "needlehaystack",
                                              "compare-kv",     "diagnose",      "run-ablations"};
  return names;
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

struct Planner {
  const Settings& s;

  RunSpec make(std::string label, std::uint64_t seed, TaskKind kind, Architecture arch, GateMode gate) const {
    RunSpec r;
    r.label = std::move(label);
    r.seed = seed;
    r.task = task_config(s, kind);
    r.model = model_config(s, arch, gate, r.task);
    r.train = train_config(s, kind);
    r.eval.include_impossible = s.flag("eval.include_impossible");
    return r;
  }

  void four_models(std::vector<RunSpec>& out, std::uint64_t seed, TaskKind kind) const {
    out.push_back(make("ssm_only", seed, kind, Architecture::SsmOnly, GateMode::Entropy));
    out.push_back(make("full_attention", seed, kind, Architecture::Transformer, GateMode::Entropy));
    out.push_back(make("amor_oracle", seed, kind, Architecture::Amor, GateMode::Oracle));
    out.push_back(make("amor_entropy", seed, kind, Architecture::Amor, GateMode::Entropy));
  }

  void kv_pair(std::vector<RunSpec>& out, std::uint64_t seed, const std::string& suffix) const {
    RunSpec ghost = make("ghost_kv" + suffix, seed, TaskKind::NeedleHaystack, Architecture::Amor, GateMode::Oracle);
    RunSpec raw = ghost;
    raw.label = "raw_embedding_kv" + suffix;
    raw.model.kv_source = KvSource::RawEmbedding;
    out.push_back(ghost);
    out.push_back(raw);
  }
};

std::vector<std::uint64_t> sweep_subset(const Settings& s, const std::vector<std::uint64_t>& seeds) {
  const std::size_t n = std::min(seeds.size(), std::max<std::size_t>(1, s.count("diagnose.sweep_seeds")));
  return {seeds.begin(), seeds.begin() + static_cast<std::ptrdiff_t>(n)};
}

bool has_part(const Settings& s, const std::string& part) {
  const auto parts = s.words("diagnose.parts");
  return std::find(parts.begin(), parts.end(), part) != parts.end();
}

}  // namespace

std::vector<RunSpec> plan_experiment(const ExperimentRequest& req) {
  if (req.seeds.empty()) throw ConfigError("seed list must not be empty");
  const Settings& s = req.settings;
  const Planner p{s};
  std::vector<RunSpec> out;
  const std::uint64_t seed = req.seeds.front();
  const std::string& name = req.name;

  if (name == "verify-entropy") {
    RunSpec r = p.make("ssm_only", seed, TaskKind::SimpleRetrieval, Architecture::SsmOnly, GateMode::Entropy);
    r.histogram_bins = s.count("histogram.bins");
    out.push_back(r);
  } else if (name == "run-baselines") {
    p.four_models(out, seed, TaskKind::SimpleRetrieval);
  } else if (name == "needlehaystack") {
    p.four_models(out, seed, TaskKind::NeedleHaystack);
  } else if (name == "compare-kv") {
    p.kv_pair(out, seed, "");
  } else if (name == "diagnose") {
    if (req.seeds.size() < 2) throw ConfigError("diagnose needs at least two seeds for variance reporting");
    if (has_part(s, "noise")) {
      for (double noise : s.numbers("diagnose.noise_levels")) {
        for (std::uint64_t sd : req.seeds) {
          RunSpec r = p.make("noise" + fmt(noise) + "_seed" + std::to_string(sd), sd, TaskKind::NeedleHaystack,
                             Architecture::Amor, GateMode::Oracle);
          r.task.noise_len = {static_cast<int>(noise), static_cast<int>(noise)};
          r.task.impossible_prob = s.number("diagnose.impossible_prob");
          r.task.validate();
          out.push_back(r);
        }
      }
    }
    if (has_part(s, "topk")) {
      for (std::uint64_t sd : sweep_subset(s, req.seeds)) {
        for (double k : s.numbers("diagnose.top_k")) {
          RunSpec r = p.make("topk" + fmt(k) + "_seed" + std::to_string(sd), sd, TaskKind::NeedleHaystack,
                             Architecture::Amor, GateMode::Oracle);
          r.model.top_k = static_cast<std::size_t>(k);
          r.model.validate();
          out.push_back(r);
        }
      }
    }
    if (has_part(s, "kv")) {
      for (std::uint64_t sd : sweep_subset(s, req.seeds)) p.kv_pair(out, sd, "_seed" + std::to_string(sd));
    }
  } else if (name == "run-ablations") {
    for (const auto& g : s.words("ablations.gates")) {
      const GateMode mode = gate_mode_from_string(g);
      for (double rate : s.numbers("ablations.target_rates")) {
        RunSpec r = p.make(g + "_rate" + fmt(rate), seed, TaskKind::SimpleRetrieval, Architecture::Amor, mode);
        r.train.target_rate = rate;
        r.train.validate();
        out.push_back(r);
      }
    }
  } else {
    throw ConfigError("unknown experiment '" + name + "'");
  }
  return out;
}

namespace {

std::string iso_timestamp(std::chrono::system_clock::time_point tp, bool compact) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, compact ? "%Y%m%dT%H%M%SZ" : "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::optional<double> retrieval_of(const RunOutcome& r) {
  return r.metrics ? r.metrics->retrieval_acc : std::nullopt;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

// Mean/std of retrieval accuracy over runs whose label starts with `prefix`.
nlohmann::json sweep_entry(const std::vector<RunOutcome>& runs, const std::string& prefix) {
  std::vector<double> acc;
  std::size_t failed = 0;
  for (const auto& r : runs) {
    if (r.spec.label.rfind(prefix, 0) != 0) continue;
    if (const auto a = retrieval_of(r); a && !r.error) {
      acc.push_back(*a);
    } else {
      ++failed;
    }
  }
  const auto [m, sd] = mean_std(acc);
  return {{"retrieval_acc_mean", m}, {"retrieval_acc_std", sd}, {"n_runs", acc.size()}, {"n_failed", failed},
          {"values", acc}};
}

nlohmann::json summarize(const ExperimentRequest& req, const std::vector<RunOutcome>& runs) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& r : runs) {
    nlohmann::json row{{"label", r.spec.label}, {"seed", r.spec.seed}, {"parameter_count", r.parameter_count},
                       {"failed", r.error.has_value()}};
    if (r.metrics) {
      row["overall_acc"] = r.metrics->overall_acc;
      row["retrieval_acc"] = opt_json(r.metrics->retrieval_acc);
      row["gate_rate"] = opt_json(r.metrics->gate_rate);
      row["gate_recall"] = opt_json(r.metrics->gate_recall);
      row["gate_f1"] = opt_json(r.metrics->gate_f1);
      row["entropy_gap"] = opt_json(r.metrics->entropy_gap);
    }
    table.push_back(row);
  }
  nlohmann::json summary{{"table", table}};
  if (req.name == "diagnose") {
    const Settings& s = req.settings;
    if (has_part(s, "noise")) {
      nlohmann::json noise = nlohmann::json::object();
      for (double n : s.numbers("diagnose.noise_levels")) noise[fmt(n)] = sweep_entry(runs, "noise" + fmt(n) + "_");
      summary["noise_sweep"] = noise;
    }
    if (has_part(s, "topk")) {
      nlohmann::json topk = nlohmann::json::object();
      for (double k : s.numbers("diagnose.top_k")) topk[fmt(k)] = sweep_entry(runs, "topk" + fmt(k) + "_");
      summary["top_k_sweep"] = topk;
    }
    if (has_part(s, "kv")) {
      summary["kv"] = {{"ghost", sweep_entry(runs, "ghost_kv")}, {"raw_embedding", sweep_entry(runs, "raw_embedding_kv")}};
    }
  }
  if (req.name == "verify-entropy" && !runs.empty() && runs.front().metrics) {
    const MetricsRecord& m = *runs.front().metrics;
    summary["entropy_mean_retrieval"] = opt_json(m.entropy_mean_retrieval);
    summary["entropy_mean_local"] = opt_json(m.entropy_mean_local);
    summary["entropy_gap"] = opt_json(m.entropy_gap);
  }
  return summary;
}

std::string runs_csv(const std::vector<RunOutcome>& runs) {
  std::ostringstream os;
  os << std::setprecision(17);
  const auto cell = [&](const std::optional<double>& v) {
    if (v) os << *v;
  };
  os << "label,seed,parameter_count,failed,overall_acc,retrieval_acc,impossible_acc,gate_rate,gate_precision,"
        "gate_recall,gate_f1,entropy_mean_retrieval,entropy_mean_local,entropy_gap\n";
  for (const auto& r : runs) {
    os << r.spec.label << ',' << r.spec.seed << ',' << r.parameter_count << ',' << (r.error ? 1 : 0) << ',';
    if (r.metrics) {
      const MetricsRecord& m = *r.metrics;
      os << m.overall_acc << ',';
      cell(m.retrieval_acc), os << ',';
      cell(m.impossible_acc), os << ',';
      cell(m.gate_rate), os << ',';
      cell(m.gate_precision), os << ',';
      cell(m.gate_recall), os << ',';
      cell(m.gate_f1), os << ',';
      cell(m.entropy_mean_retrieval), os << ',';
      cell(m.entropy_mean_local), os << ',';
      cell(m.entropy_gap);
    } else {
      os << ",,,,,,,,,";
    }
    os << '\n';
  }
  return os.str();
}

std::string history_csv(const std::vector<RunOutcome>& runs) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "label,seed,epoch,loss,overall_acc,retrieval_acc,gate_rate,gate_f1,entropy_gap,tau,alpha,wallclock\n";
  const auto cell = [&](const std::optional<double>& v) {
    if (v) os << *v;
  };
  for (const auto& r : runs) {
    for (const auto& e : r.history) {
      os << r.spec.label << ',' << r.spec.seed << ',' << e.epoch << ',' << e.loss << ',' << e.eval.overall_acc << ',';
      cell(e.eval.retrieval_acc), os << ',';
      cell(e.eval.gate_rate), os << ',';
      cell(e.eval.gate_f1), os << ',';
      cell(e.eval.entropy_gap), os << ',';
      cell(e.tau), os << ',';
      cell(e.alpha), os << ',';
      os << e.wallclock << '\n';
    }
  }
  return os.str();
}

}  // namespace

ExperimentResult run_experiment(const ExperimentRequest& req) {
  const auto started = std::chrono::system_clock::now();
  const std::vector<RunSpec> specs = plan_experiment(req);
  ExperimentResult res;
  res.runs = execute_all(specs, req.jobs);

  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : res.runs) runs.push_back(to_json(r));
  res.document = {{"experiment", req.name},
                  {"timestamp", iso_timestamp(started, false)},
                  {"seeds", req.seeds},
                  {"code_version", kCodeVersion},
                  {"config", req.settings.to_json()},
                  {"runs", runs},
                  {"summary", summarize(req, res.runs)},
                  {"failed", res.any_failed()}};
  res.csv["runs"] = runs_csv(res.runs);
  res.csv["history"] = history_csv(res.runs);
  for (const auto& r : res.runs) {
    if (r.histogram) res.csv["histogram"] = r.histogram->to_csv();
  }
  return res;
}

std::filesystem::path write_results(const ExperimentResult& result, const std::filesystem::path& out_dir) {
  const auto& doc = result.document;
  const std::string name = doc.at("experiment").get<std::string>();
  std::string stamp = doc.at("timestamp").get<std::string>();
  stamp.erase(std::remove_if(stamp.begin(), stamp.end(), [](char c) { return c == '-' || c == ':'; }), stamp.end());
  const auto seed = doc.at("seeds").at(0).get<std::uint64_t>();
  const std::filesystem::path dir = out_dir / name;
  std::filesystem::create_directories(dir);
  const std::string stem = stamp + "-seed" + std::to_string(seed);
  const std::filesystem::path json_path = dir / (stem + ".json");
  {
    std::ofstream out(json_path);
    if (!out) throw std::runtime_error("cannot write " + json_path.string());
    out << doc.dump(2) << '\n';
  }
  for (const auto& [suffix, text] : result.csv) {
    std::ofstream out(dir / (stem + "-" + suffix + ".csv"));
    if (!out) throw std::runtime_error("cannot write CSV next to " + json_path.string());
    out << text;
  }
  return json_path;
}

nlohmann::json strip_volatile(const nlohmann::json& doc) {
  if (doc.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (auto it = doc.begin(); it != doc.end(); ++it) {
      if (it.key() == "timestamp" || it.key() == "wallclock") continue;
      out[it.key()] = strip_volatile(it.value());
    }
    return out;
  }
  if (doc.is_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : doc) out.push_back(strip_volatile(v));
    return out;
  }
  return doc;
}

}  // namespace amor
