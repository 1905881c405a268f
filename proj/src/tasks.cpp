#include "amor/tasks.hpp"

#include <algorithm>
#include <string>

#include "amor/rng.hpp"

namespace amor {

std::string to_string(TaskKind kind) {
  return kind == TaskKind::SimpleRetrieval ? "simple" : "needle";
}

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "simple") return TaskKind::SimpleRetrieval;
  if (name == "needle") return TaskKind::NeedleHaystack;
  throw ConfigError("unknown task '" + name + "' (expected simple or needle)");
}

TaskConfig TaskConfig::simple_retrieval() { return TaskConfig{}; }

TaskConfig TaskConfig::needle_haystack() {
  TaskConfig c;
  c.kind = TaskKind::NeedleHaystack;
  c.seq_len = 256;
  c.content_vocab = 16;
  return c;
}

namespace {

void check_range(const IntRange& r, const char* name, int min_lo) {
  if (r.lo > r.hi || r.lo < min_lo) {
    throw ConfigError(std::string(name) + " range [" + std::to_string(r.lo) + ", " + std::to_string(r.hi) +
                      "] is empty or below " + std::to_string(min_lo));
  }
}

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
}

}  // namespace

void TaskConfig::validate() const {
  if (n_special != 3) throw ConfigError("tasks use exactly three special tokens");
  if (content_vocab < 2) throw ConfigError("content_vocab must be at least 2");
  if (kind == TaskKind::SimpleRetrieval) {
    check_range(retrieval_distance, "retrieval_distance", 1);
    check_range(block_len, "block_len", 1);
    check_prob(retrieval_prob, "retrieval_prob");
    const auto need = static_cast<std::size_t>(retrieval_distance.hi + block_len.hi);
    if (seq_len < need) {
      throw ConfigError("seq_len " + std::to_string(seq_len) + " shorter than max retrieval distance plus block (" +
                        std::to_string(need) + ")");
    }
  } else {
    check_range(n_pairs, "n_pairs", 1);
    check_range(noise_len, "noise_len", 0);
    check_range(n_queries, "n_queries", 1);
    check_prob(impossible_prob, "impossible_prob");
    if (n_pairs.hi > content_vocab) {
      throw ConfigError("n_pairs up to " + std::to_string(n_pairs.hi) + " cannot have distinct keys among " +
                        std::to_string(content_vocab) + " content tokens");
    }
    const auto need = static_cast<std::size_t>(3 * n_pairs.hi + noise_len.hi + 3 * n_queries.hi);
    if (seq_len < need) {
      throw ConfigError("seq_len " + std::to_string(seq_len) + " cannot hold store, noise and query phases (" +
                        std::to_string(need) + ")");
    }
  }
}

namespace {

SequenceSample finish(std::vector<int> tokens, std::vector<std::uint8_t> retrieval, std::vector<std::uint8_t> impossible,
                      std::uint64_t seed) {
  SequenceSample s;
  const std::size_t T = tokens.size();
  s.targets.assign(T, kIgnoreTarget);
  for (std::size_t t = 0; t + 1 < T; ++t) s.targets[t] = tokens[t + 1];
  s.tokens = std::move(tokens);
  s.needs_retrieval = std::move(retrieval);
  s.impossible = std::move(impossible);
  s.seed = seed;
  return s;
}

}  // namespace

SequenceSample gen_simple_retrieval(const TaskConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.kind != TaskKind::SimpleRetrieval) throw ConfigError("gen_simple_retrieval needs a simple task config");
  Rng rng(seed);
  const int C = cfg.content_vocab;
  const int MARK = cfg.special(0), RECALL = cfg.special(1);
  const std::size_t T = cfg.seq_len;

  std::vector<int> tokens;
  std::vector<std::uint8_t> retrieval(T, 0);
  tokens.reserve(T);

  // Current local block: two distinct tokens alternated for `len` positions.
  int ta = 0, tb = 1;
  std::int64_t len = 0, pos = 0;
  auto new_block = [&] {
    ta = static_cast<int>(rng.uniform_int(0, C - 1));
    tb = static_cast<int>(rng.uniform_int(0, C - 2));
    if (tb >= ta) ++tb;
    len = rng.uniform_int(cfg.block_len.lo, cfg.block_len.hi);
    pos = 0;
  };
  new_block();

  // While no recall is pending, every position may start a retrieval event.
  std::size_t recall_at = 0;  // position of the pending RECALL, 0 when none
  int marked = 0;
  while (tokens.size() < T) {
    const std::size_t p = tokens.size();
    if (recall_at != 0 && p == recall_at) {
      retrieval[p] = 1;
      tokens.push_back(RECALL);
      tokens.push_back(marked);
      recall_at = 0;
      new_block();
      continue;
    }
    if (recall_at == 0 && rng.bernoulli(cfg.retrieval_prob)) {
      const auto dist = static_cast<std::size_t>(rng.uniform_int(cfg.retrieval_distance.lo, cfg.retrieval_distance.hi));
      const int value = static_cast<int>(rng.uniform_int(0, C - 1));
      const std::size_t xpos = p + 1;
      // The recalled value sits at recall_at + 1, which must still be inside the sequence.
      if (xpos + dist + 1 < T) {
        tokens.push_back(MARK);
        tokens.push_back(value);
        marked = value;
        recall_at = xpos + dist;
        new_block();
        continue;
      }
    }
    tokens.push_back(pos % 2 == 0 ? ta : tb);
    ++pos;
    if (pos >= len) new_block();
  }
  tokens.resize(T);
  return finish(std::move(tokens), std::move(retrieval), std::vector<std::uint8_t>(T, 0), seed);
}

SequenceSample gen_needle_haystack(const TaskConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.kind != TaskKind::NeedleHaystack) throw ConfigError("gen_needle_haystack needs a needle task config");
  Rng rng(seed);
  const int C = cfg.content_vocab;
  const int STORE = cfg.special(0), QUERY = cfg.special(1), PLACEHOLDER = cfg.special(2);
  const std::size_t T = cfg.seq_len;

  std::vector<int> tokens;
  tokens.reserve(T);
  std::vector<std::uint8_t> retrieval(T, 0), impossible(T, 0);

  const auto pairs = static_cast<int>(rng.uniform_int(cfg.n_pairs.lo, cfg.n_pairs.hi));
  std::vector<int> perm(static_cast<std::size_t>(C));
  for (int i = 0; i < C; ++i) perm[static_cast<std::size_t>(i)] = i;
  for (int i = C - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  // perm[0, pairs) are the stored keys, perm[pairs, C) the never-stored ones.
  std::vector<int> values(static_cast<std::size_t>(C), -1);
  for (int i = 0; i < pairs; ++i) {
    const int key = perm[static_cast<std::size_t>(i)];
    values[static_cast<std::size_t>(key)] = static_cast<int>(rng.uniform_int(0, C - 1));
    tokens.push_back(STORE);
    tokens.push_back(key);
    tokens.push_back(values[static_cast<std::size_t>(key)]);
  }

  const auto noise = rng.uniform_int(cfg.noise_len.lo, cfg.noise_len.hi);
  for (std::int64_t i = 0; i < noise; ++i) tokens.push_back(static_cast<int>(rng.uniform_int(0, C - 1)));

  const auto queries = rng.uniform_int(cfg.n_queries.lo, cfg.n_queries.hi);
  for (std::int64_t q = 0; q < queries; ++q) {
    const bool unanswerable = rng.bernoulli(cfg.impossible_prob) && pairs < C;
    tokens.push_back(QUERY);
    const std::size_t key_pos = tokens.size();
    if (unanswerable) {
      const int key = perm[static_cast<std::size_t>(rng.uniform_int(pairs, C - 1))];
      tokens.push_back(key);
      tokens.push_back(PLACEHOLDER);
      impossible[key_pos] = 1;
    } else {
      const int key = perm[static_cast<std::size_t>(rng.uniform_int(0, pairs - 1))];
      tokens.push_back(key);
      tokens.push_back(values[static_cast<std::size_t>(key)]);
      retrieval[key_pos] = 1;
    }
  }

  while (tokens.size() < T) tokens.push_back(static_cast<int>(rng.uniform_int(0, C - 1)));
  return finish(std::move(tokens), std::move(retrieval), std::move(impossible), seed);
}

SequenceSample generate(const TaskConfig& cfg, std::uint64_t seed) {
  return cfg.kind == TaskKind::SimpleRetrieval ? gen_simple_retrieval(cfg, seed) : gen_needle_haystack(cfg, seed);
}

std::vector<SequenceSample> make_batch(const TaskConfig& cfg, std::uint64_t seed, std::size_t batch_size,
                                       std::size_t first) {
  std::vector<SequenceSample> out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) out.push_back(generate(cfg, derive_seed(seed, first + i)));
  return out;
}

Batch Batch::from_samples(std::span<const SequenceSample> samples) {
  Batch b;
  b.size = samples.size();
  b.seq_len = samples.empty() ? 0 : samples.front().tokens.size();
  for (const auto& s : samples) {
    if (s.tokens.size() != b.seq_len) throw ConfigError("batch samples differ in length");
    b.tokens.insert(b.tokens.end(), s.tokens.begin(), s.tokens.end());
    b.targets.insert(b.targets.end(), s.targets.begin(), s.targets.end());
    b.needs_retrieval.insert(b.needs_retrieval.end(), s.needs_retrieval.begin(), s.needs_retrieval.end());
    b.impossible.insert(b.impossible.end(), s.impossible.begin(), s.impossible.end());
  }
  b.loss_mask.resize(b.targets.size());
  for (std::size_t i = 0; i < b.targets.size(); ++i) b.loss_mask[i] = b.targets[i] != kIgnoreTarget;
  return b;
}

nlohmann::json to_json(const SequenceSample& s) {
  std::vector<bool> nr(s.needs_retrieval.begin(), s.needs_retrieval.end());
  std::vector<bool> im(s.impossible.begin(), s.impossible.end());
  return {{"tokens", s.tokens}, {"targets", s.targets}, {"needs_retrieval", nr}, {"impossible", im}, {"seed", s.seed}};
}

nlohmann::json to_json(const TaskConfig& c) {
  nlohmann::json j{{"task", to_string(c.kind)}, {"seq_len", c.seq_len}, {"content_vocab", c.content_vocab},
                   {"n_special", c.n_special}};
  if (c.kind == TaskKind::SimpleRetrieval) {
    j["retrieval_distance"] = {c.retrieval_distance.lo, c.retrieval_distance.hi};
    j["retrieval_prob"] = c.retrieval_prob;
    j["block_len"] = {c.block_len.lo, c.block_len.hi};
  } else {
    j["n_pairs"] = {c.n_pairs.lo, c.n_pairs.hi};
    j["noise_len"] = {c.noise_len.lo, c.noise_len.hi};
    j["n_queries"] = {c.n_queries.lo, c.n_queries.hi};
    j["impossible_prob"] = c.impossible_prob;
  }
  return j;
}

}  // namespace amor
