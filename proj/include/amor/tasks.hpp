#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "amor/errors.hpp"
#include "json.hpp"

namespace amor {

enum class TaskKind { SimpleRetrieval, NeedleHaystack };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

struct IntRange {
  int lo = 0;
  int hi = 0;
  bool operator==(const IntRange&) const = default;
};

/// Generator parameters. Token ids: content tokens occupy [0, content_vocab), the
/// three specials occupy the top three ids in the order
///   SimpleRetrieval: MARK, RECALL, PLACEHOLDER
///   NeedleHaystack:  STORE, QUERY, PLACEHOLDER
struct TaskConfig {
  TaskKind kind = TaskKind::SimpleRetrieval;
  std::size_t seq_len = 128;
  int content_vocab = 8;
  int n_special = 3;

  // SimpleRetrieval
  IntRange retrieval_distance{20, 50};
  double retrieval_prob = 0.15;
  IntRange block_len{4, 8};

  // NeedleHaystack
  IntRange n_pairs{2, 5};
  IntRange noise_len{50, 150};
  IntRange n_queries{3, 8};
  double impossible_prob = 0.0;

  static TaskConfig simple_retrieval();
  static TaskConfig needle_haystack();

  int vocab_size() const { return content_vocab + n_special; }
  int special(int i) const { return content_vocab + i; }

  /// Throws ConfigError on empty ranges, bad probabilities or lengths too short.
  void validate() const;
  bool operator==(const TaskConfig&) const = default;
};

inline constexpr int kIgnoreTarget = -1;

/// One generated sequence. targets[t] = tokens[t + 1]; the final position carries
/// kIgnoreTarget. needs_retrieval[t] marks positions whose target must be copied
/// from far back; impossible[t] marks queries for keys that were never stored.
struct SequenceSample {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<std::uint8_t> needs_retrieval;
  std::vector<std::uint8_t> impossible;
  std::uint64_t seed = 0;

  bool operator==(const SequenceSample&) const = default;
};

SequenceSample gen_simple_retrieval(const TaskConfig& cfg, std::uint64_t seed);
SequenceSample gen_needle_haystack(const TaskConfig& cfg, std::uint64_t seed);
/// Dispatches on cfg.kind.
SequenceSample generate(const TaskConfig& cfg, std::uint64_t seed);

/// Samples first..first+count-1 of the stream rooted at `seed`; sample i is
/// generated from derive_seed(seed, i), so chunked calls concatenate exactly.
std::vector<SequenceSample> make_batch(const TaskConfig& cfg, std::uint64_t seed, std::size_t batch_size,
                                       std::size_t first = 0);

/// Flattened, rectangular view of several samples (row b * seq_len + t).
struct Batch {
  std::size_t size = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::uint8_t> needs_retrieval;
  std::vector<std::uint8_t> impossible;

  static Batch from_samples(std::span<const SequenceSample> samples);
  std::size_t rows() const { return size * seq_len; }
};

nlohmann::json to_json(const SequenceSample& s);
nlohmann::json to_json(const TaskConfig& cfg);

}  // namespace amor
