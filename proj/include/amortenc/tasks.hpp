#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "amortenc/encoder.hpp"

namespace amortenc {

enum class TaskKind : std::uint8_t { single = 0, pair = 1 };

std::string task_kind_name(TaskKind kind);

// Token ids without CLS/SEP; b is empty for single-text tasks.
struct Example {
  std::vector<int> a;
  std::vector<int> b;
  std::size_t label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

// Token bigram planted by the synthetic generator.
struct Motif {
  int first = 0;
  int second = 0;

  friend bool operator==(const Motif&, const Motif&) = default;
};

// label = number of thresholds strictly below the score, where the score is
// sum_i weights[i] * feature(motifs[i]); feature is the occurrence count
// (either orientation) for single tasks and [present in a][present in b] for
// pair tasks. Motifs of one concept share a weight.
struct PlantedRule {
  std::vector<std::size_t> motifs;  // indices into the suite's motif pool
  std::vector<int> weights;
  std::vector<double> thresholds;

  friend bool operator==(const PlantedRule&, const PlantedRule&) = default;
};

struct TaskDataset {
  std::string name;
  TaskKind kind = TaskKind::single;
  std::string family;
  std::size_t num_classes = 2;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::optional<PlantedRule> rule;  // synthetic tasks only

  // Throws ParameterError when an invariant fails.
  void validate() const;

  friend bool operator==(const TaskDataset&, const TaskDataset&) = default;
};

// Word <-> id map. Ids 0..3 are reserved ([CLS], [SEP], [PAD], [UNK]).
class Vocab {
 public:
  explicit Vocab(std::size_t capacity);

  // "w<id>" for every non-reserved id.
  static Vocab synthetic(std::size_t vocab_size);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Unknown words map to [UNK] unless the vocabulary is growable and has room.
  int lookup(std::string_view word);
  int find(std::string_view word) const;
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return words_.size(); }
  std::size_t capacity() const { return capacity_; }

  void set_growable(bool growable) { growable_ = growable; }

 private:
  std::size_t capacity_;
  bool growable_ = false;
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

// [CLS, a...] or [CLS, a..., SEP, b...], truncated to max_positions by
// dropping tokens from the end of the longer segment (b on ties).
TokenSeq encode_example(const Example& example, TaskKind kind, std::size_t max_positions);
TokenSeq encode_example(std::string_view text_a, std::optional<std::string_view> text_b,
                        Vocab& vocab, std::size_t max_positions);

struct SuiteOptions {
  std::size_t dev_size = 300;
  std::size_t vocab_size = 64;
  std::size_t motif_pool = 12;
  std::size_t concepts = 4;  // groups of interchangeable motifs; pool % concepts == 0
  std::size_t single_slots = 3;  // motif chunks per single text
  std::size_t pair_slots = 2;    // motif chunks per pair segment
};

struct TaskSuite {
  std::uint64_t seed = 0;
  SuiteOptions options;
  std::vector<Motif> motifs;
  std::vector<std::vector<std::size_t>> concepts;  // motif indices per concept
  std::vector<TaskDataset> tasks;
};

// Deterministic in (num_tasks, seed, sizes, options). Throws ParameterError
// for num_tasks < 2, a size list of the wrong length, or a zero size.
TaskSuite generate_task_suite(std::size_t num_tasks, std::uint64_t seed,
                              std::span<const std::size_t> sizes, const SuiteOptions& options = {});

// Tab-separated rows: (label, text) or (label, text_a, text_b). Labels are
// mapped to class indices in numeric order when all labels are integers,
// lexicographic order otherwise. Throws IngestionError with the line number.
TaskDataset load_dataset(const std::filesystem::path& train_path,
                         const std::filesystem::path& dev_path, Vocab& vocab, std::string name);

// Suite directory: <name>.train.tsv, <name>.dev.tsv, vocab.tsv and suite.jsonl
// (one JSON object per task: name, kind, family, sizes, seed).
void write_suite(const std::filesystem::path& dir, const TaskSuite& suite);

struct LoadedSuite {
  Vocab vocab;
  std::vector<TaskDataset> tasks;
};
LoadedSuite read_suite(const std::filesystem::path& dir);

}  // namespace amortenc
