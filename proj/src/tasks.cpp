#include "amortenc/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "amortenc/rng.hpp"

namespace amortenc {

namespace {

constexpr double kMaxMajority = 0.65;
constexpr std::size_t kMaxAttempts = 64;

const char* const kReservedWords[] = {"[CLS]", "[SEP]", "[PAD]", "[UNK]"};

struct FamilyInfo {
  const char* name;
  TaskKind kind;
  std::size_t num_classes;
};

// Family rotation; index 2 guarantees a pair task in any suite of >= 3 tasks.
constexpr FamilyInfo kFamilies[] = {
    {"motif-presence", TaskKind::single, 2},
    {"motif-contrast", TaskKind::single, 2},
    {"pair-overlap", TaskKind::pair, 2},
    {"motif-count", TaskKind::single, 3},
};

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

std::vector<std::string_view> split_words(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const std::size_t start = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

// Adjacent occurrences of the bigram in either orientation.
std::size_t occurrence_count(std::span<const int> tokens, const Motif& m) {
  std::size_t count = 0;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    const bool forward = tokens[i] == m.first && tokens[i + 1] == m.second;
    const bool reversed = tokens[i] == m.second && tokens[i + 1] == m.first;
    if (forward || reversed) ++count;
  }
  return count;
}

double rule_score(const Example& ex, TaskKind kind, const PlantedRule& rule,
                  std::span<const Motif> pool) {
  double score = 0;
  for (std::size_t i = 0; i < rule.motifs.size(); ++i) {
    const Motif& m = pool[rule.motifs[i]];
    double feature;
    if (kind == TaskKind::single) {
      feature = static_cast<double>(occurrence_count(ex.a, m));
    } else {
      feature = (occurrence_count(ex.a, m) > 0 && occurrence_count(ex.b, m) > 0) ? 1.0 : 0.0;
    }
    score += rule.weights[i] * feature;
  }
  return score;
}

std::size_t apply_thresholds(double score, const std::vector<double>& thresholds) {
  std::size_t label = 0;
  for (double t : thresholds) label += score > t ? 1 : 0;
  return label;
}

double majority_fraction(const std::vector<Example>& examples, std::size_t classes) {
  std::vector<std::size_t> counts(classes, 0);
  for (const auto& ex : examples) ++counts[ex.label];
  return static_cast<double>(*std::max_element(counts.begin(), counts.end())) /
         static_cast<double>(examples.size());
}

// Half-integer thresholds minimizing the largest class share on `scores`.
std::vector<double> balanced_thresholds(const std::vector<double>& scores, std::size_t classes) {
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  std::vector<double> candidates;
  for (double t = std::floor(*lo_it) + 0.5; t < *hi_it; t += 1.0) candidates.push_back(t);
  if (candidates.size() + 1 < classes) return {};

  auto worst_share = [&](const std::vector<double>& th) {
    std::vector<std::size_t> counts(classes, 0);
    for (double s : scores) ++counts[apply_thresholds(s, th)];
    return *std::max_element(counts.begin(), counts.end());
  };
  std::vector<double> best;
  std::size_t best_share = scores.size() + 1;
  if (classes == 2) {
    for (double t : candidates) {
      const auto share = worst_share({t});
      if (share < best_share) best_share = share, best = {t};
    }
  } else {
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      for (std::size_t j = i + 1; j < candidates.size(); ++j) {
        const auto share = worst_share({candidates[i], candidates[j]});
        if (share < best_share) best_share = share, best = {candidates[i], candidates[j]};
      }
    }
  }
  return best;
}

class TextSampler {
 public:
  TextSampler(std::span<const Motif> pool, std::span<const int> fillers,
              std::span<const std::size_t> task_motifs, double task_bias)
      : pool_(pool), fillers_(fillers), task_motifs_(task_motifs), task_bias_(task_bias) {}

  void push_fillers(std::vector<int>& out, CounterRng& rng) const {
    const std::size_t count = rng.index(3);
    for (std::size_t i = 0; i < count; ++i) out.push_back(fillers_[rng.index(fillers_.size())]);
  }

  // Motif chunk, forward or reversed with equal odds.
  void push_chunk(std::vector<int>& out, CounterRng& rng) const {
    const Motif& m = rng.coin(task_bias_) ? pool_[task_motifs_[rng.index(task_motifs_.size())]]
                                          : pool_[rng.index(pool_.size())];
    push_motif(out, m, rng.coin(0.5));
  }

  static void push_motif(std::vector<int>& out, const Motif& m, bool forward) {
    out.push_back(forward ? m.first : m.second);
    out.push_back(forward ? m.second : m.first);
  }

  std::vector<int> text(std::size_t slots, CounterRng& rng,
                        std::optional<std::pair<std::size_t, Motif>> forced = std::nullopt) const {
    std::vector<int> out;
    for (std::size_t s = 0; s < slots; ++s) {
      push_fillers(out, rng);
      if (forced && forced->first == s) {
        push_motif(out, forced->second, true);
      } else {
        push_chunk(out, rng);
      }
    }
    push_fillers(out, rng);
    return out;
  }

 private:
  std::span<const Motif> pool_;
  std::span<const int> fillers_;
  std::span<const std::size_t> task_motifs_;
  double task_bias_;
};

Example sample_example(const TextSampler& sampler, TaskKind kind, const SuiteOptions& opt,
                       std::span<const Motif> pool, std::span<const std::size_t> task_motifs,
                       CounterRng& rng) {
  Example ex;
  if (kind == TaskKind::single) {
    ex.a = sampler.text(opt.single_slots, rng);
    return ex;
  }
  if (rng.coin(0.5)) {
    // plant one shared task motif in both segments
    const Motif& m = pool[task_motifs[rng.index(task_motifs.size())]];
    ex.a = sampler.text(opt.pair_slots, rng, std::make_pair(rng.index(opt.pair_slots), m));
    ex.b = sampler.text(opt.pair_slots, rng, std::make_pair(rng.index(opt.pair_slots), m));
  } else {
    ex.a = sampler.text(opt.pair_slots, rng);
    ex.b = sampler.text(opt.pair_slots, rng);
  }
  return ex;
}

// Concept c owns pool motifs c, c + C, c + 2C, ... for C concepts.
std::vector<std::vector<std::size_t>> concept_groups(const SuiteOptions& opt) {
  std::vector<std::vector<std::size_t>> groups(opt.concepts);
  for (std::size_t m = 0; m < opt.motif_pool; ++m) groups[m % opt.concepts].push_back(m);
  return groups;
}

// Distinct concept pairs in shuffled order, reused cyclically once exhausted.
std::vector<std::pair<std::size_t, std::size_t>> assign_concepts(std::size_t num_tasks,
                                                                 const SuiteOptions& opt,
                                                                 CounterRng& rng) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < opt.concepts; ++a)
    for (std::size_t b = a + 1; b < opt.concepts; ++b) pairs.emplace_back(a, b);
  rng.shuffle(std::span<std::pair<std::size_t, std::size_t>>(pairs));
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    auto p = pairs[t % pairs.size()];
    if (rng.coin(0.5)) std::swap(p.first, p.second);
    out.push_back(p);
  }
  return out;
}

double shared_fraction(const std::vector<std::vector<std::size_t>>& assignment, std::size_t t) {
  std::size_t shared = 0;
  for (auto m : assignment[t]) {
    for (std::size_t u = 0; u < assignment.size(); ++u) {
      if (u != t && std::find(assignment[u].begin(), assignment[u].end(), m) != assignment[u].end()) {
        ++shared;
        break;
      }
    }
  }
  return static_cast<double>(shared) / static_cast<double>(assignment[t].size());
}

std::string join_words(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.word(ids[i]);
  }
  return out;
}

struct RawRow {
  std::size_t line;
  std::string label;
  std::string a, b;
};

std::vector<RawRow> read_tsv(const std::filesystem::path& path, std::size_t& columns) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string(), 0);
  std::vector<RawRow> rows;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 2 && fields.size() != 3) {
      throw IngestionError(path.filename().string() + ": expected 2 or 3 tab-separated columns, got " +
                               std::to_string(fields.size()),
                           number);
    }
    if (columns == 0) columns = fields.size();
    if (fields.size() != columns) {
      throw IngestionError(path.filename().string() + ": ragged row with " +
                               std::to_string(fields.size()) + " columns, expected " +
                               std::to_string(columns),
                           number);
    }
    RawRow row{number, std::string(fields[0]), std::string(fields[1]), {}};
    if (columns == 3) row.b = std::string(fields[2]);
    if (row.label.empty()) throw IngestionError(path.filename().string() + ": empty label", number);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IngestionError(path.filename().string() + ": no examples", number);
  return rows;
}

std::optional<long long> as_integer(const std::string& s) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::vector<int> to_ids(const std::string& text, Vocab& vocab) {
  std::vector<int> ids;
  for (auto w : split_words(text)) ids.push_back(vocab.lookup(w));
  return ids;
}

}  // namespace

std::string task_kind_name(TaskKind kind) { return kind == TaskKind::single ? "single" : "pair"; }

void TaskDataset::validate() const {
  if (num_classes < 2) throw ParameterError("task '" + name + "' needs at least 2 classes");
  if (train.empty() || dev.empty()) throw ParameterError("task '" + name + "' has an empty split");
  for (const auto* split : {&train, &dev}) {
    for (const auto& ex : *split) {
      if (ex.label >= num_classes) throw ParameterError("task '" + name + "': label out of range");
      if (ex.a.empty()) throw ParameterError("task '" + name + "': empty text");
      if ((kind == TaskKind::pair) != !ex.b.empty()) {
        throw ParameterError("task '" + name + "': segment count does not match task kind");
      }
    }
  }
}

Vocab::Vocab(std::size_t capacity) : capacity_(capacity) {
  if (capacity < 4) throw ConfigError("vocabulary capacity must be >= 4");
  for (int i = 0; i < 4; ++i) {
    words_.emplace_back(kReservedWords[i]);
    ids_.emplace(kReservedWords[i], i);
  }
}

Vocab Vocab::synthetic(std::size_t vocab_size) {
  Vocab v(vocab_size);
  v.set_growable(true);
  for (std::size_t id = kFirstWordId; id < vocab_size; ++id) v.lookup("w" + std::to_string(id));
  v.set_growable(false);
  return v;
}

int Vocab::find(std::string_view word) const {
  const auto it = ids_.find(std::string(word));
  return it == ids_.end() ? -1 : it->second;
}

int Vocab::lookup(std::string_view word) {
  if (const int id = find(word); id >= 0) return id;
  if (!growable_ || words_.size() >= capacity_) return kUnkId;
  const int id = static_cast<int>(words_.size());
  words_.emplace_back(word);
  ids_.emplace(std::string(word), id);
  return id;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw StorageError("cannot open " + path.string() + " for writing");
  out << "# capacity\t" << capacity_ << '\n';
  for (std::size_t i = kFirstWordId; i < words_.size(); ++i) out << words_[i] << '\t' << i << '\n';
  if (!out) throw StorageError("failed writing " + path.string());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string(), 0);
  std::string line;
  std::size_t number = 1;
  if (!std::getline(in, line)) throw IngestionError("empty vocabulary file", number);
  const auto header = split(line, '\t');
  const auto capacity = header.size() == 2 ? as_integer(std::string(header[1])) : std::nullopt;
  if (header.size() != 2 || header[0] != "# capacity" || !capacity || *capacity < 4) {
    throw IngestionError("vocabulary header must be '# capacity<TAB><n>'", number);
  }
  Vocab v(static_cast<std::size_t>(*capacity));
  v.set_growable(true);
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    const auto id = fields.size() == 2 ? as_integer(std::string(fields[1])) : std::nullopt;
    if (!id || static_cast<std::size_t>(*id) != v.size() || fields[0].empty()) {
      throw IngestionError("vocabulary ids must be dense and ascending from 4", number);
    }
    v.lookup(fields[0]);
  }
  v.set_growable(false);
  return v;
}

TokenSeq encode_example(const Example& example, TaskKind kind, std::size_t max_positions) {
  if (example.a.empty() || (kind == TaskKind::pair && example.b.empty())) {
    throw InputError("cannot encode an empty text");
  }
  TokenSeq seq;
  if (kind == TaskKind::single) {
    if (max_positions < 2) throw InputError("max_positions too small for a single input");
    const std::size_t keep = std::min(example.a.size(), max_positions - 1);
    seq.ids.reserve(keep + 1);
    seq.ids.push_back(kClsId);
    seq.ids.insert(seq.ids.end(), example.a.begin(), example.a.begin() + static_cast<std::ptrdiff_t>(keep));
    return seq;
  }
  if (max_positions < 4) throw InputError("max_positions too small for a pair input");
  std::size_t keep_a = example.a.size();
  std::size_t keep_b = example.b.size();
  while (keep_a + keep_b + 2 > max_positions) {
    if (keep_a > keep_b) --keep_a;
    else --keep_b;
  }
  seq.ids.reserve(keep_a + keep_b + 2);
  seq.ids.push_back(kClsId);
  seq.ids.insert(seq.ids.end(), example.a.begin(), example.a.begin() + static_cast<std::ptrdiff_t>(keep_a));
  seq.ids.push_back(kSepId);
  seq.ids.insert(seq.ids.end(), example.b.begin(), example.b.begin() + static_cast<std::ptrdiff_t>(keep_b));
  return seq;
}

TokenSeq encode_example(std::string_view text_a, std::optional<std::string_view> text_b,
                        Vocab& vocab, std::size_t max_positions) {
  Example ex;
  ex.a = to_ids(std::string(text_a), vocab);
  if (text_b) ex.b = to_ids(std::string(*text_b), vocab);
  if (ex.a.empty() || (text_b && ex.b.empty())) throw InputError("cannot encode an empty text");
  return encode_example(ex, text_b ? TaskKind::pair : TaskKind::single, max_positions);
}

TaskSuite generate_task_suite(std::size_t num_tasks, std::uint64_t seed,
                              std::span<const std::size_t> sizes, const SuiteOptions& options) {
  if (num_tasks < 2) throw ParameterError("a task suite needs at least 2 tasks");
  if (sizes.size() != num_tasks) {
    throw ParameterError("expected " + std::to_string(num_tasks) + " sizes, got " +
                         std::to_string(sizes.size()));
  }
  for (auto s : sizes) {
    if (s == 0) throw ParameterError("task sizes must be positive");
  }
  if (options.dev_size == 0) throw ParameterError("dev size must be positive");
  if (options.concepts < 2 || options.motif_pool < options.concepts ||
      options.motif_pool % options.concepts != 0) {
    throw ParameterError("motif pool must split evenly into at least 2 concepts");
  }
  const std::size_t word_ids = options.vocab_size - kFirstWordId;
  if (options.vocab_size < kFirstWordId || word_ids < 2 * options.motif_pool + 4) {
    throw ParameterError("vocabulary too small for the motif pool");
  }

  TaskSuite suite;
  suite.seed = seed;
  suite.options = options;
  CounterRng root(seed);

  // Motif tokens and fillers are disjoint.
  std::vector<int> words(word_ids);
  std::iota(words.begin(), words.end(), kFirstWordId);
  CounterRng vocab_rng = root.fork(1);
  vocab_rng.shuffle(std::span<int>(words));
  for (std::size_t i = 0; i < options.motif_pool; ++i) {
    suite.motifs.push_back({words[2 * i], words[2 * i + 1]});
  }
  const std::vector<int> fillers(words.begin() + static_cast<std::ptrdiff_t>(2 * options.motif_pool),
                                 words.end());

  suite.concepts = concept_groups(options);
  CounterRng assign_rng = root.fork(2);
  const auto concept_pairs = assign_concepts(num_tasks, options, assign_rng);
  std::vector<std::vector<std::size_t>> assignment;
  for (const auto& [a, b] : concept_pairs) {
    assignment.push_back(suite.concepts[a]);
    assignment.back().insert(assignment.back().end(), suite.concepts[b].begin(), suite.concepts[b].end());
  }
  for (std::size_t t = 0; t < num_tasks; ++t) {
    if (shared_fraction(assignment, t) < 0.5) {
      throw ParameterError("motif assignment shares fewer than half of task " + std::to_string(t) +
                           "'s motifs");
    }
  }

  for (std::size_t t = 0; t < num_tasks; ++t) {
    const FamilyInfo& family = kFamilies[t % std::size(kFamilies)];
    TaskDataset task;
    task.name = "t" + std::to_string(t) + "-" + family.name;
    task.kind = family.kind;
    task.family = family.name;
    task.num_classes = family.num_classes;

    PlantedRule rule;
    rule.motifs = assignment[t];
    // Every motif of a concept carries the concept's weight.
    const bool contrast = std::string_view(family.name) == "motif-contrast";
    const std::size_t first_concept = suite.concepts[concept_pairs[t].first].size();
    for (std::size_t j = 0; j < rule.motifs.size(); ++j) {
      rule.weights.push_back(contrast && j >= first_concept ? -1 : (contrast ? 2 : 1));
    }

    bool accepted = false;
    for (std::size_t attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
      CounterRng rng = root.fork(1000 + t * kMaxAttempts + attempt);
      // Bias toward task motifs drifts across attempts to reach a balanced rule.
      const double bias = 0.5 - 0.05 * static_cast<double>(attempt % 8);
      TextSampler sampler(suite.motifs, fillers, rule.motifs, bias);
      task.train.clear();
      task.dev.clear();
      for (std::size_t i = 0; i < sizes[t]; ++i)
        task.train.push_back(sample_example(sampler, task.kind, options, suite.motifs, rule.motifs, rng));
      for (std::size_t i = 0; i < options.dev_size; ++i)
        task.dev.push_back(sample_example(sampler, task.kind, options, suite.motifs, rule.motifs, rng));

      std::vector<double> scores;
      for (const auto& ex : task.train) scores.push_back(rule_score(ex, task.kind, rule, suite.motifs));
      rule.thresholds = balanced_thresholds(scores, task.num_classes);
      if (rule.thresholds.empty()) continue;
      for (auto* split : {&task.train, &task.dev}) {
        for (auto& ex : *split) {
          ex.label = apply_thresholds(rule_score(ex, task.kind, rule, suite.motifs), rule.thresholds);
        }
      }
      std::set<std::size_t> seen;
      for (const auto& ex : task.train) seen.insert(ex.label);
      accepted = seen.size() == task.num_classes &&
                 majority_fraction(task.train, task.num_classes) <= kMaxMajority &&
                 majority_fraction(task.dev, task.num_classes) <= kMaxMajority;
    }
    if (!accepted) throw ParameterError("could not balance labels for task " + task.name);
    task.rule = rule;
    task.validate();
    suite.tasks.push_back(std::move(task));
  }
  return suite;
}

TaskDataset load_dataset(const std::filesystem::path& train_path,
                         const std::filesystem::path& dev_path, Vocab& vocab, std::string name) {
  std::size_t columns = 0;
  const auto train_rows = read_tsv(train_path, columns);
  std::size_t dev_columns = columns;
  const auto dev_rows = read_tsv(dev_path, dev_columns);

  TaskDataset task;
  task.name = std::move(name);
  task.kind = columns == 3 ? TaskKind::pair : TaskKind::single;
  task.family = task.kind == TaskKind::pair ? "pair" : "single";

  std::vector<std::string> labels;
  for (const auto& row : train_rows) labels.push_back(row.label);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  const bool numeric = std::all_of(labels.begin(), labels.end(), [](const std::string& s) { return as_integer(s).has_value(); });
  if (numeric) {
    std::sort(labels.begin(), labels.end(),
              [](const std::string& x, const std::string& y) { return *as_integer(x) < *as_integer(y); });
  }
  if (labels.size() < 2) {
    throw IngestionError(train_path.filename().string() + ": only one distinct label",
                         train_rows.back().line);
  }
  task.num_classes = labels.size();
  std::map<std::string, std::size_t> label_index;
  for (std::size_t i = 0; i < labels.size(); ++i) label_index[labels[i]] = i;

  auto convert = [&](const std::vector<RawRow>& rows, const std::filesystem::path& path,
                     std::vector<Example>& out) {
    for (const auto& row : rows) {
      const auto it = label_index.find(row.label);
      if (it == label_index.end()) {
        throw IngestionError(path.filename().string() + ": label '" + row.label +
                                 "' does not occur in the training split",
                             row.line);
      }
      Example ex;
      ex.label = it->second;
      ex.a = to_ids(row.a, vocab);
      if (task.kind == TaskKind::pair) ex.b = to_ids(row.b, vocab);
      if (ex.a.empty() || (task.kind == TaskKind::pair && ex.b.empty())) {
        throw IngestionError(path.filename().string() + ": empty text", row.line);
      }
      out.push_back(std::move(ex));
    }
  };
  convert(train_rows, train_path, task.train);
  convert(dev_rows, dev_path, task.dev);
  return task;
}

void write_suite(const std::filesystem::path& dir, const TaskSuite& suite) {
  std::filesystem::create_directories(dir);
  const Vocab vocab = Vocab::synthetic(suite.options.vocab_size);
  vocab.save(dir / "vocab.tsv");

  std::ofstream manifest(dir / "suite.jsonl");
  if (!manifest) throw StorageError("cannot write " + (dir / "suite.jsonl").string());
  for (const auto& task : suite.tasks) {
    for (const auto& [suffix, split] :
         {std::pair{".train.tsv", &task.train}, std::pair{".dev.tsv", &task.dev}}) {
      std::ofstream out(dir / (task.name + suffix));
      if (!out) throw StorageError("cannot write " + task.name + suffix);
      for (const auto& ex : *split) {
        out << ex.label << '\t' << join_words(ex.a, vocab);
        if (task.kind == TaskKind::pair) out << '\t' << join_words(ex.b, vocab);
        out << '\n';
      }
    }
    nlohmann::json line = {{"name", task.name},
                           {"kind", task_kind_name(task.kind)},
                           {"family", task.family},
                           {"num_classes", task.num_classes},
                           {"sizes", {{"train", task.train.size()}, {"dev", task.dev.size()}}},
                           {"seed", suite.seed}};
    manifest << line.dump() << '\n';
  }
  if (!manifest) throw StorageError("failed writing suite manifest");
}

LoadedSuite read_suite(const std::filesystem::path& dir) {
  LoadedSuite suite{Vocab::load(dir / "vocab.tsv"), {}};
  std::ifstream manifest(dir / "suite.jsonl");
  if (!manifest) throw IngestionError("cannot open " + (dir / "suite.jsonl").string(), 0);
  std::string line;
  std::size_t number = 0;
  while (std::getline(manifest, line)) {
    ++number;
    if (line.empty()) continue;
    nlohmann::json entry;
    try {
      entry = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError(std::string("suite.jsonl: ") + e.what(), number);
    }
    if (!entry.contains("name") || !entry["name"].is_string()) {
      throw IngestionError("suite.jsonl: entry without a name", number);
    }
    const std::string name = entry["name"];
    TaskDataset task =
        load_dataset(dir / (name + ".train.tsv"), dir / (name + ".dev.tsv"), suite.vocab, name);
    if (entry.contains("family") && entry["family"].is_string()) task.family = entry["family"];
    suite.tasks.push_back(std::move(task));
  }
  if (suite.tasks.empty()) throw IngestionError("suite.jsonl lists no tasks", number);
  return suite;
}

}  // namespace amortenc
