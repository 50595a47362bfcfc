#pragma once

// Seeded construction of the word-ordering task: reference sentences, prompts,
// positive completions, static negatives and the length-shifted test split.

#include "sdmlm/encoding.hpp"
#include "sdmlm/rng.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sdmlm {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Closed word classes of the synthetic grammar.
struct WordPool {
  std::vector<std::string> determiners;
  std::vector<std::string> adjectives;
  std::vector<std::string> nouns;
  std::vector<std::string> verbs;
  std::vector<std::string> adverbs;
  std::vector<std::string> prepositions;

  static WordPool standard();
  std::vector<std::string> all_words() const;
};

struct CorpusConfig {
  std::uint64_t seed = 0;
  std::size_t n_train = 2000;
  std::size_t n_calib = 2000;
  std::size_t n_test = 500;
  std::size_t n_cvs = 500;
  WordPool word_pool = WordPool::standard();
  std::pair<int, int> sentence_len_range{5, 8};
  int cvs_len = 12;
  double tag_drop_rate = 0.10;
  /// When set, reference sentences come from this list instead of the grammar.
  std::optional<std::vector<std::string>> user_sentences;

  void validate() const;
  /// Canonical JSON rendering (used for the manifest hash).
  std::string canonical_json() const;
};

enum class TagDrop { none, opening, closing, both };

struct TaskExample {
  std::string reference;
  std::array<std::string, 3> scrambled;
  TagDrop negative_drop = TagDrop::none;
  TrainTriple triple;
};

struct Splits {
  std::vector<TaskExample> train, calib, test, test_cvs;
};

/// Whitespace-separated words.
std::vector<std::string> split_words(std::string_view sentence);

/// Every reordering of the final three words that differs from the original
/// text (at most five). With `keep_final_punctuation`, trailing punctuation
/// of the last word stays at the end of the sentence ("fail without luck."
/// gives "luck without fail."); otherwise words move with their punctuation.
std::vector<std::array<std::string, 3>> distinct_suffix_permutations(std::span<const std::string> words,
                                                                      bool keep_final_punctuation);

struct StaticNegative {
  std::string body;  // without the trailing control sequence
  std::array<std::string, 3> suffix;
  TagDrop drop = TagDrop::none;
};

/// Permutes the final three words of `reference` into a different order and,
/// with probability `tag_drop_rate`, drops the opening, closing, or both
/// sentence tags (equally likely). Throws ConfigError when no distinguishable
/// permutation exists.
StaticNegative make_static_negative(std::string_view reference, Rng& rng, double tag_drop_rate = 0.10);

/// "<sentence>" + sentence + "</sentence>" with the requested tags removed.
std::string tagged_body(std::string_view sentence, TagDrop drop);

std::string make_prompt(std::span<const std::string> prefix_words, const std::array<std::string, 3>& scrambled);

struct ParsedPrompt {
  std::vector<std::string> prefix_words;
  std::array<std::string, 3> scrambled;
};
std::optional<ParsedPrompt> parse_prompt(std::string_view prompt);

std::string positive_completion(std::string_view reference);
std::string negative_completion(std::string_view negative_body);

/// Builds one example from a reference sentence with the given stream.
TaskExample make_task_example(std::string_view reference, std::string id, Rng& rng, double tag_drop_rate);

/// Disjoint train / calib / test / shifted splits, fully determined by config.
Splits gen_corpus(const CorpusConfig& config);

/// Vocabulary over every prompt and completion of the splits.
Vocab build_vocab(const Splits& splits);

/// Writes train.jsonl, calib.jsonl, test.jsonl, test_cvs.jsonl, vocab.json and
/// manifest.json into `dir`.
void write_splits(const std::filesystem::path& dir, const Splits& splits, const CorpusConfig& config);

/// Reads one sentence per line, skipping blank lines.
std::vector<std::string> read_sentence_file(const std::filesystem::path& path);

}  // namespace sdmlm
