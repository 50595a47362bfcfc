#include "sdmlm/taskgen.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_set>

namespace sdmlm {

namespace {

constexpr std::string_view kPromptHead = "Complete the sentence `";
constexpr std::string_view kPromptMid = "' by reordering all of the following without adding new punctuation nor words: `";
constexpr std::string_view kPromptTail =
    "'. Only reply with the sentence in the XML <sentence> </sentence> followed by <verified>Yes</verified> if your "
    "answer correctly addressed the instructions, and <verified>No</verified> if it did not.";

constexpr std::array<std::array<int, 3>, 5> kNonIdentity = {{
    {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0},
}};

enum Cat : char { D = 'D', A = 'A', N = 'N', V = 'V', R = 'R', P = 'P' };

std::string join(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

std::string capitalize(std::string w) {
  if (!w.empty()) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
  return w;
}

bool is_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 0x80 && !std::isalnum(u);
}

// Category patterns of the grammar: Det Adj{0..2} Noun [Adv] Verb [tail].
std::vector<std::string> grammar_templates() {
  std::vector<std::string> out;
  const std::vector<std::string> tails = {"", "R", "PDN", "PDAN", "PDNPDN", "PDANPDN"};
  for (int a = 0; a <= 2; ++a) {
    for (int adv = 0; adv <= 1; ++adv) {
      for (const auto& tail : tails) {
        std::string t = "D" + std::string(static_cast<std::size_t>(a), 'A') + "N" + (adv ? "R" : "") + "V" + tail;
        if (adv && tail == "R") continue;
        const auto n = t.size();
        if (n < 3) continue;
        const char x = t[n - 3], y = t[n - 2], z = t[n - 1];
        if (x == y || y == z || x == z) continue;
        out.push_back(std::move(t));
      }
    }
  }
  return out;
}

const std::vector<std::string>& words_for(const WordPool& pool, char c) {
  switch (c) {
    case D: return pool.determiners;
    case A: return pool.adjectives;
    case N: return pool.nouns;
    case V: return pool.verbs;
    case R: return pool.adverbs;
    default: return pool.prepositions;
  }
}

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::string grammar_sentence(const WordPool& pool, const std::vector<std::string>& templates, Rng& rng) {
  const std::string& t = pick(templates, rng);
  std::vector<std::string> words;
  for (char c : t) words.push_back(pick(words_for(pool, c), rng));
  words.front() = capitalize(words.front());
  words.back() += '.';
  return join(words);
}

std::string split_id(std::string_view name, std::size_t i) {
  std::ostringstream os;
  os << name << '-' << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

WordPool WordPool::standard() {
  WordPool p;
  p.determiners = {"the", "every", "this", "that", "one", "each", "some", "my", "our", "your", "her", "his", "their", "no", "any"};
  p.adjectives = {"neat",   "old",    "quiet", "bright", "small",  "large",  "calm",   "brave", "gentle", "proud",
                  "eager",  "clever", "warm",  "cold",   "young",  "tired",  "happy",  "lucky", "silent", "swift",
                  "red",    "green",  "blue",  "golden", "wooden", "gray",   "shy",    "bold",  "kind",   "wild",
                  "curious", "patient", "hungry", "sleepy", "careful", "famous", "little", "rapid", "soft", "steady",
                  "distant", "humble", "loyal", "fresh", "plain", "rough", "sharp", "smooth", "tall", "vivid"};
  p.nouns = {"fox",    "river",  "teacher", "garden", "window", "farmer", "plan",   "ship",   "city",    "lamp",
             "dog",    "cat",    "bird",    "child",  "doctor", "singer", "storm",  "train",  "forest",  "valley",
             "horse",  "baker",  "poet",    "pilot",  "sailor", "clock",  "bridge", "tower",  "castle",  "meadow",
             "lake",   "hill",   "road",    "market", "kitchen", "library", "engine", "wagon", "painter", "student",
             "queen",  "king",   "monk",   "owl",     "rabbit", "wolf",   "bear",   "goat",   "village", "harbor",
             "island", "desert", "cloud",  "candle",  "letter", "friend", "guard",  "tiger",  "mountain", "canyon"};
  p.verbs = {"runs",    "waits",   "sleeps",   "sings",   "falls",  "rests",   "grows",   "moves",  "stands", "works",
             "laughs",  "wanders", "listens",  "shines",  "turns",  "rises",   "drifts",  "glows",  "returns", "pauses",
             "whispers", "dances", "travels",  "smiles",  "trembles", "waves", "hurries", "sits",   "lingers", "rolls",
             "fades",   "swims",   "climbs",   "calls",   "settles", "hides",  "watches", "learns", "breathes", "hums"};
  p.adverbs = {"quickly", "slowly",   "quietly",  "softly", "gladly",  "rarely", "often",  "calmly",  "boldly",  "gently",
               "loudly",  "silently", "patiently", "warmly", "eagerly", "freely", "proudly", "sadly", "happily", "firmly"};
  p.prepositions = {"over",  "under",  "near",   "beside", "behind", "across", "through", "along",
                    "around", "past",  "toward", "into",   "onto",   "beyond", "without"};
  return p;
}

std::vector<std::string> WordPool::all_words() const {
  std::vector<std::string> out;
  for (const auto* v : {&determiners, &adjectives, &nouns, &verbs, &adverbs, &prepositions}) {
    out.insert(out.end(), v->begin(), v->end());
  }
  return out;
}

void CorpusConfig::validate() const {
  if (sentence_len_range.first < 5) throw ConfigError("sentence_len_range minimum must be at least 5");
  if (sentence_len_range.second < sentence_len_range.first) throw ConfigError("sentence_len_range is empty");
  if (cvs_len <= sentence_len_range.second) throw ConfigError("cvs_len must exceed the maximum sentence length");
  if (tag_drop_rate < 0.0 || tag_drop_rate > 1.0) throw ConfigError("tag_drop_rate must be in [0, 1]");
  if (n_train == 0 || n_calib == 0 || n_test == 0 || n_cvs == 0) throw ConfigError("split sizes must be positive");
  if (!user_sentences) {
    const auto& w = word_pool;
    for (const auto* v : {&w.determiners, &w.adjectives, &w.nouns, &w.verbs, &w.adverbs, &w.prepositions}) {
      if (v->empty()) throw ConfigError("every word class needs at least one word");
    }
    auto all = w.all_words();
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end()) throw ConfigError("word classes must be disjoint");
    for (const auto& word : all) {
      if (word.empty() || !std::all_of(word.begin(), word.end(), [](char c) { return !is_punct(c) && c != ' '; })) {
        throw ConfigError("pool words must be non-empty and free of spaces and punctuation: '" + word + "'");
      }
    }
    const auto templates = grammar_templates();
    auto fits = [&](int len) {
      return std::any_of(templates.begin(), templates.end(), [&](const std::string& t) {
        return static_cast<int>(t.size()) == len;
      });
    };
    for (int len = sentence_len_range.first; len <= sentence_len_range.second; ++len) {
      if (!fits(len)) throw ConfigError("the grammar cannot produce sentences of length " + std::to_string(len));
    }
    if (!fits(cvs_len)) throw ConfigError("the grammar cannot produce sentences of length " + std::to_string(cvs_len));
  }
}

std::string CorpusConfig::canonical_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["n_train"] = n_train;
  j["n_calib"] = n_calib;
  j["n_test"] = n_test;
  j["n_cvs"] = n_cvs;
  j["sentence_len_range"] = {sentence_len_range.first, sentence_len_range.second};
  j["cvs_len"] = cvs_len;
  j["tag_drop_rate"] = tag_drop_rate;
  nlohmann::ordered_json pool;
  pool["determiners"] = word_pool.determiners;
  pool["adjectives"] = word_pool.adjectives;
  pool["nouns"] = word_pool.nouns;
  pool["verbs"] = word_pool.verbs;
  pool["adverbs"] = word_pool.adverbs;
  pool["prepositions"] = word_pool.prepositions;
  j["word_pool"] = pool;
  if (user_sentences) {
    j["user_sentences"] = *user_sentences;
  } else {
    j["user_sentences"] = nullptr;
  }
  return j.dump();
}

// ---------------------------------------------------------------------------

std::vector<std::string> split_words(std::string_view sentence) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < sentence.size()) {
    while (i < sentence.size() && std::isspace(static_cast<unsigned char>(sentence[i]))) ++i;
    const auto start = i;
    while (i < sentence.size() && !std::isspace(static_cast<unsigned char>(sentence[i]))) ++i;
    if (i > start) out.emplace_back(sentence.substr(start, i - start));
  }
  return out;
}

std::vector<std::array<std::string, 3>> distinct_suffix_permutations(std::span<const std::string> words,
                                                                      bool keep_final_punctuation) {
  if (words.size() < 3) return {};
  std::array<std::string, 3> w = {words[words.size() - 3], words[words.size() - 2], words[words.size() - 1]};
  std::string trail;
  if (keep_final_punctuation) {
    auto& last = w[2];
    std::size_t k = last.size();
    while (k > 0 && is_punct(last[k - 1])) --k;
    if (k > 0) {
      trail = last.substr(k);
      last.resize(k);
    }
  }
  const std::array<std::string, 3> original = {words[words.size() - 3], words[words.size() - 2],
                                               words[words.size() - 1]};
  std::vector<std::array<std::string, 3>> out;
  for (const auto& perm : kNonIdentity) {
    std::array<std::string, 3> s = {w[perm[0]], w[perm[1]], w[perm[2]] + trail};
    if (s != original && std::find(out.begin(), out.end(), s) == out.end()) out.push_back(std::move(s));
  }
  return out;
}

std::string tagged_body(std::string_view sentence, TagDrop drop) {
  std::string out;
  if (drop != TagDrop::opening && drop != TagDrop::both) out += special::kSentenceOpen;
  out += sentence;
  if (drop != TagDrop::closing && drop != TagDrop::both) out += special::kSentenceClose;
  return out;
}

StaticNegative make_static_negative(std::string_view reference, Rng& rng, double tag_drop_rate) {
  const auto words = split_words(reference);
  if (words.size() < 3) throw ConfigError("reference needs at least three words");
  const auto perms = distinct_suffix_permutations(words, true);
  if (perms.empty()) throw ConfigError("final three words admit no distinguishable reordering");
  StaticNegative neg;
  neg.suffix = pick(perms, rng);
  if (bernoulli(rng, tag_drop_rate)) {
    constexpr std::array<TagDrop, 3> kinds = {TagDrop::opening, TagDrop::closing, TagDrop::both};
    neg.drop = kinds[std::uniform_int_distribution<int>(0, 2)(rng)];
  }
  std::vector<std::string> out(words.begin(), words.end() - 3);
  out.insert(out.end(), neg.suffix.begin(), neg.suffix.end());
  neg.body = tagged_body(join(out), neg.drop);
  return neg;
}

std::string make_prompt(std::span<const std::string> prefix_words, const std::array<std::string, 3>& scrambled) {
  std::string out(kPromptHead);
  out += join(prefix_words);
  out += kPromptMid;
  out += join(scrambled);
  out += kPromptTail;
  return out;
}

std::optional<ParsedPrompt> parse_prompt(std::string_view prompt) {
  if (!prompt.starts_with(kPromptHead) || !prompt.ends_with(kPromptTail)) return std::nullopt;
  prompt.remove_prefix(kPromptHead.size());
  prompt.remove_suffix(kPromptTail.size());
  const auto mid = prompt.find(kPromptMid);
  if (mid == std::string_view::npos) return std::nullopt;
  ParsedPrompt p;
  p.prefix_words = split_words(prompt.substr(0, mid));
  const auto scrambled = split_words(prompt.substr(mid + kPromptMid.size()));
  if (scrambled.size() != 3) return std::nullopt;
  std::copy(scrambled.begin(), scrambled.end(), p.scrambled.begin());
  return p;
}

std::string positive_completion(std::string_view reference) {
  return tagged_body(reference, TagDrop::none) + std::string(special::kNewline) + std::string(special::kYesSequence);
}

std::string negative_completion(std::string_view negative_body) {
  return std::string(negative_body) + std::string(special::kNewline) + std::string(special::kNoSequence);
}

TaskExample make_task_example(std::string_view reference, std::string id, Rng& rng, double tag_drop_rate) {
  const auto words = split_words(reference);
  if (words.size() < 4) throw ConfigError("reference needs a prefix and three final words");
  const auto scrambles = distinct_suffix_permutations(words, false);
  if (scrambles.empty()) throw ConfigError("final three words admit no distinguishable reordering");
  TaskExample ex;
  ex.reference = join(words);
  ex.scrambled = pick(scrambles, rng);
  const auto neg = make_static_negative(ex.reference, rng, tag_drop_rate);
  ex.negative_drop = neg.drop;
  ex.triple.id = std::move(id);
  ex.triple.prompt = make_prompt(std::span<const std::string>(words).first(words.size() - 3), ex.scrambled);
  ex.triple.positive = positive_completion(ex.reference);
  ex.triple.negative = negative_completion(neg.body);
  return ex;
}

// ---------------------------------------------------------------------------

namespace {

bool usable(const std::vector<std::string>& words) {
  return words.size() >= 4 && !distinct_suffix_permutations(words, true).empty() &&
         !distinct_suffix_permutations(words, false).empty();
}

struct SentenceSource {
  const CorpusConfig& config;
  std::vector<std::string> templates;
  Rng rng;
  std::vector<std::string> user_in, user_cvs;  // shuffled, unused user sentences
  std::unordered_set<std::string> seen;

  explicit SentenceSource(const CorpusConfig& c)
      : config(c), templates(grammar_templates()), rng(derive_stream(c.seed, "sentences")) {
    if (!c.user_sentences) return;
    for (const auto& s : *c.user_sentences) {
      const auto words = split_words(s);
      const int n = static_cast<int>(words.size());
      if (!usable(words)) continue;
      if (n >= c.sentence_len_range.first && n <= c.sentence_len_range.second) user_in.push_back(join(words));
      if (n == c.cvs_len) user_cvs.push_back(join(words));
    }
    Rng shuffle = derive_stream(c.seed, "user-shuffle");
    std::shuffle(user_in.begin(), user_in.end(), shuffle);
    std::shuffle(user_cvs.begin(), user_cvs.end(), shuffle);
    std::reverse(user_in.begin(), user_in.end());
    std::reverse(user_cvs.begin(), user_cvs.end());
  }

  std::string next(bool cvs) {
    if (config.user_sentences) {
      auto& pool = cvs ? user_cvs : user_in;
      while (!pool.empty()) {
        std::string s = std::move(pool.back());
        pool.pop_back();
        if (seen.insert(s).second) return s;
      }
      throw ConfigError(std::string("sentence file has too few distinct usable ") +
                        (cvs ? "shifted-length" : "in-range") + " sentences");
    }
    // The pool is far larger than any desk-scale corpus; the attempt cap only
    // guards against a degenerate user-supplied pool.
    for (int attempt = 0; attempt < 100000; ++attempt) {
      int len = cvs ? config.cvs_len
                    : std::uniform_int_distribution<int>(config.sentence_len_range.first,
                                                         config.sentence_len_range.second)(rng);
      std::vector<std::string> of_len;
      for (const auto& t : templates) {
        if (static_cast<int>(t.size()) == len) of_len.push_back(t);
      }
      std::string s = grammar_sentence(config.word_pool, of_len, rng);
      if (usable(split_words(s)) && seen.insert(s).second) return s;
    }
    throw ConfigError("word pool too small for the requested number of distinct sentences");
  }
};

}  // namespace

Splits gen_corpus(const CorpusConfig& config) {
  config.validate();
  SentenceSource source(config);
  Splits splits;
  auto fill = [&](std::vector<TaskExample>& out, std::string_view name, std::size_t n, bool cvs) {
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::string reference = source.next(cvs);
      Rng rng = derive_stream(config.seed, std::string("example/") + std::string(name), i);
      out.push_back(make_task_example(reference, split_id(name, i), rng, config.tag_drop_rate));
    }
  };
  fill(splits.train, "train", config.n_train, false);
  fill(splits.calib, "calib", config.n_calib, false);
  fill(splits.test, "test", config.n_test, false);
  fill(splits.test_cvs, "cvs", config.n_cvs, true);
  return splits;
}

Vocab build_vocab(const Splits& splits) {
  std::vector<std::string> texts;
  for (const auto* split : {&splits.train, &splits.calib, &splits.test, &splits.test_cvs}) {
    for (const auto& ex : *split) {
      texts.push_back(ex.triple.prompt);
      texts.push_back(ex.triple.positive);
      texts.push_back(ex.triple.negative);
    }
  }
  return Vocab::build(texts);
}

void write_splits(const std::filesystem::path& dir, const Splits& splits, const CorpusConfig& config) {
  std::filesystem::create_directories(dir);
  auto triples = [](const std::vector<TaskExample>& v) {
    std::vector<TrainTriple> out;
    out.reserve(v.size());
    for (const auto& ex : v) out.push_back(ex.triple);
    return out;
  };
  write_dataset(dir / "train.jsonl", triples(splits.train));
  write_dataset(dir / "calib.jsonl", triples(splits.calib));
  write_dataset(dir / "test.jsonl", triples(splits.test));
  write_dataset(dir / "test_cvs.jsonl", triples(splits.test_cvs));
  const Vocab vocab = build_vocab(splits);
  vocab.save(dir / "vocab.json");

  const std::string canonical = config.canonical_json();
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(canonical)));
  nlohmann::ordered_json m;
  m["config"] = nlohmann::ordered_json::parse(canonical);
  m["config_hash"] = hash;
  m["counts"] = {{"train", splits.train.size()},
                 {"calib", splits.calib.size()},
                 {"test", splits.test.size()},
                 {"test_cvs", splits.test_cvs.size()}};
  m["vocab_size"] = vocab.size();
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << m.dump(2) << '\n';
}

std::vector<std::string> read_sentence_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto words = split_words(line);
    if (!words.empty()) out.push_back(join(words));
  }
  return out;
}

}  // namespace sdmlm
