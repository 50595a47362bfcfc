#include "sdmlm/encoding.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>

namespace sdmlm {

namespace {

constexpr std::array<std::string_view, 8> kSpecials = {
    special::kBos,     special::kPad, special::kSentenceOpen, special::kSentenceClose,
    special::kVerified, special::kYes, special::kNo,           special::kNewline,
};

// Specials that may appear in running text, longest first.
constexpr std::array<std::string_view, 6> kLexSpecials = {
    special::kSentenceClose, special::kSentenceOpen, special::kVerified,
    special::kYes,           special::kNo,           special::kNewline,
};

bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (u >= '0' && u <= '9') || (u >= 'a' && u <= 'z') || (u >= 'A' && u <= 'Z') || u >= 0x80;
}

std::optional<std::string_view> special_at(std::string_view text, std::size_t i) {
  for (auto s : kLexSpecials) {
    if (text.substr(i).starts_with(s)) return s;
  }
  return std::nullopt;
}

std::size_t word_end(std::string_view text, std::size_t i) {
  while (i < text.size() && is_word_char(text[i])) ++i;
  return i;
}

}  // namespace

std::vector<std::string> lex(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (auto s = special_at(text, i)) {
      out.emplace_back(*s);
      i += s->size();
      continue;
    }
    const bool space = text[i] == ' ' && i + 1 < text.size() && !special_at(text, i + 1) && text[i + 1] != ' ' &&
                       text[i + 1] != '\n';
    const std::size_t start = i;
    const std::size_t body = space ? i + 1 : i;
    if (is_word_char(text[body])) {
      i = word_end(text, body);
    } else {
      i = body + 1;
    }
    out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

// ---------------------------------------------------------------------------

Vocab Vocab::build(std::span<const std::string> texts) {
  std::set<std::string> pieces;
  for (const auto& t : texts) {
    for (auto& p : lex(t)) pieces.insert(std::move(p));
  }
  std::vector<std::string> tokens(kSpecials.begin(), kSpecials.end());
  for (const auto& p : pieces) {
    if (std::find(kSpecials.begin(), kSpecials.end(), p) == kSpecials.end()) tokens.push_back(p);
  }
  return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kSpecials.size()) throw EncodingError("vocabulary is missing special tokens");
  for (std::size_t i = 0; i < kSpecials.size(); ++i) {
    if (tokens[i] != kSpecials[i]) throw EncodingError("special token at wrong id: " + tokens[i]);
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second) {
      throw EncodingError("duplicate vocabulary entry: " + v.tokens_[i]);
    }
  }
  return v;
}

std::vector<TokenId> Vocab::tokenize(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& p : lex(text)) {
    auto id = find(p);
    if (!id) throw EncodingError("token not in vocabulary: '" + p + "'");
    ids.push_back(*id);
  }
  return ids;
}

std::string Vocab::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == kBosId || id == kPadId) continue;
    out += token(id);
  }
  return out;
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw std::out_of_range("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << nlohmann::json(tokens_).dump(1) << "\n";
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return from_tokens(nlohmann::json::parse(in).get<std::vector<std::string>>());
}

// ---------------------------------------------------------------------------

const char* to_string(Source s) {
  switch (s) {
    case Source::static_positive: return "static-positive";
    case Source::static_negative: return "static-negative";
    case Source::generated: return "generated";
  }
  return "?";
}

std::size_t EncodedExample::masked_count() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), std::uint8_t{1}));
}

std::vector<TokenId> encode_prompt(const Vocab& vocab, std::string_view prompt) {
  std::vector<TokenId> ids{Vocab::kBosId};
  auto body = vocab.tokenize(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

EncodedExample encode_tokens(std::span<const TokenId> prompt, std::span<const TokenId> completion, int label,
                             Source source) {
  if (prompt.empty() || prompt.front() != Vocab::kBosId) throw EncodingError("prompt must start with BOS");
  if (label != 0 && label != 1) throw EncodingError("label must be 0 or 1");
  const TokenId want = label == 1 ? Vocab::kYesId : Vocab::kNoId;
  if (completion.size() < 2 || completion[completion.size() - 2] != Vocab::kVerifiedId ||
      completion.back() != want) {
    throw EncodingError(label == 1 ? "positive completion must end with <verified>Yes</verified>"
                                   : "negative completion must end with <verified>No</verified>");
  }
  EncodedExample ex;
  ex.label = label;
  ex.source = source;
  ex.prompt_length = prompt.size();
  ex.tokens.assign(prompt.begin(), prompt.end());
  ex.tokens.insert(ex.tokens.end(), completion.begin(), completion.end());
  ex.loss_mask.assign(ex.tokens.size(), 0);
  const std::size_t n = ex.tokens.size();
  if (label == 1) {
    std::fill(ex.loss_mask.begin() + static_cast<std::ptrdiff_t>(prompt.size()), ex.loss_mask.end(), 1);
  } else {
    ex.loss_mask[n - 2] = 1;
    ex.loss_mask[n - 1] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (ex.tokens[i] == Vocab::kPadId) ex.loss_mask[i] = 0;
  }
  ex.verified_pos = n - 2;
  return ex;
}

EncodedExample encode(const Vocab& vocab, std::string_view prompt, std::string_view completion, int label,
                      Source source) {
  const auto p = encode_prompt(vocab, prompt);
  const auto c = vocab.tokenize(completion);
  return encode_tokens(p, c, label, source);
}

std::string_view completion_body(std::string_view s) {
  for (auto suffix : {special::kYesSequence, special::kNoSequence, special::kVerified}) {
    if (s.ends_with(suffix)) {
      s.remove_suffix(suffix.size());
      break;
    }
  }
  if (s.ends_with('\n')) s.remove_suffix(1);
  return s;
}

int verify_r(std::string_view s_plus, std::string_view s_hat) {
  return completion_body(s_plus) == completion_body(s_hat) ? 1 : 0;
}

std::optional<std::string> extract_sentence(std::string_view s) {
  const auto open = s.find(special::kSentenceOpen);
  if (open == std::string_view::npos) return std::nullopt;
  const auto start = open + special::kSentenceOpen.size();
  const auto close = s.find(special::kSentenceClose, start);
  if (close != std::string_view::npos) return std::string(s.substr(start, close - start));
  const auto eol = s.find('\n', start);
  return std::string(s.substr(start, eol == std::string_view::npos ? std::string_view::npos : eol - start));
}

// ---------------------------------------------------------------------------

void write_dataset(const std::filesystem::path& path, std::span<const TrainTriple> triples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : triples) {
    nlohmann::ordered_json j;
    j["prompt"] = t.prompt;
    j["positive"] = t.positive;
    j["negative"] = t.negative;
    j["id"] = t.id;
    out << j.dump() << '\n';
  }
}

std::vector<TrainTriple> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<TrainTriple> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("prompt").get<std::string>(),
                     j.at("positive").get<std::string>(), j.at("negative").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw EncodingError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace sdmlm
