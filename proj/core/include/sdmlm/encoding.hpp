#pragma once

// Word-level vocabulary, the contrastive masked encoding, the exact-match
// verifier and tagged-sentence extraction.

#include "sdmlm/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sdmlm {

struct EncodingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace special {
inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kSentenceOpen = "<sentence>";
inline constexpr std::string_view kSentenceClose = "</sentence>";
inline constexpr std::string_view kVerified = "<verified>";
inline constexpr std::string_view kYes = "Yes</verified>";
inline constexpr std::string_view kNo = "No</verified>";
inline constexpr std::string_view kNewline = "\n";

inline constexpr std::string_view kYesSequence = "<verified>Yes</verified>";
inline constexpr std::string_view kNoSequence = "<verified>No</verified>";
}  // namespace special

/// Splits text into vocabulary pieces: special strings, words (with an
/// optional single leading space), and single punctuation characters (also
/// with an optional leading space). Concatenating the pieces gives the input.
std::vector<std::string> lex(std::string_view text);

class Vocab {
 public:
  // Fixed ids of the special tokens.
  static constexpr TokenId kBosId = 0;
  static constexpr TokenId kPadId = 1;
  static constexpr TokenId kSentenceOpenId = 2;
  static constexpr TokenId kSentenceCloseId = 3;
  static constexpr TokenId kVerifiedId = 4;
  static constexpr TokenId kYesId = 5;
  static constexpr TokenId kNoId = 6;
  static constexpr TokenId kNewlineId = 7;

  /// Special tokens followed by every distinct lexeme of `texts`, sorted.
  static Vocab build(std::span<const std::string> texts);
  /// Rebuilds from a token list; the specials must occupy their fixed ids.
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::vector<TokenId> tokenize(std::string_view text) const;
  /// Concatenates token strings, skipping BOS and PAD.
  std::string detokenize(std::span<const TokenId> ids) const;

  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

enum class Source { static_positive, static_negative, generated };

const char* to_string(Source s);

struct EncodedExample {
  std::vector<TokenId> tokens;          // BOS, prompt, completion
  std::vector<std::uint8_t> loss_mask;  // per token; 1 where the token is a trained target
  int label = 0;                        // y
  Source source = Source::static_positive;
  std::size_t prompt_length = 0;  // including BOS
  std::size_t verified_pos = 0;   // index of the rightmost <verified>

  std::size_t masked_count() const;
  /// Tokens up to and including the rightmost <verified>.
  std::span<const TokenId> classifier_input() const {
    return std::span<const TokenId>(tokens).first(verified_pos + 1);
  }
};

/// BOS followed by the prompt's tokens.
std::vector<TokenId> encode_prompt(const Vocab& vocab, std::string_view prompt);

/// Encodes prompt + completion. The completion must end with the control
/// sequence matching `label`; throws EncodingError otherwise.
EncodedExample encode(const Vocab& vocab, std::string_view prompt, std::string_view completion, int label,
                      Source source);

/// Token-level variant. `prompt` must start with BOS.
EncodedExample encode_tokens(std::span<const TokenId> prompt, std::span<const TokenId> completion, int label,
                             Source source);

/// Text before the trailing control sequence (or a bare trailing <verified>),
/// with one trailing newline removed.
std::string_view completion_body(std::string_view s);

/// 1 iff the bodies of s_plus and s_hat are identical strings.
int verify_r(std::string_view s_plus, std::string_view s_hat);

/// Content of the first <sentence>...</sentence> span; without a closing tag,
/// everything after the opening tag up to the end of the line.
std::optional<std::string> extract_sentence(std::string_view s);

/// One prompt with its positive and static negative completions.
struct TrainTriple {
  std::string id;
  std::string prompt;
  std::string positive;
  std::string negative;
  bool operator==(const TrainTriple&) const = default;
};

/// Dataset file: one JSON object per line with fields prompt, positive, negative, id.
void write_dataset(const std::filesystem::path& path, std::span<const TrainTriple> triples);
std::vector<TrainTriple> read_dataset(const std::filesystem::path& path);

}  // namespace sdmlm
