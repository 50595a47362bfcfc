#include "sdmlm/encoding.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

using namespace sdmlm;

namespace {

const std::string kPrompt =
    "Complete the sentence `Neat plans' by reordering all of the following without adding new punctuation nor "
    "words: `fail luck. without'. Only reply with the sentence in the XML <sentence> </sentence> followed by "
    "<verified>Yes</verified> if your answer correctly addressed the instructions, and <verified>No</verified> if it "
    "did not.";
const std::string kNegative = "<sentence>Neat plans without fail luck.\n<verified>No</verified>";
const std::string kPositive = "<sentence>Neat plans fail without luck.</sentence>\n<verified>Yes</verified>";

Vocab table_vocab() {
  const std::vector<std::string> texts{kPrompt, kNegative, kPositive};
  return Vocab::build(texts);
}

std::string join(const std::vector<std::string>& v) {
  return std::accumulate(v.begin(), v.end(), std::string());
}

}  // namespace

TEST(Lex, ConcatenationReproducesInput) {
  for (const auto& s : {kPrompt, kNegative, kPositive, std::string("a  b,c\n\n<verified>")}) {
    EXPECT_EQ(join(lex(s)), s);
  }
}

TEST(Lex, SpecialsAreSinglePieces) {
  auto p = lex("<sentence>A b.</sentence>\n<verified>Yes</verified>");
  const std::vector<std::string> want{"<sentence>", "A", " b", ".", "</sentence>", "\n", "<verified>",
                                      "Yes</verified>"};
  EXPECT_EQ(p, want);
}

TEST(Vocab, FixedSpecialIds) {
  auto v = table_vocab();
  EXPECT_EQ(v.token(Vocab::kBosId), special::kBos);
  EXPECT_EQ(v.token(Vocab::kPadId), special::kPad);
  EXPECT_EQ(v.token(Vocab::kSentenceOpenId), special::kSentenceOpen);
  EXPECT_EQ(v.token(Vocab::kSentenceCloseId), special::kSentenceClose);
  EXPECT_EQ(v.token(Vocab::kVerifiedId), special::kVerified);
  EXPECT_EQ(v.token(Vocab::kYesId), special::kYes);
  EXPECT_EQ(v.token(Vocab::kNoId), special::kNo);
  EXPECT_EQ(v.token(Vocab::kNewlineId), special::kNewline);
}

TEST(Vocab, TokenizeRoundTrip) {
  auto v = table_vocab();
  for (const auto& s : {kPrompt, kNegative, kPositive}) EXPECT_EQ(v.detokenize(v.tokenize(s)), s);
  EXPECT_THROW(v.tokenize("unseen"), EncodingError);
}

TEST(Vocab, SaveLoad) {
  auto v = table_vocab();
  const auto path = std::filesystem::temp_directory_path() / "sdmlm_test_vocab.json";
  v.save(path);
  EXPECT_EQ(Vocab::load(path), v);
  std::filesystem::remove(path);
  EXPECT_THROW(Vocab::from_tokens({"a", "b"}), EncodingError);
}

TEST(Encode, NegativeMasksOnlyControlSequence) {
  auto v = table_vocab();
  auto ex = encode(v, kPrompt, kNegative, 0, Source::static_negative);
  const auto n = ex.tokens.size();
  EXPECT_EQ(ex.masked_count(), 2u);
  EXPECT_EQ(ex.loss_mask[n - 2], 1);
  EXPECT_EQ(ex.loss_mask[n - 1], 1);
  EXPECT_EQ(ex.tokens[n - 2], Vocab::kVerifiedId);
  EXPECT_EQ(ex.tokens[n - 1], Vocab::kNoId);
  EXPECT_EQ(ex.verified_pos, n - 2);
  EXPECT_EQ(ex.tokens[0], Vocab::kBosId);
  EXPECT_EQ(ex.prompt_length, v.tokenize(kPrompt).size() + 1);
}

TEST(Encode, PositiveMasksWholeCompletion) {
  auto v = table_vocab();
  auto ex = encode(v, kPrompt, kPositive, 1, Source::static_positive);
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) EXPECT_EQ(ex.loss_mask[i], i >= ex.prompt_length ? 1 : 0);
  EXPECT_EQ(ex.masked_count(), v.tokenize(kPositive).size());
  EXPECT_EQ(ex.classifier_input().back(), Vocab::kVerifiedId);
}

TEST(Encode, ControlOnlyNegative) {
  auto v = table_vocab();
  auto ex = encode(v, kPrompt, "<verified>No</verified>", 0, Source::generated);
  EXPECT_EQ(ex.masked_count(), 2u);
  EXPECT_EQ(ex.tokens.size(), ex.prompt_length + 2);
}

TEST(Encode, WrongControlSequenceThrows) {
  auto v = table_vocab();
  EXPECT_THROW(encode(v, kPrompt, kPositive, 0, Source::static_negative), EncodingError);
  EXPECT_THROW(encode(v, kPrompt, kNegative, 1, Source::static_positive), EncodingError);
  EXPECT_THROW(encode(v, kPrompt, "<sentence>Neat", 0, Source::generated), EncodingError);
}

TEST(VerifyR, Examples) {
  EXPECT_EQ(verify_r(kPositive, kPositive), 1);
  EXPECT_EQ(verify_r(kPositive, kNegative), 0);
  const std::string dropped = "<sentence>Neat plans fail without luck.\n<verified>Yes</verified>";
  EXPECT_EQ(verify_r(kPositive, dropped), 0);
  // The body decides; the control sequence does not.
  EXPECT_EQ(verify_r(kPositive, "<sentence>Neat plans fail without luck.</sentence>\n<verified>No</verified>"), 1);
  EXPECT_EQ(verify_r(kPositive, "<sentence>Neat plans fail without luck.</sentence>\n<verified>"), 1);
  EXPECT_EQ(verify_r(kPositive, "<sentence>Neat plans fail without luck.</sentence> \n<verified>Yes</verified>"), 0);
}

TEST(ExtractSentence, Examples) {
  EXPECT_EQ(extract_sentence("<sentence>A b c.</sentence>"), "A b c.");
  EXPECT_EQ(extract_sentence("<sentence>First.</sentence><sentence>Second.</sentence>"), "First.");
  EXPECT_EQ(extract_sentence(kNegative), "Neat plans without fail luck.");
  EXPECT_EQ(extract_sentence("no tags here"), std::nullopt);
  EXPECT_EQ(extract_sentence("Neat plans.</sentence>"), std::nullopt);
}

TEST(Dataset, RoundTrip) {
  std::vector<TrainTriple> t{{"a-1", kPrompt, kPositive, kNegative}, {"a-2", "p\t\"q\"", "x\n", "y"}};
  const auto path = std::filesystem::temp_directory_path() / "sdmlm_test_dataset.jsonl";
  write_dataset(path, t);
  EXPECT_EQ(read_dataset(path), t);
  std::filesystem::remove(path);
}
