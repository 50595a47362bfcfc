#pragma once

#include "sdmlm/numerics.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdmlm {

using TokenId = std::int32_t;

struct LengthError : std::length_error {
  using std::length_error::length_error;
};

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 512;
  int max_seq_len = 160;
  int pad_id = -1;  // keys holding this id are masked from attention; -1 disables
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Pre-norm decoder-only transformer with learned positional embeddings and an
/// untied output projection. T is the parameter precision.
template <typename T>
class TransformerLM {
 public:
  explicit TransformerLM(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  struct TapeOutput {
    typename Tape<T>::Var hidden;  // [len x d_model], after the final layer norm
    typename Tape<T>::Var logits;  // [len x vocab]
  };
  /// Records the forward pass on `tape`. Parameters are tape leaves, so
  /// backward() accumulates into their grad fields.
  TapeOutput forward(Tape<T>& tape, std::span<const TokenId> tokens);

  struct Output {
    Matrix<T> hidden;
    Matrix<T> logits;
  };
  /// Inference-only forward pass.
  Output forward(std::span<const TokenId> tokens) const;

  /// All parameters in a fixed order (the checkpoint order).
  std::vector<Tensor<T>*> parameters();
  std::vector<const Tensor<T>*> parameters() const;
  std::size_t parameter_count() const;
  std::vector<T> flat_parameters() const;
  void set_flat_parameters(std::span<const T> flat);
  void zero_grad();

  struct Block {
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> w_qkv, b_qkv;
    Tensor<T> w_out, b_out;
    Tensor<T> ln2_gain, ln2_bias;
    Tensor<T> w_ff1, b_ff1;
    Tensor<T> w_ff2, b_ff2;
  };

 private:
  template <typename U>
  friend class DecodeSession;

  void check_tokens(std::span<const TokenId> tokens) const;

  ModelConfig config_;
  Tensor<T> tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  Tensor<T> lnf_gain_, lnf_bias_;
  Tensor<T> w_head_, b_head_;
};

/// Incremental inference with a per-layer key/value cache.
template <typename T>
class DecodeSession {
 public:
  explicit DecodeSession(const TransformerLM<T>& model);

  /// Appends tokens; returns the logits of the appended positions. The final
  /// hidden states of the appended positions are available via last_hidden().
  Matrix<T> extend(std::span<const TokenId> tokens);
  const Matrix<T>& last_hidden() const { return last_hidden_; }
  int length() const { return length_; }

 private:
  const TransformerLM<T>* model_;
  std::vector<Matrix<T>> keys_, values_;
  std::vector<bool> valid_;
  Matrix<T> last_hidden_;
  int length_ = 0;
};

/// Picks the next token from a logit row.
using TokenSelector = std::function<TokenId(std::span<const float> logits)>;

/// argmax with ties resolved to the lowest id.
TokenId argmax_lowest(std::span<const float> logits);

/// Greedy continuation of `prompt`. Emits at most `max_new` tokens, stopping
/// after the first emitted token in `stop` (which is included) or when the
/// context reaches max_seq_len. Returns only the completion.
std::vector<TokenId> greedy_decode(const TransformerLM<float>& model, std::span<const TokenId> prompt,
                                   int max_new, std::span<const TokenId> stop,
                                   const TokenSelector& select = argmax_lowest);

/// Concatenation of hidden[verified_pos] with the mean of hidden rows
/// 0..verified_pos (the inputs the estimator sees). Throws std::out_of_range.
template <typename T>
RowVector<T> pooled_feature(const Matrix<T>& hidden, Eigen::Index verified_pos);

// Checkpoint file: "SDMLMCKP" magic, format version, config, seed, flat parameters.
void save_checkpoint(const std::filesystem::path& path, const TransformerLM<float>& model);
TransformerLM<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace sdmlm
