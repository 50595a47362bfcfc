#pragma once

// Fine-tuning with the change-of-base next-token loss: per-document bases from
// a frozen SDM layer, online hard negatives, the per-epoch layer/network
// alternation, calibration-loss checkpoint selection and the test-time layer.

#include "sdmlm/encoding.hpp"
#include "sdmlm/model.hpp"
#include "sdmlm/rng.hpp"
#include "sdmlm/sdm.hpp"
#include "sdmlm/taskgen.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sdmlm {

enum class LossMode { ce, sdm };
enum class NegativeMode { static_only, online };

const char* to_string(LossMode m);
const char* to_string(NegativeMode m);
LossMode parse_loss_mode(std::string_view s);
NegativeMode parse_negative_mode(std::string_view s);

struct TrainSchedule {
  int epochs = 10;
  int effective_batch = 64;
  double lr_peak = 1e-3;
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  double gamma_pos = 0.5;
  double gamma_gen = 0.5;
  double gamma_div = 0.5;
  double alpha = 0.95;
  std::uint64_t seed = 0;
  int max_new_tokens = 32;
  LayerTrainOptions layer;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;  // vocab_size is taken from the dataset vocabulary
  TrainSchedule schedule;
  LossMode mode = LossMode::sdm;
  NegativeMode negatives = NegativeMode::online;
  std::filesystem::path data_dir;

  /// Flat "key = value" text; '#' starts a comment. Unknown keys throw ConfigError.
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;
};

// ---------------------------------------------------------------------------
// Loss

/// 2 + p[y] in SDM mode.
double document_base(const SdmVerdict& v, int label);

struct LossBatch {
  std::vector<double> bases;
  std::vector<double> doc_losses;  // sum of masked per-token losses
  std::vector<std::size_t> doc_tokens;
  double total_loss = 0.0;
  std::size_t token_count = 0;

  /// Total masked token loss over total masked token count.
  double aggregate() const;
};

/// Per-token loss -log_B softmax_B(z)[target] summed over masked positions,
/// where logits row i predicts token i + 1.
double document_loss_value(const Matrix<float>& logits, const EncodedExample& doc, double base);
double document_loss_value(const Matrix<double>& logits, const EncodedExample& doc, double base);

LossBatch sdm_next_token_loss(std::span<const EncodedExample> docs, std::span<const Matrix<float>> logits,
                              std::span<const double> bases);

/// Differentiable document loss sum (the base is a constant).
template <typename T>
typename Tape<T>::Var document_loss(Tape<T>& tape, typename Tape<T>::Var logits, const EncodedExample& doc, T base);

// ---------------------------------------------------------------------------
// Instances

struct InstancePolicy {
  double gamma_pos = 0.5;
  double gamma_gen = 0.5;
  double gamma_div = 0.5;
  bool allow_generation = false;
};

/// Completion tokens produced from prompt tokens (BOS included).
using Generator = std::function<std::vector<TokenId>(std::span<const TokenId> prompt)>;

/// The tokens a greedy decode stops on.
std::span<const TokenId> stop_tokens();

/// Greedy generator over `model`.
Generator greedy_generator(const TransformerLM<float>& model, int max_new_tokens);

/// Positive with probability gamma_pos; otherwise a negative, taken from a
/// non-matching generation with probability gamma_gen * gamma_div (when
/// generation is allowed) and from the static negative in every other case.
EncodedExample sample_instance(const TrainTriple& triple, const Vocab& vocab, Rng& rng, const InstancePolicy& policy,
                               const Generator* generate, int max_seq_len);

/// Rows of pooled features over each document's classifier input.
Matrix<float> pooled_features(const TransformerLM<float>& model, std::span<const EncodedExample> docs);

/// Builds the layer dataset for documents with the given ids.
LayerDataset make_layer_dataset(Matrix<float> features, std::span<const EncodedExample> docs,
                                std::span<const std::string> ids);

// ---------------------------------------------------------------------------
// Training loop

struct LogRecord {
  std::size_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> eval_loss;
};

/// Bitwise hash of a float array.
std::uint64_t hash_floats(std::span<const float> v);
std::uint64_t hash_layer(const SdmLayerParams& p);

struct TrainHooks {
  /// Called after every SDM layer training ("dtr/<epoch>", "dca/<eval>", "final").
  std::function<void(const std::string& tag, const SdmLayer&, const LayerFitReport&)> on_layer;
  std::function<void(const LogRecord&)> on_log;
};

/// Records the freeze discipline: the layer hash seen by every loss
/// computation and the network hash around every layer training.
struct FreezeLog {
  struct Batch {
    int epoch;
    std::uint64_t layer_hash;
  };
  struct LayerFit {
    std::uint64_t network_before;
    std::uint64_t network_after;
  };
  std::vector<Batch> batches;
  std::vector<LayerFit> layer_fits;
};

class Trainer {
 public:
  Trainer(RunConfig config, Vocab vocab, std::vector<TrainTriple> train, std::vector<TrainTriple> calib,
          std::optional<std::filesystem::path> out_dir = std::nullopt, TrainHooks hooks = {});

  /// One epoch: sample instances, fit the D_tr layer (SDM mode), take the
  /// optimizer steps, evaluate at mid-epoch and at the end.
  void run_epoch();
  /// Calibration loss of the current network; replaces the best checkpoint
  /// when strictly lower.
  double evaluate_checkpoint();
  /// All epochs, then restores the best checkpoint.
  void run();

  TransformerLM<float>& model() { return model_; }
  const TransformerLM<float>& model() const { return model_; }
  const RunConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }
  int epoch() const { return epoch_; }
  std::size_t step() const { return step_; }
  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const;
  /// Learning rate at 1-based step s.
  double learning_rate(std::size_t s) const;
  int evaluations() const { return eval_index_; }
  double best_eval_loss() const { return best_loss_; }
  const std::vector<float>& best_parameters() const { return best_params_; }
  const std::vector<LogRecord>& log() const { return log_; }
  const FreezeLog& freeze_log() const { return freeze_; }

 private:
  double train_step(std::span<const EncodedExample> batch, std::span<const std::string> ids, const SdmLayer* layer);
  void report_layer(const std::string& tag, const SdmLayer& layer, const LayerFitReport& report);
  void emit(const LogRecord& r);

  RunConfig config_;
  Vocab vocab_;
  std::vector<TrainTriple> train_, calib_;
  std::optional<std::filesystem::path> out_dir_;
  TrainHooks hooks_;
  TransformerLM<float> model_;
  std::vector<Matrix<float>> adam_m_, adam_v_;
  int epoch_ = 0;
  std::size_t step_ = 0;
  int eval_index_ = 0;
  double best_loss_;
  std::vector<float> best_params_;
  std::vector<LogRecord> log_;
  FreezeLog freeze_;
  double last_loss_ = 0.0;
};

/// The shipped estimator: instances over D_ca with gamma_pos = 0.5 and every
/// negative generated (static when the generation matches the reference).
SdmLayer finalize_test_time_layer(const TransformerLM<float>& model, const Vocab& vocab,
                                  std::span<const TrainTriple> calib, const TrainSchedule& schedule,
                                  LayerFitReport* report = nullptr);

// Files written into a run directory.
namespace run_files {
inline constexpr const char* kCheckpoint = "model.ckpt";
inline constexpr const char* kTestLayer = "test_layer.art";
inline constexpr const char* kEvalLayer = "eval_layer.art";
inline constexpr const char* kVocab = "vocab.json";
inline constexpr const char* kConfig = "run.cfg";
inline constexpr const char* kLog = "run_log.jsonl";
inline constexpr const char* kCalibration = "calibration.json";
}  // namespace run_files

/// Trains per config, writes checkpoint, layers, vocabulary, config and log
/// into out_dir. Returns the trainer for inspection.
struct TrainResult {
  double best_eval_loss;
  int evaluations;
  std::size_t steps;
};
TrainResult train_run(const RunConfig& config, const std::filesystem::path& out_dir, TrainHooks hooks = {});

}  // namespace sdmlm
