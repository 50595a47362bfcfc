// Command-line driver: dataset generation, training, evaluation, reports.

#include "sdmlm/evalreport.hpp"
#include "sdmlm/taskgen.hpp"
#include "sdmlm/training.hpp"

#include "CLI11.hpp"

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>

namespace fs = std::filesystem;
using namespace sdmlm;

namespace {

int gen_data(std::uint64_t seed, const fs::path& out, const std::optional<fs::path>& sentences, const CorpusConfig& sizes) {
  CorpusConfig c = sizes;
  c.seed = seed;
  if (sentences) c.user_sentences = read_sentence_file(*sentences);
  const auto splits = gen_corpus(c);
  write_splits(out, splits, c);
  fmt::print("wrote {} train, {} calib, {} test, {} shifted examples to {}\n", splits.train.size(),
             splits.calib.size(), splits.test.size(), splits.test_cvs.size(), out.string());
  return 0;
}

int train(const fs::path& config_path, const std::optional<std::string>& mode,
          const std::optional<std::string>& negatives, const fs::path& out, bool quiet) {
  RunConfig config = RunConfig::load(config_path);
  if (config.data_dir.is_relative()) config.data_dir = config_path.parent_path() / config.data_dir;
  if (mode) config.mode = parse_loss_mode(*mode);
  if (negatives) config.negatives = parse_negative_mode(*negatives);
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  TrainHooks hooks;
  if (!quiet) {
    hooks.on_log = [&](const LogRecord& r) {
      if (r.eval_loss) {
        fmt::print(stderr, "[{:7.1f}s] epoch {:2d} step {:4d} train {:.4f} eval {:.4f}\n", elapsed(), r.epoch, r.step,
                   r.loss, *r.eval_loss);
      }
    };
    hooks.on_layer = [&](const std::string& tag, const SdmLayer& layer, const LayerFitReport& rep) {
      const auto& t = layer.artifacts.thresholds;
      fmt::print(stderr, "[{:7.1f}s] layer {:8s} best epoch {:3d} balanced loss {:.4f} q_tilde_min {} admitted {}\n",
                 elapsed(), tag, rep.best_epoch, rep.best_balanced_loss,
                 std::isfinite(t.q_tilde_min) ? fmt::format("{:.2f}", t.q_tilde_min) : "inf", t.admitted);
    };
  }
  const auto result = train_run(config, out, std::move(hooks));
  fmt::print("best calibration loss {:.6f} after {} evaluations, {} steps ({:.1f}s)\n", result.best_eval_loss,
             result.evaluations, result.steps, elapsed());
  return 0;
}

int eval(const fs::path& dir, const std::string& split, const fs::path& out) {
  if (split != "test" && split != "cvs") throw CLI::ValidationError("--split", "must be test or cvs");
  const RunConfig config = RunConfig::load(dir / run_files::kConfig);
  const auto model = load_checkpoint(dir / run_files::kCheckpoint);
  const auto layer = load_layer(dir / run_files::kTestLayer);
  const auto vocab = Vocab::load(dir / run_files::kVocab);
  const auto triples = read_dataset(config.data_dir / (split == "test" ? "test.jsonl" : "test_cvs.jsonl"));
  std::optional<CalibrationSummary> calibration;
  if (fs::exists(dir / run_files::kCalibration)) calibration = read_calibration_summary(dir / run_files::kCalibration);
  auto records = run_eval(model, vocab, layer, triples, config.schedule.max_new_tokens);
  const auto report = make_report(split, std::move(records), calibration);
  write_report(out, report);
  fmt::print("{}", render_report(report));
  return 0;
}

int report(const fs::path& in) {
  fmt::print("{}", render_report(read_report(in)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Word-ordering fine-tuning with a similarity-distance-magnitude estimator"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic word-ordering dataset");
  std::uint64_t seed = 0;
  fs::path data_out;
  std::optional<fs::path> sentences;
  CorpusConfig sizes;
  gen->add_option("--seed", seed, "Random seed")->required();
  gen->add_option("--out", data_out, "Output directory")->required();
  gen->add_option("--sentences", sentences, "Sentence file (one per line) used instead of the grammar")
      ->check(CLI::ExistingFile);
  gen->add_option("--n-train", sizes.n_train, "Training prompts");
  gen->add_option("--n-calib", sizes.n_calib, "Calibration prompts");
  gen->add_option("--n-test", sizes.n_test, "Test prompts");
  gen->add_option("--n-cvs", sizes.n_cvs, "Shifted-length test prompts");

  auto* tr = app.add_subcommand("train", "Fine-tune a model and fit its test-time estimator");
  fs::path config_path, run_out;
  std::optional<std::string> mode, negatives;
  bool quiet = false;
  tr->add_option("--config", config_path, "Flat key = value config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--mode", mode, "Loss: ce or sdm")->check(CLI::IsMember({"ce", "sdm"}));
  tr->add_option("--negatives", negatives, "Negatives: static or online")->check(CLI::IsMember({"static", "online"}));
  tr->add_option("--out", run_out, "Run directory")->required();
  tr->add_flag("--quiet", quiet, "Only print the final summary");

  auto* ev = app.add_subcommand("eval", "Generate, verify and classify a test split");
  fs::path ckpt_dir, report_out;
  std::string split = "test";
  ev->add_option("--checkpoint", ckpt_dir, "Run directory written by train")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", split, "test or cvs")->check(CLI::IsMember({"test", "cvs"}));
  ev->add_option("--out", report_out, "Report file")->required();

  auto* rep = app.add_subcommand("report", "Print the tables of a report file");
  fs::path report_in;
  rep->add_option("--in", report_in, "Report file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return gen_data(seed, data_out, sentences, sizes);
    if (*tr) return train(config_path, mode, negatives, run_out, quiet);
    if (*ev) return eval(ckpt_dir, split, report_out);
    if (*rep) return report(report_in);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
