#pragma once

// Test-time generation and verification, selective-classification tables,
// generation accuracy, calibration summaries and the report file.

#include "sdmlm/encoding.hpp"
#include "sdmlm/model.hpp"
#include "sdmlm/sdm.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sdmlm {

struct GenerationRecord {
  std::string id;
  std::string generated;  // decoded completion, including the stop token
  std::string reference;  // reference sentence
  int y = 0;              // exact match against the positive completion
  std::optional<std::string> sentence;
  SdmVerdict verdict;
  bool admitted = false;

  bool operator==(const GenerationRecord&) const;
};

/// Greedy decode per prompt, verification against the positive, and a
/// verdict over prompt + generated body + <verified> (no self-exclusion).
std::vector<GenerationRecord> run_eval(const TransformerLM<float>& model, const Vocab& vocab, const SdmLayer& layer,
                                       std::span<const TrainTriple> split, int max_new_tokens);

struct SelectiveCell {
  std::size_t admitted = 0;
  std::size_t correct = 0;
  double fraction = 0.0;            // admitted / |test|
  std::optional<double> accuracy;   // empty when nothing is admitted

  bool operator==(const SelectiveCell&) const = default;
};

struct SelectiveReport {
  std::string estimator;  // "no-reject" or "sdm-HR"
  std::size_t total = 0;
  SelectiveCell y0, y1, yhat0, yhat1, marginal;

  bool operator==(const SelectiveReport&) const = default;
};

/// Correctness is y_hat == y. no-reject keeps every record; sdm-HR keeps the
/// admitted ones. Fractions are over all records.
std::pair<SelectiveReport, SelectiveReport> selective_table(std::span<const GenerationRecord> records);

struct GenerationSummary {
  std::size_t n = 0;
  double exact_match = 0.0;
  double sentence_accuracy = 0.0;

  bool operator==(const GenerationSummary&) const = default;
};

GenerationSummary generation_table(std::span<const GenerationRecord> records);

struct CalibrationSummary {
  std::array<std::size_t, 2> n{};
  std::array<double, 2> loss{};  // mean -ln p[y] per true class
  std::array<double, 2> accuracy{};
  std::array<double, 2> mean_q{};
  double psi0 = 0.0;
  double psi1 = 0.0;
  double q_tilde_min = 0.0;
  std::size_t admitted = 0;

  bool operator==(const CalibrationSummary&) const = default;
};

CalibrationSummary calibration_summary(const CalibrationArtifacts& artifacts, std::span<const SdmVerdict> verdicts,
                                       std::span<const int> labels);

void write_calibration_summary(const std::filesystem::path& path, const CalibrationSummary& s);
CalibrationSummary read_calibration_summary(const std::filesystem::path& path);

struct EvalReport {
  std::string split;
  std::vector<GenerationRecord> records;
  SelectiveReport no_reject, hr;
  GenerationSummary generation;
  std::optional<CalibrationSummary> calibration;
};

EvalReport make_report(std::string split, std::vector<GenerationRecord> records,
                       std::optional<CalibrationSummary> calibration);

/// Line-delimited JSON: a header, one line per record, then one line per table.
void write_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report(const std::filesystem::path& path);

/// Aligned text tables.
std::string render_report(const EvalReport& report);

}  // namespace sdmlm
