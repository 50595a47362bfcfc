#include "sdmlm/evalreport.hpp"

#include "sdmlm/training.hpp"

#include "json.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <limits>

namespace sdmlm {

using nlohmann::ordered_json;

bool GenerationRecord::operator==(const GenerationRecord& o) const {
  auto same = [](const SdmVerdict& a, const SdmVerdict& b) {
    return a.z == b.z && a.y_hat == b.y_hat && a.q == b.q && a.d == b.d && a.q_tilde == b.q_tilde && a.p == b.p &&
           a.admitted == b.admitted;
  };
  return id == o.id && generated == o.generated && reference == o.reference && y == o.y && sentence == o.sentence &&
         same(verdict, o.verdict) && admitted == o.admitted;
}

std::vector<GenerationRecord> run_eval(const TransformerLM<float>& model, const Vocab& vocab, const SdmLayer& layer,
                                       std::span<const TrainTriple> split, int max_new_tokens) {
  std::vector<GenerationRecord> out;
  out.reserve(split.size());
  const auto stops = stop_tokens();
  const int max_len = model.config().max_seq_len;
  for (const auto& t : split) {
    const auto prompt = encode_prompt(vocab, t.prompt);
    const auto gen = greedy_decode(model, prompt, max_new_tokens, stops);

    GenerationRecord r;
    r.id = t.id;
    r.generated = vocab.detokenize(gen);
    r.reference = extract_sentence(t.positive).value_or("");
    r.y = verify_r(t.positive, r.generated);
    r.sentence = extract_sentence(r.generated);

    std::vector<TokenId> doc = prompt;
    doc.insert(doc.end(), gen.begin(), gen.end());
    if (!gen.empty() && std::find(stops.begin(), stops.end(), gen.back()) != stops.end()) doc.pop_back();
    if (static_cast<int>(doc.size()) >= max_len) doc.resize(static_cast<std::size_t>(max_len - 1));
    doc.push_back(Vocab::kVerifiedId);
    const auto hidden = model.forward(doc).hidden;
    const RowVector<float> f = pooled_feature(hidden, static_cast<Eigen::Index>(doc.size() - 1));
    r.verdict = layer.predict(std::span<const float>(f.data(), static_cast<std::size_t>(f.size())));
    r.admitted = r.verdict.admitted;
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

SelectiveCell make_cell(std::size_t admitted, std::size_t correct, std::size_t total) {
  SelectiveCell c;
  c.admitted = admitted;
  c.correct = correct;
  c.fraction = total ? static_cast<double>(admitted) / static_cast<double>(total) : 0.0;
  if (admitted) c.accuracy = static_cast<double>(correct) / static_cast<double>(admitted);
  return c;
}

SelectiveReport tabulate(std::string name, std::span<const GenerationRecord> records, bool hr_only) {
  // Counts indexed [y][y_hat].
  std::size_t n[2][2] = {{0, 0}, {0, 0}};
  for (const auto& rec : records) {
    if (hr_only && !rec.admitted) continue;
    ++n[rec.y == 1][rec.verdict.y_hat == 1];
  }
  SelectiveReport r;
  r.estimator = std::move(name);
  r.total = records.size();
  r.y0 = make_cell(n[0][0] + n[0][1], n[0][0], r.total);
  r.y1 = make_cell(n[1][0] + n[1][1], n[1][1], r.total);
  r.yhat0 = make_cell(n[0][0] + n[1][0], n[0][0], r.total);
  r.yhat1 = make_cell(n[0][1] + n[1][1], n[1][1], r.total);
  r.marginal = make_cell(n[0][0] + n[0][1] + n[1][0] + n[1][1], n[0][0] + n[1][1], r.total);
  return r;
}

}  // namespace

std::pair<SelectiveReport, SelectiveReport> selective_table(std::span<const GenerationRecord> records) {
  return {tabulate("no-reject", records, false), tabulate("sdm-HR", records, true)};
}

GenerationSummary generation_table(std::span<const GenerationRecord> records) {
  GenerationSummary g;
  g.n = records.size();
  if (records.empty()) return g;
  std::size_t exact = 0, sentence = 0;
  for (const auto& r : records) {
    exact += static_cast<std::size_t>(r.y);
    if (r.sentence && *r.sentence == r.reference) ++sentence;
  }
  g.exact_match = static_cast<double>(exact) / static_cast<double>(g.n);
  g.sentence_accuracy = static_cast<double>(sentence) / static_cast<double>(g.n);
  return g;
}

CalibrationSummary calibration_summary(const CalibrationArtifacts& artifacts, std::span<const SdmVerdict> verdicts,
                                       std::span<const int> labels) {
  if (verdicts.size() != labels.size()) throw std::invalid_argument("verdicts and labels differ in length");
  CalibrationSummary s;
  std::array<std::size_t, 2> correct{};
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    const auto k = static_cast<std::size_t>(labels[i]);
    ++s.n[k];
    s.loss[k] += -std::log(verdicts[i].p[k]);
    s.mean_q[k] += static_cast<double>(verdicts[i].q);
    if (verdicts[i].y_hat == labels[i]) ++correct[k];
  }
  for (std::size_t k = 0; k < 2; ++k) {
    if (!s.n[k]) continue;
    const auto n = static_cast<double>(s.n[k]);
    s.loss[k] /= n;
    s.mean_q[k] /= n;
    s.accuracy[k] = static_cast<double>(correct[k]) / n;
  }
  s.psi0 = artifacts.thresholds.psi0;
  s.psi1 = artifacts.thresholds.psi1;
  s.q_tilde_min = artifacts.thresholds.q_tilde_min;
  s.admitted = artifacts.thresholds.admitted;
  return s;
}

// ---------------------------------------------------------------------------

namespace {

constexpr int kReportVersion = 1;

// JSON has no infinity; an infinite threshold is stored as null.
ordered_json finite_or_null(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }
double from_finite_or_null(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

ordered_json to_json(const CalibrationSummary& s) {
  ordered_json j;
  j["type"] = "calibration";
  j["n"] = s.n;
  j["loss"] = s.loss;
  j["accuracy"] = s.accuracy;
  j["mean_q"] = s.mean_q;
  j["psi0"] = s.psi0;
  j["psi1"] = s.psi1;
  j["q_tilde_min"] = finite_or_null(s.q_tilde_min);
  j["admitted"] = s.admitted;
  return j;
}

CalibrationSummary calibration_from_json(const nlohmann::json& j) {
  CalibrationSummary s;
  s.n = j.at("n").get<std::array<std::size_t, 2>>();
  s.loss = j.at("loss").get<std::array<double, 2>>();
  s.accuracy = j.at("accuracy").get<std::array<double, 2>>();
  s.mean_q = j.at("mean_q").get<std::array<double, 2>>();
  s.psi0 = j.at("psi0").get<double>();
  s.psi1 = j.at("psi1").get<double>();
  s.q_tilde_min = from_finite_or_null(j.at("q_tilde_min"));
  s.admitted = j.at("admitted").get<std::size_t>();
  return s;
}

ordered_json cell_json(const SelectiveCell& c) {
  ordered_json j;
  j["admitted"] = c.admitted;
  j["correct"] = c.correct;
  j["fraction"] = c.fraction;
  j["accuracy"] = c.accuracy ? ordered_json(*c.accuracy) : ordered_json(nullptr);
  return j;
}

SelectiveCell cell_from_json(const nlohmann::json& j) {
  SelectiveCell c;
  c.admitted = j.at("admitted").get<std::size_t>();
  c.correct = j.at("correct").get<std::size_t>();
  c.fraction = j.at("fraction").get<double>();
  if (!j.at("accuracy").is_null()) c.accuracy = j.at("accuracy").get<double>();
  return c;
}

ordered_json to_json(const SelectiveReport& r) {
  ordered_json j;
  j["type"] = "selective";
  j["estimator"] = r.estimator;
  j["total"] = r.total;
  j["y0"] = cell_json(r.y0);
  j["y1"] = cell_json(r.y1);
  j["yhat0"] = cell_json(r.yhat0);
  j["yhat1"] = cell_json(r.yhat1);
  j["marginal"] = cell_json(r.marginal);
  return j;
}

SelectiveReport selective_from_json(const nlohmann::json& j) {
  SelectiveReport r;
  r.estimator = j.at("estimator").get<std::string>();
  r.total = j.at("total").get<std::size_t>();
  r.y0 = cell_from_json(j.at("y0"));
  r.y1 = cell_from_json(j.at("y1"));
  r.yhat0 = cell_from_json(j.at("yhat0"));
  r.yhat1 = cell_from_json(j.at("yhat1"));
  r.marginal = cell_from_json(j.at("marginal"));
  return r;
}

ordered_json to_json(const GenerationRecord& r) {
  ordered_json j;
  j["type"] = "record";
  j["id"] = r.id;
  j["generated"] = r.generated;
  j["reference"] = r.reference;
  j["y"] = r.y;
  j["sentence"] = r.sentence ? ordered_json(*r.sentence) : ordered_json(nullptr);
  j["z"] = r.verdict.z;
  j["y_hat"] = r.verdict.y_hat;
  j["q"] = r.verdict.q;
  j["d"] = r.verdict.d;
  j["q_tilde"] = r.verdict.q_tilde;
  j["p"] = r.verdict.p;
  j["admitted"] = r.admitted;
  return j;
}

GenerationRecord record_from_json(const nlohmann::json& j) {
  GenerationRecord r;
  r.id = j.at("id").get<std::string>();
  r.generated = j.at("generated").get<std::string>();
  r.reference = j.at("reference").get<std::string>();
  r.y = j.at("y").get<int>();
  if (!j.at("sentence").is_null()) r.sentence = j.at("sentence").get<std::string>();
  r.verdict.z = j.at("z").get<std::array<double, 2>>();
  r.verdict.y_hat = j.at("y_hat").get<int>();
  r.verdict.q = j.at("q").get<std::size_t>();
  r.verdict.d = j.at("d").get<double>();
  r.verdict.q_tilde = j.at("q_tilde").get<double>();
  r.verdict.p = j.at("p").get<std::array<double, 2>>();
  r.admitted = j.at("admitted").get<bool>();
  r.verdict.admitted = r.admitted;
  return r;
}

}  // namespace

void write_calibration_summary(const std::filesystem::path& path, const CalibrationSummary& s) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(s).dump() << '\n';
}

CalibrationSummary read_calibration_summary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return calibration_from_json(nlohmann::json::parse(in));
}

EvalReport make_report(std::string split, std::vector<GenerationRecord> records,
                       std::optional<CalibrationSummary> calibration) {
  EvalReport r;
  r.split = std::move(split);
  r.records = std::move(records);
  std::tie(r.no_reject, r.hr) = selective_table(r.records);
  r.generation = generation_table(r.records);
  r.calibration = std::move(calibration);
  return r;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  ordered_json header;
  header["type"] = "header";
  header["version"] = kReportVersion;
  header["split"] = report.split;
  header["records"] = report.records.size();
  out << header.dump() << '\n';
  for (const auto& r : report.records) out << to_json(r).dump() << '\n';
  out << to_json(report.no_reject).dump() << '\n';
  out << to_json(report.hr).dump() << '\n';
  ordered_json g;
  g["type"] = "generation";
  g["n"] = report.generation.n;
  g["exact_match"] = report.generation.exact_match;
  g["sentence_accuracy"] = report.generation.sentence_accuracy;
  out << g.dump() << '\n';
  if (report.calibration) out << to_json(*report.calibration).dump() << '\n';
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  EvalReport r;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto type = j.at("type").get<std::string>();
    if (type == "header") {
      if (j.at("version").get<int>() != kReportVersion) throw std::runtime_error("unsupported report version");
      r.split = j.at("split").get<std::string>();
      header = true;
    } else if (type == "record") {
      r.records.push_back(record_from_json(j));
    } else if (type == "selective") {
      auto s = selective_from_json(j);
      (s.estimator == "sdm-HR" ? r.hr : r.no_reject) = std::move(s);
    } else if (type == "generation") {
      r.generation.n = j.at("n").get<std::size_t>();
      r.generation.exact_match = j.at("exact_match").get<double>();
      r.generation.sentence_accuracy = j.at("sentence_accuracy").get<double>();
    } else if (type == "calibration") {
      r.calibration = calibration_from_json(j);
    } else {
      throw std::runtime_error("unknown report line type: " + type);
    }
  }
  if (!header) throw std::runtime_error("report has no header: " + path.string());
  return r;
}

std::string render_report(const EvalReport& report) {
  std::string out = fmt::format("split: {}  records: {}\n\n", report.split, report.records.size());
  auto cell = [](const SelectiveCell& c) {
    if (!c.accuracy) return fmt::format("{:>14} {:>7.3f}", "all-rejected", c.fraction);
    return fmt::format("{:>14.3f} {:>7.3f}", *c.accuracy, c.fraction);
  };
  out += fmt::format("{:<10} {:<8} {:>14} {:>7}\n", "estimator", "class", "accuracy", "n/|N|");
  for (const auto* r : {&report.no_reject, &report.hr}) {
    const std::pair<const char*, const SelectiveCell*> rows[] = {
        {"y=0", &r->y0}, {"y=1", &r->y1}, {"yhat=0", &r->yhat0}, {"yhat=1", &r->yhat1}, {"marginal", &r->marginal}};
    for (const auto& [name, c] : rows) out += fmt::format("{:<10} {:<8} {}\n", r->estimator, name, cell(*c));
  }
  out += fmt::format("\nexact match: {:.3f}  sentence accuracy: {:.3f}  (n={})\n", report.generation.exact_match,
                     report.generation.sentence_accuracy, report.generation.n);
  if (report.calibration) {
    const auto& c = *report.calibration;
    const std::string qmin = std::isfinite(c.q_tilde_min) ? fmt::format("{:.3f}", c.q_tilde_min) : "inf";
    out += fmt::format("\ncalibration split of the test-time layer\n");
    out += fmt::format("{:<6} {:>6} {:>8} {:>9} {:>8}\n", "class", "n", "loss", "accuracy", "mean q");
    for (std::size_t k = 0; k < 2; ++k) {
      out += fmt::format("{:<6} {:>6} {:>8.4f} {:>9.4f} {:>8.1f}\n", k, c.n[k], c.loss[k], c.accuracy[k], c.mean_q[k]);
    }
    out += fmt::format("psi0 {:.4f}  psi1 {:.4f}  q_tilde_min {}  admitted {}\n", c.psi0, c.psi1, qmin, c.admitted);
  }
  return out;
}

}  // namespace sdmlm
