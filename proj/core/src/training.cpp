#include "sdmlm/training.hpp"

#include "sdmlm/evalreport.hpp"

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace sdmlm {

const char* to_string(LossMode m) { return m == LossMode::ce ? "ce" : "sdm"; }
const char* to_string(NegativeMode m) { return m == NegativeMode::static_only ? "static" : "online"; }

LossMode parse_loss_mode(std::string_view s) {
  if (s == "ce") return LossMode::ce;
  if (s == "sdm") return LossMode::sdm;
  throw ConfigError("mode must be ce or sdm, got '" + std::string(s) + "'");
}

NegativeMode parse_negative_mode(std::string_view s) {
  if (s == "static") return NegativeMode::static_only;
  if (s == "online") return NegativeMode::online;
  throw ConfigError("negatives must be static or online, got '" + std::string(s) + "'");
}

void TrainSchedule::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must be in [0, 1]");
  };
  prob(gamma_pos, "gamma_pos");
  prob(gamma_gen, "gamma_gen");
  prob(gamma_div, "gamma_div");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must be in (0, 1)");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must be in (0, 1)");
  if (epochs <= 0 || effective_batch <= 0) throw ConfigError("epochs and effective_batch must be positive");
  if (lr_peak < 0.0 || weight_decay < 0.0 || grad_clip <= 0.0) throw ConfigError("invalid optimizer settings");
  if (max_new_tokens <= 0) throw ConfigError("max_new_tokens must be positive");
}

// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  auto& s = c.schedule;
  auto& m = c.model;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string v = trim(std::string_view(line).substr(eq + 1));
    auto d = [&] { return parse_number<double>(key, v); };
    auto i = [&] { return parse_number<int>(key, v); };
    if (key == "data_dir") c.data_dir = v;
    else if (key == "mode") c.mode = parse_loss_mode(v);
    else if (key == "negatives") c.negatives = parse_negative_mode(v);
    else if (key == "epochs") s.epochs = i();
    else if (key == "effective_batch") s.effective_batch = i();
    else if (key == "lr_peak") s.lr_peak = d();
    else if (key == "warmup_fraction") s.warmup_fraction = d();
    else if (key == "weight_decay") s.weight_decay = d();
    else if (key == "grad_clip") s.grad_clip = d();
    else if (key == "gamma_pos") s.gamma_pos = d();
    else if (key == "gamma_gen") s.gamma_gen = d();
    else if (key == "gamma_div") s.gamma_div = d();
    else if (key == "alpha") s.alpha = s.layer.alpha = d();
    else if (key == "seed") s.seed = m.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "max_new_tokens") s.max_new_tokens = i();
    else if (key == "layer_filters") s.layer.filters = i();
    else if (key == "layer_lr") s.layer.learning_rate = d();
    else if (key == "layer_batch") s.layer.batch_size = i();
    else if (key == "layer_epochs") s.layer.epochs = i();
    else if (key == "min_admitted") s.layer.min_admitted = parse_number<std::size_t>(key, v);
    else if (key == "d_model") m.d_model = i();
    else if (key == "n_layers") m.n_layers = i();
    else if (key == "n_heads") m.n_heads = i();
    else if (key == "d_ff") m.d_ff = i();
    else if (key == "max_seq_len") m.max_seq_len = i();
    else throw ConfigError("unknown config key '" + key + "'");
  }
  s.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  const auto& s = schedule;
  std::ostringstream os;
  os << "data_dir = " << data_dir.string() << '\n'
     << "mode = " << to_string(mode) << '\n'
     << "negatives = " << to_string(negatives) << '\n'
     << "seed = " << s.seed << '\n'
     << "epochs = " << s.epochs << '\n'
     << "effective_batch = " << s.effective_batch << '\n'
     << "lr_peak = " << format_double(s.lr_peak) << '\n'
     << "warmup_fraction = " << format_double(s.warmup_fraction) << '\n'
     << "weight_decay = " << format_double(s.weight_decay) << '\n'
     << "grad_clip = " << format_double(s.grad_clip) << '\n'
     << "gamma_pos = " << format_double(s.gamma_pos) << '\n'
     << "gamma_gen = " << format_double(s.gamma_gen) << '\n'
     << "gamma_div = " << format_double(s.gamma_div) << '\n'
     << "alpha = " << format_double(s.alpha) << '\n'
     << "max_new_tokens = " << s.max_new_tokens << '\n'
     << "layer_filters = " << s.layer.filters << '\n'
     << "layer_lr = " << format_double(s.layer.learning_rate) << '\n'
     << "layer_batch = " << s.layer.batch_size << '\n'
     << "layer_epochs = " << s.layer.epochs << '\n'
     << "min_admitted = " << s.layer.min_admitted << '\n'
     << "d_model = " << model.d_model << '\n'
     << "n_layers = " << model.n_layers << '\n'
     << "n_heads = " << model.n_heads << '\n'
     << "d_ff = " << model.d_ff << '\n'
     << "max_seq_len = " << model.max_seq_len << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

double document_base(const SdmVerdict& v, int label) {
  if (label != 0 && label != 1) throw std::invalid_argument("label must be 0 or 1");
  return 2.0 + v.p[static_cast<std::size_t>(label)];
}

double LossBatch::aggregate() const {
  if (token_count == 0) throw std::invalid_argument("loss batch has no masked tokens");
  return total_loss / static_cast<double>(token_count);
}

namespace {

template <typename T>
double document_loss_impl(const Matrix<T>& logits, const EncodedExample& doc, double base) {
  if (static_cast<std::size_t>(logits.rows()) != doc.tokens.size()) {
    throw std::invalid_argument("logits rows must match the document length");
  }
  double total = 0.0;
  std::vector<double> row(static_cast<std::size_t>(logits.cols()));
  for (std::size_t i = 1; i < doc.tokens.size(); ++i) {
    if (!doc.loss_mask[i]) continue;
    const auto r = static_cast<Eigen::Index>(i - 1);
    for (Eigen::Index c = 0; c < logits.cols(); ++c) row[static_cast<std::size_t>(c)] = static_cast<double>(logits(r, c));
    total += base_cross_entropy<double>(row, static_cast<std::size_t>(doc.tokens[i]), base);
  }
  return total;
}

// Logit rows of the masked targets only, with their targets; enough to
// evaluate the document loss at any base later.
struct MaskedRows {
  Matrix<float> rows;
  std::vector<TokenId> targets;
};

MaskedRows masked_rows(const Matrix<float>& logits, const EncodedExample& doc) {
  MaskedRows m;
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 1; i < doc.tokens.size(); ++i) {
    if (doc.loss_mask[i]) {
      idx.push_back(static_cast<Eigen::Index>(i - 1));
      m.targets.push_back(doc.tokens[i]);
    }
  }
  m.rows.resize(static_cast<Eigen::Index>(idx.size()), logits.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) m.rows.row(static_cast<Eigen::Index>(k)) = logits.row(idx[k]);
  return m;
}

double masked_loss(const MaskedRows& m, double base) {
  double total = 0.0;
  std::vector<double> row(static_cast<std::size_t>(m.rows.cols()));
  for (Eigen::Index r = 0; r < m.rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.rows.cols(); ++c) row[static_cast<std::size_t>(c)] = m.rows(r, c);
    total += base_cross_entropy<double>(row, static_cast<std::size_t>(m.targets[static_cast<std::size_t>(r)]), base);
  }
  return total;
}

}  // namespace

double document_loss_value(const Matrix<float>& logits, const EncodedExample& doc, double base) {
  return document_loss_impl(logits, doc, base);
}

double document_loss_value(const Matrix<double>& logits, const EncodedExample& doc, double base) {
  return document_loss_impl(logits, doc, base);
}

LossBatch sdm_next_token_loss(std::span<const EncodedExample> docs, std::span<const Matrix<float>> logits,
                              std::span<const double> bases) {
  if (docs.size() != logits.size() || docs.size() != bases.size()) {
    throw std::invalid_argument("one logits matrix and one base per document");
  }
  LossBatch b;
  for (std::size_t n = 0; n < docs.size(); ++n) {
    if (!(bases[n] > 1.0)) throw std::invalid_argument("document base must exceed 1");
    const double l = document_loss_value(logits[n], docs[n], bases[n]);
    b.bases.push_back(bases[n]);
    b.doc_losses.push_back(l);
    b.doc_tokens.push_back(docs[n].masked_count());
    b.total_loss += l;
    b.token_count += docs[n].masked_count();
  }
  return b;
}

template <typename T>
typename Tape<T>::Var document_loss(Tape<T>& tape, typename Tape<T>::Var logits, const EncodedExample& doc, T base) {
  const std::size_t n = doc.tokens.size();
  std::vector<std::int32_t> targets(n, 0);
  std::vector<T> weights(n, T(0));
  for (std::size_t i = 0; i + 1 < n; ++i) {
    targets[i] = doc.tokens[i + 1];
    weights[i] = doc.loss_mask[i + 1] ? T(1) : T(0);
  }
  return ops::masked_base_cross_entropy<T>(tape, logits, targets, weights, base);
}

template Tape<float>::Var document_loss<float>(Tape<float>&, Tape<float>::Var, const EncodedExample&, float);
template Tape<double>::Var document_loss<double>(Tape<double>&, Tape<double>::Var, const EncodedExample&, double);

// ---------------------------------------------------------------------------

std::span<const TokenId> stop_tokens() {
  static constexpr std::array<TokenId, 3> kStop = {Vocab::kVerifiedId, Vocab::kYesId, Vocab::kNoId};
  return kStop;
}

Generator greedy_generator(const TransformerLM<float>& model, int max_new_tokens) {
  return [&model, max_new_tokens](std::span<const TokenId> prompt) {
    return greedy_decode(model, prompt, max_new_tokens, stop_tokens());
  };
}

EncodedExample sample_instance(const TrainTriple& triple, const Vocab& vocab, Rng& rng, const InstancePolicy& policy,
                               const Generator* generate, int max_seq_len) {
  const auto prompt = encode_prompt(vocab, triple.prompt);
  if (bernoulli(rng, policy.gamma_pos)) {
    return encode_tokens(prompt, vocab.tokenize(triple.positive), 1, Source::static_positive);
  }
  if (policy.allow_generation && generate && bernoulli(rng, policy.gamma_gen)) {
    auto body = (*generate)(prompt);
    if (verify_r(triple.positive, vocab.detokenize(body)) == 0 && bernoulli(rng, policy.gamma_div)) {
      const auto stops = stop_tokens();
      if (!body.empty() && std::find(stops.begin(), stops.end(), body.back()) != stops.end()) body.pop_back();
      const auto room = static_cast<std::ptrdiff_t>(max_seq_len) - static_cast<std::ptrdiff_t>(prompt.size()) - 2;
      if (room >= 0) {
        if (static_cast<std::ptrdiff_t>(body.size()) > room) body.resize(static_cast<std::size_t>(room));
        body.push_back(Vocab::kVerifiedId);
        body.push_back(Vocab::kNoId);
        return encode_tokens(prompt, body, 0, Source::generated);
      }
    }
  }
  return encode_tokens(prompt, vocab.tokenize(triple.negative), 0, Source::static_negative);
}

Matrix<float> pooled_features(const TransformerLM<float>& model, std::span<const EncodedExample> docs) {
  Matrix<float> out(static_cast<Eigen::Index>(docs.size()), 2 * model.config().d_model);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto h = model.forward(docs[i].classifier_input()).hidden;
    out.row(static_cast<Eigen::Index>(i)) = pooled_feature(h, static_cast<Eigen::Index>(docs[i].verified_pos));
  }
  return out;
}

LayerDataset make_layer_dataset(Matrix<float> features, std::span<const EncodedExample> docs,
                                std::span<const std::string> ids) {
  LayerDataset d;
  d.features = std::move(features);
  for (const auto& doc : docs) d.labels.push_back(doc.label);
  d.ids.assign(ids.begin(), ids.end());
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------

std::uint64_t hash_floats(std::span<const float> v) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size_bytes()));
}

std::uint64_t hash_layer(const SdmLayerParams& p) {
  std::uint64_t h = 0;
  auto mix = [&h](const auto& m) {
    h = h * 1099511628211ull ^ hash_floats(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
  };
  mix(p.center);
  mix(p.w_filter);
  mix(p.b_filter);
  mix(p.w_out);
  mix(p.b_out);
  return h;
}

namespace {

std::uint64_t layer_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index) {
  return derive_stream(seed, purpose, index)();
}

std::vector<std::string> ids_of(std::span<const TrainTriple> triples) {
  std::vector<std::string> ids;
  ids.reserve(triples.size());
  for (const auto& t : triples) ids.push_back(t.id);
  return ids;
}

std::uint64_t hash_model(const TransformerLM<float>& m) {
  const auto flat = m.flat_parameters();
  return hash_floats(flat);
}

}  // namespace

Trainer::Trainer(RunConfig config, Vocab vocab, std::vector<TrainTriple> train, std::vector<TrainTriple> calib,
                 std::optional<std::filesystem::path> out_dir, TrainHooks hooks)
    : config_(std::move(config)),
      vocab_(std::move(vocab)),
      train_(std::move(train)),
      calib_(std::move(calib)),
      out_dir_(std::move(out_dir)),
      hooks_(std::move(hooks)),
      model_([this] {
        config_.model.vocab_size = static_cast<int>(vocab_.size());
        config_.model.seed = config_.schedule.seed;
        return config_.model;
      }()),
      best_loss_(std::numeric_limits<double>::infinity()) {
  config_.schedule.validate();
  if (train_.empty() || calib_.empty()) throw ConfigError("train and calib splits must be nonempty");
  for (const auto* p : model_.parameters()) {
    adam_m_.push_back(Matrix<float>::Zero(p->rows(), p->cols()));
    adam_v_.push_back(Matrix<float>::Zero(p->rows(), p->cols()));
  }
  best_params_ = model_.flat_parameters();
  if (out_dir_) std::filesystem::create_directories(*out_dir_);
}

std::size_t Trainer::steps_per_epoch() const {
  const auto b = static_cast<std::size_t>(config_.schedule.effective_batch);
  return (train_.size() + b - 1) / b;
}

std::size_t Trainer::total_steps() const { return steps_per_epoch() * static_cast<std::size_t>(config_.schedule.epochs); }

double Trainer::learning_rate(std::size_t s) const {
  const auto& sc = config_.schedule;
  const std::size_t total = total_steps();
  const auto warm = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(sc.warmup_fraction * static_cast<double>(total))));
  if (s <= warm) return sc.lr_peak * static_cast<double>(s) / static_cast<double>(warm);
  if (s >= total) return 0.0;
  return sc.lr_peak * static_cast<double>(total - s) / static_cast<double>(total - warm);
}

void Trainer::emit(const LogRecord& r) {
  log_.push_back(r);
  if (hooks_.on_log) hooks_.on_log(r);
}

void Trainer::report_layer(const std::string& tag, const SdmLayer& layer, const LayerFitReport& report) {
  if (hooks_.on_layer) hooks_.on_layer(tag, layer, report);
}

double Trainer::train_step(std::span<const EncodedExample> batch, std::span<const std::string> ids,
                           const SdmLayer* layer) {
  const auto& sc = config_.schedule;
  model_.zero_grad();
  std::size_t n_tok = 0;
  for (const auto& d : batch) n_tok += d.masked_count();
  if (n_tok == 0) throw std::logic_error("batch without masked tokens");
  if (layer) freeze_.batches.push_back({epoch_, hash_layer(layer->params)});

  double total = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    Tape<float> tape;
    const auto out = model_.forward(tape, batch[n].tokens);
    double base = std::numbers::e;
    if (layer) {
      const RowVector<float> f =
          pooled_feature(tape.value(out.hidden), static_cast<Eigen::Index>(batch[n].verified_pos));
      const auto v = layer->predict(std::span<const float>(f.data(), static_cast<std::size_t>(f.size())), ids[n]);
      base = document_base(v, batch[n].label);
    }
    const auto loss = document_loss(tape, out.logits, batch[n], static_cast<float>(base));
    total += static_cast<double>(tape.value(loss)(0, 0));
    tape.backward(loss, 1.0f / static_cast<float>(n_tok));
  }

  auto params = model_.parameters();
  double sq = 0.0;
  for (const auto* p : params) {
    if (p->has_grad()) sq += p->grad.cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const float clip = norm > sc.grad_clip ? static_cast<float>(sc.grad_clip / norm) : 1.0f;

  ++step_;
  const auto lr = static_cast<float>(learning_rate(step_));
  constexpr float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
  const float c1 = 1.0f - std::pow(b1, static_cast<float>(step_));
  const float c2 = 1.0f - std::pow(b2, static_cast<float>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.has_grad()) continue;
    const Matrix<float> g = p.grad * clip;
    adam_m_[i] = b1 * adam_m_[i] + (1.0f - b1) * g;
    adam_v_[i] = b2 * adam_v_[i] + (1.0f - b2) * g.cwiseProduct(g);
    if (p.rows() > 1 && p.cols() > 1 && sc.weight_decay > 0.0) {
      p.value *= 1.0f - lr * static_cast<float>(sc.weight_decay);
    }
    p.value.array() -= lr * (adam_m_[i].array() / c1) / ((adam_v_[i].array() / c2).sqrt() + eps);
  }
  return total / static_cast<double>(n_tok);
}

void Trainer::run_epoch() {
  const auto& sc = config_.schedule;
  ++epoch_;
  const InstancePolicy policy{sc.gamma_pos, sc.gamma_gen, sc.gamma_div,
                              config_.negatives == NegativeMode::online && epoch_ >= 2};
  const Generator gen = greedy_generator(model_, sc.max_new_tokens);
  std::vector<EncodedExample> instances;
  instances.reserve(train_.size());
  for (std::size_t i = 0; i < train_.size(); ++i) {
    Rng rng = derive_stream(sc.seed, "train-instance", static_cast<std::uint64_t>(epoch_), i);
    instances.push_back(sample_instance(train_[i], vocab_, rng, policy, &gen, config_.model.max_seq_len));
  }
  const auto ids = ids_of(train_);

  std::optional<SdmLayer> layer;
  if (config_.mode == LossMode::sdm) {
    const auto before = hash_model(model_);
    LayerFitReport report;
    layer = train_layer(make_layer_dataset(pooled_features(model_, instances), instances, ids),
                        layer_seed(sc.seed, "dtr-layer", static_cast<std::uint64_t>(epoch_)), sc.layer, &report);
    freeze_.layer_fits.push_back({before, hash_model(model_)});
    report_layer("dtr/" + std::to_string(epoch_), *layer, report);
  }

  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng order_rng = derive_stream(sc.seed, "epoch-order", static_cast<std::uint64_t>(epoch_));
  std::shuffle(order.begin(), order.end(), order_rng);

  const std::size_t spe = steps_per_epoch();
  const std::size_t mid = (spe + 1) / 2;
  const auto bsz = static_cast<std::size_t>(sc.effective_batch);
  for (std::size_t s = 0; s < spe; ++s) {
    std::vector<EncodedExample> batch;
    std::vector<std::string> batch_ids;
    for (std::size_t k = s * bsz; k < std::min(order.size(), (s + 1) * bsz); ++k) {
      batch.push_back(instances[order[k]]);
      batch_ids.push_back(ids[order[k]]);
    }
    last_loss_ = train_step(batch, batch_ids, layer ? &*layer : nullptr);
    emit({step_, epoch_, last_loss_, learning_rate(step_), std::nullopt});
    if (s + 1 == mid && mid != spe) evaluate_checkpoint();
  }
  evaluate_checkpoint();
}

double Trainer::evaluate_checkpoint() {
  const auto& sc = config_.schedule;
  const auto index = static_cast<std::uint64_t>(eval_index_++);
  const InstancePolicy policy{sc.gamma_pos, sc.gamma_gen, sc.gamma_div,
                              config_.negatives == NegativeMode::online && epoch_ >= 2};
  const Generator gen = greedy_generator(model_, sc.max_new_tokens);
  std::vector<EncodedExample> instances;
  instances.reserve(calib_.size());
  for (std::size_t i = 0; i < calib_.size(); ++i) {
    Rng rng = derive_stream(sc.seed, "eval-instance", index, i);
    instances.push_back(sample_instance(calib_[i], vocab_, rng, policy, &gen, config_.model.max_seq_len));
  }
  const auto ids = ids_of(calib_);

  Matrix<float> features(static_cast<Eigen::Index>(instances.size()), 2 * config_.model.d_model);
  std::vector<MaskedRows> rows;
  rows.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto out = model_.forward(instances[i].tokens);
    features.row(static_cast<Eigen::Index>(i)) =
        pooled_feature(out.hidden, static_cast<Eigen::Index>(instances[i].verified_pos));
    rows.push_back(masked_rows(out.logits, instances[i]));
  }

  std::vector<double> bases(instances.size(), std::numbers::e);
  std::optional<SdmLayer> layer;
  if (config_.mode == LossMode::sdm) {
    const auto before = hash_model(model_);
    LayerFitReport report;
    layer = train_layer(make_layer_dataset(features, instances, ids), layer_seed(sc.seed, "dca-layer", index),
                        sc.layer, &report);
    freeze_.layer_fits.push_back({before, hash_model(model_)});
    report_layer("dca/" + std::to_string(index), *layer, report);
    const auto verdicts = layer->predict_batch(features, ids);
    for (std::size_t i = 0; i < instances.size(); ++i) bases[i] = document_base(verdicts[i], instances[i].label);
  }
  double total = 0.0;
  std::size_t n_tok = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    total += masked_loss(rows[i], bases[i]);
    n_tok += rows[i].targets.size();
  }
  const double loss = total / static_cast<double>(n_tok);

  if (loss < best_loss_) {
    best_loss_ = loss;
    best_params_ = model_.flat_parameters();
    if (out_dir_) {
      save_checkpoint(*out_dir_ / run_files::kCheckpoint, model_);
      if (layer) save_layer(*out_dir_ / run_files::kEvalLayer, *layer);
    }
  }
  emit({step_, epoch_, last_loss_, learning_rate(step_), loss});
  return loss;
}

void Trainer::run() {
  while (epoch_ < config_.schedule.epochs) run_epoch();
  model_.set_flat_parameters(best_params_);
}

// ---------------------------------------------------------------------------

SdmLayer finalize_test_time_layer(const TransformerLM<float>& model, const Vocab& vocab,
                                  std::span<const TrainTriple> calib, const TrainSchedule& schedule,
                                  LayerFitReport* report) {
  const InstancePolicy policy{0.5, 1.0, 1.0, true};
  const Generator gen = greedy_generator(model, schedule.max_new_tokens);
  std::vector<EncodedExample> instances;
  instances.reserve(calib.size());
  for (std::size_t i = 0; i < calib.size(); ++i) {
    Rng rng = derive_stream(schedule.seed, "final-instance", 0, i);
    instances.push_back(sample_instance(calib[i], vocab, rng, policy, &gen, model.config().max_seq_len));
  }
  const auto ids = ids_of(calib);
  return train_layer(make_layer_dataset(pooled_features(model, instances), instances, ids),
                     layer_seed(schedule.seed, "final-layer", 0), schedule.layer, report);
}

TrainResult train_run(const RunConfig& config, const std::filesystem::path& out_dir, TrainHooks hooks) {
  const auto& dir = config.data_dir;
  Vocab vocab = Vocab::load(dir / "vocab.json");
  auto train = read_dataset(dir / "train.jsonl");
  auto calib = read_dataset(dir / "calib.jsonl");
  auto on_layer = hooks.on_layer;
  Trainer trainer(config, vocab, train, calib, out_dir, std::move(hooks));
  trainer.run();
  save_checkpoint(out_dir / run_files::kCheckpoint, trainer.model());

  LayerFitReport report;
  const SdmLayer layer = finalize_test_time_layer(trainer.model(), vocab, calib, config.schedule, &report);
  if (on_layer) on_layer("final", layer, report);
  save_layer(out_dir / run_files::kTestLayer, layer);
  write_calibration_summary(out_dir / run_files::kCalibration,
                            calibration_summary(layer.artifacts, report.calib_verdicts, report.calib_labels));
  vocab.save(out_dir / run_files::kVocab);

  RunConfig saved = trainer.config();
  saved.data_dir = std::filesystem::absolute(config.data_dir);
  {
    std::ofstream out(out_dir / run_files::kConfig, std::ios::trunc);
    out << saved.to_text();
  }
  {
    std::ofstream out(out_dir / run_files::kLog, std::ios::binary | std::ios::trunc);
    for (const auto& r : trainer.log()) {
      nlohmann::ordered_json j;
      j["step"] = r.step;
      j["epoch"] = r.epoch;
      j["loss"] = r.loss;
      j["lr"] = r.lr;
      if (r.eval_loss) j["eval_loss"] = *r.eval_loss;
      out << j.dump() << '\n';
    }
  }
  return {trainer.best_eval_loss(), trainer.evaluations(), trainer.step()};
}

}  // namespace sdmlm
