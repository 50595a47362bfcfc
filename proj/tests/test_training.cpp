#include "sdmlm/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace sdmlm;

namespace {

struct TinyData {
  Vocab vocab;
  std::vector<TrainTriple> train, calib;
};

const TinyData& tiny_data() {
  static const TinyData d = [] {
    CorpusConfig c;
    c.seed = 12;
    c.n_train = 40;
    c.n_calib = 30;
    c.n_test = 10;
    c.n_cvs = 5;
    const auto s = gen_corpus(c);
    TinyData out{build_vocab(s), {}, {}};
    for (const auto& ex : s.train) out.train.push_back(ex.triple);
    for (const auto& ex : s.calib) out.calib.push_back(ex.triple);
    return out;
  }();
  return d;
}

RunConfig tiny_run(LossMode mode, NegativeMode neg) {
  RunConfig c;
  c.mode = mode;
  c.negatives = neg;
  c.model.d_model = 16;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.model.d_ff = 32;
  c.model.max_seq_len = 160;
  auto& s = c.schedule;
  s.epochs = 3;
  s.effective_batch = 16;
  s.seed = 4;
  s.max_new_tokens = 6;
  s.layer.filters = 24;
  s.layer.epochs = 5;
  s.layer.min_admitted = 3;
  return c;
}

EncodedExample one_token_doc(TokenId target) {
  EncodedExample d;
  d.tokens = {0, target};
  d.loss_mask = {0, 1};
  d.label = 1;
  return d;
}

}  // namespace

TEST(Loss, SingleTokenExamples) {
  const Matrix<float> logits{{2.0f, 1.0f, 0.0f}, {0.0f, 0.0f, 0.0f}};
  const std::vector<EncodedExample> docs{one_token_doc(0)};
  const std::vector<Matrix<float>> l{logits};
  // log_3(13/9) and log_2(7/4), evaluated at 30 digits.
  const std::vector<double> b3{3.0}, b2{2.0};
  EXPECT_NEAR(sdm_next_token_loss(docs, l, b3).aggregate(), 0.33471751947279269, 1e-6);
  EXPECT_NEAR(sdm_next_token_loss(docs, l, b2).aggregate(), 0.80735492205760411, 1e-6);
}

TEST(Loss, NaturalBaseIsMaskedCrossEntropy) {
  std::mt19937_64 rng(8);
  std::normal_distribution<float> n(0, 2);
  for (int trial = 0; trial < 20; ++trial) {
    EncodedExample d;
    const int len = 6;
    for (int i = 0; i < len; ++i) {
      d.tokens.push_back(static_cast<TokenId>(rng() % 5));
      d.loss_mask.push_back(i > 1 && rng() % 3 != 0);
    }
    Matrix<float> logits(len, 5);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = n(rng);
    double ce = 0;
    std::size_t tok = 0;
    for (int i = 1; i < len; ++i) {
      if (!d.loss_mask[i]) continue;
      double s = 0;
      for (int c = 0; c < 5; ++c) s += std::exp(static_cast<double>(logits(i - 1, c)));
      ce += -std::log(std::exp(static_cast<double>(logits(i - 1, d.tokens[i]))) / s);
      ++tok;
    }
    if (tok == 0) continue;
    const std::vector<EncodedExample> docs{d};
    const std::vector<Matrix<float>> l{logits};
    const std::vector<double> be{std::numbers::e};
    const auto b = sdm_next_token_loss(docs, l, be);
    EXPECT_EQ(b.token_count, tok);
    EXPECT_NEAR(b.aggregate(), ce / tok, 1e-6 * ce / tok);
  }
}

TEST(Loss, AggregateIsTokenWeighted) {
  const Matrix<float> l1{{0.0f, 0.0f}, {0.0f, 0.0f}};
  const Matrix<float> l3{{0.0f, 0.0f}, {0.0f, 0.0f}, {0.0f, 0.0f}, {0.0f, 0.0f}};
  EncodedExample a = one_token_doc(0);
  EncodedExample b;
  b.tokens = {0, 1, 1, 0};
  b.loss_mask = {0, 1, 1, 1};
  const std::vector<EncodedExample> docs{a, b};
  const std::vector<Matrix<float>> l{l1, l3};
  const std::vector<double> bases{2.0, 2.0};
  const auto r = sdm_next_token_loss(docs, l, bases);
  EXPECT_EQ(r.token_count, 4u);
  EXPECT_NEAR(r.aggregate(), 1.0, 1e-12);  // log_2(2) per token
  EXPECT_EQ(r.doc_tokens[1], 3u);
  const std::vector<double> bad{2.0, 1.0};
  EXPECT_THROW(sdm_next_token_loss(docs, l, bad), std::invalid_argument);
}

TEST(Loss, DocumentBase) {
  SdmVerdict v;
  v.p = {0.25, 0.75};
  EXPECT_EQ(document_base(v, 0), 2.25);
  EXPECT_EQ(document_base(v, 1), 2.75);
  EXPECT_THROW(document_base(v, 2), std::invalid_argument);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  ModelConfig mc;
  mc.vocab_size = 9;
  mc.d_model = 8;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_ff = 12;
  mc.max_seq_len = 8;
  mc.seed = 3;
  TransformerLM<double> model(mc);
  EncodedExample doc;
  doc.tokens = {0, 3, 5, 4, 6, 2};
  doc.loss_mask = {0, 0, 1, 1, 0, 1};
  const double base = 2.37;
  auto point = model.flat_parameters();
  Objective f = [&](std::span<const double> x, std::vector<double>* g) {
    model.set_flat_parameters(x);
    model.zero_grad();
    Tape<double> tape;
    auto out = model.forward(tape, doc.tokens);
    auto loss = document_loss(tape, out.logits, doc, base);
    if (g) {
      tape.backward(loss);
      g->clear();
      for (auto* p : model.parameters()) {
        if (!p->has_grad()) p->zero_grad();
        g->insert(g->end(), p->grad.data(), p->grad.data() + p->grad.size());
      }
    }
    return tape.value(loss)(0, 0);
  };
  // Central differences carry about ulp(f) / 2h of rounding noise, so
  // near-zero coordinates are compared absolutely.
  std::vector<double> analytic;
  f(point, &analytic);
  const double h = 1e-5;
  for (std::size_t i = 0; i < point.size(); ++i) {
    auto x = point;
    x[i] = point[i] + h;
    const double fp = f(x, nullptr);
    x[i] = point[i] - h;
    const double fm = f(x, nullptr);
    const double numeric = (fp - fm) / (2 * h);
    EXPECT_LE(std::abs(analytic[i] - numeric), 1e-5 * (std::abs(analytic[i]) + std::abs(numeric)) + 1e-9)
        << "coordinate " << i;
  }
}

TEST(Instances, Branches) {
  const auto& d = tiny_data();
  const auto& t = d.train.front();
  auto prompt = encode_prompt(d.vocab, t.prompt);
  const auto pos_tokens = d.vocab.tokenize(t.positive);
  const Generator perfect = [&](std::span<const TokenId>) { return pos_tokens; };
  const std::vector<TokenId> garbage{Vocab::kSentenceOpenId, Vocab::kNewlineId, Vocab::kNewlineId, Vocab::kYesId};
  const Generator wrong = [&](std::span<const TokenId>) { return garbage; };
  Rng rng(1);

  InstancePolicy always_pos{1.0, 1.0, 1.0, true};
  auto p = sample_instance(t, d.vocab, rng, always_pos, &wrong, 160);
  EXPECT_EQ(p.label, 1);
  EXPECT_EQ(p.source, Source::static_positive);

  InstancePolicy no_gen{0.0, 1.0, 1.0, false};
  auto n = sample_instance(t, d.vocab, rng, no_gen, &wrong, 160);
  EXPECT_EQ(n.label, 0);
  EXPECT_EQ(n.source, Source::static_negative);
  EXPECT_EQ(d.vocab.detokenize(std::span<const TokenId>(n.tokens).subspan(n.prompt_length)), t.negative);

  InstancePolicy gen{0.0, 1.0, 1.0, true};
  auto m = sample_instance(t, d.vocab, rng, gen, &perfect, 160);
  EXPECT_EQ(m.source, Source::static_negative);

  auto g = sample_instance(t, d.vocab, rng, gen, &wrong, 160);
  EXPECT_EQ(g.source, Source::generated);
  EXPECT_EQ(g.label, 0);
  const std::vector<TokenId> want{Vocab::kSentenceOpenId, Vocab::kNewlineId, Vocab::kNewlineId, Vocab::kVerifiedId,
                                  Vocab::kNoId};
  EXPECT_EQ(std::vector<TokenId>(g.tokens.begin() + static_cast<std::ptrdiff_t>(g.prompt_length), g.tokens.end()), want);
  EXPECT_EQ(g.masked_count(), 2u);

  const int tight = static_cast<int>(prompt.size()) + 3;
  auto cut = sample_instance(t, d.vocab, rng, gen, &wrong, tight);
  EXPECT_EQ(cut.tokens.size(), static_cast<std::size_t>(tight));
  EXPECT_EQ(cut.tokens.back(), Vocab::kNoId);

  InstancePolicy no_div{0.0, 1.0, 0.0, true};
  EXPECT_EQ(sample_instance(t, d.vocab, rng, no_div, &wrong, 160).source, Source::static_negative);
}

TEST(Instances, PositiveRate) {
  const auto& d = tiny_data();
  Rng rng(2);
  InstancePolicy half{0.5, 0.5, 0.5, false};
  int pos = 0;
  for (int i = 0; i < 2000; ++i) pos += sample_instance(d.train[i % 40], d.vocab, rng, half, nullptr, 160).label;
  EXPECT_NEAR(pos / 2000.0, 0.5, 0.05);
}

TEST(RunConfig, ParseAndRoundTrip) {
  auto c = RunConfig::parse("# comment\ndata_dir = /x/y\nmode = ce\nnegatives = static\nepochs = 4\nlr_peak=2e-4\n"
                            "seed = 9\nlayer_filters = 10\nd_model = 32\n");
  EXPECT_EQ(c.mode, LossMode::ce);
  EXPECT_EQ(c.negatives, NegativeMode::static_only);
  EXPECT_EQ(c.schedule.epochs, 4);
  EXPECT_EQ(c.schedule.lr_peak, 2e-4);
  EXPECT_EQ(c.schedule.seed, 9u);
  EXPECT_EQ(c.schedule.layer.filters, 10);
  EXPECT_EQ(c.model.d_model, 32);
  EXPECT_EQ(c.data_dir, "/x/y");
  auto again = RunConfig::parse(c.to_text());
  EXPECT_EQ(again.to_text(), c.to_text());
  EXPECT_THROW(RunConfig::parse("bogus = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("epochs = two\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("gamma_pos = 1.5\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("mode = other\n"), ConfigError);
}

TEST(Trainer, LearningRateSchedule) {
  const auto& d = tiny_data();
  auto cfg = tiny_run(LossMode::ce, NegativeMode::static_only);
  cfg.schedule.epochs = 10;
  cfg.schedule.lr_peak = 1.0;
  Trainer t(cfg, d.vocab, d.train, d.calib);
  EXPECT_EQ(t.steps_per_epoch(), 3u);
  EXPECT_EQ(t.total_steps(), 30u);
  EXPECT_DOUBLE_EQ(t.learning_rate(1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(t.learning_rate(3), 1.0);
  EXPECT_DOUBLE_EQ(t.learning_rate(4), 26.0 / 27.0);
  EXPECT_DOUBLE_EQ(t.learning_rate(30), 0.0);
}

TEST(Trainer, ZeroLearningRateLeavesParameters) {
  const auto& d = tiny_data();
  auto cfg = tiny_run(LossMode::ce, NegativeMode::static_only);
  cfg.schedule.lr_peak = 0.0;
  cfg.schedule.epochs = 1;
  Trainer t(cfg, d.vocab, d.train, d.calib);
  const auto before = t.model().flat_parameters();
  t.run_epoch();
  EXPECT_EQ(t.model().flat_parameters(), before);
  EXPECT_EQ(t.log().size(), 3u + 2u);
  for (const auto& r : t.log()) EXPECT_TRUE(std::isfinite(r.loss));
}

TEST(Trainer, SdmRunCadenceFreezeAndDeterminism) {
  const auto& d = tiny_data();
  auto cfg = tiny_run(LossMode::sdm, NegativeMode::online);
  std::vector<std::string> tags;
  TrainHooks hooks;
  hooks.on_layer = [&](const std::string& tag, const SdmLayer&, const LayerFitReport&) { tags.push_back(tag); };
  Trainer a(cfg, d.vocab, d.train, d.calib, std::nullopt, hooks);
  a.run();
  EXPECT_EQ(a.evaluations(), 6);
  EXPECT_EQ(a.step(), 9u);
  const std::vector<std::string> want{"dtr/1", "dca/0", "dca/1", "dtr/2", "dca/2", "dca/3", "dtr/3", "dca/4", "dca/5"};
  EXPECT_EQ(tags, want);

  const auto& f = a.freeze_log();
  EXPECT_EQ(f.layer_fits.size(), 9u);
  for (const auto& fit : f.layer_fits) EXPECT_EQ(fit.network_before, fit.network_after);
  ASSERT_EQ(f.batches.size(), 9u);
  for (std::size_t i = 0; i < f.batches.size(); ++i) {
    for (std::size_t j = 0; j < f.batches.size(); ++j) {
      if (f.batches[i].epoch == f.batches[j].epoch) {
        EXPECT_EQ(f.batches[i].layer_hash, f.batches[j].layer_hash);
      }
    }
  }
  EXPECT_NE(f.batches.front().layer_hash, f.batches.back().layer_hash);

  double best = INFINITY;
  for (const auto& r : a.log()) {
    if (r.eval_loss) best = std::min(best, *r.eval_loss);
  }
  EXPECT_EQ(a.best_eval_loss(), best);
  EXPECT_EQ(a.model().flat_parameters(), a.best_parameters());

  Trainer b(cfg, d.vocab, d.train, d.calib);
  b.run();
  ASSERT_EQ(a.log().size(), b.log().size());
  for (std::size_t i = 0; i < a.log().size(); ++i) {
    EXPECT_EQ(a.log()[i].loss, b.log()[i].loss);
    EXPECT_EQ(a.log()[i].eval_loss, b.log()[i].eval_loss);
  }
  EXPECT_EQ(a.best_parameters(), b.best_parameters());
}

TEST(Trainer, CeModeTrainsNoLayer) {
  const auto& d = tiny_data();
  auto cfg = tiny_run(LossMode::ce, NegativeMode::static_only);
  cfg.schedule.epochs = 2;
  int fits = 0;
  TrainHooks hooks;
  hooks.on_layer = [&](const std::string&, const SdmLayer&, const LayerFitReport&) { ++fits; };
  Trainer t(cfg, d.vocab, d.train, d.calib, std::nullopt, hooks);
  t.run();
  EXPECT_EQ(fits, 0);
  EXPECT_TRUE(t.freeze_log().batches.empty());
  EXPECT_EQ(t.evaluations(), 4);
}

TEST(FinalLayer, CoversCalibrationSplitDeterministically) {
  const auto& d = tiny_data();
  auto cfg = tiny_run(LossMode::sdm, NegativeMode::online);
  cfg.model.vocab_size = static_cast<int>(d.vocab.size());
  TransformerLM<float> model(cfg.model);
  LayerFitReport report;
  auto layer = finalize_test_time_layer(model, d.vocab, d.calib, cfg.schedule, &report);
  EXPECT_EQ(layer.support.size() + report.calib_verdicts.size(), d.calib.size());
  auto again = finalize_test_time_layer(model, d.vocab, d.calib, cfg.schedule);
  EXPECT_EQ(again.params.w_filter, layer.params.w_filter);
  EXPECT_EQ(again.artifacts.thresholds, layer.artifacts.thresholds);
}
