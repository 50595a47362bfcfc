#include "sdmlm/sdm.hpp"

#include "sdmlm/binary_io.hpp"
#include "sdmlm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sdmlm {

namespace {

constexpr std::string_view kMagic = "SDMLART1";
constexpr std::uint32_t kVersion = 1;

struct Adam {
  Matrix<float> m, v;
  explicit Adam(const Matrix<float>& like)
      : m(Matrix<float>::Zero(like.rows(), like.cols())), v(Matrix<float>::Zero(like.rows(), like.cols())) {}

  void step(Matrix<float>& param, const Matrix<float>& g, double lr, int t) {
    constexpr float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
    const float c1 = 1.0f - std::pow(b1, static_cast<float>(t));
    const float c2 = 1.0f - std::pow(b2, static_cast<float>(t));
    const float step = static_cast<float>(lr) / c1;
    param.array() -= step * m.array() / ((v.array() / c2).sqrt() + eps);
  }
};

Matrix<float> gather_rows(const Matrix<float>& x, std::span<const std::size_t> rows) {
  Matrix<float> out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

// Natural-base cross-entropy per row of 2-column logits.
double row_ce(const Matrix<float>& z, Eigen::Index r, int y) {
  const double a = z(r, 0), b = z(r, 1);
  const double m = std::max(a, b);
  const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
  return lse - (y == 0 ? a : b);
}

double balanced_ce(const Matrix<float>& z, std::span<const int> labels) {
  double sum[2] = {0.0, 0.0};
  std::size_t n[2] = {0, 0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    sum[labels[i]] += row_ce(z, static_cast<Eigen::Index>(i), labels[i]);
    ++n[labels[i]];
  }
  double total = 0.0;
  int classes = 0;
  for (int k = 0; k < 2; ++k) {
    if (n[k]) {
      total += sum[k] / static_cast<double>(n[k]);
      ++classes;
    }
  }
  return total / classes;
}

}  // namespace

void LayerDataset::validate() const {
  if (static_cast<std::size_t>(features.rows()) != labels.size() || ids.size() != labels.size()) {
    throw EstimatorError("layer dataset: features, labels and ids differ in length");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw EstimatorError("layer dataset: labels must be 0 or 1");
  }
}

Matrix<float> SdmLayerParams::filter_outputs(const Matrix<float>& x) const {
  if (x.cols() != input_dim()) throw EstimatorError("feature width does not match the layer");
  Matrix<float> a = (x.rowwise() - center) * w_filter;
  a.rowwise() += b_filter;
  return a.array().tanh().matrix();
}

Matrix<float> SdmLayerParams::logits(const Matrix<float>& h) const {
  Matrix<float> z = h * w_out;
  z.rowwise() += b_out;
  return z;
}

// ---------------------------------------------------------------------------

KnnResult knn_q_d(std::span<const float> feature, const SupportIndex& support, int predicted,
                  std::optional<std::string_view> exclude_id) {
  if (static_cast<Eigen::Index>(feature.size()) != support.features.cols()) {
    throw EstimatorError("query width does not match the support");
  }
  const Eigen::Map<const RowVector<float>> x(feature.data(), static_cast<Eigen::Index>(feature.size()));
  const std::size_t n = support.size();
  std::vector<double> dist(n, -1.0);
  bool any = false;
  std::size_t nearest = 0, mismatch = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (exclude_id && support.ids[i] == *exclude_id) continue;
    const double d2 = static_cast<double>((support.features.row(static_cast<Eigen::Index>(i)) - x).squaredNorm());
    dist[i] = d2;
    if (!any || d2 < dist[nearest]) nearest = i;
    any = true;
    if (support.labels[i] != predicted && (mismatch == n || d2 < dist[mismatch])) mismatch = i;
  }
  if (!any) throw EstimatorError("support is empty after exclusion");
  KnnResult r;
  r.d = std::sqrt(dist[nearest]);
  for (std::size_t i = 0; i < n; ++i) {
    if (dist[i] < 0.0 || support.labels[i] != predicted) continue;
    // Ties in distance are ordered by index.
    if (mismatch == n || dist[i] < dist[mismatch] || (dist[i] == dist[mismatch] && i < mismatch)) ++r.q;
  }
  return r;
}

DistanceEcdf DistanceEcdf::from_samples(std::vector<double> distances) {
  if (distances.empty()) throw EstimatorError("distance ECDF needs at least one sample");
  std::sort(distances.begin(), distances.end());
  return DistanceEcdf{std::move(distances)};
}

double DistanceEcdf::operator()(double d) const {
  if (knots.empty()) throw EstimatorError("empty distance ECDF");
  const auto below = std::lower_bound(knots.begin(), knots.end(), d) - knots.begin();
  return static_cast<double>(below) / static_cast<double>(knots.size());
}

double rescale_similarity(std::size_t q, double d, const DistanceEcdf& ecdf) {
  return static_cast<double>(q) * (1.0 - ecdf(d));
}

SdmVerdict make_verdict(std::array<double, 2> z, const KnnResult& knn, const DistanceEcdf& ecdf, std::size_t q_max) {
  if (q_max == 0) throw EstimatorError("q_max must be positive");
  SdmVerdict v;
  v.z = z;
  v.y_hat = z[1] > z[0] ? 1 : 0;
  v.q = knn.q;
  v.d = knn.d;
  v.q_tilde = rescale_similarity(knn.q, knn.d, ecdf);
  const double base = 2.0 + v.q_tilde / static_cast<double>(q_max);
  const auto p = base_softmax<double>(std::span<const double>(z), base);
  v.p = {p[0], p[1]};
  return v;
}

// ---------------------------------------------------------------------------

std::size_t default_min_admitted(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0, 1)");
  return static_cast<std::size_t>(std::ceil(1.0 / (1.0 - alpha) - 1e-9));
}

Thresholds fit_thresholds(std::span<const SdmVerdict> verdicts, std::span<const int> labels, double alpha,
                          std::size_t min_admitted) {
  if (verdicts.size() != labels.size()) throw std::invalid_argument("verdicts and labels differ in length");
  Thresholds none{alpha, alpha, std::numeric_limits<double>::infinity(), 0};
  const std::size_t n = verdicts.size();
  if (n == 0) return none;

  // Candidate psi values per predicted class, ascending.
  std::array<std::vector<double>, 2> cand;
  for (int k = 0; k < 2; ++k) cand[k].push_back(alpha);
  for (const auto& v : verdicts) cand[v.y_hat].push_back(v.p[v.y_hat]);
  for (auto& c : cand) {
    std::sort(c.begin(), c.end());
    c.erase(std::unique(c.begin(), c.end()), c.end());
  }
  std::vector<std::size_t> bucket(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = cand[verdicts[i].y_hat];
    bucket[i] = static_cast<std::size_t>(std::lower_bound(c.begin(), c.end(), verdicts[i].p[verdicts[i].y_hat]) - c.begin());
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return verdicts[a].q_tilde > verdicts[b].q_tilde; });

  // hits[k][j]: admitted class-k predictions at psi_k = cand[k][j], split by correctness.
  std::array<std::vector<std::size_t>, 2> correct_at, wrong_at, correct_ge, wrong_ge;
  for (int k = 0; k < 2; ++k) {
    correct_at[k].assign(cand[k].size(), 0);
    wrong_at[k].assign(cand[k].size(), 0);
    correct_ge[k].assign(cand[k].size() + 1, 0);
    wrong_ge[k].assign(cand[k].size() + 1, 0);
  }
  auto ok = [alpha](std::size_t c, std::size_t total) {
    return total == 0 || static_cast<double>(c) / static_cast<double>(total) >= alpha;
  };

  Thresholds best = none;
  const std::size_t need = std::max<std::size_t>(1, min_admitted);
  std::size_t best_count = need - 1;
  std::size_t pos = 0;
  while (pos < n) {
    const double q_min = verdicts[order[pos]].q_tilde;
    while (pos < n && verdicts[order[pos]].q_tilde == q_min) {
      const std::size_t i = order[pos++];
      const int k = verdicts[i].y_hat;
      (labels[i] == k ? correct_at : wrong_at)[k][bucket[i]]++;
    }
    for (int k = 0; k < 2; ++k) {
      for (std::size_t j = cand[k].size(); j-- > 0;) {
        correct_ge[k][j] = correct_ge[k][j + 1] + correct_at[k][j];
        wrong_ge[k][j] = wrong_ge[k][j + 1] + wrong_at[k][j];
      }
    }
    const std::size_t max1 = correct_ge[1][0] + wrong_ge[1][0];
    for (std::size_t j0 = 0; j0 < cand[0].size(); ++j0) {
      const std::size_t c00 = correct_ge[0][j0], c01 = wrong_ge[0][j0];  // predicted 0: true 0 / true 1
      if (c00 + c01 + max1 <= best_count) break;
      if (!ok(c00, c00 + c01)) continue;
      for (std::size_t j1 = 0; j1 < cand[1].size(); ++j1) {
        const std::size_t c11 = correct_ge[1][j1], c10 = wrong_ge[1][j1];  // predicted 1: true 1 / true 0
        const std::size_t total = c00 + c01 + c11 + c10;
        if (total <= best_count) break;
        if (ok(c11, c11 + c10) && ok(c00, c00 + c10) && ok(c11, c11 + c01)) {
          best = Thresholds{cand[0][j0], cand[1][j1], q_min, total};
          best_count = total;
          break;  // larger j1 only admits fewer
        }
      }
    }
  }
  return best;
}

bool is_admitted(const SdmVerdict& v, const Thresholds& t) {
  const double psi = v.y_hat == 0 ? t.psi0 : t.psi1;
  return v.q_tilde >= t.q_tilde_min && v.p[static_cast<std::size_t>(v.y_hat)] >= psi;
}

// ---------------------------------------------------------------------------

SdmVerdict SdmLayer::predict(std::span<const float> pooled, std::optional<std::string_view> exclude_id) const {
  const Eigen::Map<const Matrix<float>> x(pooled.data(), 1, static_cast<Eigen::Index>(pooled.size()));
  const Matrix<float> h = params.filter_outputs(x);
  const Matrix<float> z = params.logits(h);
  const auto knn = knn_q_d(std::span<const float>(h.data(), static_cast<std::size_t>(h.cols())), support,
                           z(0, 1) > z(0, 0) ? 1 : 0, exclude_id);
  auto v = make_verdict({z(0, 0), z(0, 1)}, knn, artifacts.ecdf, support.size());
  v.admitted = is_admitted(v, artifacts.thresholds);
  return v;
}

std::vector<SdmVerdict> SdmLayer::predict_batch(const Matrix<float>& pooled, std::span<const std::string> exclude_ids) const {
  if (!exclude_ids.empty() && exclude_ids.size() != static_cast<std::size_t>(pooled.rows())) {
    throw std::invalid_argument("exclude_ids must be empty or match the row count");
  }
  // Row by row so that every verdict is bit-identical to predict().
  std::vector<SdmVerdict> out;
  out.reserve(static_cast<std::size_t>(pooled.rows()));
  for (Eigen::Index r = 0; r < pooled.rows(); ++r) {
    std::optional<std::string_view> ex;
    if (!exclude_ids.empty() && !exclude_ids[static_cast<std::size_t>(r)].empty()) ex = exclude_ids[static_cast<std::size_t>(r)];
    out.push_back(predict(std::span<const float>(pooled.row(r).data(), static_cast<std::size_t>(pooled.cols())), ex));
  }
  return out;
}

SdmLayer train_layer(const LayerDataset& data, std::uint64_t seed, const LayerTrainOptions& options,
                     LayerFitReport* report) {
  data.validate();
  const std::size_t n = data.size();
  const auto ones = static_cast<std::size_t>(std::count(data.labels.begin(), data.labels.end(), 1));
  if (ones == 0 || ones == n) throw EstimatorError("layer training needs both classes");
  if (options.filters <= 0 || options.batch_size <= 0 || options.epochs <= 0) {
    throw std::invalid_argument("layer options must be positive");
  }

  Rng rng = derive_stream(seed, "sdm-layer");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t n_tr = n / 2;
  std::vector<std::size_t> tr(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_tr));
  std::vector<std::size_t> ca(perm.begin() + static_cast<std::ptrdiff_t>(n_tr), perm.end());
  std::sort(tr.begin(), tr.end());
  std::sort(ca.begin(), ca.end());

  const Matrix<float> x_tr = gather_rows(data.features, tr);
  const Matrix<float> x_ca = gather_rows(data.features, ca);
  std::vector<int> y_tr, y_ca;
  for (auto i : tr) y_tr.push_back(data.labels[i]);
  for (auto i : ca) y_ca.push_back(data.labels[i]);

  const Eigen::Index in = data.features.cols();
  const Eigen::Index f = options.filters;
  SdmLayerParams p;
  p.center = x_tr.colwise().mean();
  p.w_filter.resize(in, f);
  p.w_out.resize(f, 2);
  {
    std::normal_distribution<float> n1(0.0f, 1.0f / std::sqrt(static_cast<float>(in)));
    for (Eigen::Index i = 0; i < p.w_filter.size(); ++i) p.w_filter.data()[i] = n1(rng);
    std::normal_distribution<float> n2(0.0f, 1.0f / std::sqrt(static_cast<float>(f)));
    for (Eigen::Index i = 0; i < p.w_out.size(); ++i) p.w_out.data()[i] = n2(rng);
  }
  p.b_filter = RowVector<float>::Zero(f);
  p.b_out = RowVector<float>::Zero(2);

  Matrix<float> b_filter = p.b_filter, b_out = p.b_out;
  Adam a_wf(p.w_filter), a_bf(b_filter), a_wo(p.w_out), a_bo(b_out);
  const Matrix<float> xc_tr = x_tr.rowwise() - p.center;

  SdmLayerParams best = p;
  double best_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int t = 0;
  std::vector<std::size_t> order(n_tr);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n_tr; start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(n_tr, start + static_cast<std::size_t>(options.batch_size));
      const auto rows = std::span<const std::size_t>(order).subspan(start, end - start);
      const Matrix<float> xb = gather_rows(xc_tr, rows);
      Matrix<float> a = xb * p.w_filter;
      a.rowwise() += b_filter.row(0);
      const Matrix<float> h = a.array().tanh().matrix();
      Matrix<float> z = h * p.w_out;
      z.rowwise() += b_out.row(0);
      Matrix<float> dz(z.rows(), 2);
      const float inv = 1.0f / static_cast<float>(rows.size());
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const float m = std::max(z(r, 0), z(r, 1));
        const float e0 = std::exp(z(r, 0) - m), e1 = std::exp(z(r, 1) - m);
        const float s = e0 + e1;
        const int y = y_tr[rows[static_cast<std::size_t>(r)]];
        dz(r, 0) = (e0 / s - (y == 0 ? 1.0f : 0.0f)) * inv;
        dz(r, 1) = (e1 / s - (y == 1 ? 1.0f : 0.0f)) * inv;
      }
      const Matrix<float> g_wo = h.transpose() * dz;
      const Matrix<float> g_bo = dz.colwise().sum();
      const Matrix<float> da = ((dz * p.w_out.transpose()).array() * (1.0f - h.array().square())).matrix();
      const Matrix<float> g_wf = xb.transpose() * da;
      const Matrix<float> g_bf = da.colwise().sum();
      ++t;
      a_wf.step(p.w_filter, g_wf, options.learning_rate, t);
      a_bf.step(b_filter, g_bf, options.learning_rate, t);
      a_wo.step(p.w_out, g_wo, options.learning_rate, t);
      a_bo.step(b_out, g_bo, options.learning_rate, t);
    }
    p.b_filter = b_filter.row(0);
    p.b_out = b_out.row(0);
    const double loss = balanced_ce(p.logits(p.filter_outputs(x_ca)), y_ca);
    if (loss < best_loss) {
      best_loss = loss;
      best = p;
      best_epoch = epoch;
    }
  }

  SdmLayer layer;
  layer.params = std::move(best);
  layer.support.features = layer.params.filter_outputs(x_tr);
  layer.support.labels = y_tr;
  for (auto i : tr) layer.support.ids.push_back(data.ids[i]);

  const Matrix<float> h_ca = layer.params.filter_outputs(x_ca);
  const Matrix<float> z_ca = layer.params.logits(h_ca);
  std::vector<KnnResult> knn;
  std::vector<double> dists;
  for (Eigen::Index r = 0; r < h_ca.rows(); ++r) {
    knn.push_back(knn_q_d(std::span<const float>(h_ca.row(r).data(), static_cast<std::size_t>(h_ca.cols())),
                          layer.support, z_ca(r, 1) > z_ca(r, 0) ? 1 : 0));
    dists.push_back(knn.back().d);
  }
  auto& art = layer.artifacts;
  art.ecdf = DistanceEcdf::from_samples(std::move(dists));
  art.alpha = options.alpha;
  art.min_admitted = options.min_admitted ? options.min_admitted : default_min_admitted(options.alpha);
  std::vector<SdmVerdict> verdicts;
  for (Eigen::Index r = 0; r < h_ca.rows(); ++r) {
    verdicts.push_back(make_verdict({z_ca(r, 0), z_ca(r, 1)}, knn[static_cast<std::size_t>(r)], art.ecdf,
                                    layer.support.size()));
  }
  art.thresholds = fit_thresholds(verdicts, y_ca, art.alpha, art.min_admitted);
  for (auto& v : verdicts) v.admitted = is_admitted(v, art.thresholds);

  if (report) {
    report->calib_verdicts = std::move(verdicts);
    report->calib_labels = std::move(y_ca);
    report->best_epoch = best_epoch;
    report->best_balanced_loss = best_loss;
  }
  return layer;
}

// ---------------------------------------------------------------------------

namespace {

void write_matrix(io::BinaryWriter& w, const Matrix<float>& m) {
  w.pod<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
  w.pod<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
  w.array(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
}

Matrix<float> read_matrix(io::BinaryReader& r) {
  const auto rows = r.pod<std::uint64_t>();
  const auto cols = r.pod<std::uint64_t>();
  const auto v = r.array<float>();
  if (rows * cols != v.size()) throw io::FormatError("matrix shape does not match its data");
  Matrix<float> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

}  // namespace

void save_layer(const std::filesystem::path& path, const SdmLayer& layer) {
  io::BinaryWriter w(path);
  w.magic(kMagic);
  w.pod(kVersion);
  const auto& p = layer.params;
  write_matrix(w, p.center);
  write_matrix(w, p.w_filter);
  write_matrix(w, p.b_filter);
  write_matrix(w, p.w_out);
  write_matrix(w, p.b_out);
  write_matrix(w, layer.support.features);
  std::vector<std::int32_t> labels(layer.support.labels.begin(), layer.support.labels.end());
  w.array(std::span<const std::int32_t>(labels));
  w.pod<std::uint64_t>(layer.support.ids.size());
  for (const auto& id : layer.support.ids) w.string(id);
  const auto& a = layer.artifacts;
  w.array(std::span<const double>(a.ecdf.knots));
  w.pod(a.thresholds.psi0);
  w.pod(a.thresholds.psi1);
  w.pod(a.thresholds.q_tilde_min);
  w.pod<std::uint64_t>(a.thresholds.admitted);
  w.pod(a.alpha);
  w.pod<std::uint64_t>(a.min_admitted);
  w.finish();
}

SdmLayer load_layer(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kMagic);
  if (r.pod<std::uint32_t>() != kVersion) throw io::FormatError("unsupported artifacts version");
  SdmLayer layer;
  auto& p = layer.params;
  p.center = read_matrix(r);
  p.w_filter = read_matrix(r);
  p.b_filter = read_matrix(r);
  p.w_out = read_matrix(r);
  p.b_out = read_matrix(r);
  layer.support.features = read_matrix(r);
  const auto labels = r.array<std::int32_t>();
  layer.support.labels.assign(labels.begin(), labels.end());
  const auto n_ids = r.pod<std::uint64_t>();
  if (n_ids != labels.size()) throw io::FormatError("support ids do not match labels");
  for (std::uint64_t i = 0; i < n_ids; ++i) layer.support.ids.push_back(r.string());
  auto& a = layer.artifacts;
  a.ecdf.knots = r.array<double>();
  a.thresholds.psi0 = r.pod<double>();
  a.thresholds.psi1 = r.pod<double>();
  a.thresholds.q_tilde_min = r.pod<double>();
  a.thresholds.admitted = r.pod<std::uint64_t>();
  a.alpha = r.pod<double>();
  a.min_admitted = r.pod<std::uint64_t>();
  r.expect_end();
  if (p.center.rows() != 1 || p.center.cols() != p.w_filter.rows() || p.b_filter.cols() != p.w_filter.cols() ||
      p.w_out.rows() != p.w_filter.cols() || p.w_out.cols() != 2 || p.b_out.cols() != 2 ||
      layer.support.features.cols() != p.w_filter.cols() ||
      static_cast<std::size_t>(layer.support.features.rows()) != layer.support.labels.size()) {
    throw io::FormatError("inconsistent layer shapes");
  }
  return layer;
}

}  // namespace sdmlm
