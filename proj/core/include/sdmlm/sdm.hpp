#pragma once

// The SDM activation layer: a filter-bank classifier over frozen pooled
// features, nearest-neighbor similarity and distance, calibrated output
// probabilities, and class-wise admission thresholds.

#include "sdmlm/numerics.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sdmlm {

struct EstimatorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Pooled features with labels and document ids, one row per document.
struct LayerDataset {
  Matrix<float> features;
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

struct SdmLayerParams {
  RowVector<float> center;  // mean of the layer-train features
  Matrix<float> w_filter;   // input_dim x filters
  RowVector<float> b_filter;
  Matrix<float> w_out;  // filters x 2
  RowVector<float> b_out;

  Eigen::Index input_dim() const { return w_filter.rows(); }
  Eigen::Index filters() const { return w_filter.cols(); }

  /// tanh(center-subtracted x * W + b), one row per input row.
  Matrix<float> filter_outputs(const Matrix<float>& x) const;
  /// z' for each row of filter outputs.
  Matrix<float> logits(const Matrix<float>& h) const;
};

struct SupportIndex {
  Matrix<float> features;  // filter outputs, one row per document
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }
};

struct KnnResult {
  std::size_t q = 0;  // matching-label prefix length of the distance-sorted support
  double d = 0.0;     // distance to the nearest retained support point
};

/// Exact search. Support points are ordered by (distance, index); points
/// whose id equals `exclude_id` are skipped. Throws EstimatorError when no
/// support point remains.
KnnResult knn_q_d(std::span<const float> feature, const SupportIndex& support, int predicted,
                  std::optional<std::string_view> exclude_id = std::nullopt);

/// Empirical CDF over calibration nearest-neighbor distances. Evaluates the
/// fraction of knots strictly below d, so ecdf(0) = 0.
struct DistanceEcdf {
  std::vector<double> knots;  // sorted ascending

  static DistanceEcdf from_samples(std::vector<double> distances);
  double operator()(double d) const;
};

/// q * (1 - ecdf(d)).
double rescale_similarity(std::size_t q, double d, const DistanceEcdf& ecdf);

struct SdmVerdict {
  std::array<double, 2> z{};  // z'
  int y_hat = 0;
  std::size_t q = 0;
  double d = 0.0;
  double q_tilde = 0.0;
  std::array<double, 2> p{};
  bool admitted = false;
};

/// Verdict from z' and (q, d): p = softmax of z' in base 2 + q_tilde / q_max.
SdmVerdict make_verdict(std::array<double, 2> z, const KnnResult& knn, const DistanceEcdf& ecdf,
                        std::size_t q_max);

struct Thresholds {
  double psi0 = 0.0;
  double psi1 = 0.0;
  double q_tilde_min = std::numeric_limits<double>::infinity();
  std::size_t admitted = 0;  // on the fitting set

  bool operator==(const Thresholds&) const = default;
};

/// Smallest admitted-set size worth certifying at accuracy alpha:
/// ceil(1 / (1 - alpha)), i.e. the least count at which a single error
/// still leaves the accuracy at alpha or above.
std::size_t default_min_admitted(double alpha);

/// Sweeps q_tilde_min over the distinct q_tilde values (descending) and psi_k
/// over the distinct p[y_hat] values of class-k predictions plus alpha. A
/// triple is admissible when it admits at least max(1, min_admitted) points
/// and every nonempty class-conditional and prediction-conditional cell has
/// accuracy >= alpha. Returns the admissible triple with the most admitted
/// points, preferring larger q_tilde_min, then smaller psi0, then smaller
/// psi1. With none admissible, q_tilde_min is infinite and psi_k = alpha.
Thresholds fit_thresholds(std::span<const SdmVerdict> verdicts, std::span<const int> labels, double alpha,
                          std::size_t min_admitted);

struct CalibrationArtifacts {
  DistanceEcdf ecdf;
  Thresholds thresholds;
  double alpha = 0.95;
  std::size_t min_admitted = 20;
};

/// q_tilde >= q_tilde_min and p[y_hat] >= psi_{y_hat}.
bool is_admitted(const SdmVerdict& v, const Thresholds& t);

struct LayerTrainOptions {
  int filters = 1000;
  double learning_rate = 1e-5;
  int batch_size = 50;
  int epochs = 200;
  double alpha = 0.95;
  std::size_t min_admitted = 0;  // 0 selects default_min_admitted(alpha)
};

/// Layer-calib results kept for inspection (the guarantee check reads these).
struct LayerFitReport {
  std::vector<SdmVerdict> calib_verdicts;
  std::vector<int> calib_labels;
  int best_epoch = -1;
  double best_balanced_loss = 0.0;
};

struct SdmLayer {
  SdmLayerParams params;
  SupportIndex support;
  CalibrationArtifacts artifacts;

  /// Verdict for one pooled feature, with admission set from the artifacts.
  SdmVerdict predict(std::span<const float> pooled, std::optional<std::string_view> exclude_id = std::nullopt) const;
  /// Row-wise predict; an empty id means no exclusion for that row.
  std::vector<SdmVerdict> predict_batch(const Matrix<float>& pooled, std::span<const std::string> exclude_ids = {}) const;
};

/// Splits `data` 50/50 at random into layer-train and layer-calib, trains the
/// filter bank and output map with Adam on layer-train, keeps the epoch with
/// the lowest class-balanced cross-entropy on layer-calib, builds the support
/// over layer-train and fits the artifacts on layer-calib. Throws
/// EstimatorError when the input holds a single class.
SdmLayer train_layer(const LayerDataset& data, std::uint64_t seed, const LayerTrainOptions& options = {},
                     LayerFitReport* report = nullptr);

void save_layer(const std::filesystem::path& path, const SdmLayer& layer);
SdmLayer load_layer(const std::filesystem::path& path);

}  // namespace sdmlm
