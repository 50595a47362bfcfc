#pragma once

// Dense tensors, a tape-based reverse-mode autodiff, and the base-B softmax
// primitives used by the change-of-base next-token loss.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace sdmlm {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// A dense 2-D array with optional gradient storage. Vectors are 1 x n.
template <typename T>
struct Tensor {
  Matrix<T> value;
  Matrix<T> grad;  // empty until the first accumulation

  Tensor() = default;
  Tensor(Eigen::Index rows, Eigen::Index cols) : value(Matrix<T>::Zero(rows, cols)) {}
  explicit Tensor(Matrix<T> v) : value(std::move(v)) {}

  Eigen::Index rows() const { return value.rows(); }
  Eigen::Index cols() const { return value.cols(); }
  Eigen::Index size() const { return value.size(); }
  bool has_grad() const { return grad.rows() == value.rows() && grad.cols() == value.cols(); }
  void zero_grad() { grad = Matrix<T>::Zero(value.rows(), value.cols()); }
};

// ---------------------------------------------------------------------------
// Base-B softmax primitives

/// B^{z_i} / sum_v B^{z_v}, evaluated as exp((z - max z) ln B) then normalized.
/// Throws std::invalid_argument for non-finite z or B <= 1.
template <typename T>
std::vector<T> base_softmax(std::span<const T> z, T base);

/// ln(x) / ln(B). Throws std::invalid_argument for x <= 0 or B <= 1.
template <typename T>
T log_base(T x, T base);

/// -log_B(softmax_B(z)[target]) = LSE(z ln B) / ln B - z_target.
template <typename T>
T base_cross_entropy(std::span<const T> z, std::size_t target, T base);

// ---------------------------------------------------------------------------
// Reverse-mode autodiff

template <typename T>
class Tape {
 public:
  struct Var {
    std::uint32_t id = 0;
  };
  /// Called during backward with the gradient of the node's output.
  using BackwardFn = std::function<void(Tape&, const Matrix<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix<T> value);
  /// A leaf whose value is read in place and whose gradient is accumulated
  /// into `param.grad` by backward().
  Var parameter(Tensor<T>& param);
  Var record(Matrix<T> value, bool requires_grad, BackwardFn fn);

  const Matrix<T>& value(Var v) const;
  /// Gradient buffer of a node, zero-initialized on first access.
  Matrix<T>& grad(Var v);
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Visits every node once in reverse recording order. `loss` must be 1 x 1.
  void backward(Var loss, T seed = T(1));

 private:
  struct Node {
    Matrix<T> value;
    Tensor<T>* param = nullptr;
    Matrix<T> grad;
    bool requires_grad = false;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
};

namespace ops {

template <typename T> using Var = typename Tape<T>::Var;

template <typename T> Var<T> matmul(Tape<T>& t, Var<T> a, Var<T> b);
template <typename T> Var<T> add(Tape<T>& t, Var<T> a, Var<T> b);
/// x + 1 x n bias broadcast over rows.
template <typename T> Var<T> add_bias(Tape<T>& t, Var<T> x, Var<T> bias);
template <typename T> Var<T> scale(Tape<T>& t, Var<T> x, T factor);
template <typename T> Var<T> sum(Tape<T>& t, Var<T> x);
template <typename T> Var<T> gelu(Tape<T>& t, Var<T> x);
template <typename T> Var<T> tanh(Tape<T>& t, Var<T> x);
/// Row-wise layer normalization with 1 x n gain and bias.
template <typename T>
Var<T> layer_norm(Tape<T>& t, Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));
/// Gathers rows of `table` by id.
template <typename T>
Var<T> embedding(Tape<T>& t, Var<T> table, std::span<const std::int32_t> ids);
/// Multi-head causal self-attention over a packed [T x 3d] QKV matrix.
/// Keys with key_valid[j] == false are masked; an empty mask means all valid.
template <typename T>
Var<T> causal_attention(Tape<T>& t, Var<T> qkv, int n_heads, std::span<const bool> key_valid = {});
/// sum_r weight[r] * -log_B softmax_B(logits[r])[target[r]]; rows with zero
/// weight are skipped entirely (zero gradient).
template <typename T>
Var<T> masked_base_cross_entropy(Tape<T>& t, Var<T> logits, std::span<const std::int32_t> targets,
                                 std::span<const T> weights, T base);
/// sum_r weight[r] * -ln softmax(logits[r])[label[r]].
template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& t, Var<T> logits, std::span<const int> labels,
                             std::span<const T> weights);

}  // namespace ops

// ---------------------------------------------------------------------------
// Finite-difference validation

/// Objective evaluated at x; fills `grad` with the analytic gradient when non-null.
using Objective = std::function<double(std::span<const double> x, std::vector<double>* grad)>;

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Max over coordinates of |analytic - central| / max(1e-8, |analytic| + |central|).
GradientCheckResult check_gradients(const Objective& f, std::span<const double> point, double step);

}  // namespace sdmlm
