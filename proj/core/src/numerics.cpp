#include "sdmlm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace sdmlm {

namespace {

template <typename T>
void require_base(T base) {
  if (!std::isfinite(base) || !(base > T(1))) {
    throw std::invalid_argument("base must be finite and > 1");
  }
}

template <typename T>
void require_finite(std::span<const T> z) {
  for (T v : z) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite logit");
  }
}

// Natural log-sum-exp of (z * ln B), stable.
template <typename T>
T scaled_logsumexp(const T* z, Eigen::Index n, T log_b) {
  T mx = *std::max_element(z, z + n);
  T acc = 0;
  for (Eigen::Index i = 0; i < n; ++i) acc += std::exp((z[i] - mx) * log_b);
  return mx * log_b + std::log(acc);
}

}  // namespace

template <typename T>
std::vector<T> base_softmax(std::span<const T> z, T base) {
  require_base(base);
  if (z.empty()) throw std::invalid_argument("base_softmax of empty vector");
  require_finite(z);
  const T log_b = std::log(base);
  const T mx = *std::max_element(z.begin(), z.end());
  std::vector<T> out(z.size());
  T total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp((z[i] - mx) * log_b);
    total += out[i];
  }
  for (T& v : out) v /= total;
  return out;
}

template <typename T>
T log_base(T x, T base) {
  require_base(base);
  if (!(x > T(0))) throw std::invalid_argument("log_base requires x > 0");
  return std::log(x) / std::log(base);
}

template <typename T>
T base_cross_entropy(std::span<const T> z, std::size_t target, T base) {
  require_base(base);
  if (target >= z.size()) throw std::invalid_argument("target out of range");
  require_finite(z);
  const T log_b = std::log(base);
  return scaled_logsumexp(z.data(), static_cast<Eigen::Index>(z.size()), log_b) / log_b - z[target];
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
typename Tape<T>::Var Tape<T>::constant(Matrix<T> value) {
  return record(std::move(value), false, nullptr);
}

template <typename T>
typename Tape<T>::Var Tape<T>::parameter(Tensor<T>& param) {
  Node n;
  n.param = &param;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
typename Tape<T>::Var Tape<T>::record(Matrix<T> value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.fn = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
const Matrix<T>& Tape<T>::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.param ? n.param->value : n.value;
}

template <typename T>
Matrix<T>& Tape<T>::grad(Var v) {
  Node& n = nodes_.at(v.id);
  const Matrix<T>& val = n.param ? n.param->value : n.value;
  if (n.grad.rows() != val.rows() || n.grad.cols() != val.cols()) {
    n.grad = Matrix<T>::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var loss, T seed) {
  if (loss.id >= nodes_.size()) throw std::invalid_argument("loss is not a node of this tape");
  const Matrix<T>& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) throw std::invalid_argument("backward requires a scalar loss");
  grad(loss)(0, 0) += seed;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.fn) n.fn(*this, n.grad);
    if (n.param) {
      if (!n.param->has_grad()) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace ops {

template <typename T>
Var<T> matmul(Tape<T>& t, Var<T> a, Var<T> b) {
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  Matrix<T> out;
  out.noalias() = t.value(a) * t.value(b);
  return t.record(std::move(out), rg, [a, b](Tape<T>& tp, const Matrix<T>& g) {
    if (tp.requires_grad(a)) tp.grad(a).noalias() += g * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad(b).noalias() += tp.value(a).transpose() * g;
  });
}

template <typename T>
Var<T> add(Tape<T>& t, Var<T> a, Var<T> b) {
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  Matrix<T> out = t.value(a) + t.value(b);
  return t.record(std::move(out), rg, [a, b](Tape<T>& tp, const Matrix<T>& g) {
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) += g;
  });
}

template <typename T>
Var<T> add_bias(Tape<T>& t, Var<T> x, Var<T> bias) {
  const bool rg = t.requires_grad(x) || t.requires_grad(bias);
  if (t.value(bias).rows() != 1 || t.value(bias).cols() != t.value(x).cols()) {
    throw std::invalid_argument("add_bias: shape mismatch");
  }
  Matrix<T> out = t.value(x);
  out.rowwise() += t.value(bias).row(0);
  return t.record(std::move(out), rg, [x, bias](Tape<T>& tp, const Matrix<T>& g) {
    if (tp.requires_grad(x)) tp.grad(x) += g;
    if (tp.requires_grad(bias)) tp.grad(bias) += g.colwise().sum();
  });
}

template <typename T>
Var<T> scale(Tape<T>& t, Var<T> x, T factor) {
  Matrix<T> out = t.value(x) * factor;
  return t.record(std::move(out), t.requires_grad(x), [x, factor](Tape<T>& tp, const Matrix<T>& g) {
    tp.grad(x) += g * factor;
  });
}

template <typename T>
Var<T> sum(Tape<T>& t, Var<T> x) {
  Matrix<T> out(1, 1);
  out(0, 0) = t.value(x).sum();
  return t.record(std::move(out), t.requires_grad(x), [x](Tape<T>& tp, const Matrix<T>& g) {
    tp.grad(x).array() += g(0, 0);
  });
}

template <typename T>
Var<T> gelu(Tape<T>& t, Var<T> x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  const Matrix<T>& xv = t.value(x);
  Matrix<T> th = (k * (xv.array() + c * xv.array().cube())).tanh().matrix();
  Matrix<T> out = (T(0.5) * xv.array() * (T(1) + th.array())).matrix();
  return t.record(std::move(out), t.requires_grad(x),
                  [x, k, c, th = std::move(th)](Tape<T>& tp, const Matrix<T>& g) {
                    const auto xa = tp.value(x).array();
                    auto d = T(0.5) * (T(1) + th.array()) +
                             T(0.5) * xa * (T(1) - th.array().square()) * k * (T(1) + T(3) * c * xa.square());
                    tp.grad(x).array() += g.array() * d;
                  });
}

template <typename T>
Var<T> tanh(Tape<T>& t, Var<T> x) {
  Matrix<T> out = t.value(x).array().tanh().matrix();
  Matrix<T> saved = out;
  return t.record(std::move(out), t.requires_grad(x),
                  [x, saved = std::move(saved)](Tape<T>& tp, const Matrix<T>& g) {
                    tp.grad(x).array() += g.array() * (T(1) - saved.array().square());
                  });
}

template <typename T>
Var<T> layer_norm(Tape<T>& t, Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  const Matrix<T>& xv = t.value(x);
  const Eigen::Index rows = xv.rows(), cols = xv.cols();
  Matrix<T> xhat(rows, cols);
  RowVector<T> inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix<T> out = xhat.array().rowwise() * t.value(gain).row(0).array();
  out.rowwise() += t.value(bias).row(0);
  const bool rg = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
  return t.record(std::move(out), rg,
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape<T>& tp, const Matrix<T>& g) {
                    if (tp.requires_grad(gain)) tp.grad(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
                    if (tp.requires_grad(bias)) tp.grad(bias) += g.colwise().sum();
                    if (!tp.requires_grad(x)) return;
                    Matrix<T> dxhat = g.array().rowwise() * tp.value(gain).row(0).array();
                    Matrix<T>& dx = tp.grad(x);
                    const T n = static_cast<T>(xhat.cols());
                    for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                      const T m1 = dxhat.row(r).sum() / n;
                      const T m2 = (dxhat.row(r).array() * xhat.row(r).array()).sum() / n;
                      dx.row(r).array() += inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                  });
}

template <typename T>
Var<T> embedding(Tape<T>& t, Var<T> table, std::span<const std::int32_t> ids) {
  const Matrix<T>& tv = t.value(table);
  Matrix<T> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw std::out_of_range("embedding id out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return t.record(std::move(out), t.requires_grad(table),
                  [table, saved = std::move(saved)](Tape<T>& tp, const Matrix<T>& g) {
                    Matrix<T>& dt = tp.grad(table);
                    for (std::size_t i = 0; i < saved.size(); ++i) dt.row(saved[i]) += g.row(static_cast<Eigen::Index>(i));
                  });
}

template <typename T>
Var<T> causal_attention(Tape<T>& t, Var<T> qkv, int n_heads, std::span<const bool> key_valid) {
  const Matrix<T>& in = t.value(qkv);
  const Eigen::Index len = in.rows();
  if (in.cols() % (3 * n_heads) != 0) throw std::invalid_argument("causal_attention: bad width");
  const Eigen::Index d = in.cols() / 3;
  const Eigen::Index dh = d / n_heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  if (!key_valid.empty() && static_cast<Eigen::Index>(key_valid.size()) != len) {
    throw std::invalid_argument("causal_attention: key mask length mismatch");
  }

  std::vector<Matrix<T>> probs(static_cast<std::size_t>(n_heads));
  Matrix<T> out = Matrix<T>::Zero(len, d);
  for (int h = 0; h < n_heads; ++h) {
    const auto q = in.middleCols(h * dh, dh);
    const auto k = in.middleCols(d + h * dh, dh);
    const auto v = in.middleCols(2 * d + h * dh, dh);
    Matrix<T> s;
    s.noalias() = q * k.transpose();
    Matrix<T>& p = probs[static_cast<std::size_t>(h)];
    p = Matrix<T>::Zero(len, len);
    for (Eigen::Index i = 0; i < len; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index j = 0; j <= i; ++j) {
        if (key_valid.empty() || key_valid[static_cast<std::size_t>(j)]) mx = std::max(mx, s(i, j) * sc);
      }
      if (!std::isfinite(mx)) continue;  // no visible key: output row stays zero
      T total = 0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        if (key_valid.empty() || key_valid[static_cast<std::size_t>(j)]) {
          p(i, j) = std::exp(s(i, j) * sc - mx);
          total += p(i, j);
        }
      }
      p.row(i).head(i + 1) /= total;
    }
    out.middleCols(h * dh, dh).noalias() = p * v;
  }
  return t.record(std::move(out), t.requires_grad(qkv),
                  [qkv, n_heads, d, dh, sc, probs = std::move(probs)](Tape<T>& tp, const Matrix<T>& g) {
                    const Matrix<T>& in = tp.value(qkv);
                    Matrix<T>& din = tp.grad(qkv);
                    for (int h = 0; h < n_heads; ++h) {
                      const Matrix<T>& p = probs[static_cast<std::size_t>(h)];
                      const auto q = in.middleCols(h * dh, dh);
                      const auto k = in.middleCols(d + h * dh, dh);
                      const auto v = in.middleCols(2 * d + h * dh, dh);
                      const auto go = g.middleCols(h * dh, dh);
                      din.middleCols(2 * d + h * dh, dh).noalias() += p.transpose() * go;
                      Matrix<T> dp;
                      dp.noalias() = go * v.transpose();
                      Matrix<T> ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
                      ds *= sc;
                      din.middleCols(h * dh, dh).noalias() += ds * k;
                      din.middleCols(d + h * dh, dh).noalias() += ds.transpose() * q;
                    }
                  });
}

template <typename T>
Var<T> masked_base_cross_entropy(Tape<T>& t, Var<T> logits, std::span<const std::int32_t> targets,
                                 std::span<const T> weights, T base) {
  require_base(base);
  const Matrix<T>& z = t.value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != z.rows() || targets.size() != weights.size()) {
    throw std::invalid_argument("masked_base_cross_entropy: length mismatch");
  }
  const T log_b = std::log(base);
  T total = 0;
  std::vector<Eigen::Index> active;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const T w = weights[static_cast<std::size_t>(r)];
    if (w == T(0)) continue;
    const auto tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= z.cols()) throw std::out_of_range("target id out of range");
    total += w * (scaled_logsumexp(z.row(r).data(), z.cols(), log_b) / log_b - z(r, tgt));
    active.push_back(r);
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total;
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::vector<T> wt(weights.begin(), weights.end());
  return t.record(std::move(out), t.requires_grad(logits),
                  [logits, log_b, active = std::move(active), tg = std::move(tg), wt = std::move(wt)](
                      Tape<T>& tp, const Matrix<T>& g) {
                    const Matrix<T>& z = tp.value(logits);
                    Matrix<T>& dz = tp.grad(logits);
                    for (Eigen::Index r : active) {
                      const T mx = z.row(r).maxCoeff();
                      RowVector<T> p = ((z.row(r).array() - mx) * log_b).exp().matrix();
                      p /= p.sum();
                      p(tg[static_cast<std::size_t>(r)]) -= T(1);
                      dz.row(r) += (g(0, 0) * wt[static_cast<std::size_t>(r)]) * p;
                    }
                  });
}

template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& t, Var<T> logits, std::span<const int> labels, std::span<const T> weights) {
  const Matrix<T>& z = t.value(logits);
  if (static_cast<Eigen::Index>(labels.size()) != z.rows() || labels.size() != weights.size()) {
    throw std::invalid_argument("softmax_cross_entropy: length mismatch");
  }
  Matrix<T> probs(z.rows(), z.cols());
  T total = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const T mx = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - mx).exp().matrix();
    const T s = probs.row(r).sum();
    probs.row(r) /= s;
    total += weights[static_cast<std::size_t>(r)] * (mx + std::log(s) - z(r, labels[static_cast<std::size_t>(r)]));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total;
  std::vector<int> lb(labels.begin(), labels.end());
  std::vector<T> wt(weights.begin(), weights.end());
  return t.record(std::move(out), t.requires_grad(logits),
                  [logits, probs = std::move(probs), lb = std::move(lb), wt = std::move(wt)](
                      Tape<T>& tp, const Matrix<T>& g) {
                    Matrix<T>& dz = tp.grad(logits);
                    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                      RowVector<T> d = probs.row(r);
                      d(lb[static_cast<std::size_t>(r)]) -= T(1);
                      dz.row(r) += (g(0, 0) * wt[static_cast<std::size_t>(r)]) * d;
                    }
                  });
}

}  // namespace ops

// ---------------------------------------------------------------------------

GradientCheckResult check_gradients(const Objective& f, std::span<const double> point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("step must be > 0");
  std::vector<double> analytic;
  f(point, &analytic);
  if (analytic.size() != point.size()) throw std::invalid_argument("gradient size mismatch");
  std::vector<double> x(point.begin(), point.end());
  GradientCheckResult res;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = f(x, nullptr);
    x[i] = orig - step;
    const double fm = f(x, nullptr);
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    if (i == 0 || err > res.max_relative_error) {
      res.max_relative_error = err;
      res.worst_index = i;
      res.analytic_at_worst = analytic[i];
      res.numeric_at_worst = numeric;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Instantiations

#define SDMLM_INSTANTIATE(T)                                                                                  \
  template std::vector<T> base_softmax<T>(std::span<const T>, T);                                             \
  template T log_base<T>(T, T);                                                                               \
  template T base_cross_entropy<T>(std::span<const T>, std::size_t, T);                                       \
  template class Tape<T>;                                                                                     \
  template ops::Var<T> ops::matmul<T>(Tape<T>&, ops::Var<T>, ops::Var<T>);                                    \
  template ops::Var<T> ops::add<T>(Tape<T>&, ops::Var<T>, ops::Var<T>);                                       \
  template ops::Var<T> ops::add_bias<T>(Tape<T>&, ops::Var<T>, ops::Var<T>);                                  \
  template ops::Var<T> ops::scale<T>(Tape<T>&, ops::Var<T>, T);                                               \
  template ops::Var<T> ops::sum<T>(Tape<T>&, ops::Var<T>);                                                    \
  template ops::Var<T> ops::gelu<T>(Tape<T>&, ops::Var<T>);                                                   \
  template ops::Var<T> ops::tanh<T>(Tape<T>&, ops::Var<T>);                                                   \
  template ops::Var<T> ops::layer_norm<T>(Tape<T>&, ops::Var<T>, ops::Var<T>, ops::Var<T>, T);                \
  template ops::Var<T> ops::embedding<T>(Tape<T>&, ops::Var<T>, std::span<const std::int32_t>);               \
  template ops::Var<T> ops::causal_attention<T>(Tape<T>&, ops::Var<T>, int, std::span<const bool>);           \
  template ops::Var<T> ops::masked_base_cross_entropy<T>(Tape<T>&, ops::Var<T>, std::span<const std::int32_t>, \
                                                         std::span<const T>, T);                              \
  template ops::Var<T> ops::softmax_cross_entropy<T>(Tape<T>&, ops::Var<T>, std::span<const int>,             \
                                                     std::span<const T>);

SDMLM_INSTANTIATE(float)
SDMLM_INSTANTIATE(double)

#undef SDMLM_INSTANTIATE

}  // namespace sdmlm
