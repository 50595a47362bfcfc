#include "sdmlm/model.hpp"

#include "sdmlm/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>

namespace sdmlm {

void ModelConfig::validate() const {
  if (vocab_size <= 0) throw std::invalid_argument("vocab_size must be positive");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
  if (pad_id >= vocab_size) throw std::invalid_argument("pad_id out of range");
}

namespace {

template <typename T>
Tensor<T> normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(rows, cols);
  for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> filled(Eigen::Index cols, T v) {
  Tensor<T> t(1, cols);
  t.value.setConstant(v);
  return t;
}

template <typename T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  Matrix<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + T(1e-5));
    out.row(r) = ((x.row(r).array() - mean) * inv) * gain.value.row(0).array() + bias.value.row(0).array();
  }
  return out;
}

template <typename T>
void gelu_inplace(Matrix<T>& x) {
  constexpr T k = T(0.7978845608028654);
  constexpr T c = T(0.044715);
  x = (T(0.5) * x.array() * (T(1) + (k * (x.array() + c * x.array().cube())).tanh())).matrix();
}

}  // namespace

template <typename T>
TransformerLM<T>::TransformerLM(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const Eigen::Index d = config_.d_model, ff = config_.d_ff, v = config_.vocab_size;
  const double std_w = 0.02;
  const double std_proj = 0.02 / std::sqrt(2.0 * config_.n_layers);
  tok_emb_ = normal_init<T>(v, d, std_w, rng);
  pos_emb_ = normal_init<T>(config_.max_seq_len, d, std_w, rng);
  blocks_.resize(static_cast<std::size_t>(config_.n_layers));
  for (auto& b : blocks_) {
    b.ln1_gain = filled<T>(d, T(1));
    b.ln1_bias = filled<T>(d, T(0));
    b.w_qkv = normal_init<T>(d, 3 * d, std_w, rng);
    b.b_qkv = filled<T>(3 * d, T(0));
    b.w_out = normal_init<T>(d, d, std_proj, rng);
    b.b_out = filled<T>(d, T(0));
    b.ln2_gain = filled<T>(d, T(1));
    b.ln2_bias = filled<T>(d, T(0));
    b.w_ff1 = normal_init<T>(d, ff, std_w, rng);
    b.b_ff1 = filled<T>(ff, T(0));
    b.w_ff2 = normal_init<T>(ff, d, std_proj, rng);
    b.b_ff2 = filled<T>(d, T(0));
  }
  lnf_gain_ = filled<T>(d, T(1));
  lnf_bias_ = filled<T>(d, T(0));
  w_head_ = normal_init<T>(d, v, std_w, rng);
  b_head_ = filled<T>(v, T(0));
}

template <typename T>
void TransformerLM<T>::check_tokens(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (static_cast<int>(tokens.size()) > config_.max_seq_len) {
    throw LengthError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_seq_len");
  }
  for (TokenId id : tokens) {
    if (id < 0 || id >= config_.vocab_size) throw std::out_of_range("token id out of range");
  }
}

template <typename T>
typename TransformerLM<T>::TapeOutput TransformerLM<T>::forward(Tape<T>& tape, std::span<const TokenId> tokens) {
  check_tokens(tokens);
  using ops::add;
  using ops::add_bias;
  using ops::matmul;
  std::vector<TokenId> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i);
  std::vector<bool> valid_storage(tokens.size(), true);
  if (config_.pad_id >= 0) {
    for (std::size_t i = 0; i < tokens.size(); ++i) valid_storage[i] = tokens[i] != config_.pad_id;
  }
  const std::unique_ptr<bool[]> valid(new bool[tokens.size()]);
  std::copy(valid_storage.begin(), valid_storage.end(), valid.get());
  const std::span<const bool> key_valid(valid.get(), tokens.size());

  auto x = add(tape, ops::embedding(tape, tape.parameter(tok_emb_), tokens),
               ops::embedding(tape, tape.parameter(pos_emb_), std::span<const TokenId>(positions)));
  for (auto& b : blocks_) {
    auto h = ops::layer_norm(tape, x, tape.parameter(b.ln1_gain), tape.parameter(b.ln1_bias));
    auto qkv = add_bias(tape, matmul(tape, h, tape.parameter(b.w_qkv)), tape.parameter(b.b_qkv));
    auto att = ops::causal_attention(tape, qkv, config_.n_heads, key_valid);
    x = add(tape, x, add_bias(tape, matmul(tape, att, tape.parameter(b.w_out)), tape.parameter(b.b_out)));
    auto h2 = ops::layer_norm(tape, x, tape.parameter(b.ln2_gain), tape.parameter(b.ln2_bias));
    auto f = ops::gelu(tape, add_bias(tape, matmul(tape, h2, tape.parameter(b.w_ff1)), tape.parameter(b.b_ff1)));
    x = add(tape, x, add_bias(tape, matmul(tape, f, tape.parameter(b.w_ff2)), tape.parameter(b.b_ff2)));
  }
  auto hidden = ops::layer_norm(tape, x, tape.parameter(lnf_gain_), tape.parameter(lnf_bias_));
  auto logits = add_bias(tape, matmul(tape, hidden, tape.parameter(w_head_)), tape.parameter(b_head_));
  return {hidden, logits};
}

template <typename T>
typename TransformerLM<T>::Output TransformerLM<T>::forward(std::span<const TokenId> tokens) const {
  DecodeSession<T> session(*this);
  Output out;
  out.logits = session.extend(tokens);
  out.hidden = session.last_hidden();
  return out;
}

template <typename T>
std::vector<Tensor<T>*> TransformerLM<T>::parameters() {
  std::vector<Tensor<T>*> ps{&tok_emb_, &pos_emb_};
  for (auto& b : blocks_) {
    for (Tensor<T>* p : {&b.ln1_gain, &b.ln1_bias, &b.w_qkv, &b.b_qkv, &b.w_out, &b.b_out, &b.ln2_gain,
                         &b.ln2_bias, &b.w_ff1, &b.b_ff1, &b.w_ff2, &b.b_ff2}) {
      ps.push_back(p);
    }
  }
  for (Tensor<T>* p : {&lnf_gain_, &lnf_bias_, &w_head_, &b_head_}) ps.push_back(p);
  return ps;
}

template <typename T>
std::vector<const Tensor<T>*> TransformerLM<T>::parameters() const {
  auto mut = const_cast<TransformerLM<T>*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::size_t TransformerLM<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += static_cast<std::size_t>(p->size());
  return n;
}

template <typename T>
std::vector<T> TransformerLM<T>::flat_parameters() const {
  std::vector<T> flat;
  flat.reserve(parameter_count());
  for (const auto* p : parameters()) flat.insert(flat.end(), p->value.data(), p->value.data() + p->size());
  return flat;
}

template <typename T>
void TransformerLM<T>::set_flat_parameters(std::span<const T> flat) {
  if (flat.size() != parameter_count()) throw std::invalid_argument("flat parameter size mismatch");
  std::size_t off = 0;
  for (auto* p : parameters()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p->size(), p->value.data());
    off += static_cast<std::size_t>(p->size());
  }
}

template <typename T>
void TransformerLM<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

// ---------------------------------------------------------------------------

template <typename T>
DecodeSession<T>::DecodeSession(const TransformerLM<T>& model) : model_(&model) {
  const auto& c = model.config();
  keys_.assign(static_cast<std::size_t>(c.n_layers), Matrix<T>(c.max_seq_len, c.d_model));
  values_.assign(static_cast<std::size_t>(c.n_layers), Matrix<T>(c.max_seq_len, c.d_model));
}

template <typename T>
Matrix<T> DecodeSession<T>::extend(std::span<const TokenId> tokens) {
  const auto& c = model_->config();
  if (tokens.empty()) throw std::invalid_argument("extend with no tokens");
  if (length_ + static_cast<int>(tokens.size()) > c.max_seq_len) {
    throw LengthError("decode context exceeds max_seq_len");
  }
  for (TokenId id : tokens) {
    if (id < 0 || id >= c.vocab_size) throw std::out_of_range("token id out of range");
  }
  const Eigen::Index n = static_cast<Eigen::Index>(tokens.size());
  const Eigen::Index d = c.d_model;
  const Eigen::Index dh = d / c.n_heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  const Eigen::Index p0 = length_;

  Matrix<T> x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    x.row(i) = model_->tok_emb_.value.row(tokens[static_cast<std::size_t>(i)]) + model_->pos_emb_.value.row(p0 + i);
    valid_.push_back(c.pad_id < 0 || tokens[static_cast<std::size_t>(i)] != c.pad_id);
  }

  for (std::size_t l = 0; l < model_->blocks_.size(); ++l) {
    const auto& b = model_->blocks_[l];
    Matrix<T> h = layer_norm_rows(x, b.ln1_gain, b.ln1_bias);
    Matrix<T> qkv;
    qkv.noalias() = h * b.w_qkv.value;
    qkv.rowwise() += b.b_qkv.value.row(0);
    keys_[l].middleRows(p0, n) = qkv.middleCols(d, d);
    values_[l].middleRows(p0, n) = qkv.middleCols(2 * d, d);

    Matrix<T> att = Matrix<T>::Zero(n, d);
    const Eigen::Index total = p0 + n;
    for (int hd = 0; hd < c.n_heads; ++hd) {
      const auto q = qkv.middleCols(hd * dh, dh);
      const auto k = keys_[l].topRows(total).middleCols(hd * dh, dh);
      const auto v = values_[l].topRows(total).middleCols(hd * dh, dh);
      Matrix<T> s;
      s.noalias() = q * k.transpose();
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index upto = p0 + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j <= upto; ++j) {
          if (valid_[static_cast<std::size_t>(j)]) mx = std::max(mx, s(i, j) * sc);
        }
        if (!std::isfinite(mx)) {
          s.row(i).setZero();
          continue;
        }
        T sum = 0;
        for (Eigen::Index j = 0; j < total; ++j) {
          if (j <= upto && valid_[static_cast<std::size_t>(j)]) {
            s(i, j) = std::exp(s(i, j) * sc - mx);
            sum += s(i, j);
          } else {
            s(i, j) = 0;
          }
        }
        s.row(i) /= sum;
      }
      att.middleCols(hd * dh, dh).noalias() = s * v;
    }
    Matrix<T> proj;
    proj.noalias() = att * b.w_out.value;
    proj.rowwise() += b.b_out.value.row(0);
    x += proj;
    Matrix<T> h2 = layer_norm_rows(x, b.ln2_gain, b.ln2_bias);
    Matrix<T> f;
    f.noalias() = h2 * b.w_ff1.value;
    f.rowwise() += b.b_ff1.value.row(0);
    gelu_inplace(f);
    Matrix<T> f2;
    f2.noalias() = f * b.w_ff2.value;
    f2.rowwise() += b.b_ff2.value.row(0);
    x += f2;
  }
  last_hidden_ = layer_norm_rows(x, model_->lnf_gain_, model_->lnf_bias_);
  Matrix<T> logits;
  logits.noalias() = last_hidden_ * model_->w_head_.value;
  logits.rowwise() += model_->b_head_.value.row(0);
  length_ += static_cast<int>(n);
  return logits;
}

// ---------------------------------------------------------------------------

TokenId argmax_lowest(std::span<const float> logits) {
  if (logits.empty()) throw std::invalid_argument("argmax of empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

std::vector<TokenId> greedy_decode(const TransformerLM<float>& model, std::span<const TokenId> prompt, int max_new,
                                   std::span<const TokenId> stop, const TokenSelector& select) {
  if (prompt.empty()) throw std::invalid_argument("greedy_decode requires a nonempty prompt");
  std::vector<TokenId> out;
  if (max_new <= 0) return out;
  DecodeSession<float> session(model);
  Matrix<float> logits = session.extend(prompt);
  RowVector<float> row = logits.row(logits.rows() - 1);
  while (true) {
    const TokenId next = select(std::span<const float>(row.data(), static_cast<std::size_t>(row.size())));
    out.push_back(next);
    if (std::find(stop.begin(), stop.end(), next) != stop.end()) break;
    if (static_cast<int>(out.size()) >= max_new) break;
    if (session.length() >= model.config().max_seq_len) break;
    const TokenId one[1] = {next};
    row = session.extend(one).row(0);
  }
  return out;
}

template <typename T>
RowVector<T> pooled_feature(const Matrix<T>& hidden, Eigen::Index verified_pos) {
  if (verified_pos < 0 || verified_pos >= hidden.rows()) throw std::out_of_range("verified_pos out of range");
  const Eigen::Index d = hidden.cols();
  RowVector<T> out(2 * d);
  out.head(d) = hidden.row(verified_pos);
  out.tail(d) = hidden.topRows(verified_pos + 1).colwise().mean();
  return out;
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::string_view kCheckpointMagic = "SDMLMCKP";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TransformerLM<float>& model) {
  io::BinaryWriter w(path);
  const auto& c = model.config();
  w.magic(kCheckpointMagic);
  w.pod(kCheckpointVersion);
  for (std::int32_t v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len, c.pad_id}) w.pod(v);
  w.pod<std::uint64_t>(c.seed);
  const auto flat = model.flat_parameters();
  w.array(std::span<const float>(flat));
  w.finish();
}

TransformerLM<float> load_checkpoint(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kCheckpointMagic);
  if (r.pod<std::uint32_t>() != kCheckpointVersion) throw io::FormatError("unsupported checkpoint version");
  ModelConfig c;
  c.vocab_size = r.pod<std::int32_t>();
  c.d_model = r.pod<std::int32_t>();
  c.n_layers = r.pod<std::int32_t>();
  c.n_heads = r.pod<std::int32_t>();
  c.d_ff = r.pod<std::int32_t>();
  c.max_seq_len = r.pod<std::int32_t>();
  c.pad_id = r.pod<std::int32_t>();
  c.seed = r.pod<std::uint64_t>();
  TransformerLM<float> model(c);
  const auto flat = r.array<float>();
  model.set_flat_parameters(flat);
  r.expect_end();
  return model;
}

template class TransformerLM<float>;
template class TransformerLM<double>;
template class DecodeSession<float>;
template class DecodeSession<double>;
template RowVector<float> pooled_feature<float>(const Matrix<float>&, Eigen::Index);
template RowVector<double> pooled_feature<double>(const Matrix<double>&, Eigen::Index);

}  // namespace sdmlm
