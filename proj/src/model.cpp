#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "model_internal.hpp"
#include "qf/errors.hpp"

namespace qf {

using detail::ConstMap;
using detail::RowMat;
using detail::view;

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1) {
    fail(ErrorKind::Contract, "model config counts must all be at least 1");
  }
  if (d_model % n_heads != 0) {
    fail(ErrorKind::Contract, "d_model (" + std::to_string(d_model) +
                                  ") must be divisible by n_heads (" + std::to_string(n_heads) +
                                  ")");
  }
  if (max_seq < 8) fail(ErrorKind::Contract, "max_seq must be at least 8");
  if (!(layernorm_epsilon > 0.0) || !std::isfinite(layernorm_epsilon)) {
    fail(ErrorKind::Contract, "layernorm_epsilon must be positive and finite");
  }
}

ModelWeights ModelWeights::zeros(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  ModelWeights m{c, Matrix(c.vocab_size, d), Matrix(c.max_seq, d), {}, Matrix(1, d), Matrix(1, d)};
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    m.layers.push_back(LayerWeights{Matrix(1, d), Matrix(1, d), Matrix(d, d), Matrix(d, d),
                                    Matrix(d, d), Matrix(d, d), Matrix(1, d), Matrix(1, d),
                                    Matrix(c.d_ff, d), Matrix(d, c.d_ff)});
  }
  return m;
}

ModelWeights ModelWeights::random_init(const ModelConfig& c, Rng& rng, double stddev) {
  ModelWeights m = zeros(c);
  for (auto& [name, t] : m.tensors()) {
    const bool gain = name.ends_with(".gain") || name == "final_ln.gain";
    const bool bias = name.ends_with(".bias");
    for (double& x : t->data()) x = gain ? 1.0 : bias ? 0.0 : stddev * rng.normal();
  }
  return m;
}

std::vector<NamedTensor> ModelWeights::tensors() {
  std::vector<NamedTensor> out;
  out.push_back({"token_embedding", &token_embedding});
  out.push_back({"positional_embedding", &positional_embedding});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights& w = layers[l];
    out.push_back({p + "ln1.gain", &w.ln1_gain});
    out.push_back({p + "ln1.bias", &w.ln1_bias});
    out.push_back({p + "attn.q", &w.attn_q});
    out.push_back({p + "attn.k", &w.attn_k});
    out.push_back({p + "attn.v", &w.attn_v});
    out.push_back({p + "attn.o", &w.attn_o});
    out.push_back({p + "ln2.gain", &w.ln2_gain});
    out.push_back({p + "ln2.bias", &w.ln2_bias});
    out.push_back({p + "ffn.up", &w.ffn_up});
    out.push_back({p + "ffn.down", &w.ffn_down});
  }
  out.push_back({"final_ln.gain", &final_ln_gain});
  out.push_back({"final_ln.bias", &final_ln_bias});
  return out;
}

std::vector<NamedConstTensor> ModelWeights::tensors() const {
  std::vector<NamedConstTensor> out;
  for (auto& [name, t] : const_cast<ModelWeights*>(this)->tensors()) out.push_back({name, t});
  return out;
}

namespace detail {

Matrix to_matrix(const RowMat& m) {
  Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  std::copy(m.data(), m.data() + m.size(), out.data().begin());
  return out;
}

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double z) {
  const double cdf = 0.5 * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + z * pdf;
}

LayerNormOut layer_norm(const RowMat& x, const Matrix& gain, const Matrix& bias, double eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  LayerNormOut out{RowMat(n, d), RowMat(n, d), ColVec(n)};
  const auto g = view(gain);
  const auto b = view(bias);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + eps);
    out.rstd(i) = rstd;
    out.xhat.row(i) = (x.row(i).array() - mean) * rstd;
    out.y.row(i) = out.xhat.row(i).cwiseProduct(g.row(0)) + b.row(0);
  }
  return out;
}

ForwardTrace forward_trace(const ModelWeights& model, const TokenSeq& tokens,
                           std::size_t last_layer, bool with_logits) {
  const ModelConfig& c = model.config;
  const Eigen::Index n = static_cast<Eigen::Index>(tokens.size());
  if (tokens.empty()) fail(ErrorKind::Contract, "forward needs at least one token");
  if (tokens.size() > c.max_seq) {
    fail(ErrorKind::Overflow, "sequence of " + std::to_string(tokens.size()) +
                                  " tokens exceeds max_seq " + std::to_string(c.max_seq));
  }
  if (last_layer >= c.n_layers) {
    fail(ErrorKind::Contract, "layer " + std::to_string(last_layer) + " out of range (model has " +
                                  std::to_string(c.n_layers) + ")");
  }
  const auto emb = view(model.token_embedding);
  const auto pos = view(model.positional_embedding);
  RowMat x(n, c.d_model);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId id = tokens[static_cast<std::size_t>(i)];
    if (id >= c.vocab_size) fail(ErrorKind::Contract, "token id outside vocabulary");
    x.row(i) = emb.row(id) + pos.row(i);
  }

  const Eigen::Index hd = static_cast<Eigen::Index>(c.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  ForwardTrace trace;
  trace.layers.reserve(last_layer + 1);
  for (std::size_t l = 0; l <= last_layer; ++l) {
    const LayerWeights& w = model.layers[l];
    LayerTrace t;
    t.x_in = std::move(x);
    t.ln1 = layer_norm(t.x_in, w.ln1_gain, w.ln1_bias, c.layernorm_epsilon);
    t.q = t.ln1.y * view(w.attn_q).transpose();
    t.k = t.ln1.y * view(w.attn_k).transpose();
    t.v = t.ln1.y * view(w.attn_v).transpose();
    t.attn_cat = RowMat(n, c.d_model);
    for (std::uint32_t head = 0; head < c.n_heads; ++head) {
      const Eigen::Index off = head * hd;
      RowMat s = t.q.middleCols(off, hd) * t.k.middleCols(off, hd).transpose() * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          s(i, j) = std::exp(s(i, j) - mx);
          sum += s(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < n; ++j) s(i, j) = 0.0;
      }
      t.attn_cat.middleCols(off, hd) = s * t.v.middleCols(off, hd);
      t.probs.push_back(std::move(s));
    }
    t.h = t.x_in + t.attn_cat * view(w.attn_o).transpose();
    t.ln2 = layer_norm(t.h, w.ln2_gain, w.ln2_bias, c.layernorm_epsilon);
    t.z = t.ln2.y * view(w.ffn_up).transpose();
    t.g = t.z.unaryExpr([](double zz) { return gelu(zz); });
    t.x_out = t.h + t.g * view(w.ffn_down).transpose();
    x = t.x_out;
    trace.layers.push_back(std::move(t));
  }

  if (with_logits && last_layer + 1 == c.n_layers) {
    trace.final_ln = layer_norm(x, model.final_ln_gain, model.final_ln_bias, c.layernorm_epsilon);
    trace.logits = trace.final_ln.y * emb.transpose();
  }
  return trace;
}

}  // namespace detail

Matrix forward_full(const ModelWeights& model, const TokenSeq& tokens) {
  const auto trace = detail::forward_trace(model, tokens, model.config.n_layers - 1, true);
  return detail::to_matrix(trace.logits);
}

Matrix layer_output(const ModelWeights& model, const TokenSeq& tokens, std::size_t layer) {
  const auto trace = detail::forward_trace(model, tokens, layer, false);
  return detail::to_matrix(trace.layers.back().x_out);
}

ActivationRecord forward_capture(const ModelWeights& model, const TokenSeq& tokens,
                                 std::size_t layer, TokenSpan positions) {
  if (layer >= model.config.n_layers) {
    fail(ErrorKind::Contract, "capture layer " + std::to_string(layer) + " out of range");
  }
  if (positions.empty()) fail(ErrorKind::Contract, "capture span is empty");
  if (positions.end > tokens.size()) fail(ErrorKind::Contract, "capture span exceeds sequence");
  // Cutoff: layers above `layer` never run.
  const auto trace = detail::forward_trace(model, tokens, layer, false);
  const detail::LayerTrace& t = trace.layers.back();
  const std::size_t count = positions.size();
  ActivationRecord rec{layer, Matrix(model.config.d_ff, count), Matrix(model.config.d_model, count),
                       {}};
  for (std::size_t col = 0; col < count; ++col) {
    const auto row = static_cast<Eigen::Index>(positions.begin + col);
    for (std::size_t i = 0; i < model.config.d_ff; ++i) rec.u(i, col) = t.g(row, i);
    for (std::size_t i = 0; i < model.config.d_model; ++i) rec.v(i, col) = t.h(row, i);
    rec.answer_token_ordinals.push_back(col);
  }
  return rec;
}

namespace {

TokenId argmax_lowest(const double* logits, std::size_t n) {
  TokenId best = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (logits[i] > logits[best]) best = static_cast<TokenId>(i);
  }
  return best;
}

void check_decode_budget(const ModelWeights& model, const TokenSeq& prompt, std::size_t max_new) {
  if (prompt.empty()) fail(ErrorKind::Contract, "decode needs a non-empty prompt");
  if (prompt.size() + max_new > model.config.max_seq) {
    fail(ErrorKind::Overflow, "prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                                  std::to_string(max_new) + " new tokens exceeds max_seq " +
                                  std::to_string(model.config.max_seq));
  }
}

// Incremental decoder state: one key/value row per processed position.
class KvCache {
 public:
  explicit KvCache(const ModelWeights& model) : model_(model) {
    const auto& c = model.config;
    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
      keys_.emplace_back(c.max_seq, c.d_model);
      values_.emplace_back(c.max_seq, c.d_model);
    }
  }

  // Feeds one token at the next position and returns its logits row.
  detail::RowVec step(TokenId token) {
    const auto& c = model_.config;
    const Eigen::Index p = length_++;
    const Eigen::Index hd = static_cast<Eigen::Index>(c.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    detail::RowMat x = view(model_.token_embedding).row(token) + view(model_.positional_embedding).row(p);
    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
      const LayerWeights& w = model_.layers[l];
      const auto ln1 = detail::layer_norm(x, w.ln1_gain, w.ln1_bias, c.layernorm_epsilon);
      const detail::RowMat q = ln1.y * view(w.attn_q).transpose();
      keys_[l].row(p) = ln1.y * view(w.attn_k).transpose();
      values_[l].row(p) = ln1.y * view(w.attn_v).transpose();
      detail::RowMat cat(1, c.d_model);
      for (std::uint32_t head = 0; head < c.n_heads; ++head) {
        const Eigen::Index off = head * hd;
        Eigen::VectorXd s = keys_[l].block(0, off, p + 1, hd) * q.row(0).segment(off, hd).transpose() * scale;
        const double mx = s.maxCoeff();
        s = (s.array() - mx).exp();
        s /= s.sum();
        cat.row(0).segment(off, hd) = s.transpose() * values_[l].block(0, off, p + 1, hd);
      }
      const detail::RowMat h = x + cat * view(w.attn_o).transpose();
      const auto ln2 = detail::layer_norm(h, w.ln2_gain, w.ln2_bias, c.layernorm_epsilon);
      const detail::RowMat g =
          (ln2.y * view(w.ffn_up).transpose()).unaryExpr([](double z) { return detail::gelu(z); });
      x = h + g * view(w.ffn_down).transpose();
    }
    const auto lnf = detail::layer_norm(x, model_.final_ln_gain, model_.final_ln_bias,
                                        c.layernorm_epsilon);
    return lnf.y * view(model_.token_embedding).transpose();
  }

 private:
  const ModelWeights& model_;
  std::vector<detail::RowMat> keys_;
  std::vector<detail::RowMat> values_;
  Eigen::Index length_ = 0;
};

}  // namespace

TokenSeq greedy_decode(const ModelWeights& model, const TokenSeq& prompt, std::size_t max_new) {
  check_decode_budget(model, prompt, max_new);
  TokenSeq out = prompt;
  if (max_new == 0) return out;
  KvCache cache(model);
  detail::RowVec logits;
  for (TokenId t : prompt) {
    if (t >= model.config.vocab_size) fail(ErrorKind::Contract, "token id outside vocabulary");
    logits = cache.step(t);
  }
  for (std::size_t i = 0; i < max_new; ++i) {
    const TokenId next = argmax_lowest(logits.data(), model.config.vocab_size);
    out.push_back(next);
    if (next == tokens::kEnd || i + 1 == max_new) break;
    logits = cache.step(next);
  }
  return out;
}

TokenSeq greedy_decode_recompute(const ModelWeights& model, const TokenSeq& prompt,
                                 std::size_t max_new) {
  check_decode_budget(model, prompt, max_new);
  TokenSeq out = prompt;
  for (std::size_t i = 0; i < max_new; ++i) {
    const Matrix logits = forward_full(model, out);
    const TokenId next = argmax_lowest(
        logits.data().data() + (logits.rows() - 1) * logits.cols(), model.config.vocab_size);
    out.push_back(next);
    if (next == tokens::kEnd) break;
  }
  return out;
}

void set_layer_down_proj(ModelWeights& model, std::size_t layer, const Matrix& w_new) {
  if (layer >= model.layers.size()) {
    fail(ErrorKind::Contract, "layer " + std::to_string(layer) + " out of range");
  }
  const Matrix& cur = model.layers[layer].ffn_down;
  if (w_new.rows() != cur.rows() || w_new.cols() != cur.cols()) {
    fail(ErrorKind::Shape, "down projection must be " + cur.shape_string() + ", got " +
                               w_new.shape_string());
  }
  model.layers[layer].ffn_down = w_new;
}

const Matrix& layer_down_proj(const ModelWeights& model, std::size_t layer) {
  if (layer >= model.layers.size()) {
    fail(ErrorKind::Contract, "layer " + std::to_string(layer) + " out of range");
  }
  return model.layers[layer].ffn_down;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out = logits;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < out.cols(); ++j) mx = std::max(mx, out(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < out.cols(); ++j) {
      out(i, j) = std::exp(out(i, j) - mx);
      sum += out(i, j);
    }
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) /= sum;
  }
  return out;
}

// ---------------------------------------------------------------------------
// QFW1 serialisation

namespace {

constexpr char kMagic[4] = {'Q', 'F', 'W', '1'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::Io, "weight file truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_weights(const ModelWeights& model) {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kWeightFormatVersion);
  const ModelConfig& c = model.config;
  for (std::uint32_t f : {c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq}) {
    put_le<std::uint32_t>(out, f);
  }
  put_le<double>(out, c.layernorm_epsilon);
  const auto tensors = model.tensors();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t->rows()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t->cols()));
    for (double x : t->data()) put_le<double>(out, x);
  }
  return out;
}

ModelWeights deserialize_weights(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(4) != std::string(kMagic, 4)) fail(ErrorKind::Io, "not a QFW1 weight file (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kWeightFormatVersion) {
    fail(ErrorKind::Io, "unsupported weight format version " + std::to_string(version));
  }
  ModelConfig c;
  c.n_layers = in.get<std::uint32_t>();
  c.d_model = in.get<std::uint32_t>();
  c.n_heads = in.get<std::uint32_t>();
  c.d_ff = in.get<std::uint32_t>();
  c.vocab_size = in.get<std::uint32_t>();
  c.max_seq = in.get<std::uint32_t>();
  c.layernorm_epsilon = in.get<double>();
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Io, std::string("weight file carries an invalid config: ") + e.what());
  }
  ModelWeights model = ModelWeights::zeros(c);
  auto tensors = model.tensors();
  const auto count = in.get<std::uint32_t>();
  if (count != tensors.size()) fail(ErrorKind::Io, "weight file has an unexpected tensor count");
  for (auto& [name, t] : tensors) {
    const auto len = in.get<std::uint32_t>();
    const std::string got = in.take(len);
    if (got != name) fail(ErrorKind::Io, "expected tensor '" + name + "', found '" + got + "'");
    const auto rows = in.get<std::uint32_t>();
    const auto cols = in.get<std::uint32_t>();
    if (rows != t->rows() || cols != t->cols()) {
      fail(ErrorKind::Io, "tensor '" + name + "' has shape " + std::to_string(rows) + "x" +
                              std::to_string(cols) + ", expected " + t->shape_string());
    }
    for (double& x : t->data()) {
      x = in.get<double>();
      if (!std::isfinite(x)) fail(ErrorKind::Io, "tensor '" + name + "' holds a non-finite value");
    }
  }
  if (!in.done()) fail(ErrorKind::Io, "trailing bytes after the last tensor");
  return model;
}

void save_weights(const ModelWeights& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_weights(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_weights(ss.str());
}

}  // namespace qf
