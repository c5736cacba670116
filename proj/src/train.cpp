#include "qf/train.hpp"

#include <cmath>
#include <sstream>

#include "model_internal.hpp"
#include "qf/errors.hpp"

namespace qf {

using detail::RowMat;
using detail::view;

TrainingExample make_training_example(const Episode& e, std::size_t max_seq,
                                      bool all_positions) {
  ChatLayout layout = chat_format(e.instruction, e.query, e.answer, max_seq);
  layout.tokens.push_back(tokens::kEnd);
  if (layout.tokens.size() > max_seq) fail(ErrorKind::Overflow, "episode exceeds max_seq");
  TrainingExample ex{std::move(layout.tokens), {}};
  const std::size_t first = all_positions ? 0 : layout.answer.begin - 1;
  for (std::size_t p = first; p < layout.answer.end; ++p) {
    ex.scored_positions.push_back(p);
  }
  return ex;
}

namespace {

// Gradient of a layer norm given the upstream gradient of its output.
RowMat layer_norm_backward(const detail::LayerNormOut& ln, const RowMat& dy, const Matrix& gain,
                           Matrix& dgain, Matrix& dbias) {
  auto dg = view(dgain);
  auto db = view(dbias);
  dg.row(0) += dy.cwiseProduct(ln.xhat).colwise().sum();
  db.row(0) += dy.colwise().sum();
  const RowMat dxhat = dy.array().rowwise() * view(gain).row(0).array();
  RowMat dx(dy.rows(), dy.cols());
  const double inv_d = 1.0 / static_cast<double>(dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_dxhat = dxhat.row(i).sum() * inv_d;
    const double mean_dxhat_xhat = dxhat.row(i).dot(ln.xhat.row(i)) * inv_d;
    dx.row(i) = ln.rstd(i) * (dxhat.row(i).array() - mean_dxhat -
                              ln.xhat.row(i).array() * mean_dxhat_xhat)
                                 .matrix();
  }
  return dx;
}

double example_loss_and_gradient(const ModelWeights& model, const TrainingExample& ex,
                                 double weight, ModelWeights* grad) {
  const ModelConfig& c = model.config;
  const auto trace = detail::forward_trace(model, ex.tokens, c.n_layers - 1, true);
  const Eigen::Index n = static_cast<Eigen::Index>(ex.tokens.size());

  double loss = 0.0;
  RowMat dlogits = RowMat::Zero(n, c.vocab_size);
  for (std::size_t p : ex.scored_positions) {
    const auto row = static_cast<Eigen::Index>(p);
    const TokenId target = ex.tokens.at(p + 1);
    const auto logits = trace.logits.row(row);
    const double mx = logits.maxCoeff();
    const RowMat e = (logits.array() - mx).exp().matrix();
    const double sum = e.sum();
    loss += -(logits(target) - mx - std::log(sum));
    if (grad != nullptr) {
      dlogits.row(row) = e / sum * weight;
      dlogits(row, target) -= weight;
    }
  }
  if (grad == nullptr) return loss;

  const auto emb = view(model.token_embedding);
  auto demb = view(grad->token_embedding);
  demb += dlogits.transpose() * trace.final_ln.y;
  RowMat dx = layer_norm_backward(trace.final_ln, dlogits * emb, model.final_ln_gain,
                                  grad->final_ln_gain, grad->final_ln_bias);

  const Eigen::Index hd = static_cast<Eigen::Index>(c.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t l = c.n_layers; l-- > 0;) {
    const LayerWeights& w = model.layers[l];
    LayerWeights& gw = grad->layers[l];
    const detail::LayerTrace& t = trace.layers[l];

    // out = h + g · W_downᵀ
    view(gw.ffn_down) += dx.transpose() * t.g;
    RowMat dz = dx * view(w.ffn_down);
    for (Eigen::Index i = 0; i < dz.rows(); ++i)
      for (Eigen::Index j = 0; j < dz.cols(); ++j) dz(i, j) *= detail::gelu_grad(t.z(i, j));
    view(gw.ffn_up) += dz.transpose() * t.ln2.y;
    RowMat dh = dx + layer_norm_backward(t.ln2, dz * view(w.ffn_up), w.ln2_gain, gw.ln2_gain,
                                         gw.ln2_bias);

    // h = x_in + cat · W_oᵀ
    view(gw.attn_o) += dh.transpose() * t.attn_cat;
    const RowMat dcat = dh * view(w.attn_o);
    RowMat dq(n, c.d_model), dk(n, c.d_model), dv(n, c.d_model);
    for (std::uint32_t head = 0; head < c.n_heads; ++head) {
      const Eigen::Index off = head * hd;
      const RowMat& p = t.probs[head];
      const auto d_out = dcat.middleCols(off, hd);
      dv.middleCols(off, hd) = p.transpose() * d_out;
      RowMat dp = d_out * t.v.middleCols(off, hd).transpose();
      RowMat ds(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double inner = dp.row(i).dot(p.row(i));
        ds.row(i) = p.row(i).array() * (dp.row(i).array() - inner);
      }
      dq.middleCols(off, hd) = ds * t.k.middleCols(off, hd) * scale;
      dk.middleCols(off, hd) = ds.transpose() * t.q.middleCols(off, hd) * scale;
    }
    view(gw.attn_q) += dq.transpose() * t.ln1.y;
    view(gw.attn_k) += dk.transpose() * t.ln1.y;
    view(gw.attn_v) += dv.transpose() * t.ln1.y;
    const RowMat da = dq * view(w.attn_q) + dk * view(w.attn_k) + dv * view(w.attn_v);
    dx = dh + layer_norm_backward(t.ln1, da, w.ln1_gain, gw.ln1_gain, gw.ln1_bias);
  }

  auto dpos = view(grad->positional_embedding);
  for (Eigen::Index i = 0; i < n; ++i) {
    demb.row(ex.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    dpos.row(i) += dx.row(i);
  }
  return loss;
}

std::size_t scored_count(std::span<const TrainingExample> batch) {
  std::size_t total = 0;
  for (const auto& ex : batch) total += ex.scored_positions.size();
  if (total == 0) fail(ErrorKind::Contract, "training batch has no scored positions");
  return total;
}

}  // namespace

double loss_and_gradient(const ModelWeights& model, std::span<const TrainingExample> batch,
                         ModelWeights& grad) {
  if (!(grad.config == model.config)) fail(ErrorKind::Contract, "gradient config mismatch");
  const double weight = 1.0 / static_cast<double>(scored_count(batch));
  double loss = 0.0;
  for (const auto& ex : batch) loss += example_loss_and_gradient(model, ex, weight, &grad);
  return loss * weight;
}

double mean_loss(const ModelWeights& model, std::span<const TrainingExample> batch) {
  const double weight = 1.0 / static_cast<double>(scored_count(batch));
  double loss = 0.0;
  for (const auto& ex : batch) loss += example_loss_and_gradient(model, ex, weight, nullptr);
  return loss * weight;
}

PretrainLog pretrain(ModelWeights& model, const std::vector<Episode>& episodes,
                     const PretrainOptions& options, const StepCallback& on_step) {
  PretrainLog log;
  if (options.steps == 0) return log;
  if (episodes.empty()) fail(ErrorKind::Contract, "pretrain needs a non-empty corpus");
  if (options.batch_size == 0) fail(ErrorKind::Contract, "batch_size must be positive");

  std::vector<TrainingExample> examples;
  examples.reserve(episodes.size());
  for (const Episode& e : episodes) examples.push_back(make_training_example(e, model.config.max_seq, options.all_positions));

  Rng rng(options.seed);
  ModelWeights grad = ModelWeights::zeros(model.config);
  std::vector<TrainingExample> batch(options.batch_size);
  for (std::size_t step = 0; step < options.steps; ++step) {
    for (auto& ex : batch) ex = examples[rng.below(examples.size())];
    for (auto& [name, t] : grad.tensors()) std::fill(t->data().begin(), t->data().end(), 0.0);
    const double loss = loss_and_gradient(model, batch, grad);

    double norm2 = 0.0;
    for (const auto& [name, t] : grad.tensors())
      for (double g : t->data()) norm2 += g * g;
    if (!std::isfinite(loss) || !std::isfinite(norm2)) {
      std::ostringstream os;
      os << "pretraining diverged at step " << step << " (loss " << loss << ", last good loss "
         << (log.losses.empty() ? 0.0 : log.losses.back()) << ")";
      fail(ErrorKind::Divergence, os.str());
    }
    double lr = options.learning_rate;
    const double norm = std::sqrt(norm2);
    if (options.grad_clip > 0.0 && norm > options.grad_clip) lr *= options.grad_clip / norm;

    auto params = model.tensors();
    const auto grads = grad.tensors();
    // A step that would overflow is rejected before anything is written.
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto p = params[k].tensor->data();
      const auto g = grads[k].tensor->data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (!std::isfinite(p[i] - lr * g[i])) {
          fail(ErrorKind::Divergence, "pretraining diverged at step " + std::to_string(step) +
                                          ": update overflows " + params[k].name);
        }
      }
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k].tensor->data();
      const auto g = grads[k].tensor->data();
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
    }
    log.losses.push_back(loss);
    if (on_step) on_step(step, loss);
  }
  return log;
}

}  // namespace qf
