#pragma once

// Forward trace shared by inference, capture and the training backward pass.

#include <Eigen/Dense>
#include <vector>

#include "qf/model.hpp"

namespace qf::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using ColVec = Eigen::VectorXd;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap view(const Matrix& m) {
  return ConstMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                  static_cast<Eigen::Index>(m.cols()));
}
inline MutMap view(Matrix& m) {
  return MutMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                static_cast<Eigen::Index>(m.cols()));
}
Matrix to_matrix(const RowMat& m);

double gelu(double z);
double gelu_grad(double z);

struct LayerNormOut {
  RowMat y;
  RowMat xhat;
  ColVec rstd;
};
LayerNormOut layer_norm(const RowMat& x, const Matrix& gain, const Matrix& bias, double eps);

struct LayerTrace {
  RowMat x_in;
  LayerNormOut ln1;
  RowMat q, k, v;
  std::vector<RowMat> probs;  // per head, seq x seq, causal
  RowMat attn_cat;            // heads concatenated, before W_o
  RowMat h;                   // x_in + attention output
  LayerNormOut ln2;
  RowMat z;  // pre-activation
  RowMat g;  // GELU(z)
  RowMat x_out;
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  LayerNormOut final_ln;
  RowMat logits;
};

/// Runs layers 0..=last_layer; logits are only produced when the final layer ran
/// and `with_logits` is set.
ForwardTrace forward_trace(const ModelWeights& model, const TokenSeq& tokens,
                           std::size_t last_layer, bool with_logits);

}  // namespace qf::detail
