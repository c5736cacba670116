#pragma once

// Closed-form QF consolidation.
//
// Given the target linear map W (d_out x d_in), the instructed-pass activations
// (u, v) and the uninstructed-pass activations (u', v'), find the W' closest to
// W in Frobenius norm such that
//
//     W'u' + v' = Wu + v
//
// column by column. With G = u'ᵀu' the minimiser is
//
//     W' = W - (W(u' - u) + (v' - v)) G⁺ u'ᵀ
//
// which reduces to the plain inverse whenever G is non-singular.

#include <cstddef>
#include <span>
#include <vector>

#include "qf/tensor.hpp"

namespace qf {

struct QfProblem {
  Matrix w;        // d_out x d_in
  Matrix u;        // d_in x T, instructed pass
  Matrix v;        // d_out x T, instructed pass bypass
  Matrix u_prime;  // d_in x T, uninstructed pass
  Matrix v_prime;  // d_out x T, uninstructed pass bypass

  std::size_t d_out() const { return w.rows(); }
  std::size_t d_in() const { return w.cols(); }
  std::size_t tokens() const { return u.cols(); }

  /// Throws Shape/Contract errors if the matrices do not fit together.
  void validate() const;
};

struct KnowledgeDelta {
  Matrix b;  // v - v'
};

struct UpdateReport {
  Matrix w_prime;
  Matrix delta_w;  // w_prime - w
  double delta_fro = 0.0;
  double residual_before = 0.0;  // ‖Wu' - Wu - B‖_F
  double residual_after = 0.0;   // ‖W'u' - Wu - B‖_F
  double gram_condition = 0.0;
  std::size_t effective_rank = 0;
  std::size_t tokens_used = 0;
};

KnowledgeDelta knowledge_delta(const Matrix& v, const Matrix& v_prime);

/// Keeps only the token columns whose mask entry is 1. Entries must be 0 or 1.
QfProblem apply_significance(const QfProblem& p, std::span<const int> mask);

UpdateReport qf_update(const QfProblem& p, double rel_tol = kDefaultRelTol);

/// Independent minimum-norm solve: W + R·u'⁺ with R = Wu + B - Wu' and u'⁺
/// from pivoted QR of u' itself (never forms the Gram matrix).
Matrix oracle_update(const QfProblem& p);

/// ‖W_c·u' + v' - (W·u + v)‖_F.
double constraint_residual(const Matrix& w_candidate, const QfProblem& p);

struct NullspacePerturbation {
  Matrix z;  // d_out x d_in with z·u' = 0
  bool has_nullspace = false;
};

/// Random Z = G(I - P) rescaled to ‖Z‖_F = scale, where P projects onto the
/// column space of u'. Returns a zero matrix and has_nullspace = false when
/// u' already spans the input space.
NullspacePerturbation nullspace_perturbation(const Matrix& u_prime, std::size_t d_out,
                                             double scale, Rng& rng);

struct MinimalityCheck {
  bool passed = false;
  double stationarity_defect = 0.0;     // ‖ΔW(I - P)‖_F
  double worst_margin = 0.0;            // min over trials of ‖ΔW + Z‖_F - ‖ΔW‖_F
  double worst_pythagoras_error = 0.0;  // max relative |‖ΔW+Z‖² - ‖ΔW‖² - ‖Z‖²|
  std::size_t trials_run = 0;
};

MinimalityCheck verify_minimality(const QfProblem& p, const UpdateReport& report,
                                  std::size_t trials, Rng& rng);

/// Orthogonal projector onto the column space of a (via pivoted QR).
Matrix column_space_projector(const Matrix& a, double rel_tol = kDefaultRelTol);

}  // namespace qf
