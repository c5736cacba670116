#include "qf/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace qf {

void QfProblem::validate() const {
  if (u.rows() != u_prime.rows() || u.cols() != u_prime.cols()) {
    fail(ErrorKind::Shape, "QfProblem: u " + u.shape_string() + " and u' " +
                               u_prime.shape_string() + " differ");
  }
  if (v.rows() != v_prime.rows() || v.cols() != v_prime.cols()) {
    fail(ErrorKind::Shape, "QfProblem: v " + v.shape_string() + " and v' " +
                               v_prime.shape_string() + " differ");
  }
  if (w.cols() != u.rows() || w.rows() != v.rows() || u.cols() != v.cols()) {
    fail(ErrorKind::Shape, "QfProblem: W " + w.shape_string() + " incompatible with u " +
                               u.shape_string() + " / v " + v.shape_string());
  }
}

KnowledgeDelta knowledge_delta(const Matrix& v, const Matrix& v_prime) {
  return {v - v_prime};
}

QfProblem apply_significance(const QfProblem& p, std::span<const int> mask) {
  p.validate();
  if (mask.size() != p.tokens()) {
    fail(ErrorKind::Contract, "significance mask has " + std::to_string(mask.size()) +
                                  " entries for " + std::to_string(p.tokens()) + " tokens");
  }
  std::vector<std::size_t> keep;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t] != 0 && mask[t] != 1) {
      fail(ErrorKind::Contract, "significance entries must be 0 or 1");
    }
    if (mask[t] == 1) keep.push_back(t);
  }
  if (keep.empty()) fail(ErrorKind::Contract, "significance mask selects no tokens (empty update)");
  return {p.w, p.u.select_columns(keep), p.v.select_columns(keep),
          p.u_prime.select_columns(keep), p.v_prime.select_columns(keep)};
}

UpdateReport qf_update(const QfProblem& p, double rel_tol) {
  p.validate();
  // R = W(u' - u) + (v' - v); every column is one token's constraint defect.
  const Matrix defect = matmul(p.w, p.u_prime - p.u) + (p.v_prime - p.v);

  SpectralSolve solve = [&] {
    try {
      return sym_pinv_solve(gram(p.u_prime), defect, rel_tol);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::RankZero) throw;
      fail(ErrorKind::Degenerate,
           "degenerate update: u' has no usable column space at this layer; "
           "try a different layer or answer span");
    }
  }();

  UpdateReport report{p.w, Matrix(p.d_out(), p.d_in())};
  report.delta_w = -1.0 * matmul(solve.solution, transpose(p.u_prime));
  report.w_prime = p.w + report.delta_w;
  report.delta_fro = frobenius_norm(report.delta_w);
  report.residual_before = frobenius_norm(defect);
  report.residual_after = constraint_residual(report.w_prime, p);
  report.gram_condition = solve.report.condition;
  report.effective_rank = solve.report.effective_rank;
  report.tokens_used = p.tokens();
  return report;
}

Matrix oracle_update(const QfProblem& p) {
  p.validate();
  const KnowledgeDelta delta = knowledge_delta(p.v, p.v_prime);
  const Matrix target = matmul(p.w, p.u) + delta.b;
  const Matrix r = target - matmul(p.w, p.u_prime);
  return p.w + matmul(r, qr_pinv(p.u_prime));
}

double constraint_residual(const Matrix& w_candidate, const QfProblem& p) {
  p.validate();
  if (w_candidate.rows() != p.w.rows() || w_candidate.cols() != p.w.cols()) {
    fail(ErrorKind::Shape, "constraint_residual: candidate " + w_candidate.shape_string() +
                               " does not match W " + p.w.shape_string());
  }
  return frobenius_norm(matmul(w_candidate, p.u_prime) + p.v_prime -
                        (matmul(p.w, p.u) + p.v));
}

Matrix column_space_projector(const Matrix& a, double rel_tol) {
  const PivotedQr qr = pivoted_qr(a, rel_tol);
  if (qr.rank == 0) return Matrix(a.rows(), a.rows());
  return matmul(qr.q, transpose(qr.q));
}

NullspacePerturbation nullspace_perturbation(const Matrix& u_prime, std::size_t d_out,
                                             double scale, Rng& rng) {
  const std::size_t d_in = u_prime.rows();
  const Matrix complement = Matrix::identity(d_in) - column_space_projector(u_prime);
  NullspacePerturbation out{Matrix(d_out, d_in), false};
  if (pivoted_qr(u_prime).rank >= d_in) return out;

  Matrix z = matmul(rng.normal_matrix(d_out, d_in), complement);
  const double n = frobenius_norm(z);
  if (n == 0.0) return out;
  out.z = (scale / n) * z;
  out.has_nullspace = true;
  return out;
}

MinimalityCheck verify_minimality(const QfProblem& p, const UpdateReport& report,
                                  std::size_t trials, Rng& rng) {
  p.validate();
  MinimalityCheck check;
  const Matrix& dw = report.delta_w;
  const double dw_norm = frobenius_norm(dw);

  const Matrix complement =
      Matrix::identity(p.d_in()) - column_space_projector(p.u_prime);
  check.stationarity_defect = frobenius_norm(matmul(dw, complement));
  bool ok = check.stationarity_defect <= 1e-8 * std::max(dw_norm, 1e-300);
  if (dw_norm == 0.0) ok = true;

  check.worst_margin = std::numeric_limits<double>::infinity();
  const double scale = std::max(dw_norm, 1.0);
  for (std::size_t t = 0; t < trials; ++t) {
    const NullspacePerturbation np = nullspace_perturbation(p.u_prime, p.d_out(), scale, rng);
    if (!np.has_nullspace) break;
    ++check.trials_run;
    const double z2 = std::pow(frobenius_norm(np.z), 2);
    const double perturbed = frobenius_norm(dw + np.z);
    const double lhs = perturbed * perturbed;
    const double rel = std::abs(lhs - dw_norm * dw_norm - z2) / (dw_norm * dw_norm + z2);
    check.worst_pythagoras_error = std::max(check.worst_pythagoras_error, rel);
    check.worst_margin = std::min(check.worst_margin, perturbed - dw_norm);
    if (!(perturbed > dw_norm) || rel > 1e-8) ok = false;
  }
  if (check.trials_run == 0) check.worst_margin = 0.0;
  check.passed = ok;
  return check;
}

}  // namespace qf
