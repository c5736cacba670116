#include "qf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace qf {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::Shape, std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                               b.shape_string());
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {
  if (rows == 0 || cols == 0) {
    fail(ErrorKind::Shape, "matrix dimensions must be positive, got " + std::to_string(rows) +
                               "x" + std::to_string(cols));
  }
  data_.assign(rows * cols, 0.0);
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
  if (rows == 0 || cols == 0) {
    fail(ErrorKind::Shape, "matrix dimensions must be positive, got " + std::to_string(rows) +
                               "x" + std::to_string(cols));
  }
  if (data_.size() != rows * cols) {
    fail(ErrorKind::Shape, "matrix " + shape_string() + " given " + std::to_string(data_.size()) +
                               " values");
  }
  for (double x : data_) {
    if (!std::isfinite(x)) fail(ErrorKind::Contract, "matrix entries must be finite");
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) fail(ErrorKind::Shape, "ragged row list");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::column(std::size_t c) const {
  const std::size_t idx[] = {c};
  return select_columns(idx);
}

Matrix Matrix::select_columns(std::span<const std::size_t> cols) const {
  Matrix out(rows_, cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] >= cols_) fail(ErrorKind::Shape, "column index out of range");
    for (std::size_t i = 0; i < rows_; ++i) out(i, j) = (*this)(i, cols[j]);
  }
  return out;
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (double& x : out.data()) x *= s;
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorKind::Shape, "matmul: cannot multiply " + a.shape_string() + " by " +
                               b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* orow = &out(i, 0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.data().data() + k * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  if (!all_finite(out)) fail(ErrorKind::Contract, "matmul produced non-finite entries");
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix gram(const Matrix& u) {
  const std::size_t t = u.cols();
  Matrix g(t, t);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i; j < t; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < u.rows(); ++k) s += u(k, i) * u(k, j);
      g(i, j) = s;
      g(j, i) = s;
    }
  }
  return g;
}

double frobenius_norm(const Matrix& a) {
  // Scaled accumulation keeps tiny and huge entries from under/overflowing.
  double scale = 0.0;
  double ssq = 1.0;
  for (double x : a.data()) {
    if (x == 0.0) continue;
    const double ax = std::abs(x);
    if (scale < ax) {
      ssq = 1.0 + ssq * (scale / ax) * (scale / ax);
      scale = ax;
    } else {
      ssq += (ax / scale) * (ax / scale);
    }
  }
  return scale * std::sqrt(ssq);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) m = std::max(m, std::abs(ad[i] - bd[i]));
  return m;
}

bool all_finite(const Matrix& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double x) { return std::isfinite(x); });
}

SymmetricEigen jacobi_eigen(const Matrix& input) {
  const std::size_t n = input.rows();
  if (input.cols() != n) fail(ErrorKind::Shape, "jacobi_eigen: matrix must be square");

  Matrix a = input;
  Matrix v = Matrix::identity(n);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
    return std::sqrt(2.0 * s);
  };
  const double total = frobenius_norm(a);
  const double stop = total * std::numeric_limits<double>::epsilon() * 1e-2;

  for (int sweep = 0; sweep < 100 && total > 0.0 && off_norm() > stop; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        // Rotation angle that annihilates a(p, q); t is the smaller root.
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  SymmetricEigen out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.eigenvalues[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.eigenvectors(i, k) = v(i, order[k]);
  }
  return out;
}

SpectralSolve sym_pinv_solve(const Matrix& g, const Matrix& r, double rel_tol) {
  const std::size_t n = g.rows();
  if (g.cols() != n) fail(ErrorKind::Shape, "sym_pinv_solve: g must be square, got " + g.shape_string());
  if (r.cols() != n) {
    fail(ErrorKind::Shape, "sym_pinv_solve: r " + r.shape_string() + " incompatible with g " +
                               g.shape_string());
  }
  const double gnorm = frobenius_norm(g);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(g(i, j) - g(j, i)) > 1e-12 * gnorm) {
        fail(ErrorKind::Contract, "sym_pinv_solve: g is not symmetric");
      }
    }
  }

  const SymmetricEigen eig = jacobi_eigen(g);
  SpectralSolveReport report;
  report.eigenvalues = eig.eigenvalues;
  const double lmax = eig.eigenvalues.front();
  const double cutoff = rel_tol * lmax;
  std::vector<std::size_t> kept;
  if (lmax > 0.0) {
    for (std::size_t k = 0; k < n; ++k) {
      if (eig.eigenvalues[k] >= cutoff && eig.eigenvalues[k] > 0.0) kept.push_back(k);
    }
  }
  report.effective_rank = kept.size();
  report.dropped = n - kept.size();
  if (kept.empty()) {
    fail(ErrorKind::RankZero, "sym_pinv_solve: every eigenvalue is below tolerance (rank zero)");
  }
  report.condition = lmax / eig.eigenvalues[kept.back()];

  // r · V_k · diag(1/λ_k) · V_kᵀ, restricted to the kept eigenpairs.
  const Matrix vk = eig.eigenvectors.select_columns(kept);
  Matrix proj = matmul(r, vk);
  for (std::size_t i = 0; i < proj.rows(); ++i)
    for (std::size_t k = 0; k < kept.size(); ++k) proj(i, k) /= eig.eigenvalues[kept[k]];
  return {matmul(proj, transpose(vk)), std::move(report)};
}

PivotedQr pivoted_qr(const Matrix& a, double rel_tol) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Matrix work = a;
  std::vector<std::size_t> perm(n);
  for (std::size_t j = 0; j < n; ++j) perm[j] = j;

  auto col_norm2 = [&](std::size_t j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += work(i, j) * work(i, j);
    return s;
  };
  double max_norm = 0.0;
  for (std::size_t j = 0; j < n; ++j) max_norm = std::max(max_norm, std::sqrt(col_norm2(j)));

  std::vector<std::vector<double>> qcols;
  std::vector<std::vector<double>> rrows;  // each row has n entries, pivoted column order
  const std::size_t kmax = std::min(m, n);
  for (std::size_t k = 0; k < kmax; ++k) {
    std::size_t best = k;
    double best_norm = -1.0;
    for (std::size_t j = k; j < n; ++j) {
      const double nj = col_norm2(j);
      if (nj > best_norm) {
        best_norm = nj;
        best = j;
      }
    }
    if (max_norm == 0.0 || std::sqrt(best_norm) <= rel_tol * max_norm) break;
    if (best != k) {
      for (std::size_t i = 0; i < m; ++i) std::swap(work(i, k), work(i, best));
      std::swap(perm[k], perm[best]);
      for (auto& row : rrows) std::swap(row[k], row[best]);
    }

    std::vector<double> q(m);
    for (std::size_t i = 0; i < m; ++i) q[i] = work(i, k);
    // Second Gram-Schmidt pass against earlier q's; corrections fold into R.
    for (std::size_t p = 0; p < qcols.size(); ++p) {
      double d = 0.0;
      for (std::size_t i = 0; i < m; ++i) d += qcols[p][i] * q[i];
      for (std::size_t i = 0; i < m; ++i) q[i] -= d * qcols[p][i];
      rrows[p][k] += d;
    }
    double nrm = 0.0;
    for (double x : q) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm <= rel_tol * max_norm) break;
    for (double& x : q) x /= nrm;

    std::vector<double> rrow(n, 0.0);
    rrow[k] = nrm;
    for (std::size_t j = k + 1; j < n; ++j) {
      double d = 0.0;
      for (std::size_t i = 0; i < m; ++i) d += q[i] * work(i, j);
      rrow[j] = d;
      for (std::size_t i = 0; i < m; ++i) work(i, j) -= d * q[i];
    }
    qcols.push_back(std::move(q));
    rrows.push_back(std::move(rrow));
  }

  PivotedQr out{Matrix(m, std::max<std::size_t>(qcols.size(), 1)),
                Matrix(std::max<std::size_t>(rrows.size(), 1), n), perm, qcols.size()};
  for (std::size_t k = 0; k < out.rank; ++k) {
    for (std::size_t i = 0; i < m; ++i) out.q(i, k) = qcols[k][i];
    for (std::size_t j = 0; j < n; ++j) out.r(k, j) = rrows[k][j];
  }
  return out;
}

Matrix qr_pinv(const Matrix& u, double rel_tol) {
  const std::size_t m = u.rows();
  const std::size_t n = u.cols();
  const PivotedQr qr = pivoted_qr(u, rel_tol);
  Matrix pinv(n, m);
  if (qr.rank == 0) return pinv;
  const std::size_t k = qr.rank;

  // u·Π = Q·R with R (k x n) of full row rank. A second QR of Rᵀ gives
  // Rᵀ = Z·L, so R⁺ = Z·L⁻ᵀ and u⁺ = Π·Z·L⁻ᵀ·Qᵀ.
  const PivotedQr second = pivoted_qr(transpose(qr.r), 0.0);
  // `second` pivots the k columns of Rᵀ; undo that permutation through L.
  const Matrix& z = second.q;  // n x k
  Matrix l(k, k);              // Rᵀ = Z · L with L's columns in original order
  for (std::size_t row = 0; row < second.rank; ++row)
    for (std::size_t c = 0; c < k; ++c) l(row, second.pivots[c]) = second.r(row, c);

  // Y = L⁻ᵀ Qᵀ: solve Lᵀ Y = Qᵀ. L = R2·Π2ᵀ is column-permuted upper
  // triangular, so Lᵀ = Π2·R2ᵀ and R2ᵀ is lower triangular.
  const std::size_t rank2 = second.rank;
  Matrix qt = transpose(qr.q);  // k x m
  // Π2ᵀ Qᵀ reorders rows: row c of the permuted system is row pivots[c].
  Matrix rhs(k, m);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < m; ++j) rhs(c, j) = qt(second.pivots[c], j);
  Matrix y(std::max<std::size_t>(rank2, 1), m);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < rank2; ++i) {
      double s = rhs(i, j);
      for (std::size_t p = 0; p < i; ++p) s -= second.r(p, i) * y(p, j);
      y(i, j) = s / second.r(i, i);
    }
  }
  const Matrix zy = matmul(z, y);  // n x m, rows in u's pivoted column order
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t j = 0; j < m; ++j) pinv(qr.pivots[c], j) = zy(c, j);
  return pinv;
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) fail(ErrorKind::Contract, "Rng::below: empty range");
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<std::size_t>(x % n);
}

Rng Rng::split() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

Matrix Rng::normal_matrix(std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (double& x : m.data()) x = stddev * normal();
  return m;
}

}  // namespace qf
