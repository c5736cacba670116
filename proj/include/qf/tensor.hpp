#pragma once

// Dense 64-bit linear algebra used by the closed-form solver and its oracle.
//
// Matrices are row-major with explicit dimensions; nothing broadcasts. All
// free functions are pure: identical inputs give bit-identical outputs.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qf/errors.hpp"

namespace qf {

// Storage aligned to the widest SIMD register. Vectorised kernels split a
// buffer into an unaligned head and an aligned body, so with plain malloc
// alignment the summation order, and therefore the rounding, would depend on
// where the heap happened to place each matrix.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

class Matrix {
 public:
  /// Zero-filled rows x cols matrix. Both dimensions must be positive.
  Matrix(std::size_t rows, std::size_t cols);
  /// Takes ownership of row-major data; rejects wrong lengths and non-finite entries.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  Matrix column(std::size_t c) const;
  /// Keeps the listed columns in the given order.
  Matrix select_columns(std::span<const std::size_t> cols) const;

  std::string shape_string() const;

  /// Bitwise comparison of shape and every entry.
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double, AlignedAllocator<double>> data_;
};

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
/// uᵀu, filled symmetrically so the result is exactly symmetric.
Matrix gram(const Matrix& u);
double frobenius_norm(const Matrix& a);
/// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& a);

struct SymmetricEigen {
  std::vector<double> eigenvalues;  // descending
  Matrix eigenvectors;              // column k pairs with eigenvalues[k]
};

/// Cyclic Jacobi rotation sweeps; `a` must be square and symmetric.
SymmetricEigen jacobi_eigen(const Matrix& a);

struct SpectralSolveReport {
  std::vector<double> eigenvalues;  // descending, all of them
  std::size_t effective_rank = 0;
  double condition = 0.0;  // largest / smallest kept eigenvalue
  std::size_t dropped = 0;
};

struct SpectralSolve {
  Matrix solution;
  SpectralSolveReport report;
};

inline constexpr double kDefaultRelTol = 1e-10;

/// X = r · g⁺ with g⁺ the eigendecomposition pseudo-inverse of the symmetric
/// matrix g. Eigenvalues below rel_tol · λ_max are discarded.
SpectralSolve sym_pinv_solve(const Matrix& g, const Matrix& r, double rel_tol = kDefaultRelTol);

struct PivotedQr {
  Matrix q;                          // m x rank, orthonormal columns
  Matrix r;                          // rank x n, upper trapezoidal in pivoted order
  std::vector<std::size_t> pivots;   // pivoted column k is original column pivots[k]
  std::size_t rank = 0;
};

/// Modified Gram-Schmidt with column pivoting and one re-orthogonalisation
/// pass. Stops once the largest remaining column norm drops below
/// rel_tol times the largest original column norm.
PivotedQr pivoted_qr(const Matrix& a, double rel_tol = kDefaultRelTol);

/// Moore-Penrose pseudo-inverse through pivoted QR followed by a second QR of
/// the trapezoidal factor (complete orthogonal decomposition). Shares no
/// solve logic with sym_pinv_solve.
Matrix qr_pinv(const Matrix& u, double rel_tol = kDefaultRelTol);

/// Deterministic generator: mt19937_64 bit stream with hand-rolled uniform
/// and Box-Muller normal draws, so streams do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  /// Independent child stream seeded from this one.
  Rng split();

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Rng seeded_rng(std::uint64_t seed) { return Rng(seed); }

}  // namespace qf
