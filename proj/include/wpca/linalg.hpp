#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wpca/errors.hpp"

namespace wpca {

// Dense row-major matrix of doubles.
struct Matrix {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::int64_t r, std::int64_t c) : rows(r), cols(c) {
    if (r <= 0 || c <= 0) throw shape_error("matrix: dimensions must be positive");
    data.assign(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0);
  }
  Matrix(std::int64_t r, std::int64_t c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
    if (r <= 0 || c <= 0) throw shape_error("matrix: dimensions must be positive");
    if (data.size() != static_cast<std::size_t>(r) * static_cast<std::size_t>(c))
      throw shape_error("matrix: buffer length " + std::to_string(data.size()) + " != " + std::to_string(r) +
                        "x" + std::to_string(c));
  }

  static Matrix identity(std::int64_t n) {
    Matrix m(n, n);
    for (std::int64_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }

  double at(std::int64_t i, std::int64_t j) const { return data[static_cast<std::size_t>(i * cols + j)]; }
  double& at(std::int64_t i, std::int64_t j) { return data[static_cast<std::size_t>(i * cols + j)]; }
};

// c = a * b. Throws shape_error on inner-dimension mismatch. Each output
// element is accumulated over k in ascending order, so results are
// reproducible bit-for-bit across runs.
Matrix matmul(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);

// Eigenvalues in descending order; vectors.at(i, p) is component i of the unit
// eigenvector paired with values[p].
struct EigenResult {
  std::vector<double> values;
  Matrix vectors;
};

// Full symmetric eigendecomposition by cyclic Jacobi rotations. The input must
// be square and symmetric within a small tolerance (it is symmetrized as
// (c + c^T)/2 internally). Sweeps stop when the off-diagonal Frobenius norm
// falls below 1e-12 * ||c||_F; rotations with |a_pq| <= threshold/n are
// skipped. More than 100 sweeps raises numeric_error.
EigenResult sym_eig(const Matrix& c);

// Eigenvalues only, descending. Householder tridiagonalization followed by
// implicit-shift QL; O(n^3) with a much smaller constant than Jacobi, used by
// the scoring hot path. Same input contract as sym_eig.
std::vector<double> sym_eigvals(const Matrix& c);

// Sum of singular values, computed as sum of sqrt of eigenvalues of the
// smaller-side Gram matrix (clamping small negatives to zero).
double nuclear_norm(const Matrix& w);

// log|det a| for a square matrix via partially pivoted LU; returns -infinity
// for a singular matrix. Throws input_error for non-finite entries.
double log_abs_det(Matrix a);

namespace detail {

// c += a * b on raw row-major buffers: a is m x k, b is k x n, c is m x n.
// Loop order i-k-j: the inner loop runs along contiguous rows of b and c.
void gemm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n);

// a^T * a for a row-major r x c buffer; computes the upper triangle and
// mirrors it, so the result is exactly symmetric.
Matrix gram_tt(const Matrix& a);

// a * a^T.
Matrix gram_nn(const Matrix& a);

bool all_finite(const double* p, std::size_t n);

}  // namespace detail

}  // namespace wpca
