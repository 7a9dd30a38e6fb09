#include "wpca/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace wpca {

namespace detail {

bool all_finite(const double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

void gemm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double aik = ai[kk];
      if (aik == 0.0) continue;
      const double* bk = b + kk * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

Matrix gram_tt(const Matrix& a) {
  const std::int64_t r = a.rows, c = a.cols;
  Matrix t = transpose(a);
  Matrix g(c, c);
  for (std::int64_t i = 0; i < c; ++i) {
    const double* ti = t.data.data() + i * r;
    double* gi = g.data.data() + i * c;
    for (std::int64_t k = 0; k < r; ++k) {
      const double tik = ti[k];
      if (tik == 0.0) continue;
      const double* ak = a.data.data() + k * c;
      for (std::int64_t j = i; j < c; ++j) gi[j] += tik * ak[j];
    }
  }
  for (std::int64_t i = 0; i < c; ++i)
    for (std::int64_t j = 0; j < i; ++j) g.at(i, j) = g.at(j, i);
  return g;
}

Matrix gram_nn(const Matrix& a) { return gram_tt(transpose(a)); }

namespace {

double max_abs(const Matrix& m) {
  double v = 0.0;
  for (double x : m.data) v = std::max(v, std::abs(x));
  return v;
}

// Checks shape/finiteness/symmetry and returns the symmetrized copy.
std::vector<double> prepare_symmetric(const Matrix& c, const char* who) {
  if (c.rows != c.cols) throw shape_error(std::string(who) + ": matrix must be square");
  if (!all_finite(c.data.data(), c.data.size()))
    throw input_error(std::string(who) + ": non-finite entries");
  const std::int64_t n = c.rows;
  const double tol = 1e-9 * max_abs(c);
  std::vector<double> a(c.data);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      const double x = a[static_cast<std::size_t>(i * n + j)];
      const double y = a[static_cast<std::size_t>(j * n + i)];
      if (std::abs(x - y) > tol)
        throw input_error(std::string(who) + ": matrix is not symmetric within tolerance");
      const double m = 0.5 * (x + y);
      a[static_cast<std::size_t>(i * n + j)] = m;
      a[static_cast<std::size_t>(j * n + i)] = m;
    }
  }
  return a;
}

double frobenius(const std::vector<double>& a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

double offdiag_norm(const std::vector<double>& a, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t p = 0; p < n; ++p)
    for (std::int64_t q = p + 1; q < n; ++q) {
      const double v = a[static_cast<std::size_t>(p * n + q)];
      s += 2.0 * v * v;
    }
  return std::sqrt(s);
}

void sort_descending(std::vector<double>& vals, Matrix* vecs) {
  const std::int64_t n = static_cast<std::int64_t>(vals.size());
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t x, std::int64_t y) { return vals[static_cast<std::size_t>(x)] > vals[static_cast<std::size_t>(y)]; });
  std::vector<double> sorted(static_cast<std::size_t>(n));
  for (std::int64_t p = 0; p < n; ++p) sorted[static_cast<std::size_t>(p)] = vals[static_cast<std::size_t>(order[static_cast<std::size_t>(p)])];
  vals = std::move(sorted);
  if (vecs) {
    Matrix permuted(n, n);
    for (std::int64_t p = 0; p < n; ++p)
      for (std::int64_t i = 0; i < n; ++i) permuted.at(i, p) = vecs->at(i, order[static_cast<std::size_t>(p)]);
    *vecs = std::move(permuted);
  }
}

// Householder reduction of a symmetric matrix (row-major buffer, destroyed) to
// tridiagonal form; diagonal into d, subdiagonal into e[1..n-1]. Eigenvector
// accumulation is omitted, this feeds the values-only QL pass.
void tred1(std::vector<double>& a, std::int64_t n, std::vector<double>& d, std::vector<double>& e) {
  auto at = [&](std::int64_t i, std::int64_t j) -> double& { return a[static_cast<std::size_t>(i * n + j)]; };
  for (std::int64_t i = n - 1; i >= 1; --i) {
    const std::int64_t l = i - 1;
    double h = 0.0, scale = 0.0;
    if (l > 0) {
      for (std::int64_t k = 0; k <= l; ++k) scale += std::abs(at(i, k));
      if (scale == 0.0) {
        e[static_cast<std::size_t>(i)] = at(i, l);
      } else {
        for (std::int64_t k = 0; k <= l; ++k) {
          at(i, k) /= scale;
          h += at(i, k) * at(i, k);
        }
        double f = at(i, l);
        double g = (f >= 0.0 ? -std::sqrt(h) : std::sqrt(h));
        e[static_cast<std::size_t>(i)] = scale * g;
        h -= f * g;
        at(i, l) = f - g;
        f = 0.0;
        for (std::int64_t j = 0; j <= l; ++j) {
          g = 0.0;
          for (std::int64_t k = 0; k <= j; ++k) g += at(j, k) * at(i, k);
          for (std::int64_t k = j + 1; k <= l; ++k) g += at(k, j) * at(i, k);
          e[static_cast<std::size_t>(j)] = g / h;
          f += e[static_cast<std::size_t>(j)] * at(i, j);
        }
        const double hh = f / (h + h);
        for (std::int64_t j = 0; j <= l; ++j) {
          f = at(i, j);
          const double ej = e[static_cast<std::size_t>(j)] - hh * f;
          e[static_cast<std::size_t>(j)] = ej;
          for (std::int64_t k = 0; k <= j; ++k) at(j, k) -= (f * e[static_cast<std::size_t>(k)] + ej * at(i, k));
        }
      }
    } else {
      e[static_cast<std::size_t>(i)] = at(i, l);
    }
  }
  e[0] = 0.0;
  for (std::int64_t i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = at(i, i);
}

// Implicit-shift QL on a tridiagonal matrix; returns eigenvalues unsorted.
void tql1(std::vector<double>& d, std::vector<double>& e) {
  const std::int64_t n = static_cast<std::int64_t>(d.size());
  if (n <= 1) return;
  for (std::int64_t i = 1; i < n; ++i) e[static_cast<std::size_t>(i - 1)] = e[static_cast<std::size_t>(i)];
  e[static_cast<std::size_t>(n - 1)] = 0.0;
  for (std::int64_t l = 0; l < n; ++l) {
    int iter = 0;
    std::int64_t m;
    do {
      for (m = l; m < n - 1; ++m) {
        const double dd = std::abs(d[static_cast<std::size_t>(m)]) + std::abs(d[static_cast<std::size_t>(m + 1)]);
        if (std::abs(e[static_cast<std::size_t>(m)]) + dd == dd) break;
      }
      if (m != l) {
        if (iter++ == 60) throw numeric_error("sym_eigvals: QL iteration did not converge");
        double g = (d[static_cast<std::size_t>(l + 1)] - d[static_cast<std::size_t>(l)]) / (2.0 * e[static_cast<std::size_t>(l)]);
        double r = std::hypot(g, 1.0);
        g = d[static_cast<std::size_t>(m)] - d[static_cast<std::size_t>(l)] +
            e[static_cast<std::size_t>(l)] / (g + std::copysign(r, g));
        double s = 1.0, c = 1.0, p = 0.0;
        bool underflow = false;
        for (std::int64_t i = m - 1; i >= l; --i) {
          double f = s * e[static_cast<std::size_t>(i)];
          const double b = c * e[static_cast<std::size_t>(i)];
          r = std::hypot(f, g);
          e[static_cast<std::size_t>(i + 1)] = r;
          if (r == 0.0) {
            d[static_cast<std::size_t>(i + 1)] -= p;
            e[static_cast<std::size_t>(m)] = 0.0;
            underflow = true;
            break;
          }
          s = f / r;
          c = g / r;
          g = d[static_cast<std::size_t>(i + 1)] - p;
          r = (d[static_cast<std::size_t>(i)] - g) * s + 2.0 * c * b;
          p = s * r;
          d[static_cast<std::size_t>(i + 1)] = g + p;
          g = c * r - b;
        }
        if (underflow) continue;
        d[static_cast<std::size_t>(l)] -= p;
        e[static_cast<std::size_t>(l)] = g;
        e[static_cast<std::size_t>(m)] = 0.0;
      }
    } while (m != l);
  }
}

}  // namespace

}  // namespace detail

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    std::ostringstream os;
    os << "matmul: inner dimensions differ (" << a.rows << "x" << a.cols << " vs " << b.rows << "x" << b.cols << ")";
    throw shape_error(os.str());
  }
  Matrix c(a.rows, b.cols);
  detail::gemm_acc(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols);
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::int64_t i = 0; i < a.rows; ++i)
    for (std::int64_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

EigenResult sym_eig(const Matrix& c) {
  std::vector<double> a = detail::prepare_symmetric(c, "sym_eig");
  const std::int64_t n = c.rows;
  auto at = [&](std::int64_t i, std::int64_t j) -> double& { return a[static_cast<std::size_t>(i * n + j)]; };

  EigenResult res;
  res.vectors = Matrix::identity(n);
  if (n == 1) {
    res.values = {a[0]};
    return res;
  }

  const double fro = detail::frobenius(a);
  if (fro == 0.0) {
    res.values.assign(static_cast<std::size_t>(n), 0.0);
    return res;
  }
  const double stop = 1e-12 * fro;
  const double skip = stop / static_cast<double>(n);

  bool converged = false;
  for (int sweep = 0; sweep < 100; ++sweep) {
    if (detail::offdiag_norm(a, n) <= stop) {
      converged = true;
      break;
    }
    for (std::int64_t p = 0; p < n - 1; ++p) {
      for (std::int64_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (std::abs(apq) <= skip) continue;
        const double app = at(p, p);
        const double aqq = at(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        double t;
        if (std::abs(theta) > 1e150) {
          t = 0.5 / theta;
        } else {
          t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        }
        const double cos = 1.0 / std::sqrt(t * t + 1.0);
        const double sin = t * cos;
        const double tau = sin / (1.0 + cos);
        at(p, p) = app - t * apq;
        at(q, q) = aqq + t * apq;
        at(p, q) = 0.0;
        at(q, p) = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          if (i == p || i == q) continue;
          const double aip = at(i, p);
          const double aiq = at(i, q);
          const double np = aip - sin * (aiq + tau * aip);
          const double nq = aiq + sin * (aip - tau * aiq);
          at(i, p) = np;
          at(p, i) = np;
          at(i, q) = nq;
          at(q, i) = nq;
        }
        for (std::int64_t i = 0; i < n; ++i) {
          const double vip = res.vectors.at(i, p);
          const double viq = res.vectors.at(i, q);
          res.vectors.at(i, p) = vip - sin * (viq + tau * vip);
          res.vectors.at(i, q) = viq + sin * (vip - tau * viq);
        }
      }
    }
  }
  if (!converged && detail::offdiag_norm(a, n) > stop) {
    std::ostringstream os;
    os << "sym_eig: Jacobi sweeps exhausted, off-diagonal residual " << detail::offdiag_norm(a, n);
    throw numeric_error(os.str());
  }

  res.values.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) res.values[static_cast<std::size_t>(i)] = at(i, i);
  detail::sort_descending(res.values, &res.vectors);
  return res;
}

std::vector<double> sym_eigvals(const Matrix& c) {
  std::vector<double> a = detail::prepare_symmetric(c, "sym_eigvals");
  const std::int64_t n = c.rows;
  std::vector<double> d(static_cast<std::size_t>(n), 0.0);
  if (n == 1) return {a[0]};
  std::vector<double> e(static_cast<std::size_t>(n), 0.0);
  detail::tred1(a, n, d, e);
  detail::tql1(d, e);
  if (!detail::all_finite(d.data(), d.size())) throw numeric_error("sym_eigvals: non-finite eigenvalue");
  detail::sort_descending(d, nullptr);
  return d;
}

double nuclear_norm(const Matrix& w) {
  if (!detail::all_finite(w.data.data(), w.data.size())) throw input_error("nuclear_norm: non-finite entries");
  const Matrix g = (w.cols <= w.rows) ? detail::gram_tt(w) : detail::gram_nn(w);
  const std::vector<double> vals = sym_eigvals(g);
  double s = 0.0;
  for (double v : vals) s += std::sqrt(std::max(v, 0.0));
  return s;
}

double log_abs_det(Matrix a) {
  if (a.rows != a.cols) throw input_error("log_abs_det: matrix not square");
  if (!detail::all_finite(a.data.data(), a.data.size())) throw input_error("log_abs_det: non-finite entries");
  const std::int64_t n = a.rows;
  double acc = 0.0;
  for (std::int64_t k = 0; k < n; ++k) {
    std::int64_t pivot = k;
    for (std::int64_t i = k + 1; i < n; ++i)
      if (std::fabs(a.at(i, k)) > std::fabs(a.at(pivot, k))) pivot = i;
    const double pv = a.at(pivot, k);
    if (pv == 0.0) return -std::numeric_limits<double>::infinity();
    if (pivot != k)
      for (std::int64_t j = 0; j < n; ++j) std::swap(a.at(pivot, j), a.at(k, j));
    acc += std::log(std::fabs(pv));
    for (std::int64_t i = k + 1; i < n; ++i) {
      const double f = a.at(i, k) / pv;
      if (f == 0.0) continue;
      for (std::int64_t j = k + 1; j < n; ++j) a.at(i, j) -= f * a.at(k, j);
    }
  }
  return acc;
}

}  // namespace wpca
