// SPDX-License-Identifier: Apache-2.0
#include "palu/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "palu/error.hpp"
#include "palu/random.hpp"

namespace palu {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void rotate(std::span<double> p, std::span<double> q, double c, double s) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double xp = p[i];
    const double xq = q[i];
    p[i] = c * xp - s * xq;
    q[i] = s * xp + c * xq;
  }
}

// Removes the components of `v` along the first `count` rows of `basis`.
void project_out(std::span<double> v, const Matrix& basis, std::size_t count) {
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t j = 0; j < count; ++j) {
      const auto b = basis.row(j);
      const double c = dot(v, b);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * b[i];
    }
  }
}

// SVD for rows >= cols. Columns of the input are held as rows of `work` so
// rotations touch contiguous memory.
SvdResult jacobi_tall(const Matrix& m, const SvdOptions& options) {
  const std::size_t rows = m.rows();
  const std::size_t cols = m.cols();
  Matrix work = transpose(m);
  Matrix v = Matrix::identity(cols);  // row j holds column j of V

  bool converged = cols < 2;
  int sweep = 0;
  for (; sweep < options.max_sweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        auto cp = work.row(p);
        auto cq = work.row(q);
        const double alpha = dot(cp, cp);
        const double beta = dot(cq, cq);
        const double gamma = dot(cp, cq);
        if (alpha < 1e-300 || beta < 1e-300) continue;
        if (std::abs(gamma) <= options.tolerance * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(cp, cq, c, s);
        rotate(v.row(p), v.row(q), c, s);
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    fail_numerical("svd did not converge after " + std::to_string(sweep) + " Jacobi sweeps");
  }

  std::vector<double> norms(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    const auto c = work.row(j);
    norms[j] = std::sqrt(dot(c, c));
  }
  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

  const double cutoff = (cols > 0 ? norms[order.front()] : 0.0) * 1e-12;
  Matrix ut(cols, rows);  // row j holds left singular vector j
  SvdResult out;
  out.singular_values.resize(cols);
  out.vt = Matrix(cols, cols);
  std::size_t next_basis = 0;
  for (std::size_t k = 0; k < cols; ++k) {
    const std::size_t j = order[k];
    out.singular_values[k] = norms[j];
    std::copy(v.row(j).begin(), v.row(j).end(), out.vt.row(k).begin());
    auto u = ut.row(k);
    if (norms[j] > cutoff && norms[j] > 0.0) {
      const auto c = work.row(j);
      for (std::size_t i = 0; i < rows; ++i) u[i] = c[i] / norms[j];
      project_out(u, ut, k);
    } else {
      // Null direction: complete the basis from unit vectors.
      double len = 0.0;
      while (len < 0.5 && next_basis < rows) {
        std::fill(u.begin(), u.end(), 0.0);
        u[next_basis++] = 1.0;
        project_out(u, ut, k);
        len = std::sqrt(dot(u, u));
      }
    }
    const double len = std::sqrt(dot(u, u));
    for (double& x : u) x /= len;
  }

  for (std::size_t k = 0; k < cols; ++k) {
    auto u = ut.row(k);
    std::size_t best = 0;
    for (std::size_t i = 1; i < rows; ++i)
      if (std::abs(u[i]) > std::abs(u[best])) best = i;
    if (u[best] < 0.0) {
      for (double& x : u) x = -x;
      for (double& x : out.vt.row(k)) x = -x;
    }
  }
  out.u = transpose(ut);
  return out;
}

}  // namespace

SvdResult svd(const Matrix& m, const SvdOptions& options) {
  if (m.empty()) fail_validation("svd of an empty matrix");
  m.require_finite("svd input");
  if (m.rows() >= m.cols()) return jacobi_tall(m, options);

  // Wide input: factor the transpose, then swap roles.
  SvdResult t = jacobi_tall(transpose(m), options);
  SvdResult out;
  out.u = transpose(t.vt);
  out.singular_values = std::move(t.singular_values);
  out.vt = transpose(t.u);
  const std::size_t k = out.singular_values.size();
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.u.rows(); ++i)
      if (std::abs(out.u(i, j)) > std::abs(out.u(best, j))) best = i;
    if (out.u(best, j) < 0.0) {
      for (std::size_t i = 0; i < out.u.rows(); ++i) out.u(i, j) = -out.u(i, j);
      for (double& x : out.vt.row(j)) x = -x;
    }
  }
  return out;
}

Matrix cholesky(const Matrix& g, double jitter) {
  const std::size_t n = g.rows();
  if (n != g.cols()) fail_validation("cholesky needs a square matrix, got " + g.shape_string());
  double scale_ref = 0.0;
  for (double x : g.data()) scale_ref = std::max(scale_ref, std::abs(x));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(g(i, j) - g(j, i)) > 1e-10 * std::max(1.0, scale_ref))
        fail_validation("cholesky input is not symmetric at (" + std::to_string(i) + ", " +
                        std::to_string(j) + ")");

  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = g(j, j) + jitter;
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      fail_numerical("matrix is not positive definite at pivot " + std::to_string(j) +
                     " with jitter " + std::to_string(jitter) + "; retry with a larger jitter");
    }
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = g(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Matrix solve_upper(const Matrix& upper, const Matrix& rhs) {
  const std::size_t n = upper.rows();
  if (upper.cols() != n || rhs.rows() != n) {
    fail_validation("solve_upper shape mismatch: " + upper.shape_string() + " vs " +
                    rhs.shape_string());
  }
  Matrix x = rhs;
  for (std::size_t ii = n; ii-- > 0;) {
    auto xi = x.row(ii);
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double u = upper(ii, k);
      const auto xk = x.row(k);
      for (std::size_t c = 0; c < xi.size(); ++c) xi[c] -= u * xk[c];
    }
    const double d = upper(ii, ii);
    if (d == 0.0) fail_numerical("singular triangular system at row " + std::to_string(ii));
    for (double& v : xi) v /= d;
  }
  return x;
}

Matrix solve_lower(const Matrix& lower, const Matrix& rhs) {
  const std::size_t n = lower.rows();
  if (lower.cols() != n || rhs.rows() != n) {
    fail_validation("solve_lower shape mismatch: " + lower.shape_string() + " vs " +
                    rhs.shape_string());
  }
  Matrix x = rhs;
  for (std::size_t i = 0; i < n; ++i) {
    auto xi = x.row(i);
    for (std::size_t k = 0; k < i; ++k) {
      const double l = lower(i, k);
      const auto xk = x.row(k);
      for (std::size_t c = 0; c < xi.size(); ++c) xi[c] -= l * xk[c];
    }
    const double d = lower(i, i);
    if (d == 0.0) fail_numerical("singular triangular system at row " + std::to_string(i));
    for (double& v : xi) v /= d;
  }
  return x;
}

namespace {

Matrix sylvester(std::size_t dim) {
  Matrix h(1, 1, 1.0);
  while (h.rows() < dim) {
    const std::size_t n = h.rows();
    Matrix next(2 * n, 2 * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        next(i, j) = h(i, j);
        next(i, j + n) = h(i, j);
        next(i + n, j) = h(i, j);
        next(i + n, j + n) = -h(i, j);
      }
    h = std::move(next);
  }
  return scale(h, 1.0 / std::sqrt(static_cast<double>(dim)));
}

}  // namespace

Matrix hadamard(int dim) {
  if (dim <= 0) fail_validation("hadamard dimension must be positive, got " + std::to_string(dim));
  std::vector<Matrix> blocks;
  for (int bit = 30; bit >= 0; --bit) {
    const int block = 1 << bit;
    if (dim & block) blocks.push_back(sylvester(static_cast<std::size_t>(block)));
  }
  if (blocks.size() == 1) return std::move(blocks.front());
  return block_diagonal(blocks);
}

Matrix random_orthonormal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (cols > rows) fail_validation("random_orthonormal needs rows >= cols");
  const CounterRng rng(seed, 0x0b5e55edULL);
  Matrix q(cols, rows);  // row j is column j of the result
  for (std::size_t j = 0; j < cols; ++j) {
    auto v = q.row(j);
    for (std::size_t i = 0; i < rows; ++i) v[i] = rng.normal(j, i);
    project_out(v, q, j);
    const double len = std::sqrt(dot(v, v));
    for (double& x : v) x /= len;
  }
  return transpose(q);
}

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                     std::optional<double> spectrum_decay) {
  if (rows == 0 || cols == 0) fail_validation("random_matrix needs positive dimensions");
  if (!spectrum_decay) {
    const CounterRng rng(seed);
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) m(i, j) = rng.normal(i, j);
    return m;
  }
  const double gamma = *spectrum_decay;
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    fail_validation("spectrum decay must lie in (0, 1], got " + std::to_string(gamma));
  }
  const std::size_t k = std::min(rows, cols);
  Matrix u = random_orthonormal(rows, k, CounterRng::mix(seed ^ 0x5157ULL));
  const Matrix v = random_orthonormal(cols, k, CounterRng::mix(seed ^ 0x7a11ULL));
  double sigma = 1.0;
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < rows; ++i) u(i, j) *= sigma;
    sigma *= gamma;
  }
  return matmul(u, transpose(v));
}

}  // namespace palu
