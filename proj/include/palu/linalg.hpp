// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "palu/matrix.hpp"

namespace palu {

struct SvdResult {
  Matrix u;                            // m x k, orthonormal columns
  std::vector<double> singular_values; // non-increasing, length k
  Matrix vt;                           // k x n, orthonormal rows
};

struct SvdOptions {
  int max_sweeps = 60;
  double tolerance = 1e-12;
};

/// Thin SVD with k = min(rows, cols) by one-sided Jacobi rotations.
///
/// Sign convention: the largest-magnitude entry of every left singular vector
/// is non-negative, which makes the factorization reproducible byte for byte.
/// Throws a numerical Error if the sweep cap is reached before every pairwise
/// column cosine falls below the tolerance.
SvdResult svd(const Matrix& m, const SvdOptions& options = {});

/// Lower-triangular L with L * L^T = g + jitter * I.
Matrix cholesky(const Matrix& g, double jitter = 0.0);

/// Solves U * X = B for upper-triangular U.
Matrix solve_upper(const Matrix& upper, const Matrix& rhs);
/// Solves L * X = B for lower-triangular L.
Matrix solve_lower(const Matrix& lower, const Matrix& rhs);

/// Orthonormal Walsh-Hadamard rotation. Powers of two give the Sylvester
/// matrix scaled by 1/sqrt(dim); other sizes are block-diagonal over the
/// binary decomposition of dim, largest block first (12 -> H8 (+) H4).
Matrix hadamard(int dim);

/// Seeded matrix. Without a decay parameter entries are i.i.d. standard
/// normal. With decay gamma in (0, 1] the result is U diag(1, gamma, gamma^2,
/// ...) V^T for seeded orthonormal U, V, so the spectrum is exactly geometric.
Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                     std::optional<double> spectrum_decay = std::nullopt);

/// Seeded matrix with orthonormal columns (rows >= cols).
Matrix random_orthonormal(std::size_t rows, std::size_t cols, std::uint64_t seed);

}  // namespace palu
