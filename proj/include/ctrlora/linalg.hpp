// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "ctrlora/errors.hpp"
#include "ctrlora/matrix.hpp"
#include "ctrlora/rng.hpp"

namespace ctrlora {

/// Symmetric positive-definite matrix (positive after damping, in practice).
/// Construction through from_matrix verifies symmetry; the raw constructor
/// trusts the caller and symmetrizes exactly.
class SpdMatrix {
public:
    SpdMatrix() = default;

    explicit SpdMatrix(Matrix m) : dim_(m.rows()), data_(std::move(m)) {}

    static SpdMatrix from_matrix(const Matrix& m, double rel_tol = 1e-12) {
        if (m.rows() != m.cols()) {
            throw DimensionError("SpdMatrix: not square, " + m.shape_str());
        }
        const double scale = std::max(max_abs(m), 1e-300);
        double worst = 0.0;
        for (std::size_t i = 0; i < m.rows(); ++i) {
            for (std::size_t j = i + 1; j < m.cols(); ++j) {
                worst = std::max(worst, std::abs(m(i, j) - m(j, i)));
            }
        }
        if (worst > rel_tol * scale) {
            throw SymmetryError("SpdMatrix: asymmetry " + std::to_string(worst) +
                                " exceeds tolerance at scale " + std::to_string(scale));
        }
        // Symmetrize exactly so downstream algebra sees a true symmetric matrix.
        Matrix sym(m.rows(), m.cols());
        for (std::size_t i = 0; i < m.rows(); ++i) {
            for (std::size_t j = 0; j < m.cols(); ++j) {
                sym(i, j) = 0.5 * (m(i, j) + m(j, i));
            }
        }
        return SpdMatrix(std::move(sym));
    }

    static SpdMatrix identity(std::size_t n) { return SpdMatrix(Matrix::identity(n)); }

    static SpdMatrix diag(const std::vector<double>& entries) {
        return SpdMatrix(Matrix::diag(entries));
    }

    std::size_t dim() const { return dim_; }
    double operator()(std::size_t i, std::size_t j) const { return data_(i, j); }
    const Matrix& to_matrix() const { return data_; }

    double mean_diagonal() const {
        if (dim_ == 0) {
            return 0.0;
        }
        double acc = 0.0;
        for (std::size_t i = 0; i < dim_; ++i) {
            acc += data_(i, i);
        }
        return acc / static_cast<double>(dim_);
    }

    void add_to_diagonal(double delta) {
        for (std::size_t i = 0; i < dim_; ++i) {
            data_(i, i) += delta;
        }
    }

private:
    std::size_t dim_ = 0;
    Matrix data_;
};

struct EighResult {
    std::vector<double> eigenvalues;  // descending
    Matrix eigenvectors;              // columns, orthonormal
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Deterministic,
/// accurate for the dense sizes used here. Converges when the off-diagonal
/// Frobenius mass drops below 1e-12 of the diagonal mass.
inline EighResult eigh_spd(const SpdMatrix& m) {
    const std::size_t n = m.dim();
    Matrix a = m.to_matrix();
    Matrix v = Matrix::identity(n);
    if (n <= 1) {
        return {std::vector<double>(a.data().begin(), a.data().end()), v};
    }

    auto off_mass = [&]() {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                acc += 2.0 * a(i, j) * a(i, j);
            }
        }
        return std::sqrt(acc);
    };
    auto diag_mass = [&]() {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            acc += a(i, i) * a(i, i);
        }
        return std::sqrt(acc);
    };

    constexpr int kMaxSweeps = 100;
    int sweep = 0;
    for (; sweep < kMaxSweeps; ++sweep) {
        const double threshold = 1e-12 * std::max(diag_mass(), 1e-300);
        if (off_mass() <= threshold) {
            break;
        }
        for (std::size_t p = 0; p < n - 1; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) {
                    continue;
                }
                const double app = a(p, p);
                const double aqq = a(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                double t;
                if (std::abs(theta) > 1e153) {
                    t = 1.0 / (2.0 * theta);
                } else {
                    t = 1.0 / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                    if (theta < 0.0) {
                        t = -t;
                    }
                }
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                a(p, p) = app - t * apq;
                a(q, q) = aqq + t * apq;
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (i == p || i == q) {
                        continue;
                    }
                    const double aip = a(i, p);
                    const double aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(p, i) = a(i, p);
                    a(i, q) = s * aip + c * aiq;
                    a(q, i) = a(i, q);
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = v(i, p);
                    const double viq = v(i, q);
                    v(i, p) = c * vip - s * viq;
                    v(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    if (sweep == kMaxSweeps) {
        throw NumericError("eigh_spd: Jacobi iteration failed to converge");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

    EighResult result;
    result.eigenvalues.resize(n);
    result.eigenvectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t src = order[k];
        result.eigenvalues[k] = a(src, src);
        // Deterministic sign: make the largest-magnitude component positive.
        std::size_t pivot = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double mag = std::abs(v(i, src));
            if (mag > best) {
                best = mag;
                pivot = i;
            }
        }
        const double sign = v(pivot, src) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            result.eigenvectors(i, k) = sign * v(i, src);
        }
    }
    return result;
}

/// (m + damping I)^{-1/2} via eigendecomposition.
inline Matrix inv_sqrt_spd(const SpdMatrix& m, double damping) {
    EighResult eig = eigh_spd(m);
    const std::size_t n = m.dim();
    std::vector<double> inv_roots(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double lam = eig.eigenvalues[i] + damping;
        if (lam <= 0.0) {
            throw SingularMetricError("inv_sqrt_spd: eigenvalue " + std::to_string(lam) +
                                      " is not positive after damping " +
                                      std::to_string(damping));
        }
        inv_roots[i] = 1.0 / std::sqrt(lam);
    }
    // V diag(1/sqrt(lambda)) V^T
    Matrix scaled = eig.eigenvectors;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
            scaled(i, k) *= inv_roots[k];
        }
    }
    return matmul_nt(scaled, eig.eigenvectors);
}

/// Thin Q factor of a Householder QR. Input m x n with m >= n; returns Q with
/// n orthonormal columns spanning range(A).
inline Matrix thin_qr_q(const Matrix& input) {
    const std::size_t m = input.rows();
    const std::size_t n = input.cols();
    if (m < n) {
        throw DimensionError("thin_qr_q: requires rows >= cols, got " + input.shape_str());
    }
    Matrix a = input;
    std::vector<std::vector<double>> vs(n);
    std::vector<double> betas(n, 0.0);

    for (std::size_t k = 0; k < n; ++k) {
        std::vector<double> x(m - k);
        for (std::size_t i = k; i < m; ++i) {
            x[i - k] = a(i, k);
        }
        double xnorm = norm(x);
        std::vector<double>& vk = vs[k];
        vk = x;
        if (xnorm == 0.0) {
            betas[k] = 0.0;
            vk.assign(m - k, 0.0);
            continue;
        }
        const double alpha = x[0] >= 0.0 ? -xnorm : xnorm;
        vk[0] -= alpha;
        const double vnorm_sq = dot(vk, vk);
        betas[k] = vnorm_sq > 0.0 ? 2.0 / vnorm_sq : 0.0;
        a(k, k) = alpha;
        for (std::size_t i = k + 1; i < m; ++i) {
            a(i, k) = 0.0;
        }
        for (std::size_t j = k + 1; j < n; ++j) {
            double proj = 0.0;
            for (std::size_t i = k; i < m; ++i) {
                proj += vk[i - k] * a(i, j);
            }
            proj *= betas[k];
            for (std::size_t i = k; i < m; ++i) {
                a(i, j) -= proj * vk[i - k];
            }
        }
    }

    // Accumulate Q = H_0 ... H_{n-1} E_n by applying reflectors in reverse.
    Matrix q(m, n);
    for (std::size_t j = 0; j < n; ++j) {
        q(j, j) = 1.0;
    }
    for (std::size_t k = n; k-- > 0;) {
        if (betas[k] == 0.0) {
            continue;
        }
        const std::vector<double>& vk = vs[k];
        for (std::size_t j = 0; j < n; ++j) {
            double proj = 0.0;
            for (std::size_t i = k; i < m; ++i) {
                proj += vk[i - k] * q(i, j);
            }
            proj *= betas[k];
            for (std::size_t i = k; i < m; ++i) {
                q(i, j) -= proj * vk[i - k];
            }
        }
    }
    return q;
}

/// Random matrix with orthonormal columns.
inline Matrix random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng) {
    if (rows < cols) {
        throw DimensionError("random_orthonormal: rows < cols");
    }
    return thin_qr_q(Matrix::gaussian(rows, cols, 1.0, rng));
}

struct SvdResult {
    Matrix u;                            // d_out x k
    std::vector<double> singular_values; // descending, nonnegative
    Matrix v;                            // d_in x k
};

namespace detail {

/// Complete column `col` of u with a unit vector orthogonal to columns [0, col).
/// Used when a singular value is numerically zero and X v / sigma is undefined.
inline void fill_orthogonal_column(Matrix& u, std::size_t col) {
    const std::size_t m = u.rows();
    for (std::size_t trial = 0; trial < m; ++trial) {
        std::vector<double> cand(m, 0.0);
        cand[trial] = 1.0;
        for (std::size_t j = 0; j < col; ++j) {
            double proj = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                proj += u(i, j) * cand[i];
            }
            for (std::size_t i = 0; i < m; ++i) {
                cand[i] -= proj * u(i, j);
            }
        }
        const double cnorm = norm(cand);
        if (cnorm > 1e-6) {
            for (std::size_t i = 0; i < m; ++i) {
                u(i, col) = cand[i] / cnorm;
            }
            return;
        }
    }
    throw NumericError("exact_svd: failed to complete orthonormal basis");
}

inline SvdResult exact_svd_tall(const Matrix& x, std::size_t k) {
    // rows >= cols here; eigendecompose the small Gram matrix X^T X.
    const std::size_t n = x.cols();
    EighResult eig = eigh_spd(SpdMatrix(matmul_tn(x, x)));
    SvdResult out;
    out.u = Matrix(x.rows(), k);
    out.v = Matrix(n, k);
    out.singular_values.resize(k);
    const double top = std::sqrt(std::max(eig.eigenvalues[0], 0.0));
    for (std::size_t i = 0; i < k; ++i) {
        const double sigma = std::sqrt(std::max(eig.eigenvalues[i], 0.0));
        out.singular_values[i] = sigma;
        std::vector<double> vi(n);
        for (std::size_t r = 0; r < n; ++r) {
            vi[r] = eig.eigenvectors(r, i);
        }
        for (std::size_t r = 0; r < n; ++r) {
            out.v(r, i) = vi[r];
        }
        if (sigma > 1e-13 * std::max(top, 1.0)) {
            std::vector<double> ui = mat_vec(x, vi);
            for (std::size_t r = 0; r < x.rows(); ++r) {
                out.u(r, i) = ui[r] / sigma;
            }
        } else {
            out.singular_values[i] = sigma;
            fill_orthogonal_column(out.u, i);
        }
    }
    return out;
}

}  // namespace detail

/// Exact dense SVD (top-k), computed through the Gram matrix on the smaller
/// side. Serves as the small-dimension path and as the reference the
/// randomized route is checked against.
inline SvdResult exact_svd(const Matrix& x, std::size_t k) {
    if (k > std::min(x.rows(), x.cols())) {
        throw DimensionError("exact_svd: k exceeds min dimension");
    }
    if (k == 0) {
        return {Matrix(x.rows(), 0), {}, Matrix(x.cols(), 0)};
    }
    if (x.rows() >= x.cols()) {
        return detail::exact_svd_tall(x, k);
    }
    SvdResult t = detail::exact_svd_tall(transpose(x), k);
    return {std::move(t.v), std::move(t.singular_values), std::move(t.u)};
}

struct SvdParams {
    std::size_t oversample = 8;
    std::size_t power_iters = 2;
};

/// Randomized top-k SVD, Halko range-finder scheme: Gaussian test matrix of
/// width k + oversample, subspace iterations with re-orthonormalization, then
/// an exact SVD of the projected small matrix. Deterministic given the rng.
inline SvdResult randomized_svd(const Matrix& x, std::size_t k, std::size_t oversample,
                                std::size_t power_iters, Rng& rng) {
    const std::size_t min_dim = std::min(x.rows(), x.cols());
    if (k > min_dim) {
        throw DimensionError("randomized_svd: k=" + std::to_string(k) +
                             " exceeds min dimension " + std::to_string(min_dim));
    }
    if (k == 0) {
        return {Matrix(x.rows(), 0), {}, Matrix(x.cols(), 0)};
    }
    const std::size_t width = std::min(k + oversample, min_dim);

    Matrix omega = Matrix::gaussian(x.cols(), width, 1.0, rng);
    Matrix q = thin_qr_q(matmul(x, omega));
    for (std::size_t iter = 0; iter < power_iters; ++iter) {
        Matrix z = thin_qr_q(matmul_tn(x, q));
        q = thin_qr_q(matmul(x, z));
    }

    Matrix b = matmul_tn(q, x);  // width x cols
    SvdResult small = exact_svd(b, k);
    SvdResult out;
    out.u = matmul(q, small.u);
    out.singular_values = std::move(small.singular_values);
    out.v = std::move(small.v);
    return out;
}

inline SvdResult randomized_svd(const Matrix& x, std::size_t k, const SvdParams& params,
                                Rng& rng) {
    return randomized_svd(x, k, params.oversample, params.power_iters, rng);
}

/// trace(x^T L x R): the quadratic form <x, M x> for the Kronecker-structured
/// metric M = R (x) L, without materializing the Kronecker product.
inline double kron_quadratic_form(const SpdMatrix& l_factor, const SpdMatrix& r_factor,
                                  const Matrix& x) {
    if (l_factor.dim() != x.rows() || r_factor.dim() != x.cols()) {
        throw DimensionError("kron_quadratic_form: factors " +
                             std::to_string(l_factor.dim()) + "/" +
                             std::to_string(r_factor.dim()) + " vs x " + x.shape_str());
    }
    const Matrix lx = matmul(l_factor.to_matrix(), x);
    const Matrix xr = matmul(x, r_factor.to_matrix());
    double value = frob_inner(lx, xr);
    if (value < 0.0) {
        value = 0.0;  // SPD form; tiny negatives are rounding
    }
    return value;
}

}  // namespace ctrlora
