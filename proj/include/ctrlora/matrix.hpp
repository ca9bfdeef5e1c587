// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ctrlora/errors.hpp"
#include "ctrlora/rng.hpp"

namespace ctrlora {

/// Dense row-major matrix of 64-bit floats. All core arithmetic in the
/// engine runs through this type; no lower precision anywhere.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    static Matrix diag(const std::vector<double>& entries) {
        Matrix m(entries.size(), entries.size());
        for (std::size_t i = 0; i < entries.size(); ++i) {
            m(i, i) = entries[i];
        }
        return m;
    }

    static Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
        Matrix m(rows, cols);
        for (double& x : m.data_) {
            x = stddev * rng.normal();
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* row(std::size_t i) { return data_.data() + i * cols_; }
    const double* row(std::size_t i) const { return data_.data() + i * cols_; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool all_finite() const {
        for (double x : data_) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
        return true;
    }

    void fill(double value) {
        for (double& x : data_) {
            x = value;
        }
    }

    Matrix& operator+=(const Matrix& other) {
        require_same_shape(other, "operator+=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += other.data_[i];
        }
        return *this;
    }

    Matrix& operator-=(const Matrix& other) {
        require_same_shape(other, "operator-=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] -= other.data_[i];
        }
        return *this;
    }

    Matrix& operator*=(double s) {
        for (double& x : data_) {
            x *= s;
        }
        return *this;
    }

    /// this += alpha * other
    void add_scaled(double alpha, const Matrix& other) {
        require_same_shape(other, "add_scaled");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += alpha * other.data_[i];
        }
    }

    void require_same_shape(const Matrix& other, const std::string& op) const {
        if (!same_shape(other)) {
            throw DimensionError(op + ": shape mismatch " + shape_str() + " vs " +
                                 other.shape_str());
        }
    }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

/// C = A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: " + a.shape_str() + " * " + b.shape_str());
    }
    Matrix c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.row(i);
        const double* ai = a.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = ai[k];
            if (aik == 0.0) {
                continue;
            }
            const double* bk = b.row(k);
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += aik * bk[j];
            }
        }
    }
    return c;
}

/// C = A * B^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: " + a.shape_str() + " * " + b.shape_str() + "^T");
    }
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* bj = b.row(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) {
                acc += ai[k] * bj[k];
            }
            ci[j] = acc;
        }
    }
    return c;
}

/// C = A^T * B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: " + a.shape_str() + "^T * " + b.shape_str());
    }
    Matrix c(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* ak = a.row(k);
        const double* bk = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = ak[i];
            if (aki == 0.0) {
                continue;
            }
            double* ci = c.row(i);
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += aki * bk[j];
            }
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            t(j, i) = a(i, j);
        }
    }
    return t;
}

inline double frob_inner(const Matrix& a, const Matrix& b) {
    a.require_same_shape(b, "frob_inner");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a.data()[i] * b.data()[i];
    }
    return acc;
}

inline double frob_norm_sq(const Matrix& a) { return frob_inner(a, a); }

inline double frob_norm(const Matrix& a) { return std::sqrt(frob_norm_sq(a)); }

inline double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double x : a.data()) {
        m = std::max(m, std::abs(x));
    }
    return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    a.require_same_shape(b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

/// u v^T
inline Matrix outer(const std::vector<double>& u, const std::vector<double>& v) {
    Matrix m(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        for (std::size_t j = 0; j < v.size(); ++j) {
            m(i, j) = u[i] * v[j];
        }
    }
    return m;
}

/// y = A x
inline std::vector<double> mat_vec(const Matrix& a, const std::vector<double>& x) {
    if (a.cols() != x.size()) {
        throw DimensionError("mat_vec: " + a.shape_str() + " * vec(" +
                             std::to_string(x.size()) + ")");
    }
    std::vector<double> y(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            acc += ai[j] * x[j];
        }
        y[i] = acc;
    }
    return y;
}

/// y = A^T x
inline std::vector<double> mat_tvec(const Matrix& a, const std::vector<double>& x) {
    if (a.rows() != x.size()) {
        throw DimensionError("mat_tvec: " + a.shape_str() + "^T * vec(" +
                             std::to_string(x.size()) + ")");
    }
    std::vector<double> y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i);
        const double xi = x[i];
        for (std::size_t j = 0; j < a.cols(); ++j) {
            y[j] += ai[j] * xi;
        }
    }
    return y;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline void ensure_finite(const Matrix& m, const std::string& context) {
    if (!m.all_finite()) {
        throw NumericError(context + ": non-finite values encountered");
    }
}

}  // namespace ctrlora
