#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace bflow {

/// Row-major dense matrix. Only used for small oracles, dense realizations
/// and verification; all production paths stay sparse.
template <typename T>
struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T{}) {}

    T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
        return m;
    }
};

template <typename T>
DenseMatrix<T> matmul(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
    DenseMatrix<T> c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const T aik = a(i, k);
            if (aik == T{}) continue;
            for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
        }
    }
    return c;
}

template <typename T>
std::vector<T> matvec(const DenseMatrix<T>& a, const std::vector<T>& x) {
    if (a.cols != x.size()) throw std::invalid_argument("matvec: dimension mismatch");
    std::vector<T> y(a.rows, T{});
    for (std::size_t i = 0; i < a.rows; ++i) {
        T s{};
        for (std::size_t j = 0; j < a.cols; ++j) s += a(i, j) * x[j];
        y[i] = s;
    }
    return y;
}

inline double abs_of(double v) { return std::fabs(v); }
inline double abs_of(const std::complex<double>& v) { return std::abs(v); }

template <typename T>
double max_abs_diff(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, abs_of(a.data[i] - b.data[i]));
    return m;
}

/// log|det A| by in-place LU with partial pivoting. Returns -inf for a
/// singular matrix. Independent of any structured determinant path.
template <typename T>
double lu_log_abs_det(DenseMatrix<T> a) {
    if (a.rows != a.cols) throw std::invalid_argument("lu_log_abs_det: square required");
    const std::size_t n = a.rows;
    double log_abs = 0.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        double best = abs_of(a(col, col));
        for (std::size_t r = col + 1; r < n; ++r) {
            double v = abs_of(a(r, col));
            if (v > best) { best = v; piv = r; }
        }
        if (best == 0.0) return -std::numeric_limits<double>::infinity();
        if (piv != col)
            for (std::size_t j = 0; j < n; ++j) std::swap(a(piv, j), a(col, j));
        log_abs += std::log(abs_of(a(col, col)));
        const T inv_p = T{1} / a(col, col);
        for (std::size_t r = col + 1; r < n; ++r) {
            const T f = a(r, col) * inv_p;
            if (f == T{}) continue;
            a(r, col) = f;
            for (std::size_t j = col + 1; j < n; ++j) a(r, j) -= f * a(col, j);
        }
    }
    return log_abs;
}

/// Dense inverse via Gauss-Jordan with partial pivoting. Oracle use only.
template <typename T>
DenseMatrix<T> dense_inverse(DenseMatrix<T> a) {
    if (a.rows != a.cols) throw std::invalid_argument("dense_inverse: square required");
    const std::size_t n = a.rows;
    DenseMatrix<T> inv = DenseMatrix<T>::identity(n);
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        double best = abs_of(a(col, col));
        for (std::size_t r = col + 1; r < n; ++r) {
            double v = abs_of(a(r, col));
            if (v > best) { best = v; piv = r; }
        }
        if (best == 0.0) throw std::invalid_argument("dense_inverse: singular matrix");
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) {
                std::swap(a(piv, j), a(col, j));
                std::swap(inv(piv, j), inv(col, j));
            }
        }
        const T p = a(col, col);
        for (std::size_t j = 0; j < n; ++j) { a(col, j) /= p; inv(col, j) /= p; }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const T f = a(r, col);
            if (f == T{}) continue;
            for (std::size_t j = 0; j < n; ++j) {
                a(r, j) -= f * a(col, j);
                inv(r, j) -= f * inv(col, j);
            }
        }
    }
    return inv;
}

/// Kronecker product, oracle for block-diagonal replication checks.
template <typename T>
DenseMatrix<T> kronecker(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
    DenseMatrix<T> k(a.rows * b.rows, a.cols * b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j)
            for (std::size_t p = 0; p < b.rows; ++p)
                for (std::size_t q = 0; q < b.cols; ++q)
                    k(i * b.rows + p, j * b.cols + q) = a(i, j) * b(p, q);
    return k;
}

} // namespace bflow
