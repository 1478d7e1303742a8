// Shared dense-oracle helpers for the test suites. Everything here is
// deliberately brute force: scatter to dense, multiply, LU. No code path
// is shared with the O(D) implementations under test.
#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "bflow/dense.hpp"

#ifdef BFLOW_HAVE_EIGEN
#include <Eigen/Dense>
#endif

namespace oracle {

template <typename T>
std::vector<T> dense_matvec(const bflow::DenseMatrix<T>& m, const std::vector<T>& x) {
    return bflow::matvec(m, x);
}

inline double rel_err(double got, double want) {
    const double denom = std::max(1.0, std::fabs(want));
    return std::fabs(got - want) / denom;
}

template <typename T>
double max_abs(const std::vector<T>& a, const std::vector<T>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, bflow::abs_of(a[i] - b[i]));
    return m;
}

/// O(D^2) circular convolution: y[t] = sum_s k[s] x[(t - s) mod D].
inline std::vector<std::complex<double>> circular_conv(
    const std::vector<std::complex<double>>& kernel,
    const std::vector<std::complex<double>>& x) {
    const std::size_t n = x.size();
    std::vector<std::complex<double>> y(n);
    for (std::size_t t = 0; t < n; ++t) {
        std::complex<double> s{0.0, 0.0};
        for (std::size_t j = 0; j < n; ++j) s += kernel[j] * x[(t + n - j) % n];
        y[t] = s;
    }
    return y;
}

/// Circulant matrix of a kernel: C[i][j] = kernel[(i - j) mod D].
inline bflow::DenseMatrix<std::complex<double>> circulant_matrix(
    const std::vector<std::complex<double>>& kernel) {
    const std::size_t n = kernel.size();
    bflow::DenseMatrix<std::complex<double>> c(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) c(i, j) = kernel[(i + n - j) % n];
    return c;
}

#ifdef BFLOW_HAVE_EIGEN
/// Independent log|det| via Eigen's pivoted LU (cross-checks our own
/// dense LU oracle as well as the structured paths).
inline double eigen_log_abs_det(const bflow::DenseMatrix<double>& m) {
    Eigen::MatrixXd e(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j)
            e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m(i, j);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(e);
    double log_abs = 0.0;
    for (Eigen::Index i = 0; i < lu.matrixLU().rows(); ++i)
        log_abs += std::log(std::fabs(lu.matrixLU()(i, i)));
    return log_abs;
}
#endif

} // namespace oracle
