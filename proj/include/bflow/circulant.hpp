#pragma once

#include <complex>
#include <vector>

#include "bflow/butterfly.hpp"

namespace bflow {

/// Builds a complex butterfly layer whose dense form is the circulant
/// matrix of `kernel`: applying the layer computes the circular
/// convolution y[t] = sum_s kernel[s] * x[(t - s) mod D].
///
/// Construction: radix-2 decimation-in-time DFT stages, the two
/// bit-reversal permutations expressed through perm_decompose, the DFT
/// of the kernel absorbed into the adjacent (inverted, level-1) stage.
/// Requires D = 2^k, D >= 2.
ButterflyLayer<std::complex<double>> circulant_to_butterfly(
    const std::vector<std::complex<double>>& kernel);

/// Direct O(D log D) DFT via the same stage machinery (test support).
std::vector<std::complex<double>> dft(const std::vector<std::complex<double>>& x);

} // namespace bflow
