#include "bflow/circulant.hpp"

#include <cmath>

namespace bflow {

namespace {

using Cx = std::complex<double>;

std::vector<std::size_t> bit_reversal_perm(std::size_t dim, int k) {
    std::vector<std::size_t> perm(dim);
    for (std::size_t i = 0; i < dim; ++i) {
        std::size_t r = 0, v = i;
        for (int b = 0; b < k; ++b) {
            r = (r << 1) | (v & 1);
            v >>= 1;
        }
        perm[i] = r;
    }
    return perm;
}

/// Level-i DIT stage on dimension D: every pair block is
/// [[1, w_j], [1, -w_j]] with twiddle w_j = exp(-2*pi*i * j / block_size).
ButterflyFactor<Cx> dft_stage(int level, std::size_t dim) {
    PairIndexing idx(level, dim);
    std::vector<Cx> w(4 * idx.n_pairs());
    for (std::size_t m = 0; m < idx.n_blocks; ++m) {
        for (std::size_t j = 0; j < idx.half; ++j) {
            const double angle = -2.0 * M_PI * static_cast<double>(j) /
                                 static_cast<double>(idx.block_size);
            const Cx tw = std::polar(1.0, angle);
            const std::size_t p = idx.pair_index(m, j);
            w[4 * p + 0] = Cx{1.0, 0.0};
            w[4 * p + 1] = tw;
            w[4 * p + 2] = Cx{1.0, 0.0};
            w[4 * p + 3] = -tw;
        }
    }
    return ButterflyFactor<Cx>(idx, std::move(w));
}

} // namespace

std::vector<Cx> dft(const std::vector<Cx>& x) {
    const std::size_t dim = x.size();
    if (dim == 1) return x;
    if (!is_power_of_two(dim))
        throw std::invalid_argument("dft: size must be a power of two");
    const int k = max_level(dim);
    std::vector<Cx> y = apply_permutation(bit_reversal_perm(dim, k), x);
    for (int level = k; level >= 1; --level)
        dft_stage(level, dim).apply_inplace(y);
    return y;
}

ButterflyLayer<Cx> circulant_to_butterfly(const std::vector<Cx>& kernel) {
    const std::size_t dim = kernel.size();
    if (!is_power_of_two(dim) || dim < 2)
        throw std::invalid_argument("circulant_to_butterfly: size must be a power of two >= 2");
    const int k = max_level(dim);

    const std::vector<Cx> diag = dft(kernel);
    const ButterflyLayer<Cx> rev =
        to_complex(perm_decompose(bit_reversal_perm(dim, k)));

    // C = R B(k)^-1 .. B(2)^-1 (B(1)^-1 diag) B(1) .. B(k) R, applied
    // right to left. The stage inverses carry the 1/D normalization.
    std::vector<ButterflyFactor<Cx>> factors;
    factors.reserve(rev.size() * 2 + static_cast<std::size_t>(2 * k));
    for (const auto& f : rev.factors()) factors.push_back(f);
    for (int level = k; level >= 2; --level)
        factors.push_back(dft_stage(level, dim).inverted());
    ButterflyFactor<Cx> absorbed = dft_stage(1, dim).inverted();
    absorbed.scale_columns(diag);
    factors.push_back(std::move(absorbed));
    for (int level = 1; level <= k; ++level)
        factors.push_back(dft_stage(level, dim));
    for (const auto& f : rev.factors()) factors.push_back(f);
    return ButterflyLayer<Cx>(dim, std::move(factors));
}

} // namespace bflow
