#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bflow/dense.hpp"
#include "bflow/errors.hpp"
#include "bflow/rng.hpp"

namespace bflow {

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// Largest i such that dim is divisible by 2^i.
inline int max_level(std::size_t dim) {
    int v = 0;
    while (dim % 2 == 0 && dim > 0) { dim /= 2; ++v; }
    return v;
}

/// Index rule for a level-i factor of dimension D: the matrix is block
/// diagonal with 2^(i-1) level-one sub-blocks of size D/2^(i-1), and each
/// sub-block couples coordinate j with j + block_size/2.
struct PairIndexing {
    int level = 1;
    std::size_t dim = 0;
    std::size_t block_size = 0;  // D / 2^(level-1)
    std::size_t half = 0;        // block_size / 2
    std::size_t n_blocks = 0;    // 2^(level-1)

    PairIndexing() = default;
    PairIndexing(int level_, std::size_t dim_) : level(level_), dim(dim_) {
        if (level < 1) throw std::invalid_argument("butterfly level must be >= 1");
        if (dim < 2) throw std::invalid_argument("butterfly dim must be >= 2");
        const std::size_t stride = std::size_t{1} << level;
        if (dim % stride != 0)
            throw std::invalid_argument("dim " + std::to_string(dim) +
                                        " not divisible by 2^" + std::to_string(level));
        n_blocks = std::size_t{1} << (level - 1);
        block_size = dim / n_blocks;
        half = block_size / 2;
    }

    std::size_t n_pairs() const { return dim / 2; }

    /// Pair p (flat order: sub-block-major, then offset) -> coupled rows.
    void pair(std::size_t p, std::size_t& lo, std::size_t& hi) const {
        const std::size_t m = p / half;
        const std::size_t j = p % half;
        lo = m * block_size + j;
        hi = lo + half;
    }

    std::size_t pair_index(std::size_t block, std::size_t offset) const {
        return block * half + offset;
    }
};

template <typename T>
struct SignedLogDet {
    double log_abs = 0.0;  // -inf marks an exactly singular factor
    T sign = T{1};         // +/-1 for real weights, unit phase for complex
};

enum class InitKind { Identity, Rotation };

/// Sparse level-i factor stored as D/2 independent 2x2 pair blocks.
/// Weights are laid out [w00, w01, w10, w11] per pair in PairIndexing order.
/// With `tied`, all pairs of a level-one sub-block share one block of four
/// scalars (parameter sharing used for low-parameter periodic models).
template <typename T>
class ButterflyFactor {
public:
    ButterflyFactor(int level, std::size_t dim, InitKind init, std::uint64_t seed,
                    bool tied = false)
        : idx_(level, dim), tied_(tied), weights_(4 * idx_.n_pairs()) {
        CounterRng rng(seed);
        for (std::size_t m = 0; m < idx_.n_blocks; ++m) {
            T w00{1}, w01{0}, w10{0}, w11{1};
            if (init == InitKind::Rotation && !tied_) {
                // untied: fresh angle per pair, handled below
            } else if (init == InitKind::Rotation) {
                const double phi = rng.angle();
                w00 = T(std::cos(phi)); w01 = T(-std::sin(phi));
                w10 = T(std::sin(phi)); w11 = T(std::cos(phi));
            }
            for (std::size_t j = 0; j < idx_.half; ++j) {
                const std::size_t p = idx_.pair_index(m, j);
                if (init == InitKind::Rotation && !tied_) {
                    const double phi = rng.angle();
                    w00 = T(std::cos(phi)); w01 = T(-std::sin(phi));
                    w10 = T(std::sin(phi)); w11 = T(std::cos(phi));
                }
                T* w = block(p);
                w[0] = w00; w[1] = w01; w[2] = w10; w[3] = w11;
            }
        }
    }

    /// Builds a factor from explicit per-pair blocks (used by inversion,
    /// permutation routing and the circulant construction).
    ButterflyFactor(PairIndexing idx, std::vector<T> weights, bool tied = false)
        : idx_(idx), tied_(tied), weights_(std::move(weights)) {
        if (weights_.size() != 4 * idx_.n_pairs())
            throw std::invalid_argument("butterfly factor: bad weight count");
    }

    const PairIndexing& indexing() const { return idx_; }
    int level() const { return idx_.level; }
    std::size_t dim() const { return idx_.dim; }
    bool tied() const { return tied_; }

    T* block(std::size_t pair) { return &weights_[4 * pair]; }
    const T* block(std::size_t pair) const { return &weights_[4 * pair]; }
    std::vector<T>& weights() { return weights_; }
    const std::vector<T>& weights() const { return weights_; }

    /// y[p] = w00 x[p] + w01 x[q]; y[q] = w10 x[p] + w11 x[q].
    /// Safe in place: the two coupled entries are read before written.
    void apply_inplace(std::span<T> x) const {
        if (x.size() != idx_.dim)
            throw std::invalid_argument("butterfly matvec: length mismatch");
        for (std::size_t p = 0; p < idx_.n_pairs(); ++p) {
            std::size_t lo, hi;
            idx_.pair(p, lo, hi);
            const T* w = block(p);
            const T a = x[lo], b = x[hi];
            x[lo] = w[0] * a + w[1] * b;
            x[hi] = w[2] * a + w[3] * b;
        }
    }

    std::vector<T> matvec(const std::vector<T>& x) const {
        std::vector<T> y(x);
        apply_inplace(y);
        return y;
    }

    /// Inverse application without materializing the inverted factor.
    /// Throws SingularFactorError on a pair determinant below the
    /// underflow floor.
    void solve_inplace(std::span<T> z) const {
        if (z.size() != idx_.dim)
            throw std::invalid_argument("butterfly solve: length mismatch");
        for (std::size_t p = 0; p < idx_.n_pairs(); ++p) {
            std::size_t lo, hi;
            idx_.pair(p, lo, hi);
            const T* w = block(p);
            const T det = w[0] * w[3] - w[1] * w[2];
            if (abs_of(det) < kDetFloor)
                throw SingularFactorError(p, "singular butterfly pair " + std::to_string(p));
            const T a = z[lo], b = z[hi];
            z[lo] = (w[3] * a - w[1] * b) / det;
            z[hi] = (w[0] * b - w[2] * a) / det;
        }
    }

    SignedLogDet<T> log_det() const {
        SignedLogDet<T> r;
        for (std::size_t p = 0; p < idx_.n_pairs(); ++p) {
            const T* w = block(p);
            const T det = w[0] * w[3] - w[1] * w[2];
            const double mag = abs_of(det);
            if (mag == 0.0) {
                r.log_abs = -std::numeric_limits<double>::infinity();
                continue;
            }
            r.log_abs += std::log(mag);
            r.sign *= det / T(mag);
        }
        return r;
    }

    /// Pairwise 2x2 inverse; same level and indexing as the source factor.
    ButterflyFactor inverted() const {
        std::vector<T> w_inv(weights_.size());
        for (std::size_t p = 0; p < idx_.n_pairs(); ++p) {
            const T* w = block(p);
            const T det = w[0] * w[3] - w[1] * w[2];
            if (abs_of(det) < kDetFloor)
                throw SingularFactorError(p, "singular butterfly pair " + std::to_string(p));
            w_inv[4 * p + 0] = w[3] / det;
            w_inv[4 * p + 1] = -w[1] / det;
            w_inv[4 * p + 2] = -w[2] / det;
            w_inv[4 * p + 3] = w[0] / det;
        }
        return ButterflyFactor(idx_, std::move(w_inv), tied_);
    }

    DenseMatrix<T> to_dense() const {
        DenseMatrix<T> m(idx_.dim, idx_.dim);
        for (std::size_t p = 0; p < idx_.n_pairs(); ++p) {
            std::size_t lo, hi;
            idx_.pair(p, lo, hi);
            const T* w = block(p);
            m(lo, lo) = w[0]; m(lo, hi) = w[1];
            m(hi, lo) = w[2]; m(hi, hi) = w[3];
        }
        return m;
    }

    /// Scales column c by s[c]; preserves the sparsity pattern.
    void scale_columns(const std::vector<T>& s) {
        if (s.size() != idx_.dim)
            throw std::invalid_argument("scale_columns: length mismatch");
        for (std::size_t p = 0; p < idx_.n_pairs(); ++p) {
            std::size_t lo, hi;
            idx_.pair(p, lo, hi);
            T* w = block(p);
            w[0] *= s[lo]; w[1] *= s[hi];
            w[2] *= s[lo]; w[3] *= s[hi];
        }
    }

    static constexpr double kDetFloor = 1e-300;

private:
    PairIndexing idx_;
    bool tied_;
    std::vector<T> weights_;
};

/// Ordered composition of butterfly factors. The first stored factor is
/// applied last (function-composition order), so apply() walks the list
/// from the back.
template <typename T>
class ButterflyLayer {
public:
    ButterflyLayer() = default;
    explicit ButterflyLayer(std::size_t dim) : dim_(dim) {}
    ButterflyLayer(std::size_t dim, std::vector<ButterflyFactor<T>> factors)
        : dim_(dim), factors_(std::move(factors)) {
        for (const auto& f : factors_)
            if (f.dim() != dim_)
                throw std::invalid_argument("butterfly layer: factor dim mismatch");
    }

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return factors_.size(); }
    std::vector<ButterflyFactor<T>>& factors() { return factors_; }
    const std::vector<ButterflyFactor<T>>& factors() const { return factors_; }

    std::vector<int> level_schedule() const {
        std::vector<int> s;
        s.reserve(factors_.size());
        for (const auto& f : factors_) s.push_back(f.level());
        return s;
    }

    void apply_inplace(std::span<T> x) const {
        for (auto it = factors_.rbegin(); it != factors_.rend(); ++it)
            it->apply_inplace(x);
    }

    struct ApplyResult {
        std::vector<T> y;
        double log_abs_det = 0.0;
    };

    ApplyResult apply(const std::vector<T>& x) const {
        if (x.size() != dim_)
            throw std::invalid_argument("butterfly layer apply: length mismatch");
        ApplyResult r;
        r.y = x;
        apply_inplace(r.y);
        r.log_abs_det = log_abs_det();
        return r;
    }

    double log_abs_det() const {
        double s = 0.0;
        for (const auto& f : factors_) s += f.log_det().log_abs;
        return s;
    }

    /// Applies inverted factors in reversed composition order.
    void invert_apply_inplace(std::span<T> z) const {
        for (const auto& f : factors_) f.solve_inplace(z);
    }

    std::vector<T> invert_apply(const std::vector<T>& z) const {
        if (z.size() != dim_)
            throw std::invalid_argument("butterfly layer inverse: length mismatch");
        std::vector<T> x(z);
        invert_apply_inplace(x);
        return x;
    }

    DenseMatrix<T> to_dense() const {
        DenseMatrix<T> m = DenseMatrix<T>::identity(dim_);
        for (auto it = factors_.rbegin(); it != factors_.rend(); ++it)
            m = matmul(it->to_dense(), m);
        return m;
    }

private:
    std::size_t dim_ = 0;
    std::vector<ButterflyFactor<T>> factors_;
};

/// Level schedule {1..M} (or {1..M, M..1} when bidirectional), stored in
/// composition order so level 1 is applied last.
inline std::vector<int> contiguous_levels(int m, bool bidirectional) {
    std::vector<int> levels;
    for (int a = 1; a <= m; ++a) levels.push_back(a);
    if (bidirectional)
        for (int a = m; a >= 1; --a) levels.push_back(a);
    return levels;
}

template <typename T>
ButterflyLayer<T> make_butterfly_layer(std::size_t dim, const std::vector<int>& levels,
                                       InitKind init, std::uint64_t seed, bool tied = false) {
    std::vector<ButterflyFactor<T>> factors;
    factors.reserve(levels.size());
    for (std::size_t i = 0; i < levels.size(); ++i)
        factors.emplace_back(levels[i], dim, init, substream(seed, i), tied);
    return ButterflyLayer<T>(dim, std::move(factors));
}

/// Contiguous per-segment butterfly layers over a partitioned input.
class SegmentedLayer {
public:
    SegmentedLayer() = default;
    SegmentedLayer(std::vector<std::size_t> segment_dims,
                   std::vector<ButterflyLayer<double>> layers)
        : layers_(std::move(layers)) {
        if (segment_dims.size() != layers_.size())
            throw std::invalid_argument("segmented layer: segment/layer count mismatch");
        offsets_.resize(layers_.size());
        std::size_t off = 0;
        for (std::size_t s = 0; s < layers_.size(); ++s) {
            if (layers_[s].dim() != segment_dims[s])
                throw std::invalid_argument("segmented layer: segment dim mismatch");
            offsets_[s] = off;
            off += segment_dims[s];
        }
        dim_ = off;
    }

    std::size_t dim() const { return dim_; }
    std::size_t n_segments() const { return layers_.size(); }
    std::vector<ButterflyLayer<double>>& segments() { return layers_; }
    const std::vector<ButterflyLayer<double>>& segments() const { return layers_; }
    std::size_t offset(std::size_t s) const { return offsets_[s]; }

    void apply_inplace(std::span<double> x) const {
        if (x.size() != dim_)
            throw std::invalid_argument("segmented apply: length mismatch");
        for (std::size_t s = 0; s < layers_.size(); ++s)
            layers_[s].apply_inplace(x.subspan(offsets_[s], layers_[s].dim()));
    }

    struct ApplyResult {
        std::vector<double> y;
        double log_abs_det = 0.0;
    };

    ApplyResult apply(const std::vector<double>& x) const {
        if (x.size() != dim_)
            throw std::invalid_argument("segmented apply: length mismatch");
        ApplyResult r;
        r.y = x;
        apply_inplace(r.y);
        r.log_abs_det = log_abs_det();
        return r;
    }

    double log_abs_det() const {
        double s = 0.0;
        for (const auto& l : layers_) s += l.log_abs_det();
        return s;
    }

    void invert_apply_inplace(std::span<double> z) const {
        if (z.size() != dim_)
            throw std::invalid_argument("segmented inverse: length mismatch");
        for (std::size_t s = 0; s < layers_.size(); ++s)
            layers_[s].invert_apply_inplace(z.subspan(offsets_[s], layers_[s].dim()));
    }

private:
    std::size_t dim_ = 0;
    std::vector<std::size_t> offsets_;
    std::vector<ButterflyLayer<double>> layers_;
};

/// Decomposes a permutation of size D = 2^k into 2k switch-only factors
/// (every pair block is I or the swap) with level schedule {1..k, k..1}.
/// The layer's dense form equals the permutation matrix exactly; one of
/// the two middle stages is redundant and stays all-identity.
///
/// Convention: perm maps output slot to source, y[i] = x[perm[i]].
ButterflyLayer<double> perm_decompose(const std::vector<std::size_t>& perm);

/// Applies the gather convention used by perm_decompose.
template <typename T>
std::vector<T> apply_permutation(const std::vector<std::size_t>& perm, const std::vector<T>& x) {
    std::vector<T> y(x.size());
    for (std::size_t i = 0; i < perm.size(); ++i) y[i] = x[perm[i]];
    return y;
}

ButterflyLayer<std::complex<double>> to_complex(const ButterflyLayer<double>& layer);

} // namespace bflow
