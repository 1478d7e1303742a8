#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bflow/butterfly.hpp"
#include "bflow/dense.hpp"

namespace bflow {

/// Invertible C x C matrix kept in LU form: A = P L (U + diag(sign * exp(log_s))).
/// P and the sign vector are frozen at construction; L (unit lower), U
/// (strictly upper) and log_s are the trainable parts. The determinant
/// magnitude is exp(sum log_s) by construction, so it never vanishes.
class LuMatrix {
public:
    LuMatrix() = default;

    static LuMatrix identity(std::size_t n);

    /// Factorizes a dense invertible matrix (partial pivoting). Throws
    /// SingularFactorError on a zero pivot.
    static LuMatrix from_dense(const DenseMatrix<double>& a);

    std::size_t size() const { return n_; }

    void matvec(std::span<const double> x, std::span<double> y) const;

    /// matvec that also exposes the two intermediates needed for the
    /// backward pass: v = (U + diag(s)) x and the pre-permutation vector.
    void matvec_cached(std::span<const double> x, std::span<double> v,
                       std::span<double> y) const;

    /// Solves A x = y with one forward and one backward substitution.
    void solve(std::span<const double> y, std::span<double> x) const;

    double log_abs_det() const;
    double det_sign() const;

    DenseMatrix<double> to_dense() const;

    /// Accumulates parameter and input gradients for y = A x given the
    /// cached v from matvec_cached. g_x may be empty when not needed.
    void accumulate_vjp(std::span<const double> g_y, std::span<const double> x,
                        std::span<const double> v, std::span<double> g_x);

    // trainable parts, row-major n x n (unit diagonal of L and the diagonal
    // of U are ignored by the math)
    std::vector<double>& lower() { return lower_; }
    const std::vector<double>& lower() const { return lower_; }
    std::vector<double>& upper() { return upper_; }
    const std::vector<double>& upper() const { return upper_; }
    std::vector<double>& log_s() { return log_s_; }
    const std::vector<double>& log_s() const { return log_s_; }
    const std::vector<double>& sign() const { return sign_; }
    const std::vector<std::size_t>& row_perm() const { return perm_; }

    std::vector<double>& grad_lower() { return g_lower_; }
    std::vector<double>& grad_upper() { return g_upper_; }
    std::vector<double>& grad_log_s() { return g_log_s_; }
    void zero_grad();

private:
    std::size_t n_ = 0;
    std::vector<std::size_t> perm_; // y[i] = w[perm[i]]
    std::vector<double> lower_;
    std::vector<double> upper_;
    std::vector<double> sign_;
    std::vector<double> log_s_;
    std::vector<double> g_lower_, g_upper_, g_log_s_;
};

/// Seeded special-orthogonal matrix (Gram-Schmidt of a Gaussian draw,
/// determinant fixed to +1).
DenseMatrix<double> random_rotation(std::size_t n, CounterRng& rng);

/// One 2C x 2C pair transform in block-LDU form:
///   M = [[I, 0], [X, I]] * [[Y, 0], [0, Z]] * [[I, W], [0, I]]
/// so det(M) = det(Y) det(Z), which the LU parameterization keeps nonzero
/// for every parameter value.
class BlockPairTransform {
public:
    BlockPairTransform() = default;
    explicit BlockPairTransform(std::size_t c);

    std::size_t block_dim() const { return c_; }

    /// Needs scratch of at least 2C doubles.
    void forward(std::span<const double> xp, std::span<const double> xq,
                 std::span<double> yp, std::span<double> yq,
                 std::span<double> scratch) const;

    void inverse(std::span<const double> zp, std::span<const double> zq,
                 std::span<double> xp, std::span<double> xq,
                 std::span<double> scratch) const;

    double log_abs_det() const { return Y_.log_abs_det() + Z_.log_abs_det(); }

    DenseMatrix<double> to_dense() const;

    std::vector<double>& mix_lower() { return X_; }
    const std::vector<double>& mix_lower() const { return X_; }
    std::vector<double>& mix_upper() { return W_; }
    const std::vector<double>& mix_upper() const { return W_; }
    LuMatrix& diag_first() { return Y_; }
    const LuMatrix& diag_first() const { return Y_; }
    LuMatrix& diag_second() { return Z_; }
    const LuMatrix& diag_second() const { return Z_; }

    std::vector<double>& grad_mix_lower() { return g_X_; }
    std::vector<double>& grad_mix_upper() { return g_W_; }
    void zero_grad();

    /// Backward for the forward() data path. Saved tensors: the pair
    /// inputs and the intermediates t = xp + W xq and up = Y t.
    /// Writes input cotangents to g_xp / g_xq.
    void accumulate_vjp(std::span<const double> g_yp, std::span<const double> g_yq,
                        std::span<const double> xp, std::span<const double> xq,
                        std::span<const double> t, std::span<const double> vy,
                        std::span<const double> up, std::span<const double> vz,
                        std::span<double> g_xp, std::span<double> g_xq);

    /// forward() variant that exposes every intermediate the vjp needs.
    void forward_cached(std::span<const double> xp, std::span<const double> xq,
                        std::span<double> t, std::span<double> vy,
                        std::span<double> up, std::span<double> vz,
                        std::span<double> yp, std::span<double> yq) const;

private:
    std::size_t c_ = 0;
    std::vector<double> X_, W_; // row-major C x C mixing blocks
    LuMatrix Y_, Z_;
    std::vector<double> g_X_, g_W_;
};

/// Butterfly factor over groups of C coordinates: groups pair up exactly
/// like a level-i factor of dimension D/C, and every group pair carries an
/// invertible 2C x 2C transform. At most 2C non-zeros per row.
class BlockwiseFactor {
public:
    BlockwiseFactor(int level, std::size_t dim, std::size_t block_size, InitKind init,
                    std::uint64_t seed);

    /// Factor with X = W = 0 and Y = Z = the given weights in every pair:
    /// the dense form is block-diagonal with `weights` repeated G times
    /// (a 1x1 convolution over C channels at G positions).
    static BlockwiseFactor one_by_one(const DenseMatrix<double>& weights, std::size_t groups);

    int level() const { return group_idx_.level; }
    std::size_t dim() const { return dim_; }
    std::size_t block_size() const { return c_; }
    std::size_t groups() const { return group_idx_.dim; }
    const PairIndexing& group_indexing() const { return group_idx_; }

    std::vector<BlockPairTransform>& pairs() { return pairs_; }
    const std::vector<BlockPairTransform>& pairs() const { return pairs_; }

    void apply_inplace(std::span<double> x) const;
    std::vector<double> matvec(const std::vector<double>& x) const;

    /// O(C) per pair: just the stored log-magnitudes, no factorization.
    double log_abs_det() const;

    void invert_apply_inplace(std::span<double> z) const;
    std::vector<double> invert_apply(const std::vector<double>& z) const;

    DenseMatrix<double> to_dense() const;

private:
    BlockwiseFactor(int level, std::size_t dim, std::size_t block_size);

    std::size_t dim_ = 0;
    std::size_t c_ = 1;
    PairIndexing group_idx_;
    std::vector<BlockPairTransform> pairs_;
};

/// Composition of block-wise factors sharing (D, C); first stored factor
/// applies last, as in ButterflyLayer.
class BlockwiseLayer {
public:
    BlockwiseLayer() = default;
    BlockwiseLayer(std::size_t dim, std::vector<BlockwiseFactor> factors);

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return factors_.size(); }
    std::vector<BlockwiseFactor>& factors() { return factors_; }
    const std::vector<BlockwiseFactor>& factors() const { return factors_; }

    void apply_inplace(std::span<double> x) const;
    double log_abs_det() const;
    void invert_apply_inplace(std::span<double> z) const;

    DenseMatrix<double> to_dense() const;

private:
    std::size_t dim_ = 0;
    std::vector<BlockwiseFactor> factors_;
};

BlockwiseLayer make_blockwise_layer(std::size_t dim, std::size_t block_size,
                                    const std::vector<int>& levels, InitKind init,
                                    std::uint64_t seed);

} // namespace bflow
