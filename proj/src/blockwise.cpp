#include "bflow/blockwise.hpp"

#include <cmath>
#include <cstring>

#include "bflow/errors.hpp"

namespace bflow {

// ---------------------------------------------------------------------------
// LuMatrix

LuMatrix LuMatrix::identity(std::size_t n) {
    LuMatrix m;
    m.n_ = n;
    m.perm_.resize(n);
    for (std::size_t i = 0; i < n; ++i) m.perm_[i] = i;
    m.lower_.assign(n * n, 0.0);
    m.upper_.assign(n * n, 0.0);
    m.sign_.assign(n, 1.0);
    m.log_s_.assign(n, 0.0);
    m.g_lower_.assign(n * n, 0.0);
    m.g_upper_.assign(n * n, 0.0);
    m.g_log_s_.assign(n, 0.0);
    return m;
}

LuMatrix LuMatrix::from_dense(const DenseMatrix<double>& a) {
    if (a.rows != a.cols) throw std::invalid_argument("LuMatrix: square matrix required");
    const std::size_t n = a.rows;
    DenseMatrix<double> work = a;
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;

    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        double best = std::fabs(work(col, col));
        for (std::size_t r = col + 1; r < n; ++r) {
            const double v = std::fabs(work(r, col));
            if (v > best) { best = v; piv = r; }
        }
        if (best == 0.0)
            throw SingularFactorError(col, "LU factorization hit a zero pivot");
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(work(piv, j), work(col, j));
            std::swap(rows[piv], rows[col]);
        }
        const double inv_p = 1.0 / work(col, col);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = work(r, col) * inv_p;
            work(r, col) = f;
            for (std::size_t j = col + 1; j < n; ++j) work(r, j) -= f * work(col, j);
        }
    }

    LuMatrix m = identity(n);
    // work holds L below the diagonal and U' on/above; factored row i is
    // the source row rows[i], i.e. a[rows[i]] = (L U')[i].
    m.perm_ = rows;
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < r; ++c) m.lower_[r * n + c] = work(r, c);
        for (std::size_t c = r + 1; c < n; ++c) m.upper_[r * n + c] = work(r, c);
        const double d = work(r, r);
        m.sign_[r] = d < 0.0 ? -1.0 : 1.0;
        m.log_s_[r] = std::log(std::fabs(d));
    }
    return m;
}

void LuMatrix::matvec_cached(std::span<const double> x, std::span<double> v,
                             std::span<double> y) const {
    const std::size_t n = n_;
    for (std::size_t r = 0; r < n; ++r) {
        double s = sign_[r] * std::exp(log_s_[r]) * x[r];
        for (std::size_t c = r + 1; c < n; ++c) s += upper_[r * n + c] * x[c];
        v[r] = s;
    }
    std::vector<double> w(n);
    for (std::size_t r = 0; r < n; ++r) {
        double s = v[r];
        for (std::size_t c = 0; c < r; ++c) s += lower_[r * n + c] * v[c];
        w[r] = s;
    }
    for (std::size_t r = 0; r < n; ++r) y[perm_[r]] = w[r];
}

void LuMatrix::matvec(std::span<const double> x, std::span<double> y) const {
    std::vector<double> v(n_);
    matvec_cached(x, v, y);
}

void LuMatrix::solve(std::span<const double> y, std::span<double> x) const {
    const std::size_t n = n_;
    std::vector<double> w(n);
    for (std::size_t r = 0; r < n; ++r) w[r] = y[perm_[r]];
    // forward substitution, unit lower
    for (std::size_t r = 0; r < n; ++r) {
        double s = w[r];
        for (std::size_t c = 0; c < r; ++c) s -= lower_[r * n + c] * w[c];
        w[r] = s;
    }
    // back substitution on U + diag(s)
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t r = n - 1 - i;
        double s = w[r];
        for (std::size_t c = r + 1; c < n; ++c) s -= upper_[r * n + c] * x[c];
        x[r] = s / (sign_[r] * std::exp(log_s_[r]));
    }
}

double LuMatrix::log_abs_det() const {
    double s = 0.0;
    for (double v : log_s_) s += v;
    return s;
}

double LuMatrix::det_sign() const {
    // permutation parity
    std::vector<std::size_t> p = perm_;
    double sign = 1.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        while (p[i] != i) {
            std::swap(p[i], p[p[i]]);
            sign = -sign;
        }
    }
    for (double v : sign_) sign *= v;
    return sign;
}

DenseMatrix<double> LuMatrix::to_dense() const {
    const std::size_t n = n_;
    DenseMatrix<double> lv(n, n);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < r; ++c) lv(r, c) = lower_[r * n + c];
        lv(r, r) = 1.0;
    }
    DenseMatrix<double> v(n, n);
    for (std::size_t r = 0; r < n; ++r) {
        v(r, r) = sign_[r] * std::exp(log_s_[r]);
        for (std::size_t c = r + 1; c < n; ++c) v(r, c) = upper_[r * n + c];
    }
    DenseMatrix<double> prod = matmul(lv, v);
    DenseMatrix<double> out(n, n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) out(perm_[r], c) = prod(r, c);
    return out;
}

void LuMatrix::zero_grad() {
    std::fill(g_lower_.begin(), g_lower_.end(), 0.0);
    std::fill(g_upper_.begin(), g_upper_.end(), 0.0);
    std::fill(g_log_s_.begin(), g_log_s_.end(), 0.0);
}

void LuMatrix::accumulate_vjp(std::span<const double> g_y, std::span<const double> x,
                              std::span<const double> v, std::span<double> g_x) {
    const std::size_t n = n_;
    // undo the output permutation: g_w[r] = g_y[perm[r]]
    std::vector<double> g_w(n);
    for (std::size_t r = 0; r < n; ++r) g_w[r] = g_y[perm_[r]];
    // w = L v with unit diagonal
    std::vector<double> g_v(n);
    for (std::size_t c = 0; c < n; ++c) {
        double s = g_w[c];
        for (std::size_t r = c + 1; r < n; ++r) s += lower_[r * n + c] * g_w[r];
        g_v[c] = s;
    }
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < r; ++c) g_lower_[r * n + c] += g_w[r] * v[c];
    // v = (U + diag(s)) x
    for (std::size_t r = 0; r < n; ++r) {
        const double s_r = sign_[r] * std::exp(log_s_[r]);
        g_log_s_[r] += g_v[r] * x[r] * s_r;
        for (std::size_t c = r + 1; c < n; ++c) g_upper_[r * n + c] += g_v[r] * x[c];
    }
    if (!g_x.empty()) {
        for (std::size_t c = 0; c < n; ++c) {
            double s = sign_[c] * std::exp(log_s_[c]) * g_v[c];
            for (std::size_t r = 0; r < c; ++r) s += upper_[r * n + c] * g_v[r];
            g_x[c] += s;
        }
    }
}

DenseMatrix<double> random_rotation(std::size_t n, CounterRng& rng) {
    DenseMatrix<double> q(n, n);
    for (auto& v : q.data) v = rng.normal();
    // modified Gram-Schmidt over columns
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (std::size_t r = 0; r < n; ++r) dot += q(r, c) * q(r, prev);
            for (std::size_t r = 0; r < n; ++r) q(r, c) -= dot * q(r, prev);
        }
        double norm = 0.0;
        for (std::size_t r = 0; r < n; ++r) norm += q(r, c) * q(r, c);
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            // essentially impossible for a Gaussian draw; fall back to a unit axis
            for (std::size_t r = 0; r < n; ++r) q(r, c) = (r == c) ? 1.0 : 0.0;
            continue;
        }
        for (std::size_t r = 0; r < n; ++r) q(r, c) /= norm;
    }
    if (LuMatrix::from_dense(q).det_sign() < 0.0)
        for (std::size_t r = 0; r < n; ++r) q(r, n - 1) = -q(r, n - 1);
    return q;
}

// ---------------------------------------------------------------------------
// BlockPairTransform

BlockPairTransform::BlockPairTransform(std::size_t c)
    : c_(c),
      X_(c * c, 0.0),
      W_(c * c, 0.0),
      Y_(LuMatrix::identity(c)),
      Z_(LuMatrix::identity(c)),
      g_X_(c * c, 0.0),
      g_W_(c * c, 0.0) {}

void BlockPairTransform::forward(std::span<const double> xp, std::span<const double> xq,
                                 std::span<double> yp, std::span<double> yq,
                                 std::span<double> scratch) const {
    const std::size_t c = c_;
    std::span<double> t = scratch.first(c);
    std::span<double> uq = scratch.subspan(c, c);
    for (std::size_t r = 0; r < c; ++r) {
        double s = xp[r];
        for (std::size_t j = 0; j < c; ++j) s += W_[r * c + j] * xq[j];
        t[r] = s;
    }
    Y_.matvec(t, yp);
    Z_.matvec(xq, uq);
    for (std::size_t r = 0; r < c; ++r) {
        double s = uq[r];
        for (std::size_t j = 0; j < c; ++j) s += X_[r * c + j] * yp[j];
        yq[r] = s;
    }
}

void BlockPairTransform::forward_cached(std::span<const double> xp,
                                        std::span<const double> xq, std::span<double> t,
                                        std::span<double> vy, std::span<double> up,
                                        std::span<double> vz, std::span<double> yp,
                                        std::span<double> yq) const {
    const std::size_t c = c_;
    for (std::size_t r = 0; r < c; ++r) {
        double s = xp[r];
        for (std::size_t j = 0; j < c; ++j) s += W_[r * c + j] * xq[j];
        t[r] = s;
    }
    Y_.matvec_cached(t, vy, up);
    std::copy(up.begin(), up.end(), yp.begin());
    Z_.matvec_cached(xq, vz, yq); // yq temporarily holds u_q
    for (std::size_t r = 0; r < c; ++r) {
        double s = yq[r];
        for (std::size_t j = 0; j < c; ++j) s += X_[r * c + j] * up[j];
        yq[r] = s;
    }
}

void BlockPairTransform::inverse(std::span<const double> zp, std::span<const double> zq,
                                 std::span<double> xp, std::span<double> xq,
                                 std::span<double> scratch) const {
    const std::size_t c = c_;
    std::span<double> uq = scratch.first(c);
    std::span<double> t = scratch.subspan(c, c);
    for (std::size_t r = 0; r < c; ++r) {
        double s = zq[r];
        for (std::size_t j = 0; j < c; ++j) s -= X_[r * c + j] * zp[j];
        uq[r] = s;
    }
    Y_.solve(zp, t);
    Z_.solve(uq, xq);
    for (std::size_t r = 0; r < c; ++r) {
        double s = t[r];
        for (std::size_t j = 0; j < c; ++j) s -= W_[r * c + j] * xq[j];
        xp[r] = s;
    }
}

DenseMatrix<double> BlockPairTransform::to_dense() const {
    const std::size_t c = c_;
    const DenseMatrix<double> yd = Y_.to_dense();
    const DenseMatrix<double> zd = Z_.to_dense();
    DenseMatrix<double> m(2 * c, 2 * c);
    // top-left Y, top-right Y W
    for (std::size_t r = 0; r < c; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
            m(r, j) = yd(r, j);
            double s = 0.0;
            for (std::size_t k = 0; k < c; ++k) s += yd(r, k) * W_[k * c + j];
            m(r, c + j) = s;
        }
    }
    // bottom-left X Y, bottom-right X Y W + Z
    for (std::size_t r = 0; r < c; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
            double xy = 0.0;
            for (std::size_t k = 0; k < c; ++k) xy += X_[r * c + k] * m(k, j);
            m(c + r, j) = xy;
            double xyw = 0.0;
            for (std::size_t k = 0; k < c; ++k) xyw += X_[r * c + k] * m(k, c + j);
            m(c + r, c + j) = xyw + zd(r, j);
        }
    }
    return m;
}

void BlockPairTransform::zero_grad() {
    std::fill(g_X_.begin(), g_X_.end(), 0.0);
    std::fill(g_W_.begin(), g_W_.end(), 0.0);
    Y_.zero_grad();
    Z_.zero_grad();
}

void BlockPairTransform::accumulate_vjp(std::span<const double> g_yp,
                                        std::span<const double> g_yq,
                                        std::span<const double> xp,
                                        std::span<const double> xq,
                                        std::span<const double> t,
                                        std::span<const double> vy,
                                        std::span<const double> up,
                                        std::span<const double> vz,
                                        std::span<double> g_xp, std::span<double> g_xq) {
    const std::size_t c = c_;
    (void)xp;
    // y_q = X u_p + u_q
    std::vector<double> g_up(c), g_t(c, 0.0);
    for (std::size_t r = 0; r < c; ++r)
        for (std::size_t j = 0; j < c; ++j) g_X_[r * c + j] += g_yq[r] * up[j];
    for (std::size_t j = 0; j < c; ++j) {
        double s = g_yp[j];
        for (std::size_t r = 0; r < c; ++r) s += X_[r * c + j] * g_yq[r];
        g_up[j] = s;
    }
    // u_q = Z x_q
    Z_.accumulate_vjp(g_yq, xq, vz, g_xq);
    // u_p = Y t
    Y_.accumulate_vjp(g_up, t, vy, g_t);
    // t = x_p + W x_q
    for (std::size_t r = 0; r < c; ++r) {
        g_xp[r] += g_t[r];
        for (std::size_t j = 0; j < c; ++j) {
            g_W_[r * c + j] += g_t[r] * xq[j];
            g_xq[j] += W_[r * c + j] * g_t[r];
        }
    }
}

// ---------------------------------------------------------------------------
// BlockwiseFactor

BlockwiseFactor::BlockwiseFactor(int level, std::size_t dim, std::size_t block_size)
    : dim_(dim), c_(block_size), group_idx_(level, dim / block_size) {}

BlockwiseFactor::BlockwiseFactor(int level, std::size_t dim, std::size_t block_size,
                                 InitKind init, std::uint64_t seed)
    : dim_(dim), c_(block_size), group_idx_(1, 2) {
    if (block_size == 0 || dim % block_size != 0)
        throw std::invalid_argument("blockwise factor: block size must divide dim");
    const std::size_t groups = dim / block_size;
    group_idx_ = PairIndexing(level, groups);
    pairs_.reserve(group_idx_.n_pairs());
    CounterRng rng(seed);
    for (std::size_t p = 0; p < group_idx_.n_pairs(); ++p) {
        BlockPairTransform pt(block_size);
        if (init == InitKind::Rotation) {
            pt.diag_first() = LuMatrix::from_dense(random_rotation(block_size, rng));
            pt.diag_second() = LuMatrix::from_dense(random_rotation(block_size, rng));
        }
        pairs_.push_back(std::move(pt));
    }
}

BlockwiseFactor BlockwiseFactor::one_by_one(const DenseMatrix<double>& weights,
                                            std::size_t groups) {
    if (weights.rows != weights.cols)
        throw std::invalid_argument("one_by_one: square weights required");
    if (groups < 2 || groups % 2 != 0)
        throw std::invalid_argument("one_by_one: group count must be even");
    const LuMatrix lu = LuMatrix::from_dense(weights);
    BlockwiseFactor f(1, groups * weights.rows, weights.rows);
    f.pairs_.assign(f.group_idx_.n_pairs(), BlockPairTransform(weights.rows));
    for (auto& pt : f.pairs_) {
        pt.diag_first() = lu;
        pt.diag_second() = lu;
    }
    return f;
}

void BlockwiseFactor::apply_inplace(std::span<double> x) const {
    if (x.size() != dim_)
        throw std::invalid_argument("blockwise matvec: length mismatch");
    std::vector<double> scratch(2 * c_);
    std::vector<double> yp(c_), yq(c_);
    for (std::size_t p = 0; p < group_idx_.n_pairs(); ++p) {
        std::size_t gl, gh;
        group_idx_.pair(p, gl, gh);
        std::span<double> xp = x.subspan(gl * c_, c_);
        std::span<double> xq = x.subspan(gh * c_, c_);
        pairs_[p].forward(xp, xq, yp, yq, scratch);
        std::copy(yp.begin(), yp.end(), xp.begin());
        std::copy(yq.begin(), yq.end(), xq.begin());
    }
}

std::vector<double> BlockwiseFactor::matvec(const std::vector<double>& x) const {
    std::vector<double> y(x);
    apply_inplace(y);
    return y;
}

double BlockwiseFactor::log_abs_det() const {
    double s = 0.0;
    for (const auto& p : pairs_) s += p.log_abs_det();
    return s;
}

void BlockwiseFactor::invert_apply_inplace(std::span<double> z) const {
    if (z.size() != dim_)
        throw std::invalid_argument("blockwise inverse: length mismatch");
    std::vector<double> scratch(2 * c_);
    std::vector<double> xp(c_), xq(c_);
    for (std::size_t p = 0; p < group_idx_.n_pairs(); ++p) {
        std::size_t gl, gh;
        group_idx_.pair(p, gl, gh);
        std::span<double> zp = z.subspan(gl * c_, c_);
        std::span<double> zq = z.subspan(gh * c_, c_);
        pairs_[p].inverse(zp, zq, xp, xq, scratch);
        std::copy(xp.begin(), xp.end(), zp.begin());
        std::copy(xq.begin(), xq.end(), zq.begin());
    }
}

std::vector<double> BlockwiseFactor::invert_apply(const std::vector<double>& z) const {
    std::vector<double> x(z);
    invert_apply_inplace(x);
    return x;
}

DenseMatrix<double> BlockwiseFactor::to_dense() const {
    DenseMatrix<double> m(dim_, dim_);
    for (std::size_t p = 0; p < group_idx_.n_pairs(); ++p) {
        std::size_t gl, gh;
        group_idx_.pair(p, gl, gh);
        const DenseMatrix<double> pd = pairs_[p].to_dense();
        for (std::size_t r = 0; r < c_; ++r) {
            for (std::size_t j = 0; j < c_; ++j) {
                m(gl * c_ + r, gl * c_ + j) = pd(r, j);
                m(gl * c_ + r, gh * c_ + j) = pd(r, c_ + j);
                m(gh * c_ + r, gl * c_ + j) = pd(c_ + r, j);
                m(gh * c_ + r, gh * c_ + j) = pd(c_ + r, c_ + j);
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// BlockwiseLayer

BlockwiseLayer::BlockwiseLayer(std::size_t dim, std::vector<BlockwiseFactor> factors)
    : dim_(dim), factors_(std::move(factors)) {
    for (const auto& f : factors_)
        if (f.dim() != dim_)
            throw std::invalid_argument("blockwise layer: factor dim mismatch");
}

void BlockwiseLayer::apply_inplace(std::span<double> x) const {
    for (auto it = factors_.rbegin(); it != factors_.rend(); ++it) it->apply_inplace(x);
}

double BlockwiseLayer::log_abs_det() const {
    double s = 0.0;
    for (const auto& f : factors_) s += f.log_abs_det();
    return s;
}

void BlockwiseLayer::invert_apply_inplace(std::span<double> z) const {
    for (const auto& f : factors_) f.invert_apply_inplace(z);
}

DenseMatrix<double> BlockwiseLayer::to_dense() const {
    DenseMatrix<double> m = DenseMatrix<double>::identity(dim_);
    for (auto it = factors_.rbegin(); it != factors_.rend(); ++it)
        m = matmul(it->to_dense(), m);
    return m;
}

BlockwiseLayer make_blockwise_layer(std::size_t dim, std::size_t block_size,
                                    const std::vector<int>& levels, InitKind init,
                                    std::uint64_t seed) {
    std::vector<BlockwiseFactor> factors;
    factors.reserve(levels.size());
    for (std::size_t i = 0; i < levels.size(); ++i)
        factors.emplace_back(levels[i], dim, block_size, init, substream(seed, i));
    return BlockwiseLayer(dim, std::move(factors));
}

} // namespace bflow
