#include <doctest.h>

#include <cmath>

#include "bflow/blockwise.hpp"
#include "bflow/butterfly.hpp"
#include "bflow/rng.hpp"
#include "oracles.hpp"

using namespace bflow;

namespace {

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
    CounterRng rng(seed);
    std::vector<double> x(n);
    for (auto& v : x) v = rng.normal();
    return x;
}

// Fills the trainable parts of a pair transform with random values.
void randomize_pair(BlockPairTransform& pt, CounterRng& rng) {
    const std::size_t c = pt.block_dim();
    for (auto& v : pt.mix_lower()) v = rng.uniform(-1.0, 1.0);
    for (auto& v : pt.mix_upper()) v = rng.uniform(-1.0, 1.0);
    for (LuMatrix* lu : {&pt.diag_first(), &pt.diag_second()}) {
        for (std::size_t r = 0; r < c; ++r)
            for (std::size_t j = 0; j < r; ++j) lu->lower()[r * c + j] = rng.uniform(-1.0, 1.0);
        for (std::size_t r = 0; r < c; ++r)
            for (std::size_t j = r + 1; j < c; ++j) lu->upper()[r * c + j] = rng.uniform(-1.0, 1.0);
        for (auto& v : lu->log_s()) v = rng.uniform(-0.7, 0.7);
    }
}

BlockwiseFactor random_blockwise(int level, std::size_t dim, std::size_t c,
                                 std::uint64_t seed) {
    BlockwiseFactor f(level, dim, c, InitKind::Identity, 0);
    CounterRng rng(seed);
    for (auto& p : f.pairs()) randomize_pair(p, rng);
    return f;
}

} // namespace

TEST_CASE("LU form round-trips dense matrices") {
    CounterRng rng(11);
    for (std::size_t n : {1u, 2u, 3u, 5u}) {
        DenseMatrix<double> a(n, n);
        for (auto& v : a.data) v = rng.uniform(-2.0, 2.0);
        LuMatrix lu = LuMatrix::from_dense(a);
        CHECK(max_abs_diff(lu.to_dense(), a) <= 1e-12);
        // matvec and solve agree with the dense form
        std::vector<double> x = random_vector(n, n + 3), y(n), back(n);
        lu.matvec(x, y);
        CHECK(oracle::max_abs(y, oracle::dense_matvec(a, x)) <= 1e-12);
        lu.solve(y, back);
        CHECK(oracle::max_abs(back, x) <= 1e-10);
        CHECK(oracle::rel_err(lu.log_abs_det(), lu_log_abs_det(a)) <= 1e-12);
    }
    DenseMatrix<double> sing(2, 2);
    sing(0, 0) = 1; sing(0, 1) = 2; sing(1, 0) = 2; sing(1, 1) = 4;
    CHECK_THROWS_AS(LuMatrix::from_dense(sing), SingularFactorError);
}

TEST_CASE("random rotations are special orthogonal") {
    CounterRng rng(5);
    for (std::size_t n : {1u, 2u, 3u, 4u}) {
        DenseMatrix<double> q = random_rotation(n, rng);
        DenseMatrix<double> qt(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) qt(i, j) = q(j, i);
        CHECK(max_abs_diff(matmul(qt, q), DenseMatrix<double>::identity(n)) <= 1e-12);
        CHECK(LuMatrix::from_dense(q).det_sign() == 1.0);
    }
}

TEST_CASE("blockwise construction") {
    SUBCASE("identity init is the identity, D=24 C=3") {
        BlockwiseFactor f(1, 24, 3, InitKind::Identity, 0);
        CHECK(max_abs_diff(f.to_dense(), DenseMatrix<double>::identity(24)) == 0.0);
        CHECK(f.log_abs_det() == 0.0);
    }
    SUBCASE("C=1 identity equals the naive identity factor") {
        BlockwiseFactor f(1, 4, 1, InitKind::Identity, 0);
        ButterflyFactor<double> naive(1, 4, InitKind::Identity, 0);
        CHECK(max_abs_diff(f.to_dense(), naive.to_dense()) == 0.0);
    }
    SUBCASE("divisibility violations") {
        // block size must divide dim
        CHECK_THROWS_AS(BlockwiseFactor(1, 10, 3, InitKind::Identity, 0),
                        std::invalid_argument);
        // 4 groups, level 3 needs divisibility by 8
        CHECK_THROWS_AS(BlockwiseFactor(3, 12, 3, InitKind::Identity, 0),
                        std::invalid_argument);
    }
    SUBCASE("rotation init realizes rotations on the diagonal blocks") {
        BlockwiseFactor f(1, 12, 3, InitKind::Rotation, 9);
        DenseMatrix<double> d = f.to_dense();
        // each 3x3 diagonal block is orthogonal
        for (std::size_t g = 0; g < 4; ++g) {
            DenseMatrix<double> b(3, 3);
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j) b(i, j) = d(g * 3 + i, g * 3 + j);
            DenseMatrix<double> bt(3, 3);
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j) bt(i, j) = b(j, i);
            CHECK(max_abs_diff(matmul(bt, b), DenseMatrix<double>::identity(3)) <= 1e-12);
        }
        CHECK(std::fabs(f.log_abs_det()) <= 1e-12);
    }
    SUBCASE("sub-matrix condition: channel slices have the butterfly pattern") {
        BlockwiseFactor f = random_blockwise(2, 16, 2, 9);
        DenseMatrix<double> d = f.to_dense();
        const std::size_t groups = 8, c = 2;
        PairIndexing gidx(2, groups);
        DenseMatrix<double> mask(groups, groups);
        for (std::size_t p = 0; p < gidx.n_pairs(); ++p) {
            std::size_t lo, hi;
            gidx.pair(p, lo, hi);
            mask(lo, lo) = mask(lo, hi) = mask(hi, lo) = mask(hi, hi) = 1.0;
        }
        for (std::size_t j = 0; j < c; ++j) {
            for (std::size_t jj = 0; jj < c; ++jj) {
                for (std::size_t l = 0; l < groups; ++l)
                    for (std::size_t ll = 0; ll < groups; ++ll)
                        if (mask(l, ll) == 0.0) CHECK(d(c * l + j, c * ll + jj) == 0.0);
            }
        }
        // at most 2C non-zeros per row
        for (std::size_t i = 0; i < 16; ++i) {
            int nz = 0;
            for (std::size_t j = 0; j < 16; ++j)
                if (d(i, j) != 0.0) ++nz;
            CHECK(nz <= 4);
        }
    }
}

TEST_CASE("blockwise matvec") {
    SUBCASE("identity passes through") {
        BlockwiseFactor f(1, 24, 3, InitKind::Identity, 0);
        std::vector<double> x = random_vector(24, 1);
        CHECK(f.matvec(x) == x);
    }
    SUBCASE("C=1 with diagonal pair weights matches the naive path bitwise") {
        BlockwiseFactor f(1, 8, 1, InitKind::Identity, 0);
        ButterflyFactor<double> naive(1, 8, InitKind::Identity, 0);
        CounterRng rng(3);
        for (std::size_t p = 0; p < 4; ++p) {
            const double y = rng.uniform(0.2, 2.0);
            const double z = rng.uniform(0.2, 2.0);
            f.pairs()[p].diag_first().log_s()[0] = std::log(y);
            f.pairs()[p].diag_second().log_s()[0] = std::log(z);
            double* w = naive.block(p);
            w[0] = std::exp(std::log(y));
            w[3] = std::exp(std::log(z));
        }
        std::vector<double> x = random_vector(8, 77);
        CHECK(f.matvec(x) == naive.matvec(x));
        CHECK(std::fabs(f.log_abs_det() - naive.log_det().log_abs) <= 1e-12);
    }
    SUBCASE("C=1 general weights match the naive realized weights") {
        BlockwiseFactor f = random_blockwise(1, 8, 1, 21);
        DenseMatrix<double> d = f.to_dense();
        ButterflyFactor<double> naive(1, 8, InitKind::Identity, 0);
        PairIndexing idx(1, 8);
        for (std::size_t p = 0; p < 4; ++p) {
            std::size_t lo, hi;
            idx.pair(p, lo, hi);
            double* w = naive.block(p);
            w[0] = d(lo, lo); w[1] = d(lo, hi); w[2] = d(hi, lo); w[3] = d(hi, hi);
        }
        std::vector<double> x = random_vector(8, 5);
        CHECK(oracle::max_abs(f.matvec(x), naive.matvec(x)) <= 1e-13);
        CHECK(oracle::rel_err(f.log_abs_det(), naive.log_det().log_abs) <= 1e-12);
    }
    SUBCASE("C=3 D=24 matches the dense oracle") {
        BlockwiseFactor f = random_blockwise(1, 24, 3, 13);
        std::vector<double> x = random_vector(24, 6);
        CHECK(oracle::max_abs(f.matvec(x), oracle::dense_matvec(f.to_dense(), x)) <= 1e-11);
    }
    SUBCASE("length mismatch") {
        BlockwiseFactor f(1, 8, 2, InitKind::Identity, 0);
        CHECK_THROWS_AS(f.matvec(std::vector<double>(6, 0.0)), std::invalid_argument);
    }
}

TEST_CASE("blockwise log det") {
    SUBCASE("single pair C=1 scalars") {
        BlockwiseFactor f(1, 2, 1, InitKind::Identity, 0);
        f.pairs()[0].diag_first().log_s()[0] = std::log(2.0);
        f.pairs()[0].diag_second().log_s()[0] = std::log(3.0);
        CHECK(f.log_abs_det() == doctest::Approx(std::log(6.0)).epsilon(1e-14));
    }
    SUBCASE("C=3 D=24 vs dense LU") {
        BlockwiseFactor f = random_blockwise(2, 24, 3, 31);
        CHECK(oracle::rel_err(f.log_abs_det(), lu_log_abs_det(f.to_dense())) <= 1e-9);
    }
    SUBCASE("always finite") {
        // extreme but representable parameters still give a finite value
        BlockwiseFactor f(1, 4, 2, InitKind::Identity, 0);
        f.pairs()[0].diag_first().log_s() = {-300.0, 200.0};
        CHECK(std::isfinite(f.log_abs_det()));
    }
}

TEST_CASE("blockwise inversion") {
    SUBCASE("identity") {
        BlockwiseFactor f(1, 8, 2, InitKind::Identity, 0);
        std::vector<double> z = random_vector(8, 2);
        CHECK(f.invert_apply(z) == z);
    }
    SUBCASE("C=1 matches the naive inversion path") {
        BlockwiseFactor f = random_blockwise(1, 8, 1, 41);
        DenseMatrix<double> d = f.to_dense();
        ButterflyFactor<double> naive(1, 8, InitKind::Identity, 0);
        PairIndexing idx(1, 8);
        for (std::size_t p = 0; p < 4; ++p) {
            std::size_t lo, hi;
            idx.pair(p, lo, hi);
            double* w = naive.block(p);
            w[0] = d(lo, lo); w[1] = d(lo, hi); w[2] = d(hi, lo); w[3] = d(hi, hi);
        }
        std::vector<double> z = random_vector(8, 3);
        ButterflyLayer<double> nl(8, {naive});
        CHECK(oracle::max_abs(f.invert_apply(z), nl.invert_apply(z)) <= 1e-10);
    }
    SUBCASE("round trip, C=4 D=32") {
        BlockwiseFactor f = random_blockwise(2, 32, 4, 51);
        std::vector<double> x = random_vector(32, 4);
        CHECK(oracle::max_abs(f.invert_apply(f.matvec(x)), x) <= 1e-9);
    }
    SUBCASE("dense oracle sweep") {
        for (std::size_t c : {1u, 2u, 3u, 4u}) {
            for (std::uint64_t seed = 0; seed < 5; ++seed) {
                const std::size_t dim = 8 * c;
                BlockwiseFactor f = random_blockwise(1, dim, c, 1000 + seed * 13 + c);
                std::vector<double> x = random_vector(dim, seed + 1);
                std::vector<double> y = f.matvec(x);
                CHECK(oracle::max_abs(y, oracle::dense_matvec(f.to_dense(), x)) <= 1e-11);
                CHECK(oracle::max_abs(f.invert_apply(y), x) <= 1e-9);
                CHECK(oracle::rel_err(f.log_abs_det(), lu_log_abs_det(f.to_dense())) <= 1e-9);
            }
        }
    }
}

TEST_CASE("one-by-one convolution equivalent") {
    SUBCASE("identity weights") {
        BlockwiseFactor f = BlockwiseFactor::one_by_one(DenseMatrix<double>::identity(3), 8);
        CHECK(max_abs_diff(f.to_dense(), DenseMatrix<double>::identity(24)) <= 1e-15);
    }
    SUBCASE("diagonal weights") {
        DenseMatrix<double> w(2, 2);
        w(0, 0) = 2.0; w(1, 1) = 3.0;
        BlockwiseFactor f = BlockwiseFactor::one_by_one(w, 2);
        DenseMatrix<double> want(4, 4);
        want(0, 0) = 2; want(1, 1) = 3; want(2, 2) = 2; want(3, 3) = 3;
        CHECK(max_abs_diff(f.to_dense(), want) <= 1e-15);
        CHECK(f.log_abs_det() == doctest::Approx(2 * std::log(6.0)).epsilon(1e-14));
    }
    SUBCASE("random weights equal I_G kron W") {
        CounterRng rng(8);
        DenseMatrix<double> w(3, 3);
        for (auto& v : w.data) v = rng.uniform(-1.5, 1.5);
        BlockwiseFactor f = BlockwiseFactor::one_by_one(w, 16);
        CHECK(max_abs_diff(f.to_dense(), kronecker(DenseMatrix<double>::identity(16), w)) <=
              1e-12);
    }
    SUBCASE("singular weights rejected") {
        DenseMatrix<double> w(2, 2);
        w(0, 0) = 1; w(0, 1) = 2; w(1, 0) = 2; w(1, 1) = 4;
        CHECK_THROWS_AS(BlockwiseFactor::one_by_one(w, 4), SingularFactorError);
    }
}

TEST_CASE("blockwise layers compose") {
    BlockwiseLayer layer = make_blockwise_layer(24, 3, {1, 2, 3}, InitKind::Rotation, 17);
    CounterRng rng(23);
    for (auto& f : layer.factors())
        for (auto& p : f.pairs()) randomize_pair(p, rng);
    std::vector<double> x = random_vector(24, 12);
    std::vector<double> y = x;
    layer.apply_inplace(y);
    CHECK(oracle::max_abs(y, oracle::dense_matvec(layer.to_dense(), x)) <= 1e-10);
    CHECK(oracle::rel_err(layer.log_abs_det(), lu_log_abs_det(layer.to_dense())) <= 1e-9);
    layer.invert_apply_inplace(y);
    CHECK(oracle::max_abs(y, x) <= 1e-9);
}
