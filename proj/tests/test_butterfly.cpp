#include <doctest.h>

#include <cmath>
#include <complex>

#include "bflow/butterfly.hpp"
#include "bflow/circulant.hpp"
#include "bflow/rng.hpp"
#include "oracles.hpp"

using namespace bflow;
using Cx = std::complex<double>;

namespace {

ButterflyFactor<double> random_factor(int level, std::size_t dim, std::uint64_t seed,
                                      double lo = -2.0, double hi = 2.0,
                                      double min_pair_det = 0.0) {
    ButterflyFactor<double> f(level, dim, InitKind::Identity, 0);
    CounterRng rng(seed);
    for (std::size_t p = 0; p < dim / 2; ++p) {
        double* w = f.block(p);
        while (true) {
            for (int j = 0; j < 4; ++j) w[j] = rng.uniform(lo, hi);
            if (std::fabs(w[0] * w[3] - w[1] * w[2]) >= min_pair_det) break;
        }
    }
    return f;
}

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
    CounterRng rng(seed);
    std::vector<double> x(n);
    for (auto& v : x) v = rng.normal();
    return x;
}

std::vector<std::size_t> random_perm(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    CounterRng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
    return p;
}

} // namespace

TEST_CASE("pair indexing partitions the coordinates") {
    for (int level = 1; level <= 4; ++level) {
        PairIndexing idx(level, 16);
        std::vector<int> hits(16, 0);
        for (std::size_t p = 0; p < idx.n_pairs(); ++p) {
            std::size_t lo, hi;
            idx.pair(p, lo, hi);
            hits[lo]++;
            hits[hi]++;
        }
        for (int h : hits) CHECK(h == 1);
    }
    // level 1 pairs j with j + D/2
    PairIndexing idx(1, 8);
    std::size_t lo, hi;
    idx.pair(2, lo, hi);
    CHECK(lo == 2);
    CHECK(hi == 6);
    CHECK_THROWS_AS(PairIndexing(3, 12), std::invalid_argument);
    CHECK_THROWS_AS(PairIndexing(0, 8), std::invalid_argument);
}

TEST_CASE("identity init gives the identity matrix") {
    ButterflyFactor<double> f(1, 8, InitKind::Identity, 0);
    for (std::size_t p = 0; p < 4; ++p) {
        const double* w = f.block(p);
        CHECK(w[0] * w[3] - w[1] * w[2] == 1.0);
    }
    CHECK(max_abs_diff(f.to_dense(), DenseMatrix<double>::identity(8)) == 0.0);
}

TEST_CASE("rotation init blocks are rotations") {
    // probe seeds for an angle near pi/2 and check the exact block shape
    bool probed = false;
    for (std::uint64_t seed = 0; seed < 20000; ++seed) {
        ButterflyFactor<double> f(1, 2, InitKind::Rotation, seed);
        const double* w = f.block(0);
        const double phi = std::atan2(w[2], w[0]);
        if (std::fabs(phi - M_PI / 2) < 5e-3) {
            CHECK(std::fabs(w[0]) <= 5e-3);
            CHECK(w[1] == doctest::Approx(-1.0).epsilon(1e-4));
            CHECK(w[2] == doctest::Approx(1.0).epsilon(1e-4));
            probed = true;
            break;
        }
    }
    CHECK(probed);
    // rotation determinant is 1 up to roundoff, any seed
    for (std::uint64_t seed = 0; seed < 32; ++seed) {
        ButterflyFactor<double> f(2, 16, InitKind::Rotation, seed);
        for (std::size_t p = 0; p < 8; ++p) {
            const double* w = f.block(p);
            CHECK(std::fabs(w[0] * w[3] - w[1] * w[2] - 1.0) <= 1e-15);
        }
    }
}

TEST_CASE("dense scatter matches the indexing rule") {
    ButterflyFactor<double> f(3, 16, InitKind::Rotation, 7);
    DenseMatrix<double> d = f.to_dense();
    // block diagonal with 4 blocks of size 4
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j)
            if (i / 4 != j / 4) CHECK(d(i, j) == 0.0);
    // non-zeros exactly at the pair positions
    PairIndexing idx(3, 16);
    DenseMatrix<double> mask(16, 16);
    for (std::size_t p = 0; p < idx.n_pairs(); ++p) {
        std::size_t lo, hi;
        idx.pair(p, lo, hi);
        mask(lo, lo) = mask(lo, hi) = mask(hi, lo) = mask(hi, hi) = 1.0;
    }
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j)
            if (mask(i, j) == 0.0) CHECK(d(i, j) == 0.0);
}

TEST_CASE("level-1 dense pattern, D=4") {
    ButterflyFactor<double> f = random_factor(1, 4, 99);
    DenseMatrix<double> d = f.to_dense();
    const std::vector<std::pair<int, int>> allowed = {
        {0, 0}, {0, 2}, {1, 1}, {1, 3}, {2, 0}, {2, 2}, {3, 1}, {3, 3}};
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            const bool ok = std::find(allowed.begin(), allowed.end(),
                                      std::make_pair(i, j)) != allowed.end();
            if (!ok) CHECK(d(i, j) == 0.0);
        }
    }
}

TEST_CASE("matvec per-pair formula") {
    ButterflyFactor<double> id(2, 12, InitKind::Identity, 0);
    std::vector<double> x = random_vector(12, 5);
    CHECK(id.matvec(x) == x);

    ButterflyFactor<double> f(1, 4, InitKind::Identity, 0);
    for (std::size_t p = 0; p < 2; ++p) {
        double* w = f.block(p);
        w[0] = 1; w[1] = 1; w[2] = 1; w[3] = -1;
    }
    std::vector<double> y = f.matvec({1, 2, 3, 4});
    CHECK(y == std::vector<double>{4, 6, -2, -2});

    CHECK_THROWS_AS(f.matvec({1, 2, 3}), std::invalid_argument);
}

TEST_CASE("matvec agrees with the dense realization") {
    ButterflyFactor<double> f = random_factor(2, 32, 3);
    std::vector<double> x = random_vector(32, 17);
    std::vector<double> fast = f.matvec(x);
    std::vector<double> slow = oracle::dense_matvec(f.to_dense(), x);
    double scale = 0.0;
    for (double v : slow) scale = std::max(scale, std::fabs(v));
    CHECK(oracle::max_abs(fast, slow) <= 1e-12 * std::max(1.0, scale));
}

TEST_CASE("log det closed form") {
    SUBCASE("identity") {
        ButterflyFactor<double> f(1, 16, InitKind::Identity, 0);
        auto r = f.log_det();
        CHECK(r.log_abs == 0.0);
        CHECK(r.sign == 1.0);
    }
    SUBCASE("single 2x2") {
        ButterflyFactor<double> f(1, 2, InitKind::Identity, 0);
        double* w = f.block(0);
        w[0] = 2; w[1] = 1; w[2] = 1; w[3] = 1;
        auto r = f.log_det();
        CHECK(r.log_abs == doctest::Approx(0.0).epsilon(1e-15));
        CHECK(r.sign == 1.0);
    }
    SUBCASE("random factor vs dense LU") {
        ButterflyFactor<double> f = random_factor(4, 64, 11);
        const double want = lu_log_abs_det(f.to_dense());
        CHECK(oracle::rel_err(f.log_det().log_abs, want) <= 1e-10);
    }
    SUBCASE("sweep dims, levels, seeds") {
        for (std::size_t dim : {2u, 4u, 8u, 16u, 32u, 64u, 128u, 256u}) {
            for (int level = 1; level <= max_level(dim); ++level) {
                for (std::uint64_t seed = 0; seed < 5; ++seed) {
                    ButterflyFactor<double> f =
                        random_factor(level, dim, seed * 131 + dim + static_cast<std::size_t>(level));
                    const double want = lu_log_abs_det(f.to_dense());
                    CHECK(oracle::rel_err(f.log_det().log_abs, want) <= 1e-10);
                }
            }
        }
    }
    SUBCASE("singular pair raises the -inf marker") {
        ButterflyFactor<double> f(1, 4, InitKind::Identity, 0);
        double* w = f.block(1);
        w[0] = 1; w[1] = 2; w[2] = 2; w[3] = 4; // det 0
        CHECK(std::isinf(f.log_det().log_abs));
        CHECK(f.log_det().log_abs < 0);
    }
#ifdef BFLOW_HAVE_EIGEN
    SUBCASE("our dense LU oracle agrees with Eigen") {
        ButterflyFactor<double> f = random_factor(3, 32, 23);
        const DenseMatrix<double> d = f.to_dense();
        CHECK(oracle::rel_err(lu_log_abs_det(d), oracle::eigen_log_abs_det(d)) <= 1e-12);
    }
#endif
}

TEST_CASE("factor inversion") {
    SUBCASE("identity inverts to identity") {
        ButterflyFactor<double> f(2, 8, InitKind::Identity, 0);
        CHECK(max_abs_diff(f.inverted().to_dense(), DenseMatrix<double>::identity(8)) == 0.0);
    }
    SUBCASE("diagonal block") {
        ButterflyFactor<double> f(1, 2, InitKind::Identity, 0);
        double* w = f.block(0);
        w[0] = 2; w[3] = 4;
        ButterflyFactor<double> inv = f.inverted();
        CHECK(inv.block(0)[0] == 0.5);
        CHECK(inv.block(0)[3] == 0.25);
        CHECK(inv.block(0)[1] == 0.0);
        CHECK(inv.block(0)[2] == 0.0);
    }
    SUBCASE("B B^-1 = I within 1e-10, D=128") {
        ButterflyFactor<double> f = random_factor(3, 128, 21, -2.0, 2.0, 1e-3);
        DenseMatrix<double> prod = matmul(f.to_dense(), f.inverted().to_dense());
        CHECK(max_abs_diff(prod, DenseMatrix<double>::identity(128)) <= 1e-10);
    }
    SUBCASE("inverse keeps level and sparsity") {
        ButterflyFactor<double> f = random_factor(2, 16, 9, -2.0, 2.0, 1e-3);
        ButterflyFactor<double> inv = f.inverted();
        CHECK(inv.level() == f.level());
        DenseMatrix<double> d = inv.to_dense();
        PairIndexing idx(2, 16);
        DenseMatrix<double> mask(16, 16);
        for (std::size_t p = 0; p < idx.n_pairs(); ++p) {
            std::size_t lo, hi;
            idx.pair(p, lo, hi);
            mask(lo, lo) = mask(lo, hi) = mask(hi, lo) = mask(hi, hi) = 1.0;
        }
        for (std::size_t i = 0; i < 16; ++i)
            for (std::size_t j = 0; j < 16; ++j)
                if (mask(i, j) == 0.0) CHECK(d(i, j) == 0.0);
    }
    SUBCASE("singular pair reports its index") {
        ButterflyFactor<double> f(1, 8, InitKind::Identity, 0);
        double* w = f.block(2);
        w[0] = 0; w[3] = 0;
        try {
            (void)f.inverted();
            CHECK(false);
        } catch (const SingularFactorError& e) {
            CHECK(e.pair_index() == 2);
        }
    }
}

TEST_CASE("layer apply and inverse") {
    SUBCASE("identity layer") {
        auto layer = make_butterfly_layer<double>(16, contiguous_levels(4, false),
                                                  InitKind::Identity, 1);
        std::vector<double> x = random_vector(16, 2);
        auto r = layer.apply(x);
        CHECK(r.y == x);
        CHECK(r.log_abs_det == 0.0);
        CHECK(layer.invert_apply(x) == x);
    }
    SUBCASE("single factor layer equals the factor") {
        ButterflyFactor<double> f = random_factor(2, 16, 4);
        ButterflyLayer<double> layer(16, {f});
        std::vector<double> x = random_vector(16, 8);
        CHECK(layer.apply(x).y == f.matvec(x));
        CHECK(layer.apply(x).log_abs_det == f.log_det().log_abs);
    }
    SUBCASE("bidirectional layer vs dense product, D=16 M=4") {
        auto layer = make_butterfly_layer<double>(16, contiguous_levels(4, true),
                                                  InitKind::Rotation, 5);
        CHECK(layer.size() == 8);
        std::vector<double> x = random_vector(16, 31);
        auto r = layer.apply(x);
        const DenseMatrix<double> d = layer.to_dense();
        std::vector<double> want = oracle::dense_matvec(d, x);
        CHECK(oracle::max_abs(r.y, want) <= 1e-11);
        CHECK(oracle::rel_err(r.log_abs_det, lu_log_abs_det(d)) <= 1e-9);
    }
    SUBCASE("rotation factor inverse applies the transpose") {
        ButterflyFactor<double> f(1, 8, InitKind::Rotation, 3);
        ButterflyLayer<double> layer(8, {f});
        std::vector<double> z = random_vector(8, 7);
        // orthogonal 2x2 blocks: inverse = transpose
        std::vector<double> want(8);
        PairIndexing idx(1, 8);
        std::vector<double> zz = z;
        for (std::size_t p = 0; p < 4; ++p) {
            std::size_t lo, hi;
            idx.pair(p, lo, hi);
            const double* w = f.block(p);
            want[lo] = w[0] * z[lo] + w[2] * z[hi];
            want[hi] = w[1] * z[lo] + w[3] * z[hi];
        }
        CHECK(oracle::max_abs(layer.invert_apply(z), want) <= 1e-14);
    }
    SUBCASE("six random factors round trip, D=64") {
        std::vector<ButterflyFactor<double>> fs;
        const int levels[6] = {1, 3, 2, 6, 1, 4};
        for (int i = 0; i < 6; ++i)
            fs.push_back(random_factor(levels[i], 64, 100 + static_cast<std::uint64_t>(i),
                                       -2.0, 2.0, 1e-2));
        ButterflyLayer<double> layer(64, std::move(fs));
        std::vector<double> x = random_vector(64, 55);
        std::vector<double> back = layer.invert_apply(layer.apply(x).y);
        CHECK(oracle::max_abs(back, x) <= 1e-9);
    }
    SUBCASE("layer dense equals ordered product of factor denses") {
        auto layer = make_butterfly_layer<double>(8, std::vector<int>{1, 3, 2},
                                                  InitKind::Rotation, 12);
        DenseMatrix<double> prod = DenseMatrix<double>::identity(8);
        for (const auto& f : layer.factors()) prod = matmul(prod, f.to_dense());
        CHECK(max_abs_diff(layer.to_dense(), prod) <= 1e-14);
    }
}

TEST_CASE("tied factors share weights inside each sub-block") {
    ButterflyFactor<double> f(2, 16, InitKind::Rotation, 6, /*tied=*/true);
    PairIndexing idx = f.indexing();
    for (std::size_t m = 0; m < idx.n_blocks; ++m) {
        const double* first = f.block(idx.pair_index(m, 0));
        for (std::size_t j = 1; j < idx.half; ++j) {
            const double* w = f.block(idx.pair_index(m, j));
            for (int t = 0; t < 4; ++t) CHECK(w[t] == first[t]);
        }
    }
    // distinct sub-blocks draw distinct angles
    CHECK(f.block(idx.pair_index(0, 0))[0] != f.block(idx.pair_index(1, 0))[0]);
}

TEST_CASE("permutation decomposition") {
    SUBCASE("identity permutation gives all-identity factors") {
        std::vector<std::size_t> perm = {0, 1, 2, 3, 4, 5, 6, 7};
        auto layer = perm_decompose(perm);
        CHECK(layer.size() == 6); // 2k with k=3
        CHECK(max_abs_diff(layer.to_dense(), DenseMatrix<double>::identity(8)) == 0.0);
        for (const auto& f : layer.factors())
            CHECK(max_abs_diff(f.to_dense(), DenseMatrix<double>::identity(8)) == 0.0);
    }
    SUBCASE("swap of two") {
        auto layer = perm_decompose({1, 0});
        CHECK(layer.size() == 2);
        int swaps = 0;
        for (const auto& f : layer.factors()) {
            const double* w = f.block(0);
            if (w[1] == 1.0 && w[2] == 1.0 && w[0] == 0.0 && w[3] == 0.0) ++swaps;
        }
        CHECK(swaps == 1);
        std::vector<double> y = layer.apply({3.0, 4.0}).y;
        CHECK(y == std::vector<double>{4.0, 3.0});
    }
    SUBCASE("level schedule is {1..k, k..1}") {
        auto layer = perm_decompose(random_perm(16, 77));
        CHECK(layer.level_schedule() == std::vector<int>{1, 2, 3, 4, 4, 3, 2, 1});
    }
    SUBCASE("random permutations reproduce P exactly") {
        for (std::size_t dim : {4u, 8u, 16u, 32u, 64u}) {
            for (std::uint64_t seed = 0; seed < 20; ++seed) {
                auto perm = random_perm(dim, seed * 7919 + dim);
                auto layer = perm_decompose(perm);
                // switch-only blocks
                for (const auto& f : layer.factors()) {
                    for (std::size_t p = 0; p < dim / 2; ++p) {
                        const double* w = f.block(p);
                        const bool id = w[0] == 1.0 && w[1] == 0.0 && w[2] == 0.0 && w[3] == 1.0;
                        const bool sw = w[0] == 0.0 && w[1] == 1.0 && w[2] == 1.0 && w[3] == 0.0;
                        CHECK((id || sw));
                    }
                }
                // exact column-by-column equality with the permutation matrix
                for (std::size_t j = 0; j < dim; ++j) {
                    std::vector<double> e(dim, 0.0);
                    e[j] = 1.0;
                    std::vector<double> col = layer.apply(e).y;
                    for (std::size_t i = 0; i < dim; ++i)
                        CHECK(col[i] == (perm[i] == j ? 1.0 : 0.0));
                }
            }
        }
    }
    SUBCASE("composition with the inverse permutation is the identity") {
        auto perm = random_perm(32, 1234);
        std::vector<std::size_t> inv(32);
        for (std::size_t i = 0; i < 32; ++i) inv[perm[i]] = i;
        auto a = perm_decompose(perm);
        auto b = perm_decompose(inv);
        std::vector<double> x = random_vector(32, 9);
        std::vector<double> y = b.apply(a.apply(x).y).y;
        CHECK(y == x);
    }
    SUBCASE("bad input") {
        CHECK_THROWS_AS(perm_decompose({0, 1, 2}), std::invalid_argument);
        CHECK_THROWS_AS(perm_decompose({0, 0, 1, 1}), std::invalid_argument);
    }
}

TEST_CASE("circulant construction") {
    SUBCASE("impulse kernel gives the identity") {
        std::vector<Cx> kernel(8, Cx{0, 0});
        kernel[0] = Cx{1, 0};
        auto layer = circulant_to_butterfly(kernel);
        CHECK(max_abs_diff(layer.to_dense(), DenseMatrix<Cx>::identity(8)) <= 1e-12);
    }
    SUBCASE("shift kernel gives the cyclic shift matrix") {
        std::vector<Cx> kernel(8, Cx{0, 0});
        kernel[1] = Cx{1, 0};
        auto layer = circulant_to_butterfly(kernel);
        CHECK(max_abs_diff(layer.to_dense(), oracle::circulant_matrix(kernel)) <= 1e-12);
    }
    SUBCASE("random kernel matches direct circular convolution, D=256") {
        CounterRng rng(42);
        std::vector<Cx> kernel(256), x(256);
        for (auto& v : kernel) v = Cx{rng.normal(), rng.normal()};
        for (auto& v : x) v = Cx{rng.normal(), rng.normal()};
        auto layer = circulant_to_butterfly(kernel);
        std::vector<Cx> got = x;
        layer.apply_inplace(got);
        CHECK(oracle::max_abs(got, oracle::circular_conv(kernel, x)) <= 1e-8);
    }
    SUBCASE("commutes with cyclic shifts") {
        CounterRng rng(4);
        std::vector<Cx> kernel(16);
        for (auto& v : kernel) v = Cx{rng.normal(), rng.normal()};
        auto layer = circulant_to_butterfly(kernel);
        std::vector<Cx> x(16);
        for (auto& v : x) v = Cx{rng.normal(), rng.normal()};
        std::vector<Cx> shifted(16);
        for (std::size_t i = 0; i < 16; ++i) shifted[i] = x[(i + 15) % 16];
        std::vector<Cx> a = shifted, b = x;
        layer.apply_inplace(a); // layer(shift(x))
        layer.apply_inplace(b);
        std::vector<Cx> b_shifted(16);
        for (std::size_t i = 0; i < 16; ++i) b_shifted[i] = b[(i + 15) % 16];
        CHECK(oracle::max_abs(a, b_shifted) <= 1e-10);
    }
    SUBCASE("rejects non powers of two") {
        CHECK_THROWS_AS(circulant_to_butterfly(std::vector<Cx>(6)), std::invalid_argument);
    }
}

TEST_CASE("segmented layers act block-diagonally") {
    SUBCASE("identity segments") {
        std::vector<ButterflyLayer<double>> layers;
        layers.push_back(make_butterfly_layer<double>(512, contiguous_levels(9, false),
                                                      InitKind::Identity, 1));
        layers.push_back(make_butterfly_layer<double>(256, contiguous_levels(8, false),
                                                      InitKind::Identity, 2));
        layers.push_back(make_butterfly_layer<double>(16, contiguous_levels(4, false),
                                                      InitKind::Identity, 3));
        SegmentedLayer seg({512, 256, 16}, std::move(layers));
        std::vector<double> x = random_vector(784, 3);
        auto r = seg.apply(x);
        CHECK(r.y == x);
        CHECK(r.log_abs_det == 0.0);
    }
    SUBCASE("swap permutations stay within their segment") {
        std::vector<ButterflyLayer<double>> layers;
        layers.push_back(perm_decompose({3, 2, 1, 0}));
        layers.push_back(perm_decompose({1, 0, 3, 2}));
        SegmentedLayer seg({4, 4}, std::move(layers));
        std::vector<double> x = {0, 1, 2, 3, 4, 5, 6, 7};
        auto r = seg.apply(x);
        CHECK(r.y == std::vector<double>{3, 2, 1, 0, 5, 4, 7, 6});
    }
    SUBCASE("matches the block-diagonal dense oracle") {
        std::vector<ButterflyLayer<double>> layers;
        layers.push_back(make_butterfly_layer<double>(8, contiguous_levels(3, false),
                                                      InitKind::Rotation, 4));
        layers.push_back(make_butterfly_layer<double>(8, contiguous_levels(2, true),
                                                      InitKind::Rotation, 5));
        DenseMatrix<double> block(16, 16);
        for (int s = 0; s < 2; ++s) {
            DenseMatrix<double> d = layers[static_cast<std::size_t>(s)].to_dense();
            for (std::size_t i = 0; i < 8; ++i)
                for (std::size_t j = 0; j < 8; ++j)
                    block(static_cast<std::size_t>(s) * 8 + i,
                          static_cast<std::size_t>(s) * 8 + j) = d(i, j);
        }
        double want_logdet = layers[0].log_abs_det() + layers[1].log_abs_det();
        SegmentedLayer seg({8, 8}, std::move(layers));
        std::vector<double> x = random_vector(16, 6);
        auto r = seg.apply(x);
        CHECK(oracle::max_abs(r.y, oracle::dense_matvec(block, x)) <= 1e-11);
        CHECK(r.log_abs_det == want_logdet);
        CHECK(oracle::rel_err(r.log_abs_det, lu_log_abs_det(block)) <= 1e-9);
        // round trip
        std::vector<double> z = r.y;
        seg.invert_apply_inplace(z);
        CHECK(oracle::max_abs(z, x) <= 1e-9);
    }
    SUBCASE("length mismatch") {
        SegmentedLayer seg({4}, {make_butterfly_layer<double>(
                                    4, contiguous_levels(2, false), InitKind::Identity, 0)});
        CHECK_THROWS_AS(seg.apply(std::vector<double>(5, 0.0)), std::invalid_argument);
    }
}
