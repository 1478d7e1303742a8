#include "bflow/butterfly.hpp"

#include <algorithm>
#include <cstdint>

namespace bflow {

namespace {

// Switch states of one routing stage; one flag per pair, true = swap.
using StageSwitches = std::vector<std::uint8_t>;

struct BenesPlan {
    std::size_t dim = 0;
    int k = 0;
    // Application order: index d holds a level-(d+1) stage for d < k,
    // index 2k-2-d holds the matching output stage.
    std::vector<StageSwitches> stages;
};

// Routes `dest` (input position -> output position) on the range
// [base, base+n) at recursion depth d. The looping walk 2-colors the
// union of the input-switch and output-switch matchings, which is a
// disjoint set of even cycles, so the alternating assignment is always
// consistent.
void route_range(BenesPlan& plan, int depth, std::size_t base, std::vector<std::size_t> dest) {
    const std::size_t n = dest.size();
    const std::size_t h = n / 2;
    const int k = plan.k;
    const std::size_t block_half = h;

    auto stage_pair = [&](int stage_idx, std::size_t s, bool swap) {
        // Pair (base+s, base+s+h) of the level-(depth+1) factor.
        const std::size_t p = base / n * block_half + s;
        plan.stages[static_cast<std::size_t>(stage_idx)][p] = swap ? 1 : 0;
    };

    if (n == 2) {
        stage_pair(k - 1, 0, dest[0] != 0);
        return;
    }

    std::vector<std::size_t> src(n);
    for (std::size_t i = 0; i < n; ++i) src[dest[i]] = i;

    std::vector<int> side(n, -1); // 0 = upper subnetwork, 1 = lower
    for (std::size_t s0 = 0; s0 < n; ++s0) {
        if (side[s0] != -1) continue;
        std::size_t s = s0;
        while (true) {
            side[s] = 0;
            const std::size_t mate = (s < h) ? s + h : s - h;
            side[mate] = 1;
            const std::size_t o = dest[mate];
            const std::size_t o_mate = (o < h) ? o + h : o - h;
            const std::size_t next = src[o_mate];
            if (next == s0) break;
            s = next;
        }
    }

    std::vector<std::size_t> dest_up(h), dest_lo(h);
    for (std::size_t s = 0; s < h; ++s) {
        const bool crossed_in = side[s] == 1;
        stage_pair(depth, s, crossed_in);
        const std::size_t into_upper = crossed_in ? s + h : s;
        const std::size_t into_lower = crossed_in ? s : s + h;
        const std::size_t o_up = dest[into_upper];
        const std::size_t o_lo = dest[into_lower];
        dest_up[s] = (o_up < h) ? o_up : o_up - h;
        dest_lo[s] = (o_lo < h) ? o_lo : o_lo - h;
    }
    for (std::size_t t = 0; t < h; ++t) {
        // Output switch t is crossed when the upper subnetwork's output t
        // belongs at position t+h.
        const std::size_t feeder = src[t];
        stage_pair(2 * k - 2 - depth, t, side[feeder] == 1);
    }

    route_range(plan, depth + 1, base, std::move(dest_up));
    route_range(plan, depth + 1, base + h, std::move(dest_lo));
}

ButterflyFactor<double> switches_to_factor(int level, std::size_t dim,
                                           const StageSwitches& sw) {
    PairIndexing idx(level, dim);
    std::vector<double> w(4 * idx.n_pairs());
    for (std::size_t p = 0; p < idx.n_pairs(); ++p) {
        if (sw[p]) {
            w[4 * p + 1] = 1.0;
            w[4 * p + 2] = 1.0;
        } else {
            w[4 * p + 0] = 1.0;
            w[4 * p + 3] = 1.0;
        }
    }
    return ButterflyFactor<double>(idx, std::move(w));
}

} // namespace

ButterflyLayer<double> perm_decompose(const std::vector<std::size_t>& perm) {
    const std::size_t dim = perm.size();
    if (!is_power_of_two(dim))
        throw std::invalid_argument("perm_decompose: size must be a power of two");
    std::vector<std::uint8_t> seen(dim, 0);
    for (std::size_t v : perm) {
        if (v >= dim || seen[v])
            throw std::invalid_argument("perm_decompose: input is not a permutation");
        seen[v] = 1;
    }
    if (dim == 1) return ButterflyLayer<double>(1);

    const int k = max_level(dim);
    BenesPlan plan;
    plan.dim = dim;
    plan.k = k;
    plan.stages.assign(static_cast<std::size_t>(2 * k - 1), StageSwitches(dim / 2, 0));

    // perm is in gather form (y[i] = x[perm[i]]); routing wants the
    // destination of every input, i.e. the inverse.
    std::vector<std::size_t> dest(dim);
    for (std::size_t i = 0; i < dim; ++i) dest[perm[i]] = i;
    route_range(plan, 0, 0, std::move(dest));

    // Application order: levels 1..k-1, k, then an all-identity level-k
    // stage, then k-1..1. Stored order is the reverse, so the level
    // schedule reads {1..k, k..1}.
    std::vector<ButterflyFactor<double>> app_order;
    app_order.reserve(static_cast<std::size_t>(2 * k));
    for (int a = 0; a < 2 * k - 1; ++a) {
        const int level = (a < k) ? a + 1 : 2 * k - 1 - a;
        app_order.push_back(switches_to_factor(level, dim, plan.stages[static_cast<std::size_t>(a)]));
        if (a == k - 1)
            app_order.push_back(switches_to_factor(k, dim, StageSwitches(dim / 2, 0)));
    }
    std::reverse(app_order.begin(), app_order.end());
    return ButterflyLayer<double>(dim, std::move(app_order));
}

ButterflyLayer<std::complex<double>> to_complex(const ButterflyLayer<double>& layer) {
    std::vector<ButterflyFactor<std::complex<double>>> factors;
    factors.reserve(layer.size());
    for (const auto& f : layer.factors()) {
        std::vector<std::complex<double>> w(f.weights().begin(), f.weights().end());
        factors.emplace_back(f.indexing(), std::move(w), f.tied());
    }
    return ButterflyLayer<std::complex<double>>(layer.dim(), std::move(factors));
}

} // namespace bflow
