#include "bflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <thread>

#include "bflow/errors.hpp"

namespace bflow {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::vector<double> gather(std::span<const double> x, const std::vector<std::size_t>& idx) {
    std::vector<double> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x[idx[i]];
    return out;
}

double std_normal_log_prob(std::span<const double> z) {
    double s = 0.0;
    for (double v : z) s += v * v;
    return -0.5 * s - 0.5 * kLog2Pi * static_cast<double>(z.size());
}

std::size_t threads_from_env() {
    const char* env = std::getenv("BFLW_THREADS");
    if (!env) return 1;
    const long v = std::strtol(env, nullptr, 10);
    return v > 1 ? static_cast<std::size_t>(std::min(v, 64L)) : 1;
}

} // namespace

// ---------------------------------------------------------------------------
// ActNorm

void ActNorm::forward_inplace(std::span<double> x) const {
    for (std::size_t s = 0; s < sites; ++s)
        for (std::size_t c = 0; c < channels; ++c)
            x[s * channels + c] = std::exp(log_scale[c]) * x[s * channels + c] + bias[c];
}

void ActNorm::inverse_inplace(std::span<double> y) const {
    for (std::size_t s = 0; s < sites; ++s)
        for (std::size_t c = 0; c < channels; ++c)
            y[s * channels + c] = (y[s * channels + c] - bias[c]) * std::exp(-log_scale[c]);
}

double ActNorm::log_det() const {
    double s = 0.0;
    for (double v : log_scale) s += v;
    return static_cast<double>(sites) * s;
}

void ActNorm::init_from_batch(std::span<const double> batch, std::size_t n) {
    const std::size_t dim = channels * sites;
    const double count = static_cast<double>(n * sites);
    for (std::size_t c = 0; c < channels; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t s = 0; s < sites; ++s) mean += batch[i * dim + s * channels + c];
        mean /= count;
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t s = 0; s < sites; ++s) {
                const double d = batch[i * dim + s * channels + c] - mean;
                var += d * d;
            }
        double std_dev = std::sqrt(var / count);
        if (std_dev < 1e-6) {
            std::cerr << "actnorm init: channel " << c << " has near-zero std, clamping to 1e-6\n";
            std_dev = 1e-6;
        }
        log_scale[c] = -std::log(std_dev);
        bias[c] = -mean / std_dev;
    }
    initialized = true;
}

void ActNorm::vjp(std::span<const double> g_y, std::span<const double> x_in,
                  std::span<double> g_x) {
    for (std::size_t s = 0; s < sites; ++s)
        for (std::size_t c = 0; c < channels; ++c) {
            const double g = g_y[s * channels + c];
            const double sc = std::exp(log_scale[c]);
            g_log_scale[c] += g * x_in[s * channels + c] * sc;
            g_bias[c] += g;
            g_x[s * channels + c] = sc * g;
        }
}

void ActNorm::zero_grad() {
    std::fill(g_log_scale.begin(), g_log_scale.end(), 0.0);
    std::fill(g_bias.begin(), g_bias.end(), 0.0);
}

// ---------------------------------------------------------------------------
// MixingLayer

std::size_t MixingLayer::dim() const {
    switch (kind) {
        case Kind::Naive: return naive.dim();
        case Kind::Blockwise: return block.dim();
        case Kind::Segmented: return seg.dim();
    }
    return 0;
}

void MixingLayer::build_slots() {
    slots.clear();
    auto add_factor = [&](ButterflyFactor<double>& f) {
        FactorSlot s;
        s.weights = &f.weights();
        s.idx = f.indexing();
        s.grad_full.assign(f.weights().size(), 0.0);
        if (tied) {
            s.canonical.assign(4 * s.idx.n_blocks, 0.0);
            s.canonical_grad.assign(4 * s.idx.n_blocks, 0.0);
            for (std::size_t m = 0; m < s.idx.n_blocks; ++m) {
                const double* w = &(*s.weights)[4 * s.idx.pair_index(m, 0)];
                for (int t = 0; t < 4; ++t) s.canonical[4 * m + t] = w[t];
            }
        }
        slots.push_back(std::move(s));
    };
    if (kind == Kind::Naive) {
        for (auto& f : naive.factors()) add_factor(f);
    } else if (kind == Kind::Segmented) {
        for (auto& sg : seg.segments())
            for (auto& f : sg.factors()) add_factor(f);
    }
    // blockwise parameters live in the factor pair transforms themselves
}

void MixingLayer::sync_tied() {
    if (!tied) return;
    for (auto& s : slots) {
        for (std::size_t m = 0; m < s.idx.n_blocks; ++m)
            for (std::size_t j = 0; j < s.idx.half; ++j) {
                double* w = &(*s.weights)[4 * s.idx.pair_index(m, j)];
                for (int t = 0; t < 4; ++t) w[t] = s.canonical[4 * m + t];
            }
    }
}

void MixingLayer::reduce_grads() {
    if (!tied) return;
    for (auto& s : slots) {
        std::fill(s.canonical_grad.begin(), s.canonical_grad.end(), 0.0);
        for (std::size_t m = 0; m < s.idx.n_blocks; ++m)
            for (std::size_t j = 0; j < s.idx.half; ++j) {
                const double* g = &s.grad_full[4 * s.idx.pair_index(m, j)];
                for (int t = 0; t < 4; ++t) s.canonical_grad[4 * m + t] += g[t];
            }
    }
}

void MixingLayer::zero_grad() {
    for (auto& s : slots) {
        std::fill(s.grad_full.begin(), s.grad_full.end(), 0.0);
        std::fill(s.canonical_grad.begin(), s.canonical_grad.end(), 0.0);
    }
    if (kind == Kind::Blockwise)
        for (auto& f : block.factors())
            for (auto& p : f.pairs()) p.zero_grad();
}

void MixingLayer::forward_inplace(std::span<double> x) const {
    switch (kind) {
        case Kind::Naive: naive.apply_inplace(x); break;
        case Kind::Blockwise: block.apply_inplace(x); break;
        case Kind::Segmented: seg.apply_inplace(x); break;
    }
}

void MixingLayer::inverse_inplace(std::span<double> z) const {
    switch (kind) {
        case Kind::Naive: naive.invert_apply_inplace(z); break;
        case Kind::Blockwise: block.invert_apply_inplace(z); break;
        case Kind::Segmented: seg.invert_apply_inplace(z); break;
    }
}

double MixingLayer::log_det() const {
    switch (kind) {
        case Kind::Naive: return naive.log_abs_det();
        case Kind::Blockwise: return block.log_abs_det();
        case Kind::Segmented: return seg.log_abs_det();
    }
    return 0.0;
}

void MixingLayer::forward_cached(std::span<double> x, Cache& cache) {
    cache.inputs.clear();
    cache.block_pairs.clear();
    if (kind == Kind::Naive) {
        const auto& fs = naive.factors();
        for (auto it = fs.rbegin(); it != fs.rend(); ++it) {
            cache.inputs.emplace_back(x.begin(), x.end());
            it->apply_inplace(x);
        }
    } else if (kind == Kind::Segmented) {
        for (std::size_t s = 0; s < seg.n_segments(); ++s) {
            auto& sg = seg.segments()[s];
            std::span<double> slice = x.subspan(seg.offset(s), sg.dim());
            const auto& fs = sg.factors();
            for (auto it = fs.rbegin(); it != fs.rend(); ++it) {
                cache.inputs.emplace_back(slice.begin(), slice.end());
                it->apply_inplace(slice);
            }
        }
    } else {
        auto& fs = block.factors();
        cache.block_pairs.resize(fs.size());
        const std::size_t c = block.factors().empty() ? 0 : fs[0].block_size();
        std::vector<double> yp(c), yq(c);
        for (std::size_t rj = 0; rj < fs.size(); ++rj) {
            // apply order: last stored factor first
            const std::size_t fi = fs.size() - 1 - rj;
            auto& f = fs[fi];
            auto& pcs = cache.block_pairs[fi];
            pcs.resize(f.pairs().size());
            for (std::size_t p = 0; p < f.pairs().size(); ++p) {
                std::size_t gl, gh;
                f.group_indexing().pair(p, gl, gh);
                std::span<double> xp = x.subspan(gl * c, c);
                std::span<double> xq = x.subspan(gh * c, c);
                auto& pc = pcs[p];
                pc.xp.assign(xp.begin(), xp.end());
                pc.xq.assign(xq.begin(), xq.end());
                pc.t.resize(c);
                pc.vy.resize(c);
                pc.up.resize(c);
                pc.vz.resize(c);
                f.pairs()[p].forward_cached(pc.xp, pc.xq, pc.t, pc.vy, pc.up, pc.vz, yp, yq);
                std::copy(yp.begin(), yp.end(), xp.begin());
                std::copy(yq.begin(), yq.end(), xq.begin());
            }
        }
    }
}

void MixingLayer::vjp(std::span<double> g, const Cache& cache) {
    if (kind == Kind::Naive) {
        const auto& fs = naive.factors();
        const std::size_t k = fs.size();
        for (std::size_t j = 0; j < k; ++j) {
            const auto& f = fs[j];
            const std::vector<double>& xin = cache.inputs[k - 1 - j];
            double* gf = slots[j].grad_full.data();
            for (std::size_t p = 0; p < f.indexing().n_pairs(); ++p) {
                std::size_t lo, hi;
                f.indexing().pair(p, lo, hi);
                const double* w = f.block(p);
                const double gp = g[lo], gq = g[hi];
                gf[4 * p + 0] += gp * xin[lo];
                gf[4 * p + 1] += gp * xin[hi];
                gf[4 * p + 2] += gq * xin[lo];
                gf[4 * p + 3] += gq * xin[hi];
                g[lo] = w[0] * gp + w[2] * gq;
                g[hi] = w[1] * gp + w[3] * gq;
            }
        }
    } else if (kind == Kind::Segmented) {
        std::size_t slot_base = 0, cache_base = 0;
        for (std::size_t s = 0; s < seg.n_segments(); ++s) {
            auto& sg = seg.segments()[s];
            std::span<double> gs = g.subspan(seg.offset(s), sg.dim());
            const auto& fs = sg.factors();
            const std::size_t k = fs.size();
            for (std::size_t j = 0; j < k; ++j) {
                const auto& f = fs[j];
                const std::vector<double>& xin = cache.inputs[cache_base + k - 1 - j];
                double* gf = slots[slot_base + j].grad_full.data();
                for (std::size_t p = 0; p < f.indexing().n_pairs(); ++p) {
                    std::size_t lo, hi;
                    f.indexing().pair(p, lo, hi);
                    const double* w = f.block(p);
                    const double gp = gs[lo], gq = gs[hi];
                    gf[4 * p + 0] += gp * xin[lo];
                    gf[4 * p + 1] += gp * xin[hi];
                    gf[4 * p + 2] += gq * xin[lo];
                    gf[4 * p + 3] += gq * xin[hi];
                    gs[lo] = w[0] * gp + w[2] * gq;
                    gs[hi] = w[1] * gp + w[3] * gq;
                }
            }
            slot_base += k;
            cache_base += k;
        }
    } else {
        auto& fs = block.factors();
        const std::size_t c = fs.empty() ? 0 : fs[0].block_size();
        std::vector<double> g_xp(c), g_xq(c);
        for (std::size_t fi = 0; fi < fs.size(); ++fi) {
            auto& f = fs[fi];
            const auto& pcs = cache.block_pairs[fi];
            for (std::size_t p = 0; p < f.pairs().size(); ++p) {
                std::size_t gl, gh;
                f.group_indexing().pair(p, gl, gh);
                std::span<double> gp = g.subspan(gl * c, c);
                std::span<double> gq = g.subspan(gh * c, c);
                const auto& pc = pcs[p];
                std::fill(g_xp.begin(), g_xp.end(), 0.0);
                std::fill(g_xq.begin(), g_xq.end(), 0.0);
                f.pairs()[p].accumulate_vjp(gp, gq, pc.xp, pc.xq, pc.t, pc.vy, pc.up,
                                            pc.vz, g_xp, g_xq);
                std::copy(g_xp.begin(), g_xp.end(), gp.begin());
                std::copy(g_xq.begin(), g_xq.end(), gq.begin());
            }
        }
    }
}

void MixingLayer::add_log_det_grads() {
    if (kind == Kind::Blockwise) {
        for (auto& f : block.factors())
            for (auto& p : f.pairs()) {
                for (auto& v : p.diag_first().grad_log_s()) v -= 1.0;
                for (auto& v : p.diag_second().grad_log_s()) v -= 1.0;
            }
        return;
    }
    auto add_for = [&](const ButterflyFactor<double>& f, FactorSlot& slot) {
        for (std::size_t p = 0; p < f.indexing().n_pairs(); ++p) {
            const double* w = f.block(p);
            const double det = w[0] * w[3] - w[1] * w[2];
            slot.grad_full[4 * p + 0] -= w[3] / det;
            slot.grad_full[4 * p + 1] += w[2] / det;
            slot.grad_full[4 * p + 2] += w[1] / det;
            slot.grad_full[4 * p + 3] -= w[0] / det;
        }
    };
    if (kind == Kind::Naive) {
        for (std::size_t j = 0; j < naive.factors().size(); ++j)
            add_for(naive.factors()[j], slots[j]);
    } else {
        std::size_t base = 0;
        for (auto& sg : seg.segments()) {
            for (std::size_t j = 0; j < sg.factors().size(); ++j)
                add_for(sg.factors()[j], slots[base + j]);
            base += sg.factors().size();
        }
    }
}

// ---------------------------------------------------------------------------
// Coupling

Coupling::Coupling(const DataShape& shape, std::size_t hidden, std::uint64_t seed)
    : channels(shape.channels), sites(shape.sites()) {
    if (channels % 2 != 0)
        throw std::invalid_argument("coupling: channel count must be even");
    const std::size_t half = channels / 2;
    for (std::size_t s = 0; s < sites; ++s) {
        for (std::size_t c = 0; c < half; ++c) a_idx.push_back(s * channels + c);
        for (std::size_t c = half; c < channels; ++c) b_idx.push_back(s * channels + c);
    }
    DataShape half_shape = shape;
    half_shape.channels = half;
    cond = Conditioner(half_shape, hidden, b_idx.size(), /*single_affine=*/false, seed);
}

double Coupling::forward_inplace(std::span<double> x, Cache* cache) const {
    const std::size_t nb = b_idx.size();
    std::vector<double> xa = gather(x, a_idx);
    std::vector<double> xb = gather(x, b_idx);
    std::vector<double> out(2 * nb);
    cond.forward(xa, out, cache ? &cache->cond : nullptr);
    double log_det = 0.0;
    std::vector<double> scale(nb);
    for (std::size_t i = 0; i < nb; ++i) {
        scale[i] = sigmoid(out[i] + 2.0);
        log_det += std::log(scale[i]);
        x[b_idx[i]] = scale[i] * xb[i] + out[nb + i];
    }
    if (cache) {
        cache->xb = std::move(xb);
        cache->scale = std::move(scale);
    }
    return log_det;
}

void Coupling::inverse_inplace(std::span<double> y) const {
    const std::size_t nb = b_idx.size();
    std::vector<double> ya = gather(y, a_idx);
    std::vector<double> out(2 * nb);
    cond.forward(ya, out, nullptr);
    for (std::size_t i = 0; i < nb; ++i) {
        const double s = sigmoid(out[i] + 2.0);
        y[b_idx[i]] = (y[b_idx[i]] - out[nb + i]) / s;
    }
}

void Coupling::vjp(std::span<double> g, const Cache& cache, double coef) {
    const std::size_t nb = b_idx.size();
    std::vector<double> g_cond(2 * nb);
    for (std::size_t i = 0; i < nb; ++i) {
        const double g_yb = g[b_idx[i]];
        const double s = cache.scale[i];
        const double g_scale = g_yb * cache.xb[i] - coef / s;
        g_cond[i] = g_scale * s * (1.0 - s);
        g_cond[nb + i] = g_yb;
    }
    std::vector<double> g_xa(a_idx.size(), 0.0);
    cond.vjp(g_cond, cache.cond, g_xa);
    for (std::size_t i = 0; i < a_idx.size(); ++i) g[a_idx[i]] += g_xa[i];
    for (std::size_t i = 0; i < nb; ++i) g[b_idx[i]] = cache.scale[i] * g[b_idx[i]];
}

void Coupling::zero_grad() { cond.zero_grad(); }

// ---------------------------------------------------------------------------
// SplitLayer

SplitLayer::SplitLayer(const DataShape& shape, std::uint64_t seed)
    : channels(shape.channels), sites(shape.sites()) {
    if (channels % 2 != 0)
        throw std::invalid_argument("split: channel count must be even");
    const std::size_t half = channels / 2;
    for (std::size_t s = 0; s < sites; ++s) {
        for (std::size_t c = 0; c < half; ++c) keep_idx.push_back(s * channels + c);
        for (std::size_t c = half; c < channels; ++c) out_idx.push_back(s * channels + c);
    }
    DataShape half_shape = shape;
    half_shape.channels = half;
    cond = Conditioner(half_shape, 0, out_idx.size(), /*single_affine=*/true, seed);
}

double SplitLayer::forward(std::span<const double> x, std::vector<double>& keep,
                           Cache* cache) const {
    const std::size_t no = out_idx.size();
    keep = gather(x, keep_idx);
    std::vector<double> out = gather(x, out_idx);
    std::vector<double> params(2 * no);
    cond.forward(keep, params, cache ? &cache->cond : nullptr);
    double log_p = 0.0;
    for (std::size_t i = 0; i < no; ++i) {
        const double mu = params[i];
        const double log_sigma = params[no + i];
        const double d = (out[i] - mu) * std::exp(-log_sigma);
        log_p += -0.5 * kLog2Pi - log_sigma - 0.5 * d * d;
    }
    if (cache) {
        cache->keep = keep;
        cache->out = std::move(out);
        cache->mu.assign(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(no));
        cache->log_sigma.assign(params.begin() + static_cast<std::ptrdiff_t>(no), params.end());
    }
    return log_p;
}

std::vector<double> SplitLayer::inverse(std::span<const double> keep,
                                        std::span<const double> noise) const {
    const std::size_t no = out_idx.size();
    std::vector<double> params(2 * no);
    cond.forward(keep, params, nullptr);
    std::vector<double> x(keep.size() + no);
    for (std::size_t i = 0; i < keep_idx.size(); ++i) x[keep_idx[i]] = keep[i];
    for (std::size_t i = 0; i < no; ++i)
        x[out_idx[i]] = params[i] + std::exp(params[no + i]) * noise[i];
    return x;
}

void SplitLayer::vjp(std::span<const double> g_keep, const Cache& cache,
                     std::span<double> g_x, double coef) {
    const std::size_t no = out_idx.size();
    std::vector<double> g_cond(2 * no);
    std::vector<double> g_out(no);
    for (std::size_t i = 0; i < no; ++i) {
        const double inv_var = std::exp(-2.0 * cache.log_sigma[i]);
        const double d = (cache.out[i] - cache.mu[i]) * inv_var;
        g_out[i] = coef * d;
        g_cond[i] = -coef * d;
        g_cond[no + i] =
            coef * (1.0 - (cache.out[i] - cache.mu[i]) * (cache.out[i] - cache.mu[i]) * inv_var);
    }
    std::vector<double> g_keep_add(keep_idx.size(), 0.0);
    cond.vjp(g_cond, cache.cond, g_keep_add);
    for (std::size_t i = 0; i < keep_idx.size(); ++i)
        g_x[keep_idx[i]] = g_keep[i] + g_keep_add[i];
    for (std::size_t i = 0; i < no; ++i) g_x[out_idx[i]] = g_out[i];
}

void SplitLayer::zero_grad() { cond.zero_grad(); }

// ---------------------------------------------------------------------------
// FlowModel construction and validation

namespace {

struct MixPlan {
    MixingLayer::Kind kind;
    std::vector<int> naive_levels;              // naive / blockwise level schedule
    std::vector<std::pair<std::size_t, int>> segments; // (dim, max level) per segment
};

/// Shape/divisibility plan for the mixing layer at one flow level; throws
/// std::invalid_argument with a field-named message.
MixPlan plan_mixing(const ModelSpec& spec, const DataShape& shape, int flow_level) {
    const std::size_t d = shape.dim();
    MixPlan plan;
    if (spec.butterfly_levels.empty())
        throw std::invalid_argument("butterfly_levels: must not be empty");
    for (int m : spec.butterfly_levels)
        if (m < 1) throw std::invalid_argument("butterfly_levels: levels must be >= 1");

    if (spec.butterfly_levels.size() > 1) {
        if (spec.block_size != 1)
            throw std::invalid_argument(
                "block_size: per-segment butterfly_levels require block_size 1");
        if (spec.tied)
            throw std::invalid_argument("tied: not supported with segmented layers");
        plan.kind = MixingLayer::Kind::Segmented;
        std::size_t total = 0;
        for (int m : spec.butterfly_levels) {
            const int eff = m - flow_level;
            if (eff < 1)
                throw std::invalid_argument(
                    "butterfly_levels: segment level drops below 1 at flow level " +
                    std::to_string(flow_level));
            plan.segments.emplace_back(std::size_t{1} << eff, eff);
            total += std::size_t{1} << eff;
        }
        if (total != d)
            throw std::invalid_argument(
                "butterfly_levels: segment dims sum to " + std::to_string(total) +
                " but the flattened dim is " + std::to_string(d));
        return plan;
    }

    const int m_req = spec.butterfly_levels[0];
    if (spec.block_size > 1) {
        if (spec.tied)
            throw std::invalid_argument("tied: weight sharing applies to block_size 1 only");
        if (d % spec.block_size != 0)
            throw std::invalid_argument("block_size: " + std::to_string(spec.block_size) +
                                        " does not divide the flattened dim " +
                                        std::to_string(d));
        const std::size_t groups = d / spec.block_size;
        const int avail = max_level(groups);
        if (avail < 1)
            throw std::invalid_argument("block_size: group count " + std::to_string(groups) +
                                        " is odd, no butterfly level is feasible");
        plan.kind = MixingLayer::Kind::Blockwise;
        plan.naive_levels = contiguous_levels(std::min(m_req, avail), spec.bidirectional);
        return plan;
    }

    const int avail = max_level(d);
    if (avail < 1)
        throw std::invalid_argument("shape: flattened dim " + std::to_string(d) +
                                    " is odd, no butterfly level is feasible");
    plan.kind = MixingLayer::Kind::Naive;
    plan.naive_levels = contiguous_levels(std::min(m_req, avail), spec.bidirectional);
    return plan;
}

void walk_shapes(const ModelSpec& spec,
                 const std::function<void(int, const DataShape&, const DataShape&, bool)>& fn) {
    DataShape cur = spec.shape;
    for (int l = 0; l < spec.levels; ++l) {
        const DataShape in = cur;
        const bool do_squeeze = cur.kind != ShapeKind::Flat;
        const DataShape work = do_squeeze ? squeezed_shape(cur) : cur;
        const bool has_split = l + 1 < spec.levels;
        fn(l, in, work, has_split);
        cur = work;
        if (has_split) {
            if (cur.channels % 2 != 0)
                throw std::invalid_argument("levels: split at level " + std::to_string(l) +
                                            " needs an even channel count, got " +
                                            std::to_string(cur.channels));
            cur.channels /= 2;
        }
    }
}

} // namespace

void FlowModel::validate(const ModelSpec& spec) {
    if (spec.shape.dim() < 1) throw std::invalid_argument("shape: empty");
    if (spec.levels < 1) throw std::invalid_argument("levels: must be >= 1");
    if (spec.steps < 0) throw std::invalid_argument("steps: must be >= 0");
    if (spec.steps > 0 && spec.coupling_channels < 1)
        throw std::invalid_argument("coupling_channels: must be >= 1");
    if (spec.block_size < 1) throw std::invalid_argument("block_size: must be >= 1");
    walk_shapes(spec, [&](int l, const DataShape&, const DataShape& work, bool) {
        if (spec.steps > 0) {
            (void)plan_mixing(spec, work, l);
            if (work.channels % 2 != 0)
                throw std::invalid_argument(
                    "shape: coupling at level " + std::to_string(l) +
                    " needs an even channel count, got " + std::to_string(work.channels));
        }
    });
}

FlowModel::FlowModel(const ModelSpec& spec) : spec_(spec) {
    validate(spec);
    std::uint64_t tag = 0;
    walk_shapes(spec, [&](int l, const DataShape& in, const DataShape& work, bool has_split) {
        Level level;
        level.in_shape = in;
        level.work_shape = work;
        level.do_squeeze = in.kind != ShapeKind::Flat;
        if (level.do_squeeze) level.squeeze_idx = squeeze_map(in);
        for (int k = 0; k < spec.steps; ++k) {
            FlowStep step;
            step.actnorm = ActNorm(work.channels, work.sites());
            const MixPlan plan = plan_mixing(spec, work, l);
            step.mixing.kind = plan.kind;
            step.mixing.tied = spec.tied;
            if (plan.kind == MixingLayer::Kind::Naive) {
                step.mixing.naive = make_butterfly_layer<double>(
                    work.dim(), plan.naive_levels, spec.init, substream(spec.seed, tag + 1));
            } else if (plan.kind == MixingLayer::Kind::Blockwise) {
                step.mixing.block =
                    make_blockwise_layer(work.dim(), spec.block_size, plan.naive_levels,
                                         spec.init, substream(spec.seed, tag + 1));
            } else {
                std::vector<std::size_t> seg_dims;
                std::vector<ButterflyLayer<double>> seg_layers;
                for (std::size_t s = 0; s < plan.segments.size(); ++s) {
                    seg_dims.push_back(plan.segments[s].first);
                    seg_layers.push_back(make_butterfly_layer<double>(
                        plan.segments[s].first,
                        contiguous_levels(plan.segments[s].second, spec.bidirectional),
                        spec.init, substream(spec.seed, tag + 1 + s)));
                }
                step.mixing.seg = SegmentedLayer(std::move(seg_dims), std::move(seg_layers));
            }
            step.mixing.build_slots();
            step.coupling = Coupling(work, spec.coupling_channels, substream(spec.seed, tag + 64));
            level.steps.push_back(std::move(step));
            tag += 128;
        }
        level.has_split = has_split;
        if (has_split) {
            level.split = SplitLayer(work, substream(spec.seed, tag + 7));
            DataShape out = work;
            out.channels /= 2;
            level.out_shape = out;
        } else {
            level.out_shape = work;
        }
        tag += 1024;
        levels.push_back(std::move(level));
    });

    for (std::size_t l = 0; l < levels.size(); ++l)
        for (std::size_t k = 0; k < levels[l].steps.size(); ++k) {
            const std::string base = "level" + std::to_string(l) + "/step" + std::to_string(k);
            layer_names_.push_back(base + "/actnorm");
            layer_names_.push_back(base + "/mix");
            layer_names_.push_back(base + "/coupling");
        }

    build_param_table();
}

void FlowModel::register_param(const std::string& name, std::vector<std::size_t> shape,
                               double* data, double* grad, bool butterfly) {
    std::size_t count = 1;
    for (std::size_t s : shape) count *= s;
    param_dir_.push_back({name, std::move(shape), n_params_, count, butterfly});
    slots_.push_back({data, grad, count});
    n_params_ += count;
}

void FlowModel::build_param_table() {
    auto reg_linear = [&](const std::string& base, Linear& lin) {
        register_param(base + "/w", {lin.out, lin.in}, lin.w.data(), lin.g_w.data(), false);
        register_param(base + "/b", {lin.out}, lin.b.data(), lin.g_b.data(), false);
    };
    auto reg_conv = [&](const std::string& base, Conv2d& cv) {
        register_param(base + "/k", {cv.cout, cv.cin, 3, 3}, cv.k.data(), cv.g_k.data(), false);
        register_param(base + "/b", {cv.cout}, cv.b.data(), cv.g_b.data(), false);
    };
    auto reg_cond = [&](const std::string& base, Conditioner& c) {
        if (c.conv) {
            if (c.single_affine) {
                reg_conv(base, c.affine_conv);
            } else {
                reg_conv(base + "/c1", c.net.c1);
                reg_conv(base + "/c2", c.net.c2);
                reg_conv(base + "/c3", c.net.c3);
            }
        } else {
            if (c.single_affine) {
                reg_linear(base, c.affine);
            } else {
                reg_linear(base + "/l1", c.mlp.l1);
                reg_linear(base + "/l2", c.mlp.l2);
                reg_linear(base + "/l3", c.mlp.l3);
            }
        }
    };
    auto reg_lu = [&](const std::string& base, LuMatrix& lu) {
        const std::size_t n = lu.size();
        register_param(base + "/lower", {n, n}, lu.lower().data(), lu.grad_lower().data(), true);
        register_param(base + "/upper", {n, n}, lu.upper().data(), lu.grad_upper().data(), true);
        register_param(base + "/log_s", {n}, lu.log_s().data(), lu.grad_log_s().data(), true);
    };

    for (std::size_t l = 0; l < levels.size(); ++l) {
        for (std::size_t k = 0; k < levels[l].steps.size(); ++k) {
            FlowStep& step = levels[l].steps[k];
            const std::string base = "level" + std::to_string(l) + "/step" + std::to_string(k);
            register_param(base + "/actnorm/log_scale", {step.actnorm.channels},
                           step.actnorm.log_scale.data(), step.actnorm.g_log_scale.data(),
                           false);
            register_param(base + "/actnorm/bias", {step.actnorm.channels},
                           step.actnorm.bias.data(), step.actnorm.g_bias.data(), false);
            MixingLayer& mix = step.mixing;
            if (mix.kind == MixingLayer::Kind::Blockwise) {
                for (std::size_t f = 0; f < mix.block.factors().size(); ++f) {
                    auto& bf = mix.block.factors()[f];
                    for (std::size_t p = 0; p < bf.pairs().size(); ++p) {
                        auto& pt = bf.pairs()[p];
                        const std::string pb =
                            base + "/mix/f" + std::to_string(f) + "/p" + std::to_string(p);
                        const std::size_t c = pt.block_dim();
                        register_param(pb + "/mix_lower", {c, c}, pt.mix_lower().data(),
                                       pt.grad_mix_lower().data(), true);
                        register_param(pb + "/mix_upper", {c, c}, pt.mix_upper().data(),
                                       pt.grad_mix_upper().data(), true);
                        reg_lu(pb + "/diag_a", pt.diag_first());
                        reg_lu(pb + "/diag_b", pt.diag_second());
                    }
                }
            } else {
                for (std::size_t s = 0; s < mix.slots.size(); ++s) {
                    auto& slot = mix.slots[s];
                    const std::string fb = base + "/mix/f" + std::to_string(s) + "/w";
                    if (mix.tied)
                        register_param(fb, {slot.idx.n_blocks, 4}, slot.canonical.data(),
                                       slot.canonical_grad.data(), true);
                    else
                        register_param(fb, {slot.idx.n_pairs(), 4}, slot.weights->data(),
                                       slot.grad_full.data(), true);
                }
            }
            reg_cond(base + "/coupling", step.coupling.cond);
        }
        if (levels[l].has_split)
            reg_cond("level" + std::to_string(l) + "/split", levels[l].split.cond);
    }
}

void FlowModel::get_params(std::span<double> out) const {
    for (std::size_t i = 0; i < slots_.size(); ++i)
        std::copy_n(slots_[i].data, slots_[i].count, out.begin() +
                                                        static_cast<std::ptrdiff_t>(param_dir_[i].offset));
}

void FlowModel::set_params(std::span<const double> in) {
    for (std::size_t i = 0; i < slots_.size(); ++i)
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(param_dir_[i].offset),
                    slots_[i].count, slots_[i].data);
    for (auto& level : levels)
        for (auto& step : level.steps) step.mixing.sync_tied();
}

void FlowModel::get_grads(std::span<double> out) {
    for (auto& level : levels)
        for (auto& step : level.steps) step.mixing.reduce_grads();
    for (std::size_t i = 0; i < slots_.size(); ++i)
        std::copy_n(slots_[i].grad, slots_[i].count,
                    out.begin() + static_cast<std::ptrdiff_t>(param_dir_[i].offset));
}

void FlowModel::zero_grad() {
    for (auto& level : levels) {
        for (auto& step : level.steps) {
            step.actnorm.zero_grad();
            step.mixing.zero_grad();
            step.coupling.zero_grad();
        }
        if (level.has_split) level.split.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Forward passes

FlowModel::LogProbResult FlowModel::log_prob(std::span<const double> x) const {
    if (x.size() != dim())
        throw std::invalid_argument("log_prob: input length mismatch");
    LogProbResult res;
    std::vector<double> cur(x.begin(), x.end());
    double log_p = 0.0;
    for (const auto& level : levels) {
        if (level.do_squeeze) {
            std::vector<double> sq(cur.size());
            for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = cur[level.squeeze_idx[i]];
            cur = std::move(sq);
        }
        for (const auto& step : level.steps) {
            step.actnorm.forward_inplace(cur);
            res.per_layer_log_det.push_back(step.actnorm.log_det());
            step.mixing.forward_inplace(cur);
            res.per_layer_log_det.push_back(step.mixing.log_det());
            const double cp_ld = step.coupling.forward_inplace(cur, nullptr);
            res.per_layer_log_det.push_back(cp_ld);
        }
        if (level.has_split) {
            std::vector<double> keep;
            log_p += level.split.forward(cur, keep, nullptr);
            cur = std::move(keep);
        }
    }
    log_p += std_normal_log_prob(cur);
    for (double v : res.per_layer_log_det) log_p += v;
    res.log_prob = log_p;
    return res;
}

double FlowModel::mean_nll(std::span<const double> batch, std::size_t n) const {
    const std::size_t d = dim();
    std::vector<double> nll(n);
    const std::size_t n_threads = std::min(threads_from_env(), n == 0 ? 1 : n);
    auto run = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
            nll[i] = -log_prob(batch.subspan(i * d, d)).log_prob;
    };
    if (n_threads <= 1) {
        run(0, n);
    } else {
        std::vector<std::thread> workers;
        const std::size_t chunk = (n + n_threads - 1) / n_threads;
        for (std::size_t t = 0; t < n_threads; ++t) {
            const std::size_t lo = t * chunk;
            const std::size_t hi = std::min(n, lo + chunk);
            if (lo >= hi) break;
            workers.emplace_back(run, lo, hi);
        }
        for (auto& w : workers) w.join();
    }
    double total = 0.0;
    for (double v : nll) total += v;
    return total / static_cast<double>(n);
}

std::vector<double> FlowModel::sample(CounterRng& rng, double temperature) const {
    const std::size_t final_dim = levels.back().out_shape.dim();
    std::vector<double> cur(final_dim);
    for (auto& v : cur) v = temperature * rng.normal();
    for (std::size_t li = levels.size(); li-- > 0;) {
        const Level& level = levels[li];
        if (level.has_split) {
            std::vector<double> noise(level.split.out_idx.size());
            for (auto& v : noise) v = temperature * rng.normal();
            cur = level.split.inverse(cur, noise);
        }
        for (std::size_t k = level.steps.size(); k-- > 0;) {
            const FlowStep& step = level.steps[k];
            step.coupling.inverse_inplace(cur);
            step.mixing.inverse_inplace(cur);
            step.actnorm.inverse_inplace(cur);
        }
        if (level.do_squeeze) {
            std::vector<double> unsq(cur.size());
            for (std::size_t i = 0; i < cur.size(); ++i) unsq[level.squeeze_idx[i]] = cur[i];
            cur = std::move(unsq);
        }
    }
    return cur;
}

void FlowModel::init_actnorm(std::span<const double> batch, std::size_t n) {
    std::vector<double> cur(batch.begin(), batch.end());
    std::size_t d = dim();
    for (auto& level : levels) {
        if (level.do_squeeze) {
            std::vector<double> sq(cur.size());
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    sq[i * d + j] = cur[i * d + level.squeeze_idx[j]];
            cur = std::move(sq);
        }
        for (auto& step : level.steps) {
            if (!step.actnorm.initialized) step.actnorm.init_from_batch(cur, n);
            for (std::size_t i = 0; i < n; ++i) {
                std::span<double> row(cur.data() + i * d, d);
                step.actnorm.forward_inplace(row);
                step.mixing.forward_inplace(row);
                step.coupling.forward_inplace(row, nullptr);
            }
        }
        if (level.has_split) {
            const std::size_t half = d / 2;
            std::vector<double> next(n * half);
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> keep;
                level.split.forward(std::span<const double>(cur.data() + i * d, d), keep,
                                    nullptr);
                std::copy(keep.begin(), keep.end(), next.begin() + static_cast<std::ptrdiff_t>(i * half));
            }
            cur = std::move(next);
            d = half;
        }
    }
    actnorm_initialized_ = true;
}

// ---------------------------------------------------------------------------
// Backward

namespace {

struct StepTape {
    std::vector<double> x0;
    MixingLayer::Cache mix;
    Coupling::Cache cp;
    double cp_log_det = 0.0;
};

struct SampleTape {
    std::vector<std::vector<StepTape>> steps;
    std::vector<SplitLayer::Cache> splits;
    std::vector<double> split_log_p;
    std::vector<double> z_final;
};

} // namespace

double FlowModel::backward(std::span<const double> batch, std::size_t n) {
    const std::size_t d = dim();
    if (batch.size() != n * d)
        throw std::invalid_argument("backward: batch length mismatch");

    // parameter-only log-det terms are shared by every sample
    double static_log_det = 0.0;
    for (std::size_t li = 0; li < levels.size(); ++li)
        for (std::size_t k = 0; k < levels[li].steps.size(); ++k) {
            const auto& step = levels[li].steps[k];
            static_log_det += step.actnorm.log_det();
            const double mld = step.mixing.log_det();
            if (!std::isfinite(mld))
                throw NonFiniteLossError("level" + std::to_string(li) + "/step" +
                                         std::to_string(k) + "/mix");
            static_log_det += mld;
        }

    double total_nll = 0.0;
    const double coef = 1.0 / static_cast<double>(n);

    for (std::size_t i = 0; i < n; ++i) {
        SampleTape tape;
        std::vector<double> cur(batch.begin() + static_cast<std::ptrdiff_t>(i * d),
                                batch.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        double log_p = static_log_det;
        tape.steps.resize(levels.size());
        for (std::size_t li = 0; li < levels.size(); ++li) {
            Level& level = levels[li];
            if (level.do_squeeze) {
                std::vector<double> sq(cur.size());
                for (std::size_t j = 0; j < sq.size(); ++j) sq[j] = cur[level.squeeze_idx[j]];
                cur = std::move(sq);
            }
            for (auto& step : level.steps) {
                StepTape st;
                st.x0 = cur;
                step.actnorm.forward_inplace(cur);
                step.mixing.forward_cached(cur, st.mix);
                st.cp_log_det = step.coupling.forward_inplace(cur, &st.cp);
                log_p += st.cp_log_det;
                tape.steps[li].push_back(std::move(st));
            }
            if (level.has_split) {
                SplitLayer::Cache sc;
                std::vector<double> keep;
                const double lp = level.split.forward(cur, keep, &sc);
                log_p += lp;
                tape.splits.push_back(std::move(sc));
                tape.split_log_p.push_back(lp);
                cur = std::move(keep);
            }
        }
        log_p += std_normal_log_prob(cur);
        tape.z_final = std::move(cur);

        if (!std::isfinite(log_p)) {
            std::string where = "prior";
            for (std::size_t li = 0; li < levels.size(); ++li)
                for (std::size_t k = 0; k < tape.steps[li].size(); ++k)
                    if (!std::isfinite(tape.steps[li][k].cp_log_det))
                        where = "level" + std::to_string(li) + "/step" + std::to_string(k) +
                                "/coupling";
            throw NonFiniteLossError(where);
        }
        total_nll -= log_p;

        // reverse pass
        std::vector<double> g(tape.z_final.size());
        for (std::size_t j = 0; j < g.size(); ++j) g[j] = coef * tape.z_final[j];
        std::size_t split_idx = tape.splits.size();
        for (std::size_t li = levels.size(); li-- > 0;) {
            Level& level = levels[li];
            if (level.has_split) {
                --split_idx;
                std::vector<double> g_full(level.work_shape.dim());
                level.split.vjp(g, tape.splits[split_idx], g_full, coef);
                g = std::move(g_full);
            }
            for (std::size_t k = level.steps.size(); k-- > 0;) {
                FlowStep& step = level.steps[k];
                StepTape& st = tape.steps[li][k];
                step.coupling.vjp(g, st.cp, coef);
                step.mixing.vjp(g, st.mix);
                step.actnorm.vjp(g, st.x0, g);
            }
            if (level.do_squeeze) {
                std::vector<double> g_prev(g.size());
                for (std::size_t j = 0; j < g.size(); ++j) g_prev[level.squeeze_idx[j]] = g[j];
                g = std::move(g_prev);
            }
        }
    }

    // d(-log|det|)/d(theta), identical in every sample's loss
    for (auto& level : levels)
        for (auto& step : level.steps) {
            for (std::size_t c = 0; c < step.actnorm.channels; ++c)
                step.actnorm.g_log_scale[c] -= static_cast<double>(step.actnorm.sites);
            step.mixing.add_log_det_grads();
        }

    return total_nll / static_cast<double>(n);
}

std::string format_bpd(double bpd) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", bpd);
    return std::string(buf);
}

} // namespace bflow
