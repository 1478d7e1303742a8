#include "bflow/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bflow {

namespace {
void he_init(std::vector<double>& w, std::size_t fan_in, CounterRng& rng) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w) v = std_dev * rng.normal();
}
} // namespace

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::size_t in_, std::size_t out_, bool zero_init, CounterRng& rng)
    : in(in_), out(out_), w(in_ * out_, 0.0), b(out_, 0.0), g_w(in_ * out_, 0.0),
      g_b(out_, 0.0) {
    if (!zero_init) he_init(w, in, rng);
}

void Linear::forward(std::span<const double> x, std::span<double> y) const {
    for (std::size_t r = 0; r < out; ++r) {
        double s = b[r];
        const double* row = &w[r * in];
        for (std::size_t c = 0; c < in; ++c) s += row[c] * x[c];
        y[r] = s;
    }
}

void Linear::vjp(std::span<const double> g_y, std::span<const double> x,
                 std::span<double> g_x) {
    for (std::size_t r = 0; r < out; ++r) {
        const double g = g_y[r];
        g_b[r] += g;
        double* grow = &g_w[r * in];
        const double* row = &w[r * in];
        for (std::size_t c = 0; c < in; ++c) {
            grow[c] += g * x[c];
            if (!g_x.empty()) g_x[c] += row[c] * g;
        }
    }
}

void Linear::zero_grad() {
    std::fill(g_w.begin(), g_w.end(), 0.0);
    std::fill(g_b.begin(), g_b.end(), 0.0);
}

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed) {
    CounterRng rng(seed);
    l1 = Linear(in, hidden, false, rng);
    l2 = Linear(hidden, hidden, false, rng);
    l3 = Linear(hidden, out, true, rng);
}

void Mlp::forward(std::span<const double> x, std::span<double> y, Cache* cache) const {
    std::vector<double> h1(l1.out), h2(l2.out);
    l1.forward(x, h1);
    for (auto& v : h1) v = std::max(v, 0.0);
    l2.forward(h1, h2);
    for (auto& v : h2) v = std::max(v, 0.0);
    l3.forward(h2, y);
    if (cache) {
        cache->x.assign(x.begin(), x.end());
        cache->h1 = std::move(h1);
        cache->h2 = std::move(h2);
    }
}

void Mlp::vjp(std::span<const double> g_y, const Cache& cache, std::span<double> g_x) {
    std::vector<double> g_h2(l2.out, 0.0), g_h1(l1.out, 0.0);
    l3.vjp(g_y, cache.h2, g_h2);
    for (std::size_t i = 0; i < g_h2.size(); ++i)
        if (cache.h2[i] <= 0.0) g_h2[i] = 0.0;
    l2.vjp(g_h2, cache.h1, g_h1);
    for (std::size_t i = 0; i < g_h1.size(); ++i)
        if (cache.h1[i] <= 0.0) g_h1[i] = 0.0;
    l1.vjp(g_h1, cache.x, g_x);
}

void Mlp::zero_grad() {
    l1.zero_grad();
    l2.zero_grad();
    l3.zero_grad();
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::size_t cin_, std::size_t cout_, bool zero_init, CounterRng& rng)
    : cin(cin_), cout(cout_), k(cout_ * cin_ * 9, 0.0), b(cout_, 0.0),
      g_k(cout_ * cin_ * 9, 0.0), g_b(cout_, 0.0) {
    if (!zero_init) he_init(k, cin * 9, rng);
}

void Conv2d::forward(std::span<const double> x, std::span<double> y, std::size_t h,
                     std::size_t w) const {
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            for (std::size_t oc = 0; oc < cout; ++oc) {
                double acc = b[oc];
                for (std::size_t dh = 0; dh < 3; ++dh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(i + dh) - 1;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t dw = 0; dw < 3; ++dw) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(j + dw) - 1;
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                        const double* px =
                            &x[(static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw)) * cin];
                        const double* pk = &k[((oc * cin) * 3 + dh) * 3 + dw];
                        for (std::size_t ic = 0; ic < cin; ++ic)
                            acc += pk[ic * 9] * px[ic];
                    }
                }
                y[(i * w + j) * cout + oc] = acc;
            }
        }
    }
}

void Conv2d::vjp(std::span<const double> g_y, std::span<const double> x,
                 std::span<double> g_x, std::size_t h, std::size_t w) {
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            for (std::size_t oc = 0; oc < cout; ++oc) {
                const double g = g_y[(i * w + j) * cout + oc];
                if (g == 0.0) continue;
                g_b[oc] += g;
                for (std::size_t dh = 0; dh < 3; ++dh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(i + dh) - 1;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t dw = 0; dw < 3; ++dw) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(j + dw) - 1;
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                        const std::size_t base =
                            (static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw)) * cin;
                        const std::size_t kbase = ((oc * cin) * 3 + dh) * 3 + dw;
                        for (std::size_t ic = 0; ic < cin; ++ic) {
                            g_k[kbase + ic * 9] += g * x[base + ic];
                            if (!g_x.empty()) g_x[base + ic] += k[kbase + ic * 9] * g;
                        }
                    }
                }
            }
        }
    }
}

void Conv2d::zero_grad() {
    std::fill(g_k.begin(), g_k.end(), 0.0);
    std::fill(g_b.begin(), g_b.end(), 0.0);
}

// ---------------------------------------------------------------------------
// ConvNet

ConvNet::ConvNet(std::size_t cin, std::size_t hidden, std::size_t cout, std::size_t h_,
                 std::size_t w_, std::uint64_t seed)
    : h(h_), w(w_) {
    CounterRng rng(seed);
    c1 = Conv2d(cin, hidden, false, rng);
    c2 = Conv2d(hidden, hidden, false, rng);
    c3 = Conv2d(hidden, cout, true, rng);
}

void ConvNet::forward(std::span<const double> x, std::span<double> y, Cache* cache) const {
    std::vector<double> a1(c1.cout * h * w), a2(c2.cout * h * w);
    c1.forward(x, a1, h, w);
    for (auto& v : a1) v = std::max(v, 0.0);
    c2.forward(a1, a2, h, w);
    for (auto& v : a2) v = std::max(v, 0.0);
    c3.forward(a2, y, h, w);
    if (cache) {
        cache->x.assign(x.begin(), x.end());
        cache->a1 = std::move(a1);
        cache->a2 = std::move(a2);
    }
}

void ConvNet::vjp(std::span<const double> g_y, const Cache& cache, std::span<double> g_x) {
    std::vector<double> g_a2(cache.a2.size(), 0.0), g_a1(cache.a1.size(), 0.0);
    c3.vjp(g_y, cache.a2, g_a2, h, w);
    for (std::size_t i = 0; i < g_a2.size(); ++i)
        if (cache.a2[i] <= 0.0) g_a2[i] = 0.0;
    c2.vjp(g_a2, cache.a1, g_a1, h, w);
    for (std::size_t i = 0; i < g_a1.size(); ++i)
        if (cache.a1[i] <= 0.0) g_a1[i] = 0.0;
    c1.vjp(g_a1, cache.x, g_x, h, w);
}

void ConvNet::zero_grad() {
    c1.zero_grad();
    c2.zero_grad();
    c3.zero_grad();
}

// ---------------------------------------------------------------------------
// Conditioner

Conditioner::Conditioner(const DataShape& in_shape, std::size_t hidden,
                         std::size_t out_units, bool single_affine_, std::uint64_t seed)
    : conv(in_shape.kind == ShapeKind::Image2D), single_affine(single_affine_),
      h(in_shape.height), w(in_shape.width) {
    CounterRng rng(seed);
    if (conv) {
        const std::size_t cout = 2 * out_units / in_shape.sites();
        if (single_affine) {
            affine_conv = Conv2d(in_shape.channels, cout, true, rng);
        } else {
            net = ConvNet(in_shape.channels, hidden, cout, h, w, seed);
        }
    } else {
        if (single_affine) {
            affine = Linear(in_shape.dim(), 2 * out_units, true, rng);
        } else {
            mlp = Mlp(in_shape.dim(), hidden, 2 * out_units, seed);
        }
    }
    out = 2 * out_units;
}

void Conditioner::forward(std::span<const double> x, std::span<double> y,
                          Cache* cache) const {
    if (conv) {
        // conv output is channel-interleaved per site; restack into the
        // (head1, head2) layout the callers expect
        std::vector<double> t(out);
        if (single_affine) {
            affine_conv.forward(x, t, h, w);
            if (cache) cache->x.assign(x.begin(), x.end());
        } else {
            net.forward(x, t, cache ? &cache->net : nullptr);
        }
        const std::size_t cout = single_affine ? affine_conv.cout : net.c3.cout;
        const std::size_t cb = cout / 2;
        const std::size_t sites = h * w;
        for (std::size_t s = 0; s < sites; ++s)
            for (std::size_t c = 0; c < cb; ++c) {
                y[s * cb + c] = t[s * cout + c];
                y[out / 2 + s * cb + c] = t[s * cout + cb + c];
            }
    } else {
        if (single_affine) {
            affine.forward(x, y);
            if (cache) cache->x.assign(x.begin(), x.end());
        } else {
            mlp.forward(x, y, cache ? &cache->mlp : nullptr);
        }
    }
}

void Conditioner::vjp(std::span<const double> g_y, const Cache& cache,
                      std::span<double> g_x) {
    if (conv) {
        const std::size_t cout = single_affine ? affine_conv.cout : net.c3.cout;
        const std::size_t cb = cout / 2;
        const std::size_t sites = h * w;
        std::vector<double> g_t(out, 0.0);
        for (std::size_t s = 0; s < sites; ++s)
            for (std::size_t c = 0; c < cb; ++c) {
                g_t[s * cout + c] = g_y[s * cb + c];
                g_t[s * cout + cb + c] = g_y[out / 2 + s * cb + c];
            }
        if (single_affine)
            affine_conv.vjp(g_t, cache.x, g_x, h, w);
        else
            net.vjp(g_t, cache.net, g_x);
    } else {
        if (single_affine)
            affine.vjp(g_y, cache.x, g_x);
        else
            mlp.vjp(g_y, cache.mlp, g_x);
    }
}

void Conditioner::zero_grad() {
    if (conv) {
        if (single_affine)
            affine_conv.zero_grad();
        else
            net.zero_grad();
    } else {
        if (single_affine)
            affine.zero_grad();
        else
            mlp.zero_grad();
    }
}

} // namespace bflow
