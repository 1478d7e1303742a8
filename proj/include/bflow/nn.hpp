#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bflow/rng.hpp"
#include "bflow/shape.hpp"

namespace bflow {

struct Linear {
    std::size_t in = 0, out = 0;
    std::vector<double> w; // row-major [out][in]
    std::vector<double> b;
    std::vector<double> g_w, g_b;

    Linear() = default;
    Linear(std::size_t in_, std::size_t out_, bool zero_init, CounterRng& rng);

    void forward(std::span<const double> x, std::span<double> y) const;
    /// Accumulates parameter grads and (if non-empty) input grads.
    void vjp(std::span<const double> g_y, std::span<const double> x, std::span<double> g_x);
    void zero_grad();
};

/// Two hidden layers with rectifier activations; the output layer is
/// zero-initialized so the surrounding coupling starts near the identity.
struct Mlp {
    Linear l1, l2, l3;

    Mlp() = default;
    Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed);

    struct Cache {
        std::vector<double> x, h1, h2;
    };

    void forward(std::span<const double> x, std::span<double> y, Cache* cache) const;
    void vjp(std::span<const double> g_y, const Cache& cache, std::span<double> g_x);
    void zero_grad();
};

/// 3x3 convolution with zero padding on the canonical channel-fastest
/// layout; used only for 2D data.
struct Conv2d {
    std::size_t cin = 0, cout = 0;
    std::vector<double> k; // [cout][cin][3][3]
    std::vector<double> b;
    std::vector<double> g_k, g_b;

    Conv2d() = default;
    Conv2d(std::size_t cin_, std::size_t cout_, bool zero_init, CounterRng& rng);

    void forward(std::span<const double> x, std::span<double> y, std::size_t h,
                 std::size_t w) const;
    void vjp(std::span<const double> g_y, std::span<const double> x, std::span<double> g_x,
             std::size_t h, std::size_t w);
    void zero_grad();
};

/// Three conv layers with rectifiers in between; zero-initialized output.
struct ConvNet {
    Conv2d c1, c2, c3;
    std::size_t h = 0, w = 0;

    ConvNet() = default;
    ConvNet(std::size_t cin, std::size_t hidden, std::size_t cout, std::size_t h_,
            std::size_t w_, std::uint64_t seed);

    struct Cache {
        std::vector<double> x, a1, a2;
    };

    void forward(std::span<const double> x, std::span<double> y, Cache* cache) const;
    void vjp(std::span<const double> g_y, const Cache& cache, std::span<double> g_x);
    void zero_grad();
};

/// Conditioner dispatch: fully connected for flat/1D inputs, convolutional
/// for 2D; optionally a single zero-initialized affine map (split priors
/// start as an exact standard-normal factorization). Input is the layer's
/// pass-through half in canonical layout; the output stacks
/// (raw_scale, shift) or (mu, log_sigma).
struct Conditioner {
    bool conv = false;
    bool single_affine = false;
    Mlp mlp;
    ConvNet net;
    Linear affine;
    Conv2d affine_conv;
    std::size_t h = 0, w = 0;
    std::size_t out = 0;

    struct Cache {
        Mlp::Cache mlp;
        ConvNet::Cache net;
        std::vector<double> x; // affine modes
    };

    Conditioner() = default;
    Conditioner(const DataShape& in_shape, std::size_t hidden, std::size_t out_units,
                bool single_affine_, std::uint64_t seed);

    void forward(std::span<const double> x, std::span<double> y, Cache* cache) const;
    void vjp(std::span<const double> g_y, const Cache& cache, std::span<double> g_x);
    void zero_grad();
};

} // namespace bflow
