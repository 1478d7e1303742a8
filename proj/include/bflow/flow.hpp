#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bflow/blockwise.hpp"
#include "bflow/butterfly.hpp"
#include "bflow/nn.hpp"
#include "bflow/rng.hpp"
#include "bflow/shape.hpp"

namespace bflow {

/// Per-channel affine y = exp(log_scale) * x + bias with data-dependent
/// initialization (first batch is normalized to zero mean, unit variance).
/// An uninitialized layer acts as the identity.
struct ActNorm {
    std::size_t channels = 0, sites = 1;
    std::vector<double> log_scale, bias;
    std::vector<double> g_log_scale, g_bias;
    bool initialized = false;

    ActNorm() = default;
    ActNorm(std::size_t c, std::size_t s)
        : channels(c), sites(s), log_scale(c, 0.0), bias(c, 0.0), g_log_scale(c, 0.0),
          g_bias(c, 0.0) {}

    void forward_inplace(std::span<double> x) const;
    void inverse_inplace(std::span<double> y) const;
    double log_det() const;
    /// batch: n rows of channels*sites values. Zero-variance channels are
    /// clamped to std 1e-6 with a warning.
    void init_from_batch(std::span<const double> batch, std::size_t n);
    void vjp(std::span<const double> g_y, std::span<const double> x_in,
             std::span<double> g_x);
    void zero_grad();
};

/// The learnable linear mixing inside a flow step: a naive butterfly
/// layer, a block-wise butterfly layer, or per-segment butterfly layers.
struct MixingLayer {
    enum class Kind { Naive, Blockwise, Segmented };
    Kind kind = Kind::Naive;
    ButterflyLayer<double> naive;
    BlockwiseLayer block;
    SegmentedLayer seg;
    bool tied = false;

    // Naive/segmented factor parameters. Tied factors train on the
    // canonical (shared) blocks and materialize the full weights.
    struct FactorSlot {
        std::vector<double>* weights = nullptr; // the factor's weight vector
        PairIndexing idx;
        std::vector<double> grad_full;      // accumulated per-pair grads
        std::vector<double> canonical;      // tied parameter storage
        std::vector<double> canonical_grad; // tied reduced grads
    };
    std::vector<FactorSlot> slots;

    void build_slots();
    void sync_tied();     // canonical -> full weights
    void reduce_grads();  // full grads -> canonical (tied only)
    void zero_grad();

    std::size_t dim() const;
    void forward_inplace(std::span<double> x) const;
    void inverse_inplace(std::span<double> z) const;
    double log_det() const;

    struct Cache {
        // input before each naive/segment factor application, apply order
        std::vector<std::vector<double>> inputs;
        struct BlockPair {
            std::vector<double> xp, xq, t, vy, up, vz;
        };
        std::vector<std::vector<BlockPair>> block_pairs; // [factor][pair]
    };
    void forward_cached(std::span<double> x, Cache& cache);
    void vjp(std::span<double> g, const Cache& cache);
    /// d(-log|det|)/d(params), coefficient 1, added once per batch.
    void add_log_det_grads();
};

/// Affine coupling on channel halves: the first half passes through and
/// conditions a scale sigmoid(raw + 2) and shift for the second half.
struct Coupling {
    std::size_t channels = 0, sites = 1;
    std::vector<std::size_t> a_idx, b_idx;
    Conditioner cond;

    Coupling() = default;
    Coupling(const DataShape& shape, std::size_t hidden, std::uint64_t seed);

    struct Cache {
        std::vector<double> xb, scale;
        Conditioner::Cache cond;
    };

    /// Returns the log-det contribution.
    double forward_inplace(std::span<double> x, Cache* cache) const;
    void inverse_inplace(std::span<double> y) const;
    /// g is the cotangent of the output, replaced by the input cotangent.
    /// coef scales the per-sample log-det term.
    void vjp(std::span<double> g, const Cache& cache, double coef);
    void zero_grad();
};

/// Factors the channel halves apart: the kept half continues through the
/// flow, the other half is scored under a learned conditional Gaussian.
struct SplitLayer {
    std::size_t channels = 0, sites = 1;
    std::vector<std::size_t> keep_idx, out_idx;
    Conditioner cond;

    SplitLayer() = default;
    SplitLayer(const DataShape& shape, std::uint64_t seed);

    struct Cache {
        std::vector<double> keep, out, mu, log_sigma;
        Conditioner::Cache cond;
    };

    /// x (full) -> keep (half dim); returns the log-density of the
    /// factored-out half under N(mu, sigma).
    double forward(std::span<const double> x, std::vector<double>& keep, Cache* cache) const;
    /// keep + noise -> full x, with x_out = mu + sigma * noise.
    std::vector<double> inverse(std::span<const double> keep,
                                std::span<const double> noise) const;
    /// g_keep (cotangent of the kept half) -> g_x (full input cotangent).
    void vjp(std::span<const double> g_keep, const Cache& cache, std::span<double> g_x,
             double coef);
    void zero_grad();
};

struct FlowStep {
    ActNorm actnorm;
    MixingLayer mixing;
    Coupling coupling;
};

struct ModelSpec {
    DataShape shape;
    int levels = 1;          // L
    int steps = 1;           // K
    std::size_t coupling_channels = 64;
    std::vector<int> butterfly_levels = {1}; // one entry: max level M; several: per segment
    bool bidirectional = false;
    std::size_t block_size = 1; // C; 1 selects the naive butterfly
    InitKind init = InitKind::Identity;
    bool tied = false;
    std::uint64_t seed = 0;
};

struct ParamInfo {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t count = 0;
    bool butterfly = false;
};

/// Multi-scale stack: per level a squeeze (1D/2D data), K flow steps and,
/// except at the last level, a split with a learned Gaussian prior; the
/// final output is scored under a standard normal.
class FlowModel {
public:
    explicit FlowModel(const ModelSpec& spec);

    /// Shape walking and divisibility checks without building anything.
    /// Throws std::invalid_argument naming the offending field.
    static void validate(const ModelSpec& spec);

    const ModelSpec& spec() const { return spec_; }
    std::size_t dim() const { return spec_.shape.dim(); }

    struct LogProbResult {
        double log_prob = 0.0;
        std::vector<double> per_layer_log_det; // aligned with layer_names()
    };
    LogProbResult log_prob(std::span<const double> x) const;
    const std::vector<std::string>& layer_names() const { return layer_names_; }

    /// Mean NLL in nats over n rows; parallelizes over samples when
    /// BFLW_THREADS > 1 (bitwise identical to the serial result).
    double mean_nll(std::span<const double> batch, std::size_t n) const;

    std::vector<double> sample(CounterRng& rng, double temperature) const;

    /// Mean NLL over the batch; accumulates exact gradients of it into the
    /// parameter grad buffers. Throws NonFiniteLossError on a -inf marker.
    double backward(std::span<const double> batch, std::size_t n);

    void zero_grad();

    // flat parameter table
    const std::vector<ParamInfo>& param_dir() const { return param_dir_; }
    std::size_t n_params() const { return n_params_; }
    void get_params(std::span<double> out) const;
    void set_params(std::span<const double> in);
    void get_grads(std::span<double> out);

    void init_actnorm(std::span<const double> batch, std::size_t n);
    bool actnorm_initialized() const { return actnorm_initialized_; }
    void set_actnorm_initialized(bool v) { actnorm_initialized_ = v; }

    // exposed for the training loop and tests
    struct Level {
        DataShape in_shape, work_shape, out_shape;
        bool do_squeeze = false;
        std::vector<std::size_t> squeeze_idx; // out[i] = in[map[i]]
        std::vector<FlowStep> steps;
        bool has_split = false;
        SplitLayer split;
    };
    std::vector<Level> levels;

private:
    struct ParamSlot {
        double* data = nullptr;
        double* grad = nullptr;
        std::size_t count = 0;
    };

    void build_param_table();
    void register_param(const std::string& name, std::vector<std::size_t> shape,
                        double* data, double* grad, bool butterfly);

    ModelSpec spec_;
    bool actnorm_initialized_ = false;
    std::vector<std::string> layer_names_;
    std::vector<ParamInfo> param_dir_;
    std::vector<ParamSlot> slots_;
    std::size_t n_params_ = 0;
};

/// Bits per dimension for n_bits-quantized data under uniform
/// dequantization to [0, 1).
inline double bits_per_dim(double log_p, std::size_t dim, int n_bits) {
    return (-log_p / std::log(2.0) + static_cast<double>(dim) * n_bits) /
           static_cast<double>(dim);
}

inline double nats_per_dim(double log_p, std::size_t dim) {
    return -log_p / static_cast<double>(dim);
}

/// Two-decimal readout used in logs and summaries.
std::string format_bpd(double bpd);

} // namespace bflow
