#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bflow/data.hpp"
#include "bflow/flow.hpp"

namespace bflow {

/// lr(t) = base * min(1, t/warmup) * decay^max(0, t - warmup);
/// t counts optimizer steps starting at 1.
struct LrSchedule {
    double base = 1e-3;
    long warmup_iters = 10;
    double decay = 0.999997;

    double at(long t) const {
        const double warm =
            warmup_iters > 0
                ? std::min(1.0, static_cast<double>(t) / static_cast<double>(warmup_iters))
                : 1.0;
        const long past = std::max(0L, t - warmup_iters);
        return base * warm * std::pow(decay, static_cast<double>(past));
    }
};

/// Adam over a subset of the flat parameter vector. Rejects non-finite
/// gradients before touching any state.
struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long t = 0;
    std::vector<double> m, v;
    std::vector<std::size_t> indices; // positions in the flat vector

    AdamState() = default;
    explicit AdamState(std::vector<std::size_t> idx)
        : m(idx.size(), 0.0), v(idx.size(), 0.0), indices(std::move(idx)) {}

    void step(std::span<double> params, std::span<const double> grads, double lr);
};

enum class EmaMode { None, All, Butterfly };

/// Shadow parameter copies for the covered subset; evaluation swaps the
/// shadows in without touching the training parameters.
struct EmaState {
    EmaMode mode = EmaMode::None;
    double decay = 0.999;
    std::vector<double> shadow;
    std::vector<std::uint8_t> covered;

    void init(const FlowModel& model, std::span<const double> params);
    void update(std::span<const double> params);
    /// params with covered entries replaced by shadows.
    std::vector<double> apply(std::span<const double> params) const;
};

struct TrainConfig {
    double lr = 1e-3;
    long warmup_iters = 10;
    double lr_decay = 0.999997;
    double butterfly_lr_gamma = 0.999997;
    std::size_t batch_size = 64;
    long max_iters = 0;
    EmaMode ema = EmaMode::None;
    double ema_decay = 0.999;
    bool freeze_butterfly = false;
    long eval_every = 500;
    std::uint64_t seed = 0;
    double grad_clip = 50.0;
    int n_bits = 0;
};

struct MetricsRow {
    long iter = 0;
    std::string split; // "train" or "val"
    double nll_nats_per_dim = 0.0;
    double bpd = 0.0; // only meaningful when n_bits > 0
    double lr = 0.0;
    double elapsed_ms = 0.0;
};

struct TrainResult {
    std::vector<MetricsRow> metrics;
    EmaState ema;
    bool aborted_non_finite = false;
    std::string abort_reason;
};

/// Maximum-likelihood training: per iteration a backward pass, global-norm
/// clipping, one Adam step per parameter group (butterfly layers have
/// their own optimizer and decay), then an EMA update. Deterministic given
/// the seed. Aborts after 5 consecutive non-finite losses.
TrainResult train_loop(FlowModel& model, const Dataset& data, const TrainConfig& cfg,
                       const std::function<void(long)>& checkpoint_hook = nullptr);

/// Validation NLL per dim with EMA shadows applied (training parameters
/// are restored afterwards).
double eval_nll_per_dim(FlowModel& model, const EmaState& ema,
                        std::span<const double> rows, std::size_t n);

} // namespace bflow
