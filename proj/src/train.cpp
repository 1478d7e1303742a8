#include "bflow/train.hpp"

#include <chrono>
#include <cmath>

#include "bflow/errors.hpp"

namespace bflow {

void AdamState::step(std::span<double> params, std::span<const double> grads, double lr) {
    for (std::size_t j : indices)
        if (!std::isfinite(grads[j]))
            throw NonFiniteGradientError("flat index " + std::to_string(j));
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::size_t j = indices[i];
        const double g = grads[j];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        params[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

void EmaState::init(const FlowModel& model, std::span<const double> params) {
    shadow.assign(params.begin(), params.end());
    covered.assign(params.size(), 0);
    if (mode == EmaMode::None) return;
    for (const auto& info : model.param_dir()) {
        if (mode == EmaMode::Butterfly && !info.butterfly) continue;
        for (std::size_t i = 0; i < info.count; ++i) covered[info.offset + i] = 1;
    }
}

void EmaState::update(std::span<const double> params) {
    for (std::size_t i = 0; i < shadow.size(); ++i)
        if (covered[i]) shadow[i] = decay * shadow[i] + (1.0 - decay) * params[i];
}

std::vector<double> EmaState::apply(std::span<const double> params) const {
    std::vector<double> out(params.begin(), params.end());
    for (std::size_t i = 0; i < out.size(); ++i)
        if (i < covered.size() && covered[i]) out[i] = shadow[i];
    return out;
}

double eval_nll_per_dim(FlowModel& model, const EmaState& ema,
                        std::span<const double> rows, std::size_t n) {
    std::vector<double> params(model.n_params());
    model.get_params(params);
    if (ema.mode != EmaMode::None) {
        std::vector<double> shadowed = ema.apply(params);
        model.set_params(shadowed);
    }
    const double nll = model.mean_nll(rows, n);
    if (ema.mode != EmaMode::None) model.set_params(params);
    return nll / static_cast<double>(model.dim());
}

TrainResult train_loop(FlowModel& model, const Dataset& data, const TrainConfig& cfg,
                       const std::function<void(long)>& checkpoint_hook) {
    TrainResult result;
    const std::size_t dim = model.dim();
    if (data.shape.dim() != dim)
        throw ShapeMismatchError("dataset dim " + std::to_string(data.shape.dim()) +
                                 " vs model dim " + std::to_string(dim));
    if (cfg.max_iters > 0 && data.n_train == 0)
        throw std::invalid_argument("train_loop: empty dataset");

    std::vector<std::size_t> butterfly_idx, backbone_idx;
    for (const auto& info : model.param_dir()) {
        auto& dst = info.butterfly ? butterfly_idx : backbone_idx;
        for (std::size_t i = 0; i < info.count; ++i) dst.push_back(info.offset + i);
    }
    AdamState adam_backbone(backbone_idx);
    AdamState adam_butterfly(butterfly_idx);
    LrSchedule sched_backbone{cfg.lr, cfg.warmup_iters, cfg.lr_decay};
    LrSchedule sched_butterfly{cfg.lr, cfg.warmup_iters, cfg.butterfly_lr_gamma};

    std::vector<double> params(model.n_params()), grads(model.n_params());
    model.get_params(params);
    EmaState ema;
    ema.mode = cfg.ema;
    ema.decay = cfg.ema_decay;
    ema.init(model, params);

    if (cfg.max_iters == 0) {
        result.ema = std::move(ema);
        return result;
    }

    BatchIter batches(data.train, data.n_train, dim, cfg.batch_size, cfg.seed);
    const auto t_start = std::chrono::steady_clock::now();
    auto elapsed_ms = [&] {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                         t_start)
            .count();
    };

    int consecutive_bad = 0;
    for (long iter = 1; iter <= cfg.max_iters; ++iter) {
        std::span<const double> batch = batches.next();
        if (iter == 1 && !model.actnorm_initialized())
            model.init_actnorm(batch, cfg.batch_size);

        double nll;
        bool bad = false;
        std::string bad_reason;
        try {
            model.zero_grad();
            nll = model.backward(batch, cfg.batch_size);
            if (!std::isfinite(nll)) {
                bad = true;
                bad_reason = "non-finite loss";
            }
        } catch (const NonFiniteLossError& e) {
            bad = true;
            bad_reason = e.what();
        }

        if (bad) {
            if (++consecutive_bad >= 5) {
                result.aborted_non_finite = true;
                result.abort_reason =
                    "aborted after 5 consecutive non-finite losses (" + bad_reason + ")";
                break;
            }
            continue;
        }
        consecutive_bad = 0;

        model.get_grads(grads);
        // global-norm clipping across every trainable parameter
        double norm_sq = 0.0;
        for (double g : grads) norm_sq += g * g;
        const double norm = std::sqrt(norm_sq);
        if (std::isfinite(norm) && norm > cfg.grad_clip) {
            const double scale = cfg.grad_clip / norm;
            for (double& g : grads) g *= scale;
        }

        bool stepped = false;
        try {
            adam_backbone.step(params, grads, sched_backbone.at(iter));
            if (!cfg.freeze_butterfly)
                adam_butterfly.step(params, grads, sched_butterfly.at(iter));
            stepped = true;
        } catch (const NonFiniteGradientError&) {
            if (++consecutive_bad >= 5) {
                result.aborted_non_finite = true;
                result.abort_reason = "aborted after 5 consecutive non-finite gradients";
                break;
            }
        }
        if (stepped) {
            model.set_params(params);
            ema.update(params);
        }

        MetricsRow row;
        row.iter = iter;
        row.split = "train";
        row.nll_nats_per_dim = nll / static_cast<double>(dim);
        row.bpd = cfg.n_bits > 0 ? bits_per_dim(-nll, dim, cfg.n_bits) : 0.0;
        row.lr = sched_backbone.at(iter);
        row.elapsed_ms = elapsed_ms();
        result.metrics.push_back(row);

        const bool at_eval = cfg.eval_every > 0 && (iter % cfg.eval_every == 0);
        if (at_eval || iter == cfg.max_iters) {
            MetricsRow val;
            val.iter = iter;
            val.split = "val";
            val.nll_nats_per_dim = eval_nll_per_dim(model, ema, data.val, data.n_val);
            val.bpd = cfg.n_bits > 0
                          ? bits_per_dim(-val.nll_nats_per_dim * static_cast<double>(dim), dim,
                                         cfg.n_bits)
                          : 0.0;
            val.lr = sched_backbone.at(iter);
            val.elapsed_ms = elapsed_ms();
            result.metrics.push_back(val);
            if (checkpoint_hook && at_eval && iter != cfg.max_iters) checkpoint_hook(iter);
        }
    }

    result.ema = std::move(ema);
    return result;
}

} // namespace bflow
