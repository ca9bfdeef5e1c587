// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctrlora/curvature.hpp"
#include "ctrlora/data.hpp"
#include "ctrlora/errors.hpp"
#include "ctrlora/model.hpp"
#include "ctrlora/plan.hpp"
#include "ctrlora/rng.hpp"
#include "ctrlora/scheduler.hpp"

namespace ctrlora {

enum class LambdaSchedule { linear, cosine };

inline const char* to_string(LambdaSchedule s) {
    return s == LambdaSchedule::linear ? "linear" : "cosine";
}

struct TrainConfig {
    double budget_fraction = 0.003;
    std::size_t steps = 1000;
    std::size_t batch_size = 32;
    double peak_lr = 2e-4;
    double warmup_fraction = 0.03;
    double lambda_start = 0.1;
    double lambda_end = 0.0;
    LambdaSchedule lambda_schedule = LambdaSchedule::linear;
    std::size_t refresh_interval = 50;
    std::size_t calibration_size = 256;
    ProxyKind proxy_kind = ProxyKind::kfac;
    Damping damping{};
    std::uint64_t seed = 0;
    AllocationPolicy policy = AllocationPolicy::raw_utility;
    std::size_t k_max = 8;
    double weight_decay = 0.0;

    // Plumbing knobs below; the fields above mirror the run description.
    double init_sigma = 0.02;
    std::size_t log_every = 10;
    std::size_t eval_every = 0;  // 0 = final eval only
    std::size_t hutchinson_probes = 64;
    double hutchinson_fd_step = 1e-4;
    bool uniform_ranks = false;  // skip curvature scheduling, spread budget evenly
    SvdParams svd{};
};

inline void validate(const TrainConfig& c) {
    if (!(c.budget_fraction >= 0.0) || c.budget_fraction > 1.0)
        throw ConfigError("budget_fraction must lie in [0, 1]");
    if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(c.peak_lr > 0.0)) throw ConfigError("peak_lr must be > 0");
    if (!(c.warmup_fraction > 0.0) || !(c.warmup_fraction < 1.0))
        throw ConfigError("warmup_fraction must lie in (0, 1)");
    if (c.lambda_end < 0.0 || c.lambda_start < c.lambda_end)
        throw ConfigError("need lambda_start >= lambda_end >= 0");
    if (c.refresh_interval == 0) throw ConfigError("refresh_interval must be >= 1");
    if (c.calibration_size == 0) throw ConfigError("calibration_size must be >= 1");
    if (c.k_max == 0) throw ConfigError("k_max must be >= 1");
    if (c.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (!(c.init_sigma > 0.0)) throw ConfigError("init_sigma must be > 0");
    if (c.log_every == 0) throw ConfigError("log_every must be >= 1");
    if (c.proxy_kind == ProxyKind::diagonal) {
        if (c.hutchinson_probes == 0) throw ConfigError("hutchinson_probes must be >= 1");
        if (!(c.hutchinson_fd_step > 0.0)) throw ConfigError("hutchinson_fd_step must be > 0");
    }
}

namespace detail {
constexpr double kPi = 3.14159265358979323846;
}

/// Penalty weight at `step` in [0, steps]. Endpoints are exact by
/// construction, not up to rounding.
inline double lambda_at(const TrainConfig& c, std::size_t step) {
    if (step == 0 || c.steps == 0) return c.lambda_start;
    if (step >= c.steps) return c.lambda_end;
    const double t = static_cast<double>(step) / static_cast<double>(c.steps);
    if (c.lambda_schedule == LambdaSchedule::linear)
        return c.lambda_start + (c.lambda_end - c.lambda_start) * t;
    return c.lambda_end +
           (c.lambda_start - c.lambda_end) * 0.5 * (1.0 + std::cos(detail::kPi * t));
}

/// Learning rate at `step`: linear warm-up from 0 to peak over
/// warmup_fraction * steps, then cosine decay to 0 at `steps`.
inline double lr_at(const TrainConfig& c, std::size_t step) {
    if (c.steps == 0 || step >= c.steps) return 0.0;
    const double warm = c.warmup_fraction * static_cast<double>(c.steps);
    const double s = static_cast<double>(step);
    if (s < warm) return c.peak_lr * s / warm;
    const double t = (s - warm) / (static_cast<double>(c.steps) - warm);
    return c.peak_lr * 0.5 * (1.0 + std::cos(detail::kPi * t));
}

struct PenaltyResult {
    double value = 0.0;
    std::vector<Matrix> grad_a, grad_b;                      // aligned with adapters
    std::vector<std::pair<std::size_t, double>> per_layer;   // layer_id -> ||AB^T||^2_M
};

/// Unweighted trust-region term: value = sum_l ||A_l B_l^T||^2_M plus its
/// analytic factor gradients. The caller applies lambda.
inline PenaltyResult penalty_value_and_grad(const AdapterSet& adapters,
                                            const std::vector<CurvatureProxy>& proxies) {
    std::map<std::size_t, const CurvatureProxy*> by_layer;
    for (const auto& p : proxies) by_layer[p.layer_id] = &p;

    PenaltyResult out;
    out.grad_a.reserve(adapters.size());
    out.grad_b.reserve(adapters.size());
    for (const auto& pair : adapters) {
        out.grad_a.emplace_back(pair.a.rows(), pair.a.cols());
        out.grad_b.emplace_back(pair.b.rows(), pair.b.cols());
        const auto it = by_layer.find(pair.layer_id);
        if (it == by_layer.end())
            throw DimensionError("penalty: no curvature proxy for layer " +
                                 std::to_string(pair.layer_id));
        const double v = metric_norm_sq(*it->second, pair.a, pair.b);
        out.per_layer.emplace_back(pair.layer_id, v);
        out.value += v;
        metric_norm_grad(*it->second, pair.a, pair.b, 1.0, out.grad_a.back(),
                         out.grad_b.back());
    }
    return out;
}

/// AdamW accumulators, one first/second moment pair per adapter factor.
struct OptimizerState {
    std::size_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<Matrix> m_a, v_a, m_b, v_b;  // aligned with adapters
};

inline OptimizerState init_optimizer(const AdapterSet& adapters) {
    OptimizerState s;
    for (const auto& pair : adapters) {
        s.m_a.emplace_back(pair.a.rows(), pair.a.cols());
        s.v_a.emplace_back(pair.a.rows(), pair.a.cols());
        s.m_b.emplace_back(pair.b.rows(), pair.b.cols());
        s.v_b.emplace_back(pair.b.rows(), pair.b.cols());
    }
    return s;
}

namespace detail {

inline void adamw_factor(Matrix& w, const Matrix& g, Matrix& m, Matrix& v, double lr,
                         double weight_decay, double beta1, double beta2, double eps,
                         double bc1, double bc2) {
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g.data()[i];
        m.data()[i] = beta1 * m.data()[i] + (1.0 - beta1) * gi;
        v.data()[i] = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
        const double mhat = m.data()[i] / bc1;
        const double vhat = v.data()[i] / bc2;
        w.data()[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w.data()[i]);
    }
}

}  // namespace detail

/// One decoupled-weight-decay Adam update over every adapter factor.
inline void adamw_step(OptimizerState& state, AdapterSet& adapters,
                       const std::vector<Matrix>& grad_a, const std::vector<Matrix>& grad_b,
                       double lr, double weight_decay) {
    if (grad_a.size() != adapters.size() || grad_b.size() != adapters.size() ||
        state.m_a.size() != adapters.size())
        throw DimensionError("adamw: gradient/state not aligned with adapters");
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        if (!grad_a[i].all_finite() || !grad_b[i].all_finite())
            throw NumericError("adamw: non-finite gradient for layer " +
                               std::to_string(adapters[i].layer_id) + " at update " +
                               std::to_string(state.t + 1));
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        detail::adamw_factor(adapters[i].a, grad_a[i], state.m_a[i], state.v_a[i], lr,
                             weight_decay, state.beta1, state.beta2, state.eps, bc1, bc2);
        detail::adamw_factor(adapters[i].b, grad_b[i], state.m_b[i], state.v_b[i], lr,
                             weight_decay, state.beta1, state.beta2, state.eps, bc1, bc2);
    }
}

/// One metrics row. Rows describe the state *entering* `step` (loss and
/// gradients before that step's update); the terminal row (step == steps)
/// reports the final adapters with grad_norm fixed at 0.
struct MetricsRecord {
    std::size_t step = 0;
    double task_loss = 0.0;
    double penalty_value = 0.0;
    double total_loss = 0.0;  // task_loss + lambda * penalty_value
    double lambda = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    std::vector<std::pair<std::size_t, double>> layer_penalty;
    bool has_eval = false;
    double eval_loss = 0.0;
    double eval_accuracy = 0.0;
    double wall_ms = 0.0;
};

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;  // stays 0 for regression tasks
    bool classification = false;
};

/// Mean loss (and accuracy, for classification) over the rows in `idx`.
inline EvalResult evaluate(const BaseNetwork& net, const AdapterSet& adapters,
                           const Dataset& data, const std::vector<std::size_t>& idx,
                           std::size_t batch_size = 256) {
    if (idx.empty()) throw ConfigError("evaluate: empty index set");
    if (batch_size == 0) throw ConfigError("evaluate: batch_size must be >= 1");
    EvalResult res;
    res.classification = data.classification();
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, idx.size() - start);
        const Batch batch = gather(data, idx, start, count);
        Matrix logits = predict_logits(net, adapters, batch.inputs);
        if (res.classification) {
            for (std::size_t i = 0; i < count; ++i) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < logits.cols(); ++c)
                    if (logits(i, c) > logits(i, best)) best = c;
                if (static_cast<int>(best) == batch.labels[i]) ++correct;
            }
            loss_sum += detail::cross_entropy_inplace(logits, batch.labels) *
                        static_cast<double>(count);
        } else {
            loss_sum += detail::mse(logits, batch.targets) * static_cast<double>(count);
        }
    }
    res.loss = loss_sum / static_cast<double>(idx.size());
    if (res.classification)
        res.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
    return res;
}

/// Everything needed to continue a run: adapters, optimizer moments, the
/// latest proxies, the (fixed) rank plan, the step cursor, and the loss the
/// divergence guard is anchored to.
struct TrainState {
    AdapterSet adapters;
    OptimizerState opt;
    std::vector<CurvatureProxy> proxies;
    BudgetPlan plan;
    std::size_t step = 0;
    double initial_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    TrainState state;
    std::vector<MetricsRecord> metrics;
    EvalResult final_eval;
};

namespace detail {

inline std::vector<CurvatureProxy> estimate_proxies(const BaseNetwork& net,
                                                    const AdapterSet& adapters,
                                                    const std::vector<Batch>& calib_batches,
                                                    const Batch& calib_all,
                                                    const TrainConfig& config, std::size_t step,
                                                    std::size_t refresh_index) {
    if (config.proxy_kind == ProxyKind::kfac)
        return estimate_kfac(net, adapters, calib_batches, config.damping, step);
    const Rng rng = Rng(config.seed).fork(stream::kHutchinson).fork(refresh_index);
    return estimate_hutchinson(net, adapters, calib_all, config.hutchinson_probes,
                               config.hutchinson_fd_step, config.damping, rng, step);
}

}  // namespace detail

/// Full pipeline: estimate curvature on the calibration split, allocate ranks
/// under the budget, initialize adapters, then optimize the penalized
/// objective with AdamW, re-estimating the trust-region metric every
/// refresh_interval steps (ranks stay fixed; optimizer moments survive
/// refreshes). `forced_plan` overrides allocation; `resume` continues a
/// previous run with identical config and data. `stop_at` pauses the run
/// early: schedules still follow config.steps, the terminal record and final
/// eval are emitted only when the run actually reaches config.steps.
inline TrainResult train(const BaseNetwork& net, const Dataset& data, const TrainConfig& config,
                         const BudgetPlan* forced_plan = nullptr,
                         const TrainState* resume = nullptr,
                         std::size_t stop_at = std::numeric_limits<std::size_t>::max()) {
    validate(config);
    if (data.train_idx.empty()) throw ConfigError("train: dataset has no train split");
    if (data.train_idx.size() < config.batch_size)
        throw ConfigError("train: train split smaller than batch_size");
    const auto t0 = std::chrono::steady_clock::now();
    const auto wall_ms = [&t0] {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    };

    const bool penalized = config.lambda_start > 0.0;
    const bool scheduled = forced_plan == nullptr && !config.uniform_ranks && resume == nullptr;
    const bool needs_proxies = penalized || scheduled;

    std::vector<Batch> calib_batches;
    Batch calib_all;
    if (needs_proxies) {
        if (data.calibration_idx.empty())
            throw ConfigError("train: dataset has no calibration split");
        calib_batches = calibration_batches(data, config.batch_size);
        if (config.proxy_kind == ProxyKind::diagonal)
            calib_all = gather(data, data.calibration_idx);
    }

    TrainState st;
    if (resume != nullptr) {
        st = *resume;
        if (st.adapters.size() != st.opt.m_a.size())
            throw ConfigError("train: resume state is not self-consistent");
    } else {
        if (needs_proxies)
            st.proxies = detail::estimate_proxies(net, {}, calib_batches, calib_all, config,
                                                  /*step=*/0, /*refresh_index=*/0);
        if (forced_plan != nullptr) {
            st.plan = *forced_plan;
        } else if (config.uniform_ranks) {
            st.plan = uniform_plan(net, config.budget_fraction, config.k_max);
        } else {
            Rng svd_rng = Rng(config.seed).fork(stream::kSvd);
            st.plan = schedule(net, {}, calib_batches, st.proxies, config.budget_fraction,
                               config.k_max, config.policy, config.svd, svd_rng);
        }
        st.adapters = init_adapters(net, st.plan, config.init_sigma, config.seed);
        st.opt = init_optimizer(st.adapters);
    }

    TrainResult result;
    const std::size_t batches_per_epoch = data.train_idx.size() / config.batch_size;
    std::size_t cached_epoch = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> order;

    BackwardOptions bw;
    bw.full_matrix = false;

    const std::size_t until = std::min(config.steps, stop_at);
    for (std::size_t step = st.step; step < until; ++step) {
        const std::size_t epoch = step / batches_per_epoch;
        if (epoch != cached_epoch) {
            order = epoch_order(data, config.seed, epoch);
            cached_epoch = epoch;
        }
        const Batch batch = gather(data, order, (step % batches_per_epoch) * config.batch_size,
                                   config.batch_size);

        BackwardResult back = backward(net, st.adapters, batch, bw);
        const double task_loss = back.grads.loss;
        if (std::isnan(st.initial_loss)) st.initial_loss = task_loss;
        if (task_loss > 10.0 * st.initial_loss)
            throw DivergenceError("train: task loss " + std::to_string(task_loss) + " at step " +
                                      std::to_string(step) + " exceeds 10x initial loss " +
                                      std::to_string(st.initial_loss),
                                  step, task_loss, st.initial_loss);

        const double lambda = lambda_at(config, step);
        const double lr = lr_at(config, step);
        std::vector<Matrix>& ga = back.grads.adapter_grad_a;
        std::vector<Matrix>& gb = back.grads.adapter_grad_b;

        const bool log_now = (step % config.log_every == 0) || step + 1 == config.steps;
        const bool eval_now = config.eval_every > 0 && step % config.eval_every == 0;

        PenaltyResult pen;
        bool have_pen = false;
        if ((penalized && lambda > 0.0) || (log_now && !st.proxies.empty())) {
            pen = penalty_value_and_grad(st.adapters, st.proxies);
            have_pen = true;
        }
        if (penalized && lambda > 0.0) {
            for (std::size_t i = 0; i < st.adapters.size(); ++i) {
                ga[i].add_scaled(lambda, pen.grad_a[i]);
                gb[i].add_scaled(lambda, pen.grad_b[i]);
            }
        }

        if (log_now || eval_now) {
            MetricsRecord rec;
            rec.step = step;
            rec.task_loss = task_loss;
            rec.penalty_value = have_pen ? pen.value : 0.0;
            rec.total_loss = task_loss + lambda * rec.penalty_value;
            rec.lambda = lambda;
            rec.lr = lr;
            if (have_pen) rec.layer_penalty = pen.per_layer;
            double gsq = 0.0;
            for (std::size_t i = 0; i < ga.size(); ++i)
                gsq += frob_norm_sq(ga[i]) + frob_norm_sq(gb[i]);
            rec.grad_norm = std::sqrt(gsq);
            if (eval_now && !data.eval_idx.empty()) {
                const EvalResult ev = evaluate(net, st.adapters, data, data.eval_idx);
                rec.has_eval = true;
                rec.eval_loss = ev.loss;
                rec.eval_accuracy = ev.accuracy;
            }
            rec.wall_ms = wall_ms();
            result.metrics.push_back(std::move(rec));
        }

        adamw_step(st.opt, st.adapters, ga, gb, lr, config.weight_decay);
        st.step = step + 1;

        if (penalized && st.step % config.refresh_interval == 0 && st.step < config.steps)
            st.proxies = detail::estimate_proxies(net, st.adapters, calib_batches, calib_all,
                                                  config, st.step,
                                                  st.step / config.refresh_interval);
    }

    if (st.step == config.steps) {
        // Terminal record: final adapters, final train/eval losses, no gradient.
        MetricsRecord last;
        last.step = config.steps;
        last.lambda = lambda_at(config, config.steps);
        last.lr = lr_at(config, config.steps);
        last.task_loss = evaluate(net, st.adapters, data, data.train_idx, 256).loss;
        if (!st.proxies.empty()) {
            const PenaltyResult pen = penalty_value_and_grad(st.adapters, st.proxies);
            last.penalty_value = pen.value;
            last.layer_penalty = pen.per_layer;
        }
        last.total_loss = last.task_loss + last.lambda * last.penalty_value;
        if (!data.eval_idx.empty()) {
            result.final_eval = evaluate(net, st.adapters, data, data.eval_idx);
            last.has_eval = true;
            last.eval_loss = result.final_eval.loss;
            last.eval_accuracy = result.final_eval.accuracy;
        } else {
            result.final_eval = evaluate(net, st.adapters, data, data.train_idx);
        }
        last.wall_ms = wall_ms();
        result.metrics.push_back(std::move(last));
    }
    result.state = std::move(st);
    return result;
}

}  // namespace ctrlora
