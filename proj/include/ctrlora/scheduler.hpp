// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ctrlora/curvature.hpp"
#include "ctrlora/errors.hpp"
#include "ctrlora/linalg.hpp"
#include "ctrlora/matrix.hpp"
#include "ctrlora/model.hpp"
#include "ctrlora/plan.hpp"
#include "ctrlora/rng.hpp"

namespace ctrlora {

enum class AllocationPolicy { raw_utility, utility_per_cost };

inline const char* to_string(AllocationPolicy p) {
    return p == AllocationPolicy::raw_utility ? "raw-utility" : "utility-per-cost";
}

namespace detail {

inline double rank1_metric_norm_sq(const CurvatureProxy& proxy, const std::vector<double>& u,
                                   const std::vector<double>& v) {
    if (proxy.kind == ProxyKind::kfac) {
        const std::vector<double> lu = mat_vec(proxy.l_factor.to_matrix(), u);
        const std::vector<double> rv = mat_vec(proxy.r_factor.to_matrix(), v);
        return dot(u, lu) * dot(v, rv);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j)
            row += proxy.d_entries(i, j) * v[j] * v[j];
        total += u[i] * u[i] * row;
    }
    return total;
}

inline void normalize_or_throw(std::vector<double>& x, const char* what) {
    const double n = norm(x);
    if (!(n > 0.0) || !std::isfinite(n)) throw SingularMetricError(what);
    for (double& e : x) e /= n;
}

// Best rank-1 factors of a dense matrix by alternating power iteration.
// Deterministic: starts from the dominant row/column structure of y.
inline void top_rank1(const Matrix& y, std::vector<double>& u, std::vector<double>& v) {
    u.assign(y.rows(), 0.0);
    v.assign(y.cols(), 1.0 / std::sqrt(static_cast<double>(y.cols())));
    for (int it = 0; it < 64; ++it) {
        std::vector<double> u_next = mat_vec(y, v);
        const double un = norm(u_next);
        if (un <= 1e-300) break;
        for (double& e : u_next) e /= un;
        std::vector<double> v_next = mat_tvec(y, u_next);
        const double vn = norm(v_next);
        if (vn <= 1e-300) break;
        for (double& e : v_next) e /= vn;
        double drift = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i)
            drift = std::max(drift, std::abs(std::abs(u_next[i]) - std::abs(u[i])));
        u = std::move(u_next);
        v = std::move(v_next);
        if (it > 0 && drift < 1e-14) break;
    }
}

}  // namespace detail

/// Optimal step and model decrease for a rank-1 update along u v^T under the
/// local quadratic model -<g, dW> + 1/2 ||dW||^2_M:
/// alpha* = <g, u v^T> / ||u v^T||^2_M, decrease = 1/2 <g, u v^T>^2 / ||u v^T||^2_M.
struct PredictedDecrease {
    double alpha_star = 0.0;
    double decrease = 0.0;
};

inline PredictedDecrease predicted_decrease(const Matrix& g, const CurvatureProxy& proxy,
                                            const std::vector<double>& u,
                                            const std::vector<double>& v) {
    if (u.size() != g.rows() || v.size() != g.cols())
        throw DimensionError("predicted_decrease: direction shape mismatch");
    const double msq = detail::rank1_metric_norm_sq(proxy, u, v);
    if (!(msq > 0.0)) throw SingularMetricError("predicted_decrease: zero metric norm");
    const std::vector<double> gv = mat_vec(g, v);
    const double inner = dot(u, gv);
    PredictedDecrease out;
    out.alpha_star = inner / msq;
    out.decrease = 0.5 * inner * inner / msq;
    return out;
}

/// Top-k singular triples of the whitened gradient, with utilities 1/2 sigma^2
/// in descending order. Each candidate stores both the whitened pair and its
/// unwhitened counterpart: L^{-1/2} u / ||.||, R^{-1/2} v / ||.|| for
/// Kronecker proxies; for diagonal proxies the elementwise map back is not
/// rank-1, so the stored pair is its best rank-1 representative (exact when
/// the diagonal factorizes across rows and columns, e.g. damping-only).
inline std::vector<CandidateDirection> score_layer(std::size_t layer_id, const Matrix& g,
                                                   const CurvatureProxy& proxy,
                                                   const WhitenCache& cache, std::size_t k_max,
                                                   const SvdParams& params, Rng& rng) {
    std::vector<CandidateDirection> out;
    if (k_max == 0) return out;
    const std::size_t min_dim = std::min(g.rows(), g.cols());
    if (k_max > min_dim) throw DimensionError("score_layer: k_max exceeds min dim");

    const Matrix wg = whiten_gradient(cache, g);
    const SvdResult svd = min_dim <= 64 ? exact_svd(wg, k_max)
                                        : randomized_svd(wg, k_max, params, rng);

    for (std::size_t i = 0; i < k_max; ++i) {
        CandidateDirection cand;
        cand.layer_id = layer_id;
        cand.sigma = svd.singular_values[i];
        cand.utility = 0.5 * cand.sigma * cand.sigma;
        cand.cost = g.rows() + g.cols();
        cand.u_whitened.resize(g.rows());
        for (std::size_t r = 0; r < g.rows(); ++r) cand.u_whitened[r] = svd.u(r, i);
        cand.v_whitened.resize(g.cols());
        for (std::size_t r = 0; r < g.cols(); ++r) cand.v_whitened[r] = svd.v(r, i);

        if (proxy.kind == ProxyKind::kfac) {
            cand.u = mat_vec(cache.l_inv_sqrt, cand.u_whitened);
            cand.v = mat_vec(cache.r_inv_sqrt, cand.v_whitened);
            detail::normalize_or_throw(cand.u, "score_layer: degenerate unwhitened u");
            detail::normalize_or_throw(cand.v, "score_layer: degenerate unwhitened v");
        } else {
            Matrix mapped = outer(cand.u_whitened, cand.v_whitened);
            for (std::size_t r = 0; r < mapped.size(); ++r)
                mapped.data()[r] *= cache.d_inv_sqrt.data()[r];
            detail::top_rank1(mapped, cand.u, cand.v);
            detail::normalize_or_throw(cand.u, "score_layer: degenerate diagonal u");
            detail::normalize_or_throw(cand.v, "score_layer: degenerate diagonal v");
        }
        out.push_back(std::move(cand));
    }
    return out;
}

/// g_whitened - sigma u v^T: removes the head of the spectrum.
inline Matrix deflate(const Matrix& g_whitened, double sigma, const std::vector<double>& u,
                      const std::vector<double>& v) {
    if (u.size() != g_whitened.rows() || v.size() != g_whitened.cols())
        throw DimensionError("deflate: shape mismatch");
    Matrix out = g_whitened;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) -= sigma * u[i] * v[j];
    return out;
}

/// Greedy budgeted selection. Each pick converts the best remaining candidate
/// (by policy score, ties to the lower layer id, then spectrum order) into
/// one rank unit on its layer, consuming d_in + d_out of the budget. Stops
/// when nothing fits.
inline BudgetPlan allocate_greedy(const std::vector<std::vector<CandidateDirection>>& by_layer,
                                  std::size_t budget, AllocationPolicy policy) {
    BudgetPlan plan;
    plan.budget_limit = budget;
    std::vector<std::size_t> cursor(by_layer.size(), 0);

    auto score_of = [&](const CandidateDirection& c) {
        return policy == AllocationPolicy::raw_utility
                   ? c.utility
                   : c.utility / static_cast<double>(c.cost);
    };

    for (;;) {
        std::size_t best = by_layer.size();
        double best_score = 0.0;
        for (std::size_t l = 0; l < by_layer.size(); ++l) {
            if (cursor[l] >= by_layer[l].size()) continue;
            const CandidateDirection& c = by_layer[l][cursor[l]];
            if (plan.spent + c.cost > budget) continue;
            const double s = score_of(c);
            if (best == by_layer.size() || s > best_score) {
                best = l;
                best_score = s;
            }
        }
        if (best == by_layer.size()) break;
        const CandidateDirection& chosen = by_layer[best][cursor[best]];
        plan.ranks[chosen.layer_id] += 1;
        plan.spent += chosen.cost;
        plan.selection_log.push_back(chosen);
        ++cursor[best];
    }
    return plan;
}

/// Mean gradient per eligible layer over the calibration batches, weighted by
/// batch size.
inline std::vector<Matrix> calibration_gradients(const BaseNetwork& net,
                                                 const AdapterSet& adapters,
                                                 const std::vector<Batch>& batches) {
    if (batches.empty()) throw DimensionError("calibration_gradients: no batches");
    std::vector<Matrix> sums(net.layers.size());
    std::size_t total = 0;
    for (const Batch& b : batches) {
        const BackwardResult res = backward(net, adapters, b);
        for (std::size_t li : net.eligible_layers()) {
            Matrix g = res.grads.layer_grads[li];
            g *= static_cast<double>(b.size());
            if (sums[li].size() == 0)
                sums[li] = std::move(g);
            else
                sums[li] += g;
        }
        total += b.size();
    }
    for (std::size_t li : net.eligible_layers()) sums[li] *= 1.0 / static_cast<double>(total);
    return sums;
}

/// End-to-end allocation: calibration gradients -> whiten -> score -> greedy
/// selection under budget_fraction * (base parameter count).
inline BudgetPlan schedule(const BaseNetwork& net, const AdapterSet& adapters,
                           const std::vector<Batch>& calibration_batches,
                           const std::vector<CurvatureProxy>& proxies, double budget_fraction,
                           std::size_t k_max, AllocationPolicy policy, const SvdParams& params,
                           Rng& rng) {
    if (!(budget_fraction > 0.0) || budget_fraction > 1.0)
        throw ConfigError("budget_fraction must lie in (0, 1]");
    const std::vector<Matrix> grads = calibration_gradients(net, adapters, calibration_batches);

    std::vector<std::vector<CandidateDirection>> by_layer;
    for (const CurvatureProxy& proxy : proxies) {
        const std::size_t li = proxy.layer_id;
        const auto& layer = net.layers[li];
        if (!layer.adapter_eligible)
            throw DimensionError("schedule: proxy for ineligible layer " + std::to_string(li));
        const std::size_t k = std::min(k_max, std::min(layer.d_in(), layer.d_out()));
        const WhitenCache cache = make_whiten_cache(proxy);
        Rng layer_rng = rng.fork(li);
        by_layer.push_back(score_layer(li, grads[li], proxy, cache, k, params, layer_rng));
    }

    const auto budget =
        static_cast<std::size_t>(budget_fraction * static_cast<double>(net.param_count()));
    return allocate_greedy(by_layer, budget, policy);
}

/// Uniform-rank baseline: the same rank r = floor(budget / total unit cost)
/// on every eligible layer, capped by layer dimensions and k_max.
inline BudgetPlan uniform_plan(const BaseNetwork& net, double budget_fraction,
                               std::size_t k_max) {
    if (!(budget_fraction > 0.0) || budget_fraction > 1.0)
        throw ConfigError("budget_fraction must lie in (0, 1]");
    const auto budget =
        static_cast<std::size_t>(budget_fraction * static_cast<double>(net.param_count()));
    std::size_t unit_cost = 0;
    for (std::size_t li : net.eligible_layers())
        unit_cost += net.layers[li].d_in() + net.layers[li].d_out();
    BudgetPlan plan;
    plan.budget_limit = budget;
    if (unit_cost == 0) return plan;
    const std::size_t r = budget / unit_cost;
    for (std::size_t li : net.eligible_layers()) {
        const auto& layer = net.layers[li];
        const std::size_t capped = std::min({r, std::min(layer.d_in(), layer.d_out()), k_max});
        if (capped > 0) {
            plan.ranks[li] = capped;
            plan.spent += capped * (layer.d_in() + layer.d_out());
        }
    }
    return plan;
}

}  // namespace ctrlora
