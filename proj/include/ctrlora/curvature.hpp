// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ctrlora/errors.hpp"
#include "ctrlora/linalg.hpp"
#include "ctrlora/matrix.hpp"
#include "ctrlora/model.hpp"
#include "ctrlora/rng.hpp"

namespace ctrlora {

enum class ProxyKind { kfac, diagonal };

inline const char* to_string(ProxyKind k) {
    return k == ProxyKind::kfac ? "kfac" : "diagonal";
}

/// Damping is either an absolute floor or a fraction of the mean diagonal of
/// the raw estimate. Relative damping of an all-zero estimate falls back to
/// the raw value, so degenerate data still yields an invertible metric
/// (factors become damping * I).
struct Damping {
    enum class Mode { absolute, relative };
    Mode mode = Mode::relative;
    double value = 1e-3;

    double resolve(double mean_diag) const {
        if (mode == Mode::absolute) return value;
        return mean_diag > 0.0 ? value * mean_diag : value;
    }
};

/// Layer-wise curvature estimate. Kronecker proxies store the damped factors
/// L = mean(g g^T) + delta I and R = mean(a a^T) + delta I; diagonal proxies
/// store strictly positive per-entry values max(est, 0) + delta. `damping`
/// records the absolute deltas actually applied.
struct CurvatureProxy {
    std::size_t layer_id = 0;
    ProxyKind kind = ProxyKind::kfac;

    SpdMatrix l_factor;  // d_out x d_out
    SpdMatrix r_factor;  // d_in x d_in
    Matrix d_entries;    // d_out x d_in, diagonal kind only

    double l_damping = 0.0;
    double r_damping = 0.0;
    std::size_t sample_count = 0;
    std::size_t step_estimated = 0;
    std::string estimator;
};

/// Streaming accumulator for Kronecker factors: keeps per-layer sums of
/// g g^T and a a^T so calibration data can arrive in any batch partition.
class KfacAccumulator {
   public:
    explicit KfacAccumulator(const BaseNetwork& net) {
        for (std::size_t li : net.eligible_layers()) {
            Slot s;
            s.layer_id = li;
            s.sum_g = Matrix(net.layers[li].d_out(), net.layers[li].d_out());
            s.sum_a = Matrix(net.layers[li].d_in(), net.layers[li].d_in());
            slots_.push_back(std::move(s));
        }
    }

    void add(const BatchCache& cache) {
        for (auto& s : slots_) {
            const LayerCapture& cap = cache.captures.at(s.layer_id);
            if (cap.a_rows.rows() == 0)
                throw DimensionError("kfac accumulator: no captured rows for layer " +
                                     std::to_string(s.layer_id));
            Matrix ga = matmul_tn(cap.g_rows, cap.g_rows);
            Matrix aa = matmul_tn(cap.a_rows, cap.a_rows);
            s.sum_g += ga;
            s.sum_a += aa;
            s.rows += cap.a_rows.rows();
        }
    }

    std::vector<CurvatureProxy> finalize(const Damping& damping, std::size_t step) const {
        std::vector<CurvatureProxy> out;
        for (const auto& s : slots_) {
            if (s.rows == 0) throw DimensionError("kfac accumulator: finalize before add");
            CurvatureProxy p;
            p.layer_id = s.layer_id;
            p.kind = ProxyKind::kfac;
            p.sample_count = s.rows;
            p.step_estimated = step;
            p.estimator = "empirical-fisher";

            Matrix l = s.sum_g;
            l *= 1.0 / static_cast<double>(s.rows);
            Matrix r = s.sum_a;
            r *= 1.0 / static_cast<double>(s.rows);
            SpdMatrix lm(std::move(l));
            SpdMatrix rm(std::move(r));
            p.l_damping = damping.resolve(lm.mean_diagonal());
            p.r_damping = damping.resolve(rm.mean_diagonal());
            lm.add_to_diagonal(p.l_damping);
            rm.add_to_diagonal(p.r_damping);
            p.l_factor = std::move(lm);
            p.r_factor = std::move(rm);
            out.push_back(std::move(p));
        }
        return out;
    }

   private:
    struct Slot {
        std::size_t layer_id = 0;
        Matrix sum_g;
        Matrix sum_a;
        std::size_t rows = 0;
    };
    std::vector<Slot> slots_;
};

/// One-call Kronecker estimation over a list of calibration batches.
inline std::vector<CurvatureProxy> estimate_kfac(const BaseNetwork& net,
                                                 const AdapterSet& adapters,
                                                 const std::vector<Batch>& batches,
                                                 const Damping& damping, std::size_t step = 0) {
    if (batches.empty()) throw DimensionError("estimate_kfac: no calibration batches");
    KfacAccumulator acc(net);
    for (const Batch& b : batches) {
        BackwardOptions opts;
        opts.full_matrix = false;
        opts.capture = true;
        acc.add(backward(net, adapters, b, opts).cache);
    }
    return acc.finalize(damping, step);
}

/// Gradient of the training loss w.r.t. one base weight, evaluated at
/// W + offset. Backbone of Hessian-vector products.
using LayerGradFn = std::function<Matrix(std::size_t layer_id, const Matrix& offset)>;

inline LayerGradFn make_layer_grad_fn(const BaseNetwork& net, const AdapterSet& adapters,
                                      const Batch& batch) {
    return [&net, &adapters, &batch](std::size_t layer_id, const Matrix& offset) {
        BackwardOptions opts;
        opts.weight_offset = &offset;
        opts.offset_layer = layer_id;
        BackwardResult res = backward(net, adapters, batch, opts);
        return std::move(res.grads.layer_grads[layer_id]);
    };
}

/// Hutchinson estimate of the Hessian diagonal for one layer's weight:
/// mean over Rademacher probes v of v .* Hv, with Hv formed by central
/// differences of the gradient. Step-size issues surface as a NumericError
/// suggesting a smaller probe step.
inline CurvatureProxy estimate_hutchinson_diag(std::size_t layer_id, std::size_t d_out,
                                               std::size_t d_in, const LayerGradFn& grad_fn,
                                               std::size_t probes, double fd_step,
                                               const Damping& damping, Rng& rng,
                                               std::size_t step = 0) {
    if (probes == 0) throw DimensionError("hutchinson: need at least one probe");
    if (fd_step <= 0.0) throw DimensionError("hutchinson: fd_step must be positive");
    Matrix est(d_out, d_in);
    Matrix probe(d_out, d_in);
    for (std::size_t p = 0; p < probes; ++p) {
        for (std::size_t i = 0; i < probe.size(); ++i) probe.data()[i] = rng.sign();
        Matrix plus = probe;
        plus *= fd_step;
        const Matrix gp = grad_fn(layer_id, plus);
        plus *= -1.0;
        const Matrix gm = grad_fn(layer_id, plus);
        if (!gp.all_finite() || !gm.all_finite())
            throw NumericError("hutchinson: non-finite gradient; reduce fd_step");
        for (std::size_t i = 0; i < est.size(); ++i) {
            const double hv = (gp.data()[i] - gm.data()[i]) / (2.0 * fd_step);
            est.data()[i] += probe.data()[i] * hv;
        }
    }
    est *= 1.0 / static_cast<double>(probes);
    ensure_finite(est, "hutchinson estimate");

    double mean = 0.0;
    for (std::size_t i = 0; i < est.size(); ++i) mean += std::max(est.data()[i], 0.0);
    mean /= static_cast<double>(est.size());

    CurvatureProxy out;
    out.layer_id = layer_id;
    out.kind = ProxyKind::diagonal;
    out.sample_count = probes;
    out.step_estimated = step;
    out.estimator = "hutchinson";
    out.l_damping = out.r_damping = damping.resolve(mean);
    out.d_entries = Matrix(d_out, d_in);
    for (std::size_t i = 0; i < est.size(); ++i)
        out.d_entries.data()[i] = std::max(est.data()[i], 0.0) + out.l_damping;
    return out;
}

/// Hutchinson proxies for every adapter-eligible layer over one calibration
/// batch. Probe streams fork per layer id, so layer order never matters.
inline std::vector<CurvatureProxy> estimate_hutchinson(const BaseNetwork& net,
                                                       const AdapterSet& adapters,
                                                       const Batch& batch, std::size_t probes,
                                                       double fd_step, const Damping& damping,
                                                       const Rng& rng, std::size_t step = 0) {
    const LayerGradFn grad_fn = make_layer_grad_fn(net, adapters, batch);
    std::vector<CurvatureProxy> out;
    for (std::size_t layer_id : net.eligible_layers()) {
        const auto& w = net.layers[layer_id].weight;
        Rng child = rng.fork(layer_id);
        out.push_back(estimate_hutchinson_diag(layer_id, w.rows(), w.cols(), grad_fn, probes,
                                               fd_step, damping, child, step));
    }
    return out;
}

/// ||A B^T||^2_M without forming the Kronecker product. Kronecker metric:
/// tr((A^T L A)(B^T R B)); diagonal metric: sum_ij D_ij (A B^T)_ij^2.
inline double metric_norm_sq(const CurvatureProxy& proxy, const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("metric_norm_sq: rank mismatch");
    if (a.cols() == 0) return 0.0;
    if (proxy.kind == ProxyKind::kfac) {
        const Matrix la = matmul(proxy.l_factor.to_matrix(), a);  // d_out x r
        const Matrix rb = matmul(proxy.r_factor.to_matrix(), b);  // d_in x r
        const Matrix s1 = matmul_tn(a, la);
        const Matrix s2 = matmul_tn(b, rb);
        return std::max(frob_inner(s1, s2), 0.0);
    }
    const Matrix x = matmul_nt(a, b);
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        total += proxy.d_entries.data()[i] * x.data()[i] * x.data()[i];
    return total;
}

/// Dense-update variant, used for whole-matrix checks and the scheduler's
/// rank-one forms.
inline double metric_norm_sq_full(const CurvatureProxy& proxy, const Matrix& x) {
    if (proxy.kind == ProxyKind::kfac)
        return kron_quadratic_form(proxy.l_factor, proxy.r_factor, x);
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        total += proxy.d_entries.data()[i] * x.data()[i] * x.data()[i];
    return total;
}

/// Gradients of ||A B^T||^2_M w.r.t. the factors, accumulated into da/db:
/// Kronecker: dA = 2 L A (B^T R B), dB = 2 R B (A^T L A);
/// diagonal:  dA = 2 (D .* A B^T) B, dB = 2 (D .* A B^T)^T A.
inline void metric_norm_grad(const CurvatureProxy& proxy, const Matrix& a, const Matrix& b,
                             double scale, Matrix& da, Matrix& db) {
    if (a.cols() == 0) return;
    if (proxy.kind == ProxyKind::kfac) {
        const Matrix la = matmul(proxy.l_factor.to_matrix(), a);
        const Matrix rb = matmul(proxy.r_factor.to_matrix(), b);
        const Matrix btrb = matmul_tn(b, rb);  // r x r
        const Matrix atla = matmul_tn(a, la);  // r x r
        Matrix ga = matmul(la, btrb);
        ga *= 2.0 * scale;
        da += ga;
        Matrix gb = matmul(rb, atla);
        gb *= 2.0 * scale;
        db += gb;
        return;
    }
    Matrix weighted = matmul_nt(a, b);
    for (std::size_t i = 0; i < weighted.size(); ++i)
        weighted.data()[i] *= proxy.d_entries.data()[i];
    Matrix ga = matmul(weighted, b);
    ga *= 2.0 * scale;
    da += ga;
    Matrix gb = matmul_tn(weighted, a);
    gb *= 2.0 * scale;
    db += gb;
}

/// Cached inverse square roots for gradient whitening.
struct WhitenCache {
    ProxyKind kind = ProxyKind::kfac;
    Matrix l_inv_sqrt;   // d_out x d_out
    Matrix r_inv_sqrt;   // d_in x d_in
    Matrix d_inv_sqrt;   // elementwise, diagonal kind
};

inline WhitenCache make_whiten_cache(const CurvatureProxy& proxy) {
    WhitenCache cache;
    cache.kind = proxy.kind;
    if (proxy.kind == ProxyKind::kfac) {
        cache.l_inv_sqrt = inv_sqrt_spd(proxy.l_factor, 0.0);
        cache.r_inv_sqrt = inv_sqrt_spd(proxy.r_factor, 0.0);
    } else {
        cache.d_inv_sqrt = proxy.d_entries;
        for (std::size_t i = 0; i < cache.d_inv_sqrt.size(); ++i) {
            const double d = cache.d_inv_sqrt.data()[i];
            if (d <= 0.0) throw SingularMetricError("diagonal metric entry <= 0");
            cache.d_inv_sqrt.data()[i] = 1.0 / std::sqrt(d);
        }
    }
    return cache;
}

/// G~ = L^{-1/2} G R^{-1/2} (Kronecker) or G ./ sqrt(D) (diagonal).
inline Matrix whiten_gradient(const WhitenCache& cache, const Matrix& g) {
    if (cache.kind == ProxyKind::kfac) {
        const Matrix lg = matmul(cache.l_inv_sqrt, g);
        return matmul(lg, cache.r_inv_sqrt);
    }
    Matrix out = g;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= cache.d_inv_sqrt.data()[i];
    return out;
}

}  // namespace ctrlora
