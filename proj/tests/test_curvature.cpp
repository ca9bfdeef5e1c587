// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#include "ctrlora/curvature.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace ctrlora;
using testutil::random_spd;

namespace {

Damping absolute(double v) {
    Damping d;
    d.mode = Damping::Mode::absolute;
    d.value = v;
    return d;
}

Damping relative(double v) {
    Damping d;
    d.mode = Damping::Mode::relative;
    d.value = v;
    return d;
}

// Single linear layer y = W x, MSE against targets. Gradients for this model
// are hand-computable, which makes factor estimates checkable from scratch.
BaseNetwork linear_probe() {
    ArchSpec spec;
    spec.dims = {2, 2};
    BaseNetwork net = build_network(spec, 0);
    net.layers[0].weight = Matrix(2, 2);
    net.layers[0].weight(0, 0) = 1.5;
    net.layers[0].weight(0, 1) = -0.5;
    net.layers[0].weight(1, 0) = 0.25;
    net.layers[0].weight(1, 1) = 2.0;
    return net;
}

Batch mlp_batch(const BaseNetwork& net, std::size_t n, Rng& rng) {
    Batch b;
    b.inputs = Matrix::gaussian(n, net.input_dim(), 1.0, rng);
    b.targets = Matrix::gaussian(n, net.output_dim(), 1.0, rng);
    return b;
}

CurvatureProxy kfac_proxy(std::size_t d_out, std::size_t d_in, Rng& rng) {
    CurvatureProxy p;
    p.kind = ProxyKind::kfac;
    p.l_factor = random_spd(d_out, rng);
    p.r_factor = random_spd(d_in, rng);
    return p;
}

CurvatureProxy diag_proxy(std::size_t d_out, std::size_t d_in, Rng& rng) {
    CurvatureProxy p;
    p.kind = ProxyKind::diagonal;
    p.d_entries = Matrix(d_out, d_in);
    for (std::size_t i = 0; i < p.d_entries.size(); ++i)
        p.d_entries.data()[i] = 0.1 + rng.uniform();
    return p;
}

double max_rel_factor_diff(const SpdMatrix& a, const SpdMatrix& b) {
    return max_abs_diff(a.to_matrix(), b.to_matrix()) /
           std::max(max_abs(a.to_matrix()), 1e-300);
}

}  // namespace

TEST(Kfac, SingleSampleFactorsMatchHandComputation) {
    const BaseNetwork net = linear_probe();
    Batch batch;
    batch.inputs = Matrix(1, 2);
    batch.inputs(0, 0) = 0.7;
    batch.inputs(0, 1) = -1.2;
    batch.targets = Matrix(1, 2);
    batch.targets(0, 0) = 0.3;
    batch.targets(0, 1) = 0.1;

    const double delta = 1e-4;
    const auto proxies = estimate_kfac(net, {}, {batch}, absolute(delta));
    ASSERT_EQ(proxies.size(), 1u);

    // Per-sample loss (1/2) sum_j (z_j - t_j)^2 has dz_j = z_j - t_j.
    const double z0 = 1.5 * 0.7 + (-0.5) * (-1.2);
    const double z1 = 0.25 * 0.7 + 2.0 * (-1.2);
    const double g0 = z0 - 0.3, g1 = z1 - 0.1;
    const double a0 = 0.7, a1 = -1.2;

    const auto& p = proxies[0];
    EXPECT_NEAR(p.l_factor(0, 0), g0 * g0 + delta, 1e-12);
    EXPECT_NEAR(p.l_factor(0, 1), g0 * g1, 1e-12);
    EXPECT_NEAR(p.l_factor(1, 1), g1 * g1 + delta, 1e-12);
    EXPECT_NEAR(p.r_factor(0, 0), a0 * a0 + delta, 1e-12);
    EXPECT_NEAR(p.r_factor(0, 1), a0 * a1, 1e-12);
    EXPECT_NEAR(p.r_factor(1, 1), a1 * a1 + delta, 1e-12);
    EXPECT_EQ(p.sample_count, 1u);
    EXPECT_EQ(p.estimator, "empirical-fisher");
}

TEST(Kfac, ZeroDataGivesDampedIdentity) {
    const BaseNetwork net = linear_probe();
    Batch batch;
    batch.inputs = Matrix(4, 2);
    batch.targets = Matrix(4, 2);
    const double delta = 0.05;
    const auto proxies = estimate_kfac(net, {}, {batch}, absolute(delta));
    Matrix expect = Matrix::identity(2);
    expect *= delta;
    EXPECT_LE(max_abs_diff(proxies[0].l_factor.to_matrix(), expect), 0.0);
    EXPECT_LE(max_abs_diff(proxies[0].r_factor.to_matrix(), expect), 0.0);
}

TEST(Kfac, StreamingMatchesSinglePass) {
    ArchSpec spec;
    spec.dims = {5, 6, 3};
    const BaseNetwork net = build_network(spec, 12);
    Rng rng(13);
    const Batch full = mlp_batch(net, 56, rng);

    std::vector<Batch> chunks;
    for (std::size_t start = 0; start < 56; start += 7) {
        Batch c;
        c.inputs = Matrix(7, net.input_dim());
        c.targets = Matrix(7, net.output_dim());
        for (std::size_t i = 0; i < 7; ++i)
            for (std::size_t j = 0; j < net.input_dim(); ++j) {
                c.inputs(i, j) = full.inputs(start + i, j);
            }
        for (std::size_t i = 0; i < 7; ++i)
            for (std::size_t j = 0; j < net.output_dim(); ++j)
                c.targets(i, j) = full.targets(start + i, j);
        chunks.push_back(std::move(c));
    }

    const auto one = estimate_kfac(net, {}, {full}, absolute(1e-3));
    const auto many = estimate_kfac(net, {}, chunks, absolute(1e-3));
    ASSERT_EQ(one.size(), many.size());
    for (std::size_t i = 0; i < one.size(); ++i) {
        EXPECT_EQ(one[i].sample_count, many[i].sample_count);
        EXPECT_LT(max_rel_factor_diff(one[i].l_factor, many[i].l_factor), 1e-12);
        EXPECT_LT(max_rel_factor_diff(one[i].r_factor, many[i].r_factor), 1e-12);
    }
}

TEST(Kfac, BatchOrderInvariant) {
    ArchSpec spec;
    spec.dims = {4, 5, 2};
    const BaseNetwork net = build_network(spec, 22);
    Rng rng(23);
    std::vector<Batch> batches;
    for (int i = 0; i < 5; ++i) batches.push_back(mlp_batch(net, 9, rng));
    std::vector<Batch> reversed(batches.rbegin(), batches.rend());

    const auto fwd = estimate_kfac(net, {}, batches, absolute(1e-3));
    const auto rev = estimate_kfac(net, {}, reversed, absolute(1e-3));
    for (std::size_t i = 0; i < fwd.size(); ++i) {
        EXPECT_LT(max_rel_factor_diff(fwd[i].l_factor, rev[i].l_factor), 1e-12);
        EXPECT_LT(max_rel_factor_diff(fwd[i].r_factor, rev[i].r_factor), 1e-12);
    }
}

TEST(Kfac, RelativeDampingScalesWithMeanDiagonal) {
    ArchSpec spec;
    spec.dims = {4, 3};
    const BaseNetwork net = build_network(spec, 30);
    Rng rng(31);
    const Batch batch = mlp_batch(net, 20, rng);

    const auto raw = estimate_kfac(net, {}, {batch}, absolute(0.0));
    const double frac = 1e-2;
    const auto damped = estimate_kfac(net, {}, {batch}, relative(frac));

    for (std::size_t i = 0; i < raw.size(); ++i) {
        const double expect_l = frac * raw[i].l_factor.mean_diagonal();
        EXPECT_NEAR(damped[i].l_damping, expect_l, 1e-15);
        Matrix reconstructed = raw[i].l_factor.to_matrix();
        for (std::size_t j = 0; j < reconstructed.rows(); ++j)
            reconstructed(j, j) += expect_l;
        EXPECT_LT(max_abs_diff(reconstructed, damped[i].l_factor.to_matrix()), 1e-14);
    }
}

TEST(Kfac, TransformerCountsTokenRows) {
    ArchSpec spec;
    spec.kind = ArchKind::tiny_transformer_block;
    spec.loss = LossKind::cross_entropy;
    spec.d_model = 8;
    spec.heads = 2;
    spec.seq_len = 3;
    spec.ffn_mult = 2;
    spec.out_dim = 3;
    const BaseNetwork net = build_network(spec, 40);
    Rng rng(41);
    Batch batch;
    batch.inputs = Matrix::gaussian(5, net.input_dim(), 1.0, rng);
    batch.labels = {0, 1, 2, 0, 1};
    const auto proxies = estimate_kfac(net, {}, {batch}, absolute(1e-3));
    ASSERT_EQ(proxies.size(), 6u);
    for (const auto& p : proxies) EXPECT_EQ(p.sample_count, 5u * 3u);
}

TEST(Hutchinson, ExactOnSeparableQuadratic) {
    // f(W) = (1/2) sum_ij h_ij w_ij^2 has a diagonal Hessian; every
    // Rademacher probe recovers it exactly.
    const std::vector<double> h = {1.0, 4.0, 9.0, 16.0, 25.0, 36.0};
    Matrix w0(2, 3);
    w0.fill(0.3);
    LayerGradFn fn = [&](std::size_t, const Matrix& offset) {
        Matrix g(2, 3);
        for (std::size_t i = 0; i < g.size(); ++i)
            g.data()[i] = h[i] * (w0.data()[i] + offset.data()[i]);
        return g;
    };
    Rng rng(7);
    const auto p = estimate_hutchinson_diag(0, 2, 3, fn, 4, 1e-3, absolute(0.0), rng);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(p.d_entries.data()[i], h[i], 1e-8);
    EXPECT_EQ(p.estimator, "hutchinson");
    EXPECT_EQ(p.sample_count, 4u);
}

TEST(Hutchinson, CrossTermsAverageOut) {
    // Dense quadratic f(w) = (1/2) w^T H w over a 1 x 3 weight.
    Matrix hess(3, 3);
    const double entries[9] = {2.0, 0.4, -0.3, 0.4, 1.5, 0.2, -0.3, 0.2, 3.0};
    for (std::size_t i = 0; i < 9; ++i) hess.data()[i] = entries[i];
    LayerGradFn fn = [&](std::size_t, const Matrix& offset) {
        Matrix g(1, 3);
        for (std::size_t i = 0; i < 3; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 3; ++j) acc += hess(i, j) * offset.data()[j];
            g.data()[i] = acc;
        }
        return g;
    };
    Rng rng(11);
    const auto p = estimate_hutchinson_diag(0, 1, 3, fn, 4000, 1e-3, absolute(0.0), rng);
    EXPECT_NEAR(p.d_entries.data()[0], 2.0, 0.1);
    EXPECT_NEAR(p.d_entries.data()[1], 1.5, 0.1);
    EXPECT_NEAR(p.d_entries.data()[2], 3.0, 0.1);
}

TEST(Hutchinson, MoreProbesReduceError) {
    Matrix hess(4, 4);
    Rng setup(17);
    const SpdMatrix spd = random_spd(4, setup);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) hess(i, j) = spd(i, j);
    LayerGradFn fn = [&](std::size_t, const Matrix& offset) {
        Matrix g(1, 4);
        for (std::size_t i = 0; i < 4; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 4; ++j) acc += hess(i, j) * offset.data()[j];
            g.data()[i] = acc;
        }
        return g;
    };
    auto error_with = [&](std::size_t probes, std::uint64_t seed) {
        Rng rng(seed);
        const auto p = estimate_hutchinson_diag(0, 1, 4, fn, probes, 1e-3, absolute(0.0), rng);
        double worst = 0.0;
        for (std::size_t i = 0; i < 4; ++i)
            worst = std::max(worst, std::abs(p.d_entries.data()[i] - hess(i, i)));
        return worst;
    };
    double few = 0.0, many = 0.0;
    for (std::uint64_t s = 0; s < 6; ++s) {
        few += error_with(16, 100 + s);
        many += error_with(1024, 200 + s);
    }
    EXPECT_LT(many, few * 0.7);
}

TEST(Hutchinson, RealNetworkMatchesDenseDiagonal) {
    ArchSpec spec;
    spec.dims = {2, 3, 2};
    const BaseNetwork net = build_network(spec, 50);
    Rng rng(51);
    Batch batch;
    batch.inputs = Matrix::gaussian(6, 2, 1.0, rng);
    batch.targets = Matrix::gaussian(6, 2, 1.0, rng);

    const std::size_t li = 0;
    LayerGradFn fn = make_layer_grad_fn(net, {}, batch);
    Rng hrng(52);
    const auto p = estimate_hutchinson_diag(li, 3, 2, fn, 3000, 1e-4, absolute(0.0), hrng);

    // Dense diagonal via second differences of the loss itself.
    BaseNetwork probe = net;
    Matrix& w = probe.layers[li].weight;
    const double f0 = forward_loss(probe, {}, batch);
    const double h = 1e-4;
    double scale = 0.0;
    std::vector<double> fd(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double saved = w.data()[i];
        w.data()[i] = saved + h;
        const double fp = forward_loss(probe, {}, batch);
        w.data()[i] = saved - h;
        const double fm = forward_loss(probe, {}, batch);
        w.data()[i] = saved;
        fd[i] = (fp - 2.0 * f0 + fm) / (h * h);
        scale = std::max(scale, std::abs(fd[i]));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
        EXPECT_NEAR(p.d_entries.data()[i], std::max(fd[i], 0.0), 0.15 * scale) << "entry " << i;
    }
}

TEST(Hutchinson, ConstantLossGivesDampingFloor) {
    LayerGradFn fn = [](std::size_t, const Matrix&) { return Matrix(2, 2); };
    Rng rng(60);
    const auto abs_p = estimate_hutchinson_diag(0, 2, 2, fn, 8, 1e-3, absolute(0.02), rng);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(abs_p.d_entries.data()[i], 0.02);

    Rng rng2(61);
    const auto rel_p = estimate_hutchinson_diag(0, 2, 2, fn, 8, 1e-3, relative(0.01), rng2);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(rel_p.d_entries.data()[i], 0.01);
}

TEST(Hutchinson, NonFiniteGradientSuggestsSmallerStep) {
    LayerGradFn fn = [](std::size_t, const Matrix&) {
        Matrix g(1, 1);
        g(0, 0) = std::numeric_limits<double>::quiet_NaN();
        return g;
    };
    Rng rng(62);
    try {
        estimate_hutchinson_diag(0, 1, 1, fn, 2, 1e-3, absolute(0.0), rng);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("fd_step"), std::string::npos);
    }
}

TEST(Metric, KroneckerNormMatchesDenseOracle) {
    Rng rng(70);
    for (int trial = 0; trial < 10; ++trial) {
        const auto p = kfac_proxy(4, 3, rng);
        const Matrix a = Matrix::gaussian(4, 2, 1.0, rng);
        const Matrix b = Matrix::gaussian(3, 2, 1.0, rng);
        const Matrix x = matmul_nt(a, b);
        const double dense = oracles::kron_form_dense(p.l_factor, p.r_factor, x);
        const double lowrank = metric_norm_sq(p, a, b);
        const double full = metric_norm_sq_full(p, x);
        EXPECT_NEAR(lowrank, dense, 1e-10 * std::max(std::abs(dense), 1.0));
        EXPECT_NEAR(full, dense, 1e-10 * std::max(std::abs(dense), 1.0));
    }
}

TEST(Metric, DiagonalNormConsistentBetweenForms) {
    Rng rng(71);
    const auto p = diag_proxy(5, 4, rng);
    const Matrix a = Matrix::gaussian(5, 3, 1.0, rng);
    const Matrix b = Matrix::gaussian(4, 3, 1.0, rng);
    const Matrix x = matmul_nt(a, b);
    EXPECT_NEAR(metric_norm_sq(p, a, b), metric_norm_sq_full(p, x), 1e-12);
    // Rank zero is free.
    EXPECT_EQ(metric_norm_sq(p, Matrix(5, 0), Matrix(4, 0)), 0.0);
}

TEST(Metric, GradMatchesFiniteDifference) {
    Rng rng(72);
    for (ProxyKind kind : {ProxyKind::kfac, ProxyKind::diagonal}) {
        const auto p = kind == ProxyKind::kfac ? kfac_proxy(4, 3, rng) : diag_proxy(4, 3, rng);
        Matrix a = Matrix::gaussian(4, 2, 0.7, rng);
        Matrix b = Matrix::gaussian(3, 2, 0.7, rng);

        std::vector<double> theta(a.data().begin(), a.data().end());
        theta.insert(theta.end(), b.data().begin(), b.data().end());
        Matrix pa = a, pb = b;
        auto f = [&](const std::vector<double>& t) {
            for (std::size_t i = 0; i < pa.size(); ++i) pa.data()[i] = t[i];
            for (std::size_t i = 0; i < pb.size(); ++i) pb.data()[i] = t[pa.size() + i];
            return metric_norm_sq(p, pa, pb);
        };
        const std::vector<double> fd = oracles::fd_gradient(f, theta, 1e-6);

        Matrix da(4, 2), db(3, 2);
        metric_norm_grad(p, a, b, 1.0, da, db);
        std::vector<double> analytic(da.data().begin(), da.data().end());
        analytic.insert(analytic.end(), db.data().begin(), db.data().end());
        EXPECT_LT(oracles::gradient_rel_error(analytic, fd), 1e-6);
    }
}

TEST(Metric, GradScaleAccumulates) {
    Rng rng(73);
    const auto p = kfac_proxy(3, 3, rng);
    const Matrix a = Matrix::gaussian(3, 1, 1.0, rng);
    const Matrix b = Matrix::gaussian(3, 1, 1.0, rng);
    Matrix da(3, 1), db(3, 1);
    metric_norm_grad(p, a, b, 0.5, da, db);
    metric_norm_grad(p, a, b, 0.5, da, db);
    Matrix da_once(3, 1), db_once(3, 1);
    metric_norm_grad(p, a, b, 1.0, da_once, db_once);
    EXPECT_LT(max_abs_diff(da, da_once), 1e-12);
    EXPECT_LT(max_abs_diff(db, db_once), 1e-12);
}

TEST(Whiten, IdentityFactorsLeaveGradientUnchanged) {
    CurvatureProxy p;
    p.kind = ProxyKind::kfac;
    p.l_factor = SpdMatrix::identity(4);
    p.r_factor = SpdMatrix::identity(3);
    const WhitenCache cache = make_whiten_cache(p);
    Rng rng(80);
    const Matrix g = Matrix::gaussian(4, 3, 1.0, rng);
    EXPECT_LT(max_abs_diff(whiten_gradient(cache, g), g), 1e-12);
}

TEST(Whiten, FrobeniusNormEqualsInverseMetricNorm) {
    Rng rng(81);
    const auto p = kfac_proxy(4, 3, rng);
    const Matrix g = Matrix::gaussian(4, 3, 1.0, rng);
    const WhitenCache cache = make_whiten_cache(p);
    const Matrix wg = whiten_gradient(cache, g);

    // ||G~||_F^2 = vec(G)^T (R^{-1} (x) L^{-1}) vec(G), via dense inverses.
    const Matrix l_is = inv_sqrt_spd(p.l_factor, 0.0);
    const Matrix r_is = inv_sqrt_spd(p.r_factor, 0.0);
    const SpdMatrix l_inv(matmul(l_is, l_is));
    const SpdMatrix r_inv(matmul(r_is, r_is));
    const double dense = oracles::kron_form_dense(l_inv, r_inv, g);
    EXPECT_NEAR(frob_norm_sq(wg), dense, 1e-8 * std::max(dense, 1.0));
}

TEST(Whiten, DiagonalMatchesElementwise) {
    Rng rng(82);
    const auto p = diag_proxy(3, 3, rng);
    const WhitenCache cache = make_whiten_cache(p);
    const Matrix g = Matrix::gaussian(3, 3, 1.0, rng);
    const Matrix wg = whiten_gradient(cache, g);
    for (std::size_t i = 0; i < g.size(); ++i)
        EXPECT_NEAR(wg.data()[i], g.data()[i] / std::sqrt(p.d_entries.data()[i]), 1e-14);
}
