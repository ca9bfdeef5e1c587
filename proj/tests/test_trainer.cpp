// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstddef>
#include <vector>

#include <gtest/gtest.h>

#include "ctrlora/data.hpp"
#include "ctrlora/trainer.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

namespace {

using namespace ctrlora;

ArchSpec mlp_spec(std::vector<std::size_t> dims) {
    ArchSpec spec;
    spec.kind = ArchKind::mlp;
    spec.dims = std::move(dims);
    return spec;
}

Dataset regression_task(const BaseNetwork& net, std::uint64_t seed, std::size_t samples,
                        std::size_t calib, double eval_fraction) {
    PlantedSpec spec;
    spec.samples = samples;
    spec.noise_std = 0.05;
    spec.seed = seed;
    spec.layers[net.eligible_layers().back()] = {2, 1.5};
    return split(gen_planted_task(net, spec), calib, eval_fraction, seed);
}

CurvatureProxy identity_kfac(std::size_t layer_id, std::size_t d_out, std::size_t d_in) {
    CurvatureProxy p;
    p.layer_id = layer_id;
    p.kind = ProxyKind::kfac;
    p.l_factor = SpdMatrix(Matrix::identity(d_out));
    p.r_factor = SpdMatrix(Matrix::identity(d_in));
    return p;
}

TEST(LambdaSchedules, EndpointsExactAndMidpointsMatch) {
    TrainConfig c;
    c.steps = 1000;
    c.lambda_start = 0.1;
    c.lambda_end = 0.0;

    EXPECT_EQ(lambda_at(c, 0), 0.1);
    EXPECT_EQ(lambda_at(c, 1000), 0.0);
    EXPECT_NEAR(lambda_at(c, 500), 0.05, 1e-15);

    c.lambda_schedule = LambdaSchedule::cosine;
    EXPECT_EQ(lambda_at(c, 0), 0.1);
    EXPECT_EQ(lambda_at(c, 1000), 0.0);
    EXPECT_NEAR(lambda_at(c, 500), 0.05, 1e-12);
    EXPECT_NEAR(lambda_at(c, 250), 0.05 * (1.0 + std::cos(0.25 * 3.14159265358979323846)),
                1e-12);
    // Cosine starts flatter than linear.
    EXPECT_GT(lambda_at(c, 100), 0.09);
}

TEST(LambdaSchedules, ValidateRejectsBadConfigs) {
    TrainConfig c;
    validate(c);  // defaults are fine

    TrainConfig bad = c;
    bad.lambda_start = 0.0;
    bad.lambda_end = 0.1;
    EXPECT_THROW(validate(bad), ConfigError);

    bad = c;
    bad.lambda_end = -0.1;
    bad.lambda_start = 0.2;
    EXPECT_THROW(validate(bad), ConfigError);

    bad = c;
    bad.warmup_fraction = 0.0;
    EXPECT_THROW(validate(bad), ConfigError);
    bad.warmup_fraction = 1.0;
    EXPECT_THROW(validate(bad), ConfigError);

    bad = c;
    bad.refresh_interval = 0;
    EXPECT_THROW(validate(bad), ConfigError);

    bad = c;
    bad.budget_fraction = 0.0;
    EXPECT_THROW(validate(bad), ConfigError);

    bad = c;
    bad.batch_size = 0;
    EXPECT_THROW(validate(bad), ConfigError);
}

TEST(LearningRate, WarmupThenCosine) {
    TrainConfig c;
    c.steps = 1000;
    c.peak_lr = 2e-4;
    c.warmup_fraction = 0.03;

    EXPECT_EQ(lr_at(c, 0), 0.0);
    EXPECT_NEAR(lr_at(c, 15), 1e-4, 1e-12);
    EXPECT_NEAR(lr_at(c, 30), 2e-4, 1e-12);
    EXPECT_EQ(lr_at(c, 1000), 0.0);

    double prev = lr_at(c, 30);
    for (std::size_t s = 31; s <= 1000; s += 7) {
        const double cur = lr_at(c, s);
        EXPECT_LE(cur, prev + 1e-18);
        EXPECT_LE(cur, c.peak_lr + 1e-18);
        prev = cur;
    }
}

TEST(Penalty, ZeroBFactorGivesZeroEverything) {
    const BaseNetwork net = build_network(mlp_spec({5, 7, 4}), 3);
    BudgetPlan plan;
    plan.ranks[0] = 2;
    plan.ranks[1] = 1;
    const AdapterSet adapters = init_adapters(net, plan, 0.02, 9);  // B starts at zero

    std::vector<CurvatureProxy> proxies;
    Rng rng(4);
    for (std::size_t li : net.eligible_layers()) {
        CurvatureProxy p = identity_kfac(li, net.layers[li].weight.rows(),
                                         net.layers[li].weight.cols());
        p.l_factor = testutil::random_spd(net.layers[li].weight.rows(), rng);
        p.r_factor = testutil::random_spd(net.layers[li].weight.cols(), rng);
        proxies.push_back(std::move(p));
    }

    const PenaltyResult pen = penalty_value_and_grad(adapters, proxies);
    EXPECT_EQ(pen.value, 0.0);
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        for (double g : pen.grad_a[i].data()) EXPECT_EQ(g, 0.0);
        for (double g : pen.grad_b[i].data()) EXPECT_EQ(g, 0.0);
    }
}

TEST(Penalty, RankOneIdentityMetricClosedForm) {
    Rng rng(11);
    AdapterSet adapters(1);
    adapters[0].layer_id = 0;
    adapters[0].a = Matrix::gaussian(6, 1, 1.0, rng);
    adapters[0].b = Matrix::gaussian(4, 1, 1.0, rng);
    const std::vector<CurvatureProxy> proxies = {identity_kfac(0, 6, 4)};

    const PenaltyResult pen = penalty_value_and_grad(adapters, proxies);
    const double na = frob_norm_sq(adapters[0].a);
    const double nb = frob_norm_sq(adapters[0].b);
    EXPECT_NEAR(pen.value, na * nb, 1e-12 * na * nb);
    for (std::size_t i = 0; i < 6; ++i)
        EXPECT_NEAR(pen.grad_a[0](i, 0), 2.0 * nb * adapters[0].a(i, 0), 1e-12);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_NEAR(pen.grad_b[0](i, 0), 2.0 * na * adapters[0].b(i, 0), 1e-12);
}

TEST(Penalty, GradientsMatchFiniteDifferences) {
    const BaseNetwork net = build_network(mlp_spec({5, 7, 4}), 3);
    Rng rng(21);
    AdapterSet adapters;
    for (std::size_t li : net.eligible_layers()) {
        AdapterPair p;
        p.layer_id = li;
        p.a = Matrix::gaussian(net.layers[li].weight.rows(), 2, 0.5, rng);
        p.b = Matrix::gaussian(net.layers[li].weight.cols(), 2, 0.5, rng);
        adapters.push_back(std::move(p));
    }
    std::vector<CurvatureProxy> proxies;
    for (std::size_t li : net.eligible_layers()) {
        CurvatureProxy p;
        p.layer_id = li;
        p.kind = ProxyKind::kfac;
        p.l_factor = testutil::random_spd(net.layers[li].weight.rows(), rng);
        p.r_factor = testutil::random_spd(net.layers[li].weight.cols(), rng);
        proxies.push_back(std::move(p));
    }

    const PenaltyResult pen = penalty_value_and_grad(adapters, proxies);
    const double h = 1e-5;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        for (Matrix AdapterPair::*field : {&AdapterPair::a, &AdapterPair::b}) {
            const Matrix& analytic =
                field == &AdapterPair::a ? pen.grad_a[i] : pen.grad_b[i];
            Matrix& target = adapters[i].*field;
            for (std::size_t k = 0; k < target.size(); ++k) {
                const double saved = target.data()[k];
                target.data()[k] = saved + h;
                const double up = penalty_value_and_grad(adapters, proxies).value;
                target.data()[k] = saved - h;
                const double dn = penalty_value_and_grad(adapters, proxies).value;
                target.data()[k] = saved;
                const double fd = (up - dn) / (2.0 * h);
                EXPECT_NEAR(analytic.data()[k], fd,
                            1e-6 * std::max(1.0, std::abs(fd)));
            }
        }
    }
}

TEST(Penalty, MissingProxyThrows) {
    AdapterSet adapters(1);
    adapters[0].layer_id = 3;
    adapters[0].a = Matrix(4, 1);
    adapters[0].b = Matrix(5, 1);
    const std::vector<CurvatureProxy> proxies = {identity_kfac(0, 4, 5)};
    EXPECT_THROW(penalty_value_and_grad(adapters, proxies), DimensionError);
}

AdapterSet scalar_adapters(double a0, double b0) {
    AdapterSet s(1);
    s[0].layer_id = 0;
    s[0].a = Matrix(1, 1);
    s[0].b = Matrix(1, 1);
    s[0].a(0, 0) = a0;
    s[0].b(0, 0) = b0;
    return s;
}

TEST(Adamw, ZeroGradZeroDecayIsNoOp) {
    AdapterSet adapters = scalar_adapters(0.7, -0.3);
    OptimizerState opt = init_optimizer(adapters);
    const std::vector<Matrix> zero = {Matrix(1, 1)};
    adamw_step(opt, adapters, zero, zero, 1e-3, 0.0);
    EXPECT_EQ(adapters[0].a(0, 0), 0.7);
    EXPECT_EQ(adapters[0].b(0, 0), -0.3);
    EXPECT_EQ(opt.t, 1u);
}

TEST(Adamw, ZeroGradWithDecayShrinksMultiplicatively) {
    AdapterSet adapters = scalar_adapters(0.8, -0.5);
    OptimizerState opt = init_optimizer(adapters);
    const std::vector<Matrix> zero = {Matrix(1, 1)};
    adamw_step(opt, adapters, zero, zero, 0.1, 0.01);
    EXPECT_DOUBLE_EQ(adapters[0].a(0, 0), 0.8 * (1.0 - 0.1 * 0.01));
    EXPECT_DOUBLE_EQ(adapters[0].b(0, 0), -0.5 * (1.0 - 0.1 * 0.01));
}

// Scalar AdamW recurrence written out long-hand, two steps.
TEST(Adamw, MatchesScalarRecurrence) {
    AdapterSet adapters = scalar_adapters(0.25, 0.0);
    OptimizerState opt = init_optimizer(adapters);
    const double lr = 0.05, wd = 0.02, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double gs[2] = {0.3, -0.2};

    double w = 0.25, m = 0.0, v = 0.0;
    for (int t = 1; t <= 2; ++t) {
        const double g = gs[t - 1];
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mhat = m / (1 - std::pow(b1, t));
        const double vhat = v / (1 - std::pow(b2, t));
        w -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w);

        std::vector<Matrix> ga = {Matrix(1, 1)}, gb = {Matrix(1, 1)};
        ga[0](0, 0) = g;
        adamw_step(opt, adapters, ga, gb, lr, wd);
    }
    EXPECT_DOUBLE_EQ(adapters[0].a(0, 0), w);
    EXPECT_EQ(opt.t, 2u);
}

TEST(Adamw, NonFiniteGradientThrows) {
    AdapterSet adapters = scalar_adapters(0.1, 0.1);
    OptimizerState opt = init_optimizer(adapters);
    std::vector<Matrix> ga = {Matrix(1, 1)}, gb = {Matrix(1, 1)};
    ga[0](0, 0) = std::nan("");
    EXPECT_THROW(adamw_step(opt, adapters, ga, gb, 1e-3, 0.0), NumericError);
    EXPECT_EQ(opt.t, 0u);  // aborted before mutating state
}

TEST(Adamw, MisalignedGradientsThrow) {
    AdapterSet adapters = scalar_adapters(0.1, 0.1);
    OptimizerState opt = init_optimizer(adapters);
    const std::vector<Matrix> none;
    EXPECT_THROW(adamw_step(opt, adapters, none, none, 1e-3, 0.0), DimensionError);
}

TEST(Evaluate, TeacherScoresPerfectAccuracy) {
    ArchSpec arch = mlp_spec({6, 10, 4});
    arch.loss = LossKind::cross_entropy;
    const BaseNetwork net = build_network(arch, 31);
    PlantedSpec spec;
    spec.samples = 400;
    spec.seed = 5;
    spec.layers[1] = {2, 2.0};
    const Dataset ds = gen_planted_task(net, spec);
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

    const BaseNetwork teacher = merge_adapters(net, planted_adapters(net, spec));
    const EvalResult res = evaluate(teacher, {}, ds, all, 128);
    EXPECT_TRUE(res.classification);
    EXPECT_EQ(res.accuracy, 1.0);
    EXPECT_GT(res.loss, 0.0);
    EXPECT_TRUE(std::isfinite(res.loss));
}

TEST(Evaluate, IndependentPredictorNearChanceOnBalancedLabels) {
    ArchSpec arch = mlp_spec({8, 12, 4});
    arch.loss = LossKind::cross_entropy;
    const BaseNetwork net = build_network(arch, 77);

    const std::size_t n = 2000;
    Dataset ds;
    ds.task_kind = LossKind::cross_entropy;
    Rng rng(123);
    ds.inputs = Matrix::gaussian(n, 8, 1.0, rng);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % 4);
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;

    const EvalResult res = evaluate(net, {}, ds, all, 256);
    const double sigma = std::sqrt(0.25 * 0.75 / static_cast<double>(n));
    EXPECT_NEAR(res.accuracy, 0.25, 3.0 * sigma);
}

TEST(Evaluate, MergedMatchesAdapterApplied) {
    const BaseNetwork net = build_network(mlp_spec({6, 9, 5}), 13);
    Rng rng(19);
    AdapterSet adapters;
    for (std::size_t li : net.eligible_layers()) {
        AdapterPair p;
        p.layer_id = li;
        p.a = Matrix::gaussian(net.layers[li].weight.rows(), 2, 0.3, rng);
        p.b = Matrix::gaussian(net.layers[li].weight.cols(), 2, 0.3, rng);
        adapters.push_back(std::move(p));
    }
    const Dataset ds = regression_task(net, 41, 300, 32, 0.2);

    const EvalResult via_adapters = evaluate(net, adapters, ds, ds.eval_idx);
    const EvalResult via_merge = evaluate(merge_adapters(net, adapters), {}, ds, ds.eval_idx);
    EXPECT_NEAR(via_adapters.loss, via_merge.loss, 1e-10 * std::abs(via_merge.loss));
    EXPECT_EQ(via_adapters.accuracy, via_merge.accuracy);
}

// Independent plain-LoRA loop: task gradients only, hand-rolled AdamW.
AdapterSet reference_lora(const BaseNetwork& net, const Dataset& ds, const TrainConfig& cfg,
                          const BudgetPlan& plan) {
    AdapterSet adapters = init_adapters(net, plan, cfg.init_sigma, cfg.seed);
    std::vector<Matrix> m_a, v_a, m_b, v_b;
    for (const auto& p : adapters) {
        m_a.emplace_back(p.a.rows(), p.a.cols());
        v_a.emplace_back(p.a.rows(), p.a.cols());
        m_b.emplace_back(p.b.rows(), p.b.cols());
        v_b.emplace_back(p.b.rows(), p.b.cols());
    }
    const std::size_t bpe = ds.train_idx.size() / cfg.batch_size;
    BackwardOptions bw;
    bw.full_matrix = false;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto order = epoch_order(ds, cfg.seed, step / bpe);
        const Batch batch = gather(ds, order, (step % bpe) * cfg.batch_size, cfg.batch_size);
        BackwardResult back = backward(net, adapters, batch, bw);
        const double lr = lr_at(cfg, step);
        const double t = static_cast<double>(step + 1);
        const double bc1 = 1.0 - std::pow(0.9, t), bc2 = 1.0 - std::pow(0.999, t);
        for (std::size_t i = 0; i < adapters.size(); ++i) {
            auto update = [&](Matrix& w, const Matrix& g, Matrix& m, Matrix& v) {
                for (std::size_t k = 0; k < w.size(); ++k) {
                    m.data()[k] = 0.9 * m.data()[k] + 0.1 * g.data()[k];
                    v.data()[k] = 0.999 * v.data()[k] + 0.001 * g.data()[k] * g.data()[k];
                    w.data()[k] -= lr * ((m.data()[k] / bc1) /
                                             (std::sqrt(v.data()[k] / bc2) + 1e-8) +
                                         cfg.weight_decay * w.data()[k]);
                }
            };
            update(adapters[i].a, back.grads.adapter_grad_a[i], m_a[i], v_a[i]);
            update(adapters[i].b, back.grads.adapter_grad_b[i], m_b[i], v_b[i]);
        }
    }
    return adapters;
}

TEST(Train, LambdaZeroUniformPlanEqualsPlainLora) {
    const BaseNetwork net = build_network(mlp_spec({6, 10, 4}), 2);
    const Dataset ds = regression_task(net, 17, 400, 64, 0.2);

    TrainConfig cfg;
    cfg.steps = 30;
    cfg.batch_size = 16;
    cfg.lambda_start = cfg.lambda_end = 0.0;
    cfg.uniform_ranks = true;
    cfg.budget_fraction = 60.0 / static_cast<double>(net.param_count());
    cfg.k_max = 2;
    cfg.seed = 33;
    cfg.log_every = 5;

    const TrainResult run = train(net, ds, cfg);
    const BudgetPlan plan = uniform_plan(net, cfg.budget_fraction, cfg.k_max);
    for (const auto& [li, r] : plan.ranks) EXPECT_EQ(run.state.plan.rank_for(li), r);
    const AdapterSet ref = reference_lora(net, ds, cfg, plan);

    ASSERT_EQ(run.state.adapters.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
        for (std::size_t k = 0; k < ref[i].a.size(); ++k)
            EXPECT_NEAR(run.state.adapters[i].a.data()[k], ref[i].a.data()[k], 1e-10);
        for (std::size_t k = 0; k < ref[i].b.size(); ++k)
            EXPECT_NEAR(run.state.adapters[i].b.data()[k], ref[i].b.data()[k], 1e-10);
    }
}

TEST(Train, ObjectiveDecompositionHoldsAtEveryLoggedStep) {
    const BaseNetwork net = build_network(mlp_spec({6, 10, 4}), 2);
    const Dataset ds = regression_task(net, 17, 400, 64, 0.2);

    TrainConfig cfg;
    cfg.steps = 40;
    cfg.batch_size = 16;
    cfg.lambda_start = 0.1;
    cfg.lambda_end = 0.0;
    cfg.refresh_interval = 10;
    cfg.budget_fraction = 0.3;
    cfg.seed = 7;
    cfg.log_every = 4;

    const TrainResult run = train(net, ds, cfg);
    ASSERT_FALSE(run.metrics.empty());
    for (const auto& rec : run.metrics) {
        EXPECT_NEAR(rec.total_loss, rec.task_loss + rec.lambda * rec.penalty_value, 1e-10);
        EXPECT_EQ(rec.lambda, lambda_at(cfg, rec.step));
        EXPECT_EQ(rec.lr, lr_at(cfg, rec.step));
        EXPECT_TRUE(std::isfinite(rec.task_loss));
        EXPECT_TRUE(std::isfinite(rec.penalty_value));
        EXPECT_TRUE(std::isfinite(rec.grad_norm));
        for (const auto& [li, v] : rec.layer_penalty) EXPECT_GE(v, 0.0);
    }
    // In-loop records at multiples of log_every, plus last step and terminal.
    EXPECT_EQ(run.metrics.front().step, 0u);
    EXPECT_EQ(run.metrics.back().step, 40u);
    EXPECT_TRUE(run.metrics.back().has_eval);
}

TEST(Train, BitIdenticalMetricsAcrossRuns) {
    const BaseNetwork net = build_network(mlp_spec({6, 10, 4}), 4);
    const Dataset ds = regression_task(net, 23, 300, 48, 0.2);

    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch_size = 16;
    cfg.budget_fraction = 0.2;
    cfg.refresh_interval = 7;
    cfg.seed = 11;
    cfg.log_every = 3;
    cfg.eval_every = 10;

    const TrainResult a = train(net, ds, cfg);
    const TrainResult b = train(net, ds, cfg);
    ASSERT_EQ(a.metrics.size(), b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
        EXPECT_EQ(a.metrics[i].step, b.metrics[i].step);
        EXPECT_EQ(a.metrics[i].task_loss, b.metrics[i].task_loss);
        EXPECT_EQ(a.metrics[i].penalty_value, b.metrics[i].penalty_value);
        EXPECT_EQ(a.metrics[i].total_loss, b.metrics[i].total_loss);
        EXPECT_EQ(a.metrics[i].grad_norm, b.metrics[i].grad_norm);
        EXPECT_EQ(a.metrics[i].eval_loss, b.metrics[i].eval_loss);
        EXPECT_EQ(a.metrics[i].eval_accuracy, b.metrics[i].eval_accuracy);
    }
    for (std::size_t i = 0; i < a.state.adapters.size(); ++i) {
        EXPECT_EQ(a.state.adapters[i].a.data(), b.state.adapters[i].a.data());
        EXPECT_EQ(a.state.adapters[i].b.data(), b.state.adapters[i].b.data());
    }
}

TEST(Train, FrozenBackboneIsBitIdentical) {
    const BaseNetwork net = build_network(mlp_spec({6, 10, 4}), 4);
    const Dataset ds = regression_task(net, 23, 300, 48, 0.2);
    std::vector<std::vector<double>> before;
    for (const auto& layer : net.layers) before.push_back(layer.weight.data());

    TrainConfig cfg;
    cfg.steps = 15;
    cfg.batch_size = 16;
    cfg.budget_fraction = 0.2;
    cfg.seed = 11;

    train(net, ds, cfg);
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        EXPECT_EQ(net.layers[i].weight.data(), before[i]);
}

TEST(Train, DivergenceGuardTrips) {
    const BaseNetwork net = build_network(mlp_spec({6, 10, 4}), 2);
    const Dataset ds = regression_task(net, 17, 400, 64, 0.2);

    TrainConfig cfg;
    cfg.steps = 100;
    cfg.batch_size = 16;
    cfg.peak_lr = 50.0;
    cfg.warmup_fraction = 0.01;
    cfg.lambda_start = cfg.lambda_end = 0.0;
    cfg.uniform_ranks = true;
    cfg.budget_fraction = 0.3;
    cfg.seed = 5;

    try {
        train(net, ds, cfg);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_GT(e.loss, 10.0 * e.initial_loss);
        EXPECT_GT(e.step, 0u);
        EXPECT_LT(e.step, 100u);
    }
}

TEST(Train, RefreshReestimatesProxiesOnly) {
    const BaseNetwork net = build_network(mlp_spec({6, 10, 4}), 8);
    const Dataset ds = regression_task(net, 29, 300, 48, 0.2);

    TrainConfig cfg;
    cfg.steps = 12;
    cfg.batch_size = 16;
    cfg.lambda_start = cfg.lambda_end = 0.1;  // penalized throughout
    cfg.refresh_interval = 5;
    cfg.budget_fraction = 0.25;
    cfg.seed = 3;

    TrainConfig no_refresh = cfg;
    no_refresh.refresh_interval = 1000;

    const TrainResult with = train(net, ds, cfg);
    const TrainResult without = train(net, ds, no_refresh);

    // Ranks come from the pre-loop schedule and must agree.
    EXPECT_EQ(with.state.plan.ranks, without.state.plan.ranks);
    EXPECT_EQ(with.state.opt.t, 12u);
    for (const auto& p : with.state.proxies) EXPECT_EQ(p.step_estimated, 10u);
    for (const auto& p : without.state.proxies) EXPECT_EQ(p.step_estimated, 0u);

    // The refreshed metric must actually steer the trajectory.
    bool differs = false;
    for (std::size_t i = 0; i < with.state.adapters.size() && !differs; ++i)
        differs = with.state.adapters[i].a.data() != without.state.adapters[i].a.data();
    EXPECT_TRUE(differs);
}

TEST(Train, PauseAndResumeMatchesStraightRun) {
    const BaseNetwork net = build_network(mlp_spec({6, 10, 4}), 6);
    const Dataset ds = regression_task(net, 37, 300, 48, 0.2);

    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch_size = 16;
    cfg.lambda_start = 0.1;
    cfg.lambda_end = 0.0;
    cfg.refresh_interval = 6;
    cfg.budget_fraction = 0.25;
    cfg.seed = 9;
    cfg.log_every = 5;

    const TrainResult straight = train(net, ds, cfg);
    const TrainResult first = train(net, ds, cfg, nullptr, nullptr, 10);
    EXPECT_EQ(first.state.step, 10u);
    EXPECT_TRUE(first.metrics.empty() || first.metrics.back().step < 10u);
    const TrainResult second = train(net, ds, cfg, nullptr, &first.state);

    EXPECT_EQ(second.state.step, 20u);
    EXPECT_EQ(second.state.opt.t, 20u);
    for (std::size_t i = 0; i < straight.state.adapters.size(); ++i) {
        EXPECT_EQ(straight.state.adapters[i].a.data(), second.state.adapters[i].a.data());
        EXPECT_EQ(straight.state.adapters[i].b.data(), second.state.adapters[i].b.data());
    }

    // Concatenated metrics match the straight run field-for-field.
    std::vector<MetricsRecord> combined = first.metrics;
    combined.insert(combined.end(), second.metrics.begin(), second.metrics.end());
    ASSERT_EQ(combined.size(), straight.metrics.size());
    for (std::size_t i = 0; i < combined.size(); ++i) {
        EXPECT_EQ(combined[i].step, straight.metrics[i].step);
        EXPECT_EQ(combined[i].task_loss, straight.metrics[i].task_loss);
        EXPECT_EQ(combined[i].penalty_value, straight.metrics[i].penalty_value);
        EXPECT_EQ(combined[i].grad_norm, straight.metrics[i].grad_norm);
    }
}

TEST(Train, StepsZeroEmitsOnlyTerminalRecord) {
    const BaseNetwork net = build_network(mlp_spec({6, 10, 4}), 6);
    const Dataset ds = regression_task(net, 37, 300, 48, 0.2);

    TrainConfig cfg;
    cfg.steps = 0;
    cfg.batch_size = 16;
    cfg.budget_fraction = 0.25;
    cfg.seed = 9;

    const TrainResult run = train(net, ds, cfg);
    ASSERT_EQ(run.metrics.size(), 1u);
    EXPECT_EQ(run.metrics[0].step, 0u);
    EXPECT_TRUE(run.metrics[0].has_eval);
    EXPECT_TRUE(std::isfinite(run.final_eval.loss));
    EXPECT_EQ(run.state.opt.t, 0u);
}

TEST(Train, ForcedPlanOverridesScheduling) {
    const BaseNetwork net = build_network(mlp_spec({6, 10, 4}), 6);
    const Dataset ds = regression_task(net, 37, 300, 48, 0.2);

    BudgetPlan plan;
    plan.ranks[0] = 3;
    plan.ranks[1] = 1;
    TrainConfig cfg;
    cfg.steps = 5;
    cfg.batch_size = 16;
    cfg.budget_fraction = 0.25;
    cfg.seed = 9;

    const TrainResult run = train(net, ds, cfg, &plan);
    EXPECT_EQ(run.state.plan.ranks, plan.ranks);
    for (const auto& p : run.state.adapters)
        EXPECT_EQ(p.rank(), plan.ranks.at(p.layer_id));
}

TEST(Train, HutchinsonProxyPathCompletes) {
    const BaseNetwork net = build_network(mlp_spec({5, 8, 3}), 14);
    const Dataset ds = regression_task(net, 43, 200, 32, 0.2);

    TrainConfig cfg;
    cfg.steps = 6;
    cfg.batch_size = 16;
    cfg.proxy_kind = ProxyKind::diagonal;
    cfg.hutchinson_probes = 4;
    cfg.refresh_interval = 3;
    cfg.budget_fraction = 0.25;
    cfg.seed = 2;
    cfg.log_every = 2;

    const TrainResult run = train(net, ds, cfg);
    for (const auto& p : run.state.proxies) {
        EXPECT_EQ(p.kind, ProxyKind::diagonal);
        EXPECT_EQ(p.estimator, "hutchinson");
    }
    for (const auto& rec : run.metrics) EXPECT_TRUE(std::isfinite(rec.total_loss));
}

// Planted low-rank regression: curvature-aware allocation concentrates rank
// on the perturbed output layer and beats the budget-matched uniform plan.
TEST(Train, PlantedTaskBeatsUniformBaseline) {
    double ctr_sum = 0.0, uniform_sum = 0.0;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const BaseNetwork net = build_network(mlp_spec({12, 24, 24, 6}), seed);
        PlantedSpec spec;
        spec.samples = 512;
        spec.noise_std = 0.0;
        spec.seed = seed + 90;
        spec.layers[2] = {3, 2.0};
        const Dataset ds = split(gen_planted_task(net, spec), 128, 0.25, seed);

        TrainConfig cfg;
        cfg.steps = 400;
        cfg.batch_size = 32;
        cfg.peak_lr = 2e-2;
        cfg.budget_fraction = 114.0 / static_cast<double>(net.param_count());
        cfg.k_max = 4;
        cfg.seed = seed;
        cfg.log_every = 100;

        TrainConfig baseline = cfg;
        baseline.lambda_start = baseline.lambda_end = 0.0;
        baseline.uniform_ranks = true;

        const TrainResult ctr = train(net, ds, cfg);
        const TrainResult plain = train(net, ds, baseline);
        ctr_sum += ctr.final_eval.loss;
        uniform_sum += plain.final_eval.loss;
    }
    EXPECT_LT(ctr_sum / 3.0, uniform_sum / 3.0);
}

}  // namespace
