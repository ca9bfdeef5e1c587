// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ctrlora/checkpoint.hpp"
#include "ctrlora/config.hpp"

namespace fs = std::filesystem;
using namespace ctrlora;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitTolerance = 4;

// Flags shared by every subcommand. Values only take effect where they make
// sense (e.g. --jobs is read by diag-budget-curve alone).
struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    std::size_t log_every = 0;
    std::size_t jobs = 1;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* log_opt = nullptr;
    CLI::Option* out_opt = nullptr;
};

void add_common_flags(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* cfg = cmd->add_option("--config", args.config_path,
                                "Run configuration file (structured JSON; no environment "
                                "variables are consulted)");
    if (config_required) cfg->required();
    args.out_opt = cmd->add_option("--out-dir", args.out_dir,
                                   "Output directory for artifacts (overrides config)");
    args.seed_opt = cmd->add_option("--seed", args.seed, "Override the run seed");
    args.log_opt = cmd->add_option("--log-every", args.log_every,
                                   "Override metrics logging stride (steps)");
    cmd->add_option("--jobs", args.jobs, "Max concurrent cells (diag-budget-curve)")
        ->check(CLI::PositiveNumber);
}

RunConfig load_with_overrides(const CommonArgs& args) {
    RunConfig cfg = load_run_config(args.config_path);
    if (args.seed_opt && args.seed_opt->count() > 0) cfg.train.seed = args.seed;
    if (args.log_opt && args.log_opt->count() > 0) {
        if (args.log_every == 0) throw ConfigError("--log-every must be positive");
        cfg.train.log_every = args.log_every;
    }
    if (args.out_opt && args.out_opt->count() > 0) cfg.out_dir = args.out_dir;
    return cfg;
}

// Shortest round-trip decimal form, same as the JSON artifacts use, so CSV
// cells are byte-stable across runs.
std::string fmt_num(double x) {
    if (std::isnan(x)) return "nan";
    return jsonio::json(x).dump();
}

std::string policy_word(AllocationPolicy p) {
    return p == AllocationPolicy::raw_utility ? "raw-utility" : "utility-per-cost";
}

// --- metrics artifacts ------------------------------------------------------

// metrics.csv keeps wall_ms in the final column so the deterministic columns
// can be diffed byte-for-byte; metrics.jsonl mirrors the full records.
const char* kCsvHeader =
    "step,task_loss,penalty_value,total_loss,lambda,lr,grad_norm,eval_loss,eval_accuracy,"
    "wall_ms\n";

void append_metrics(const fs::path& dir, const std::vector<MetricsRecord>& recs, bool fresh) {
    const fs::path jpath = dir / "metrics.jsonl";
    const fs::path cpath = dir / "metrics.csv";
    const auto mode = fresh ? std::ios::trunc : std::ios::app;
    const bool need_header = fresh || !fs::exists(cpath);

    std::ofstream jl(jpath, mode);
    std::ofstream csv(cpath, mode);
    if (!jl || !csv) throw ConfigError("cannot write metrics files under " + dir.string());
    if (need_header) csv << kCsvHeader;
    for (const MetricsRecord& r : recs) {
        jl << jsonio::metrics_to_json(r).dump() << "\n";
        csv << r.step << ',' << fmt_num(r.task_loss) << ',' << fmt_num(r.penalty_value) << ','
            << fmt_num(r.total_loss) << ',' << fmt_num(r.lambda) << ',' << fmt_num(r.lr) << ','
            << fmt_num(r.grad_norm) << ',';
        if (r.has_eval) csv << fmt_num(r.eval_loss) << ',' << fmt_num(r.eval_accuracy);
        else csv << ',';
        csv << ',' << fmt_num(r.wall_ms) << "\n";
    }
}

void print_plan_report(std::ostream& os, const BaseNetwork& net, const BudgetPlan& plan,
                       AllocationPolicy policy) {
    std::map<std::size_t, double> utility;
    for (const CandidateDirection& c : plan.selection_log) utility[c.layer_id] += c.utility;
    os << "allocation policy: " << policy_word(policy) << "\n";
    for (std::size_t li : net.eligible_layers()) {
        const auto& layer = net.layers[li];
        const auto it = plan.ranks.find(li);
        const std::size_t r = it == plan.ranks.end() ? 0 : it->second;
        os << "  layer " << li << " (" << layer.d_out() << "x" << layer.d_in() << "): rank " << r
           << ", unit cost " << layer.d_in() + layer.d_out() << ", utility "
           << fmt_num(utility.count(li) ? utility[li] : 0.0) << "\n";
    }
    os << "budget: spent " << plan.spent << " / limit " << plan.budget_limit << " units\n";
}

std::vector<CurvatureProxy> estimate_for_allocation(const BaseNetwork& net, const Dataset& ds,
                                                    const TrainConfig& tc) {
    const std::vector<Batch> calib = calibration_batches(ds, tc.batch_size);
    if (tc.proxy_kind == ProxyKind::kfac) return estimate_kfac(net, {}, calib, tc.damping, 0);
    const Batch all = gather(ds, ds.calibration_idx);
    const Rng rng = Rng(tc.seed).fork(stream::kHutchinson).fork(0);
    return estimate_hutchinson(net, {}, all, tc.hutchinson_probes, tc.hutchinson_fd_step,
                               tc.damping, rng, 0);
}

// --- allocate ---------------------------------------------------------------

int cmd_allocate(const CommonArgs& args, const std::string& policy_flag) {
    RunConfig cfg = load_with_overrides(args);
    if (policy_flag == "raw-utility") cfg.train.policy = AllocationPolicy::raw_utility;
    else if (policy_flag == "utility-per-cost")
        cfg.train.policy = AllocationPolicy::utility_per_cost;
    else if (!policy_flag.empty())
        throw ConfigError("unknown policy '" + policy_flag + "'");

    const BaseNetwork net = build_network(cfg.arch, cfg.arch_seed);
    fs::create_directories(cfg.out_dir);

    BudgetPlan plan;
    if (cfg.train.budget_fraction == 0.0) {
        for (std::size_t li : net.eligible_layers()) plan.ranks[li] = 0;
        std::cerr << "warning: budget_fraction is 0; writing an all-zero plan\n";
    } else {
        const Dataset ds = build_dataset(cfg, net);
        const auto proxies = estimate_for_allocation(net, ds, cfg.train);
        const std::vector<Batch> calib = calibration_batches(ds, cfg.train.batch_size);
        Rng rng = Rng(cfg.train.seed).fork(stream::kSvd);
        plan = schedule(net, {}, calib, proxies, cfg.train.budget_fraction, cfg.train.k_max,
                        cfg.train.policy, cfg.train.svd, rng);
    }

    const fs::path plan_path = fs::path(cfg.out_dir) / "plan.json";
    save_plan(plan_path.string(), plan);
    print_plan_report(std::cout, net, plan, cfg.train.policy);
    std::cout << "plan written to " << plan_path.string() << "\n";
    return kExitOk;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
    std::string plan_path;
    std::string resume_path;
    std::string baseline;
    std::size_t stop_at = static_cast<std::size_t>(-1);
    std::size_t checkpoint_every = 50;
    std::int64_t steps_override = -1;
};

void write_summary(const fs::path& dir, const std::string& status, const TrainConfig& tc,
                   const TrainState& st, const EvalResult* final_eval, double last_train_loss,
                   double wall_ms, bool classification) {
    std::ostringstream os;
    os << "status: " << status << "\n";
    os << "steps: " << st.step << " of " << tc.steps << "\n";
    os << "seed: " << tc.seed << "\n";
    os << "ranks:";
    for (const auto& [li, r] : st.plan.ranks) os << ' ' << li << ':' << r;
    os << "\n";
    os << "budget: spent " << st.plan.spent << " / limit " << st.plan.budget_limit << " units\n";
    if (!std::isnan(last_train_loss))
        os << "final train loss: " << fmt_num(last_train_loss) << "\n";
    if (final_eval != nullptr) {
        os << "final eval loss: " << fmt_num(final_eval->loss) << "\n";
        if (classification)
            os << "final eval accuracy: " << fmt_num(final_eval->accuracy) << "\n";
    }
    os << "wall time ms: " << fmt_num(wall_ms) << "\n";

    std::ofstream out(dir / "summary.txt");
    out << os.str();
    std::cout << os.str();
}

int cmd_train(const CommonArgs& args, const TrainArgs& targs) {
    RunConfig cfg = load_with_overrides(args);
    if (targs.steps_override >= 0)
        cfg.train.steps = static_cast<std::size_t>(targs.steps_override);
    if (!targs.baseline.empty()) {
        if (targs.baseline != "lora")
            throw ConfigError("unknown baseline '" + targs.baseline + "' (expected: lora)");
        cfg.train.lambda_start = 0.0;
        cfg.train.lambda_end = 0.0;
        cfg.train.uniform_ranks = true;
    }
    validate(cfg.train);

    BudgetPlan forced;
    const BudgetPlan* forced_ptr = nullptr;
    if (!targs.plan_path.empty()) {
        forced = load_plan(targs.plan_path);
        forced_ptr = &forced;
    }

    BaseNetwork net;
    TrainState st;
    bool resuming = false;
    std::uint64_t arch_seed = cfg.arch_seed;
    if (!targs.resume_path.empty()) {
        Checkpoint ck = load_checkpoint(targs.resume_path);
        if (jsonio::arch_to_json(ck.arch) != jsonio::arch_to_json(cfg.arch))
            throw ConfigError("resume checkpoint architecture does not match config");
        net = network_from_checkpoint(ck);
        st = std::move(ck.state);
        arch_seed = ck.arch_seed;
        resuming = true;
    } else {
        net = build_network(cfg.arch, cfg.arch_seed);
    }
    // Targets always come from the config-defined base network, never from
    // checkpoint weights (identical for legitimate resumes; see cmd_eval).
    const Dataset ds = build_dataset(cfg, build_network(cfg.arch, cfg.arch_seed));

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    const std::size_t stop = std::min(targs.stop_at, cfg.train.steps);
    const auto t0 = std::chrono::steady_clock::now();
    const auto elapsed_ms = [&t0] {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    };
    bool fresh_files = !resuming;
    const auto save_ck = [&] {
        save_checkpoint((out / "checkpoint.json").string(),
                        make_checkpoint(net, arch_seed, st, cfg.train.seed));
    };

    try {
        if (!resuming) {
            // Materialize plan/adapters/proxies without stepping so a
            // last-good checkpoint exists before the first optimizer update.
            TrainResult r0 = train(net, ds, cfg.train, forced_ptr, nullptr, 0);
            st = std::move(r0.state);
            append_metrics(out, r0.metrics, fresh_files);
            fresh_files = false;
            save_ck();
        }
        save_plan((out / "plan.json").string(), st.plan);
        while (st.step < stop) {
            std::size_t target = stop;
            if (targs.checkpoint_every > 0)
                target = std::min(stop, (st.step / targs.checkpoint_every + 1) *
                                            targs.checkpoint_every);
            TrainResult r = train(net, ds, cfg.train, forced_ptr, &st, target);
            st = std::move(r.state);
            append_metrics(out, r.metrics, fresh_files);
            fresh_files = false;
            save_ck();
        }
    } catch (const DivergenceError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        std::cerr << "last-good checkpoint retained at " << (out / "checkpoint.json").string()
                  << " (step " << st.step << ")\n";
        std::ostringstream status;
        status << "diverged at step " << e.step;
        write_summary(out, status.str(), cfg.train, st, nullptr,
                      std::numeric_limits<double>::quiet_NaN(), elapsed_ms(),
                      net.classification());
        return kExitNumeric;
    }

    EvalResult final_eval{};
    const EvalResult* eval_ptr = nullptr;
    double last_train_loss = std::numeric_limits<double>::quiet_NaN();
    std::string status = "complete";
    if (st.step == cfg.train.steps) {
        const auto& idx = ds.eval_idx.empty() ? ds.train_idx : ds.eval_idx;
        final_eval = evaluate(net, st.adapters, ds, idx);
        eval_ptr = &final_eval;
        last_train_loss = evaluate(net, st.adapters, ds, ds.train_idx).loss;
    } else {
        status = "stopped early (resume with --resume to continue)";
    }
    write_summary(out, status, cfg.train, st, eval_ptr, last_train_loss, elapsed_ms(),
                  net.classification());
    return kExitOk;
}

// --- eval -------------------------------------------------------------------

int cmd_eval(const CommonArgs& args, const std::string& checkpoint_path) {
    RunConfig cfg = load_with_overrides(args);
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    if (jsonio::arch_to_json(ck.arch) != jsonio::arch_to_json(cfg.arch))
        throw ConfigError("checkpoint architecture does not match config");
    const BaseNetwork net = network_from_checkpoint(ck);
    // The task is defined by the config's base network; the checkpoint's
    // weights may differ (e.g. after merge) and must not shift the targets.
    const Dataset ds = build_dataset(cfg, build_network(cfg.arch, cfg.arch_seed));
    const auto& idx = ds.eval_idx.empty() ? ds.train_idx : ds.eval_idx;
    const EvalResult r = evaluate(net, ck.state.adapters, ds, idx);

    jsonio::json j;
    j["loss"] = r.loss;
    j["examples"] = idx.size();
    j["classification"] = r.classification;
    if (r.classification) j["accuracy"] = r.accuracy;
    fs::create_directories(cfg.out_dir);
    detail::write_text_file((fs::path(cfg.out_dir) / "eval.json").string(), j.dump(2) + "\n",
                            "eval report");
    std::cout << "eval loss: " << fmt_num(r.loss) << "\n";
    if (r.classification) std::cout << "eval accuracy: " << fmt_num(r.accuracy) << "\n";
    std::cout << "examples: " << idx.size() << "\n";
    return kExitOk;
}

// --- merge ------------------------------------------------------------------

int cmd_merge(const CommonArgs& args, const std::string& checkpoint_path, std::string output) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    const BaseNetwork net = network_from_checkpoint(ck);
    const BaseNetwork merged = merge_adapters(net, ck.state.adapters);

    TrainState stripped;
    stripped.step = ck.state.step;
    stripped.initial_loss = ck.state.initial_loss;
    stripped.plan = ck.state.plan;
    if (output.empty()) {
        const std::string dir = args.out_opt && args.out_opt->count() > 0 ? args.out_dir : "out";
        fs::create_directories(dir);
        output = (fs::path(dir) / "merged.json").string();
    }
    save_checkpoint(output, make_checkpoint(merged, ck.arch_seed, stripped, ck.run_seed));
    std::cout << "merged " << ck.state.adapters.size() << " adapter(s) into base weights\n";
    std::cout << "merged checkpoint written to " << output << "\n";
    return kExitOk;
}

// --- gradcheck --------------------------------------------------------------

struct CheckOutcome {
    std::string name;
    double max_rel = 0.0;
    double tol = 0.0;
    std::string worst;
    bool pass() const { return max_rel <= tol; }
};

// Max-norm relative disagreement, tracking which entry was worst.
class RelTracker {
  public:
    void add(double analytic, double fd, const std::string& where) {
        const double err = std::abs(analytic - fd);
        if (err > worst_abs_) {
            worst_abs_ = err;
            worst_where_ = where;
        }
        scale_ = std::max(scale_, std::abs(fd));
    }
    double value() const { return worst_abs_ / std::max(scale_, 1e-12); }
    const std::string& where() const { return worst_where_; }

  private:
    double worst_abs_ = 0.0;
    double scale_ = 1e-12;
    std::string worst_where_;
};

AdapterSet gradcheck_adapters(const BaseNetwork& net, std::uint64_t seed) {
    AdapterSet out;
    Rng base = Rng(seed).fork(stream::kAdapterInit);
    for (std::size_t li : net.eligible_layers()) {
        const auto& layer = net.layers[li];
        const std::size_t r = std::min<std::size_t>(2, std::min(layer.d_in(), layer.d_out()));
        Rng rng = base.fork(li);
        AdapterPair p;
        p.layer_id = li;
        p.a = Matrix::gaussian(layer.d_out(), r, 0.2, rng);
        p.b = Matrix::gaussian(layer.d_in(), r, 0.2, rng);
        out.push_back(std::move(p));
    }
    return out;
}

CheckOutcome check_adapter_gradients(const BaseNetwork& net, const AdapterSet& adapters,
                                     const Batch& batch, std::int64_t corrupt_layer) {
    BackwardResult res = backward(net, adapters, batch);
    if (corrupt_layer >= 0) {
        bool found = false;
        for (std::size_t i = 0; i < adapters.size(); ++i)
            if (adapters[i].layer_id == static_cast<std::size_t>(corrupt_layer)) {
                res.grads.adapter_grad_a[i](0, 0) += 1e-3;
                found = true;
            }
        if (!found)
            throw ConfigError("--corrupt-layer " + std::to_string(corrupt_layer) +
                              " is not adapter-eligible");
    }

    RelTracker tracker;
    const double h = 1e-5;
    AdapterSet probe = adapters;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        const std::string layer = "layer " + std::to_string(adapters[i].layer_id);
        for (int factor = 0; factor < 2; ++factor) {
            Matrix& m = factor == 0 ? probe[i].a : probe[i].b;
            const Matrix& analytic =
                factor == 0 ? res.grads.adapter_grad_a[i] : res.grads.adapter_grad_b[i];
            for (std::size_t k = 0; k < m.size(); ++k) {
                const double saved = m.data()[k];
                m.data()[k] = saved + h;
                const double up = forward_loss(net, probe, batch);
                m.data()[k] = saved - h;
                const double down = forward_loss(net, probe, batch);
                m.data()[k] = saved;
                tracker.add(analytic.data()[k], (up - down) / (2.0 * h),
                            layer + (factor == 0 ? " factor a" : " factor b"));
            }
        }
    }
    return {"adapter", tracker.value(), 1e-5, tracker.where()};
}

CheckOutcome check_penalty_gradients(const AdapterSet& adapters,
                                     const std::vector<CurvatureProxy>& proxies) {
    const PenaltyResult pen = penalty_value_and_grad(adapters, proxies);
    RelTracker tracker;
    const double h = 1e-5;
    AdapterSet probe = adapters;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        const std::string layer = "layer " + std::to_string(adapters[i].layer_id);
        for (int factor = 0; factor < 2; ++factor) {
            Matrix& m = factor == 0 ? probe[i].a : probe[i].b;
            const Matrix& analytic = factor == 0 ? pen.grad_a[i] : pen.grad_b[i];
            for (std::size_t k = 0; k < m.size(); ++k) {
                const double saved = m.data()[k];
                m.data()[k] = saved + h;
                const double up = penalty_value_and_grad(probe, proxies).value;
                m.data()[k] = saved - h;
                const double down = penalty_value_and_grad(probe, proxies).value;
                m.data()[k] = saved;
                tracker.add(analytic.data()[k], (up - down) / (2.0 * h),
                            layer + (factor == 0 ? " factor a" : " factor b"));
            }
        }
    }
    return {"penalty", tracker.value(), 1e-6, tracker.where()};
}

CheckOutcome check_hutchinson(std::uint64_t seed) {
    // Separable quadratic with Hessian diag(1..16) over a 4x4 weight; the
    // estimator must land within 5% per coordinate at 1000 probes.
    Matrix w0(4, 4);
    w0.fill(0.25);
    LayerGradFn fn = [&w0](std::size_t, const Matrix& offset) {
        Matrix g(4, 4);
        for (std::size_t i = 0; i < g.size(); ++i)
            g.data()[i] = static_cast<double>(i + 1) * (w0.data()[i] + offset.data()[i]);
        return g;
    };
    Damping none;
    none.mode = Damping::Mode::absolute;
    none.value = 0.0;
    Rng rng = Rng(seed).fork(stream::kHutchinson);
    const CurvatureProxy p = estimate_hutchinson_diag(0, 4, 4, fn, 1000, 1e-3, none, rng);

    CheckOutcome out{"hutchinson", 0.0, 5e-2, ""};
    for (std::size_t i = 0; i < 16; ++i) {
        const double truth = static_cast<double>(i + 1);
        const double rel = std::abs(p.d_entries.data()[i] - truth) / truth;
        if (rel > out.max_rel) {
            out.max_rel = rel;
            out.worst = "coordinate " + std::to_string(i);
        }
    }
    return out;
}

int cmd_gradcheck(const CommonArgs& args, const std::string& checks_csv,
                  std::int64_t corrupt_layer) {
    RunConfig cfg = load_with_overrides(args);
    const BaseNetwork net = build_network(cfg.arch, cfg.arch_seed);
    for (const auto& layer : net.layers)
        if (layer.d_in() > 64 || layer.d_out() > 64)
            throw ConfigError("gradcheck requires layer dims <= 64 per side");

    std::set<std::string> enabled;
    {
        std::stringstream ss(checks_csv);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item != "adapter" && item != "penalty" && item != "hutchinson")
                throw ConfigError("unknown check '" + item +
                                  "' (expected: adapter, penalty, hutchinson)");
            enabled.insert(item);
        }
        if (enabled.empty()) throw ConfigError("--checks selected no checks");
    }

    std::vector<CheckOutcome> outcomes;
    if (enabled.count("adapter") || enabled.count("penalty")) {
        const Dataset ds = build_dataset(cfg, net);
        const AdapterSet adapters = gradcheck_adapters(net, cfg.train.seed);
        if (enabled.count("adapter")) {
            const Batch batch =
                gather(ds, ds.calibration_idx, 0,
                       std::min<std::size_t>(cfg.train.batch_size, ds.calibration_idx.size()));
            outcomes.push_back(check_adapter_gradients(net, adapters, batch, corrupt_layer));
        }
        if (enabled.count("penalty")) {
            const auto calib = calibration_batches(ds, cfg.train.batch_size);
            const auto proxies = estimate_kfac(net, adapters, calib, cfg.train.damping, 0);
            outcomes.push_back(check_penalty_gradients(adapters, proxies));
        }
    }
    if (enabled.count("hutchinson")) outcomes.push_back(check_hutchinson(cfg.train.seed));

    bool all_pass = true;
    for (const CheckOutcome& c : outcomes) {
        std::cout << c.name << " gradients: max rel err " << fmt_num(c.max_rel) << " (tol "
                  << fmt_num(c.tol) << ")";
        if (!c.worst.empty()) std::cout << " worst at " << c.worst;
        std::cout << (c.pass() ? " -- PASS" : " -- FAIL") << "\n";
        if (!c.pass()) {
            std::cerr << "gradcheck: " << c.name << " tolerance breach at " << c.worst
                      << " (rel err " << fmt_num(c.max_rel) << ")\n";
            all_pass = false;
        }
    }
    return all_pass ? kExitOk : kExitTolerance;
}

// --- diag-budget-curve ------------------------------------------------------

struct CurveCell {
    double budget = 0.0;
    std::string method;
    std::uint64_t seed = 0;
};

struct CellResult {
    bool ok = false;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    std::string error;
};

CellResult run_curve_cell(RunConfig cfg, const CurveCell& cell) {
    cfg.train.budget_fraction = cell.budget;
    cfg.train.seed = cell.seed;
    if (cell.method == "uniform") {
        cfg.train.uniform_ranks = true;
        cfg.train.lambda_start = 0.0;
        cfg.train.lambda_end = 0.0;
    }
    CellResult out;
    try {
        const BaseNetwork net = build_network(cfg.arch, cfg.arch_seed);
        const Dataset ds = build_dataset(cfg, net);
        const TrainResult r = train(net, ds, cfg.train);
        out.ok = true;
        out.final_loss = r.final_eval.loss;
    } catch (const Error& e) {
        out.error = e.what();
    }
    return out;
}

int cmd_diag_budget_curve(const CommonArgs& args, const std::vector<double>& budgets,
                          std::size_t seeds) {
    const RunConfig cfg = load_with_overrides(args);
    if (budgets.empty()) throw ConfigError("--budgets must list at least one budget fraction");
    for (double b : budgets)
        if (!(b > 0.0) || b > 1.0)
            throw ConfigError("budget fractions must lie in (0, 1]");
    if (seeds == 0) throw ConfigError("--seeds must be positive");

    std::vector<CurveCell> cells;
    for (double b : budgets)
        for (const char* method : {"ctr", "uniform"})
            for (std::size_t s = 0; s < seeds; ++s)
                cells.push_back({b, method, cfg.train.seed + s});

    fs::create_directories(cfg.out_dir);
    const fs::path csv_path = fs::path(cfg.out_dir) / "budget_curve.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw ConfigError("cannot write " + csv_path.string());
    csv << "budget_fraction,method,final_loss,seed\n" << std::flush;

    // Independent cells run concurrently up to --jobs; rows are still written
    // in the fixed (budget, method, seed) order so the CSV is deterministic,
    // and flushed per row so partial results survive a failure.
    std::vector<std::future<CellResult>> pending;
    std::vector<CellResult> results(cells.size());
    const std::size_t jobs = std::max<std::size_t>(1, args.jobs);
    std::size_t next_write = 0;
    bool any_failed = false;
    const auto drain_one = [&] {
        results[next_write] = pending[next_write].get();
        const CurveCell& cell = cells[next_write];
        const CellResult& r = results[next_write];
        csv << fmt_num(cell.budget) << ',' << cell.method << ','
            << (r.ok ? fmt_num(r.final_loss) : "failed") << ',' << cell.seed << "\n"
            << std::flush;
        if (!r.ok) {
            any_failed = true;
            std::cerr << "cell failed (budget " << fmt_num(cell.budget) << ", " << cell.method
                      << ", seed " << cell.seed << "): " << r.error << "\n";
        }
        ++next_write;
    };
    for (std::size_t i = 0; i < cells.size(); ++i) {
        pending.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred,
                                     run_curve_cell, cfg, cells[i]));
        while (pending.size() - next_write >= jobs) drain_one();
    }
    while (next_write < cells.size()) drain_one();

    for (double b : budgets) {
        std::cout << "budget " << fmt_num(b) << ":";
        for (const char* method : {"ctr", "uniform"}) {
            double sum = 0.0;
            std::size_t n = 0;
            for (std::size_t i = 0; i < cells.size(); ++i)
                if (cells[i].budget == b && cells[i].method == method && results[i].ok) {
                    sum += results[i].final_loss;
                    ++n;
                }
            std::cout << ' ' << method << " mean ";
            std::cout << (n > 0 ? fmt_num(sum / static_cast<double>(n)) : "n/a");
            std::cout << " (" << n << '/' << seeds << " runs)";
            if (method == std::string("ctr")) std::cout << ',';
        }
        std::cout << "\n";
    }
    std::cout << "curve written to " << csv_path.string() << "\n";
    return any_failed ? kExitNumeric : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Curvature-aware rank scheduling and trust-region training for low-rank "
                 "adapters"};
    app.require_subcommand(1);

    CommonArgs alloc_args;
    std::string alloc_policy;
    CLI::App* alloc = app.add_subcommand("allocate", "Estimate curvature and write a rank plan");
    add_common_flags(alloc, alloc_args);
    alloc->add_option("--policy", alloc_policy,
                      "Selection policy: raw-utility or utility-per-cost (overrides config)");

    CommonArgs train_args;
    TrainArgs targs;
    CLI::App* tr = app.add_subcommand("train", "Run the training loop and write artifacts");
    add_common_flags(tr, train_args);
    tr->add_option("--plan", targs.plan_path, "Use a precomputed rank plan instead of scheduling");
    tr->add_option("--resume", targs.resume_path, "Resume from a checkpoint file");
    tr->add_option("--baseline", targs.baseline,
                   "Baseline preset: lora (uniform ranks, no trust-region penalty)");
    tr->add_option("--steps", targs.steps_override, "Override total step count (0 = eval only)")
        ->check(CLI::NonNegativeNumber);
    tr->add_option("--stop-at", targs.stop_at,
                   "Pause after this step and keep the checkpoint (for later --resume)");
    tr->add_option("--checkpoint-every", targs.checkpoint_every,
                   "Checkpoint stride in steps (0 = final checkpoint only)");

    CommonArgs eval_args;
    std::string eval_ck;
    CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the configured task");
    add_common_flags(ev, eval_args);
    ev->add_option("--checkpoint", eval_ck, "Checkpoint file to evaluate")->required();

    CommonArgs merge_args;
    std::string merge_ck, merge_out;
    CLI::App* mg = app.add_subcommand("merge", "Fold adapters into the base weights");
    add_common_flags(mg, merge_args, /*config_required=*/false);
    mg->add_option("--checkpoint", merge_ck, "Checkpoint file to merge")->required();
    mg->add_option("--output", merge_out, "Output path for the merged checkpoint");

    CommonArgs gc_args;
    std::string gc_checks = "adapter,penalty,hutchinson";
    std::int64_t gc_corrupt = -1;
    CLI::App* gc = app.add_subcommand("gradcheck", "Verify gradients against finite differences");
    add_common_flags(gc, gc_args);
    gc->add_option("--checks", gc_checks,
                   "Comma-separated subset of: adapter, penalty, hutchinson");
    gc->add_option("--corrupt-layer", gc_corrupt)->group("");  // fault-injection test hook

    CommonArgs curve_args;
    std::vector<double> curve_budgets;
    std::size_t curve_seeds = 3;
    CLI::App* dc = app.add_subcommand("diag-budget-curve",
                                      "Sweep budgets for scheduled vs uniform ranks; emit CSV");
    add_common_flags(dc, curve_args);
    dc->add_option("--budgets", curve_budgets, "Budget fractions to sweep")
        ->required()
        ->delimiter(',');
    dc->add_option("--seeds", curve_seeds, "Seeds per (budget, method) cell");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (alloc->parsed()) return cmd_allocate(alloc_args, alloc_policy);
        if (tr->parsed()) return cmd_train(train_args, targs);
        if (ev->parsed()) return cmd_eval(eval_args, eval_ck);
        if (mg->parsed()) return cmd_merge(merge_args, merge_ck, merge_out);
        if (gc->parsed()) return cmd_gradcheck(gc_args, gc_checks, gc_corrupt);
        if (dc->parsed()) return cmd_diag_budget_curve(curve_args, curve_budgets, curve_seeds);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DimensionError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
