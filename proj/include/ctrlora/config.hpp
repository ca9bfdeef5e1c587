// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlora/checkpoint.hpp"
#include "ctrlora/data.hpp"
#include "ctrlora/errors.hpp"
#include "ctrlora/trainer.hpp"

namespace ctrlora {

/// Complete declarative run description: architecture, synthetic task,
/// training hyperparameters, output location. Parsed strictly — unknown keys
/// are rejected so typos fail before any compute.
struct RunConfig {
    ArchSpec arch;
    std::uint64_t arch_seed = 1;
    PlantedSpec task;
    double eval_fraction = 0.2;
    TrainConfig train;
    std::string out_dir = "out";
};

namespace detail {

using jsonio::json;

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                                const char* context) {
    if (!j.is_object()) throw ConfigError(std::string(context) + ": expected an object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* key : allowed)
            if (item.key() == key) {
                known = true;
                break;
            }
        if (!known)
            throw ConfigError(std::string(context) + ": unknown key '" + item.key() + "'");
    }
}

inline std::size_t get_count(const json& j, const char* key, std::size_t fallback,
                             const char* context) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        throw ConfigError(std::string(context) + ": '" + key +
                          "' must be a nonnegative integer");
    return static_cast<std::size_t>(v.get<std::int64_t>());
}

inline double get_real(const json& j, const char* key, double fallback, const char* context) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_number()) throw ConfigError(std::string(context) + ": '" + key + "' must be a number");
    return v.get<double>();
}

inline std::string get_word(const json& j, const char* key, const std::string& fallback,
                            const char* context) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_string()) throw ConfigError(std::string(context) + ": '" + key + "' must be a string");
    return v.get<std::string>();
}

}  // namespace detail

inline RunConfig parse_run_config(const jsonio::json& j) {
    using detail::get_count;
    using detail::get_real;
    using detail::get_word;
    detail::reject_unknown_keys(j, {"arch", "task", "train", "out_dir"}, "config");
    RunConfig cfg;

    if (!j.contains("arch")) throw ConfigError("config: missing 'arch' section");
    const auto& arch = j.at("arch");
    detail::reject_unknown_keys(arch,
                                {"kind", "loss", "dims", "ineligible", "hidden_act", "d_model",
                                 "heads", "seq_len", "ffn_mult", "out_dim", "seed"},
                                "config.arch");
    cfg.arch = jsonio::arch_from_json(arch);
    cfg.arch_seed = get_count(arch, "seed", 1, "config.arch");

    if (!j.contains("task")) throw ConfigError("config: missing 'task' section");
    const auto& task = j.at("task");
    detail::reject_unknown_keys(
        task, {"samples", "noise_std", "input_std", "seed", "planted", "eval_fraction"},
        "config.task");
    cfg.task.samples = get_count(task, "samples", cfg.task.samples, "config.task");
    cfg.task.noise_std = get_real(task, "noise_std", cfg.task.noise_std, "config.task");
    cfg.task.input_std = get_real(task, "input_std", cfg.task.input_std, "config.task");
    cfg.task.seed = get_count(task, "seed", 0, "config.task");
    cfg.eval_fraction = get_real(task, "eval_fraction", cfg.eval_fraction, "config.task");
    if (task.contains("planted")) {
        if (!task.at("planted").is_array())
            throw ConfigError("config.task: 'planted' must be an array");
        for (const auto& entry : task.at("planted")) {
            detail::reject_unknown_keys(entry, {"layer", "rank", "scale"},
                                        "config.task.planted[]");
            const std::size_t layer = get_count(entry, "layer", 0, "config.task.planted[]");
            PlantedLayer planted;
            planted.rank = get_count(entry, "rank", 0, "config.task.planted[]");
            planted.scale = get_real(entry, "scale", 0.0, "config.task.planted[]");
            cfg.task.layers[layer] = planted;
        }
    }

    const jsonio::json train = j.contains("train") ? j.at("train") : jsonio::json::object();
    detail::reject_unknown_keys(
        train,
        {"budget_fraction", "steps",          "batch_size",       "peak_lr",
         "warmup_fraction", "lambda_start",   "lambda_end",       "lambda_schedule",
         "refresh_interval", "calibration_size", "proxy",         "damping",
         "damping_mode",    "seed",           "policy",           "k_max",
         "weight_decay",    "init_sigma",     "log_every",        "eval_every",
         "hutchinson_probes", "hutchinson_fd_step", "uniform_ranks"},
        "config.train");
    TrainConfig& t = cfg.train;
    t.budget_fraction = get_real(train, "budget_fraction", t.budget_fraction, "config.train");
    t.steps = get_count(train, "steps", t.steps, "config.train");
    t.batch_size = get_count(train, "batch_size", t.batch_size, "config.train");
    t.peak_lr = get_real(train, "peak_lr", t.peak_lr, "config.train");
    t.warmup_fraction = get_real(train, "warmup_fraction", t.warmup_fraction, "config.train");
    t.lambda_start = get_real(train, "lambda_start", t.lambda_start, "config.train");
    t.lambda_end = get_real(train, "lambda_end", t.lambda_end, "config.train");
    const std::string sched = get_word(train, "lambda_schedule", "linear", "config.train");
    if (sched == "linear") {
        t.lambda_schedule = LambdaSchedule::linear;
    } else if (sched == "cosine") {
        t.lambda_schedule = LambdaSchedule::cosine;
    } else {
        throw ConfigError("config.train: lambda_schedule must be 'linear' or 'cosine'");
    }
    t.refresh_interval = get_count(train, "refresh_interval", t.refresh_interval, "config.train");
    t.calibration_size = get_count(train, "calibration_size", t.calibration_size, "config.train");
    const std::string proxy = get_word(train, "proxy", "kfac", "config.train");
    if (proxy == "kfac") {
        t.proxy_kind = ProxyKind::kfac;
    } else if (proxy == "hutchinson") {
        t.proxy_kind = ProxyKind::diagonal;
    } else {
        throw ConfigError("config.train: proxy must be 'kfac' or 'hutchinson'");
    }
    t.damping.value = get_real(train, "damping", t.damping.value, "config.train");
    const std::string dmode = get_word(train, "damping_mode", "relative", "config.train");
    if (dmode == "relative") {
        t.damping.mode = Damping::Mode::relative;
    } else if (dmode == "absolute") {
        t.damping.mode = Damping::Mode::absolute;
    } else {
        throw ConfigError("config.train: damping_mode must be 'relative' or 'absolute'");
    }
    t.seed = get_count(train, "seed", t.seed, "config.train");
    const std::string policy = get_word(train, "policy", "raw-utility", "config.train");
    if (policy == "raw-utility") {
        t.policy = AllocationPolicy::raw_utility;
    } else if (policy == "utility-per-cost") {
        t.policy = AllocationPolicy::utility_per_cost;
    } else {
        throw ConfigError("config.train: policy must be 'raw-utility' or 'utility-per-cost'");
    }
    t.k_max = get_count(train, "k_max", t.k_max, "config.train");
    t.weight_decay = get_real(train, "weight_decay", t.weight_decay, "config.train");
    t.init_sigma = get_real(train, "init_sigma", t.init_sigma, "config.train");
    t.log_every = get_count(train, "log_every", t.log_every, "config.train");
    t.eval_every = get_count(train, "eval_every", t.eval_every, "config.train");
    t.hutchinson_probes =
        get_count(train, "hutchinson_probes", t.hutchinson_probes, "config.train");
    t.hutchinson_fd_step =
        get_real(train, "hutchinson_fd_step", t.hutchinson_fd_step, "config.train");
    if (train.contains("uniform_ranks")) {
        if (!train.at("uniform_ranks").is_boolean())
            throw ConfigError("config.train: 'uniform_ranks' must be a boolean");
        t.uniform_ranks = train.at("uniform_ranks").get<bool>();
    }

    if (j.contains("out_dir")) {
        if (!j.at("out_dir").is_string())
            throw ConfigError("config: 'out_dir' must be a string");
        cfg.out_dir = j.at("out_dir").get<std::string>();
    }

    // Physical validation before any compute.
    validate(cfg.train);
    if (cfg.task.samples == 0) throw ConfigError("config.task: samples must be >= 1");
    if (cfg.task.noise_std < 0.0) throw ConfigError("config.task: noise_std must be >= 0");
    if (!(cfg.task.input_std > 0.0)) throw ConfigError("config.task: input_std must be > 0");
    if (cfg.eval_fraction < 0.0 || cfg.eval_fraction >= 1.0)
        throw ConfigError("config.task: eval_fraction must lie in [0, 1)");
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    return parse_run_config(detail::parse_json_file(path, "config"));
}

/// Effective configuration with every default filled in; the inverse of
/// parse_run_config up to key ordering.
inline jsonio::json run_config_to_json(const RunConfig& cfg) {
    using jsonio::json;
    json arch = jsonio::arch_to_json(cfg.arch);
    arch["seed"] = cfg.arch_seed;

    json planted = json::array();
    for (const auto& [layer, p] : cfg.task.layers)
        planted.push_back(json{{"layer", layer}, {"rank", p.rank}, {"scale", p.scale}});
    json task{{"samples", cfg.task.samples},       {"noise_std", cfg.task.noise_std},
              {"input_std", cfg.task.input_std},   {"seed", cfg.task.seed},
              {"planted", planted},                {"eval_fraction", cfg.eval_fraction}};

    const TrainConfig& t = cfg.train;
    json train{{"budget_fraction", t.budget_fraction},
               {"steps", t.steps},
               {"batch_size", t.batch_size},
               {"peak_lr", t.peak_lr},
               {"warmup_fraction", t.warmup_fraction},
               {"lambda_start", t.lambda_start},
               {"lambda_end", t.lambda_end},
               {"lambda_schedule", to_string(t.lambda_schedule)},
               {"refresh_interval", t.refresh_interval},
               {"calibration_size", t.calibration_size},
               {"proxy", t.proxy_kind == ProxyKind::kfac ? "kfac" : "hutchinson"},
               {"damping", t.damping.value},
               {"damping_mode", t.damping.mode == Damping::Mode::relative ? "relative"
                                                                          : "absolute"},
               {"seed", t.seed},
               {"policy", to_string(t.policy)},
               {"k_max", t.k_max},
               {"weight_decay", t.weight_decay},
               {"init_sigma", t.init_sigma},
               {"log_every", t.log_every},
               {"eval_every", t.eval_every},
               {"hutchinson_probes", t.hutchinson_probes},
               {"hutchinson_fd_step", t.hutchinson_fd_step},
               {"uniform_ranks", t.uniform_ranks}};

    return json{{"arch", arch}, {"task", task}, {"train", train}, {"out_dir", cfg.out_dir}};
}

/// Dataset materialization shared by the CLI commands: generate the planted
/// task from the config and split it deterministically.
inline Dataset build_dataset(const RunConfig& cfg, const BaseNetwork& net) {
    Dataset ds = gen_planted_task(net, cfg.task);
    return split(ds, cfg.train.calibration_size, cfg.eval_fraction, cfg.task.seed);
}

}  // namespace ctrlora
