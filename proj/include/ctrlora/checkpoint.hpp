// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctrlora/curvature.hpp"
#include "ctrlora/data.hpp"
#include "ctrlora/errors.hpp"
#include "ctrlora/model.hpp"
#include "ctrlora/plan.hpp"
#include "ctrlora/trainer.hpp"

namespace ctrlora {
namespace jsonio {

// Keys are sorted by nlohmann's default object (std::map), and doubles are
// emitted with shortest round-trip precision, so identical values serialize
// to identical bytes. NaN is not representable in JSON and maps to null.
using json = nlohmann::json;

inline json matrix_to_json(const Matrix& m) {
    return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const json& j) {
    Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
    const auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != m.size())
        throw ConfigError("checkpoint: matrix payload size mismatch");
    m.data() = data;
    return m;
}

inline json arch_to_json(const ArchSpec& a) {
    json j;
    j["kind"] = to_string(a.kind);
    j["loss"] = a.loss == LossKind::mse ? "mse" : "cross_entropy";
    if (a.kind == ArchKind::mlp) {
        j["dims"] = a.dims;
        j["ineligible"] = a.ineligible;
        j["hidden_act"] = to_string(a.hidden_act);
    } else {
        j["d_model"] = a.d_model;
        j["heads"] = a.heads;
        j["seq_len"] = a.seq_len;
        j["ffn_mult"] = a.ffn_mult;
        j["out_dim"] = a.out_dim;
    }
    return j;
}

inline ArchSpec arch_from_json(const json& j) {
    ArchSpec a;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "mlp") {
        a.kind = ArchKind::mlp;
    } else if (kind == "tiny_transformer_block" || kind == "transformer") {
        a.kind = ArchKind::tiny_transformer_block;
    } else {
        throw ConfigError("unknown arch kind '" + kind + "'");
    }
    const std::string loss = j.at("loss").get<std::string>();
    if (loss == "mse") {
        a.loss = LossKind::mse;
    } else if (loss == "cross_entropy") {
        a.loss = LossKind::cross_entropy;
    } else {
        throw ConfigError("unknown loss '" + loss + "'");
    }
    if (a.kind == ArchKind::mlp) {
        a.dims = j.at("dims").get<std::vector<std::size_t>>();
        if (j.contains("ineligible"))
            a.ineligible = j.at("ineligible").get<std::vector<std::size_t>>();
        if (j.contains("hidden_act")) {
            const std::string act = j.at("hidden_act").get<std::string>();
            if (act == "relu") {
                a.hidden_act = Nonlinearity::relu;
            } else if (act == "gelu") {
                a.hidden_act = Nonlinearity::gelu;
            } else if (act == "none") {
                a.hidden_act = Nonlinearity::none;
            } else {
                throw ConfigError("unknown hidden_act '" + act + "'");
            }
        }
    } else {
        a.d_model = j.value("d_model", a.d_model);
        a.heads = j.value("heads", a.heads);
        a.seq_len = j.value("seq_len", a.seq_len);
        a.ffn_mult = j.value("ffn_mult", a.ffn_mult);
        a.out_dim = j.value("out_dim", a.out_dim);
    }
    return a;
}

inline json candidate_to_json(const CandidateDirection& c) {
    return json{{"layer", c.layer_id}, {"sigma", c.sigma},         {"u", c.u},
                {"v", c.v},           {"u_whitened", c.u_whitened}, {"v_whitened", c.v_whitened},
                {"utility", c.utility}, {"cost", c.cost}};
}

inline CandidateDirection candidate_from_json(const json& j) {
    CandidateDirection c;
    c.layer_id = j.at("layer").get<std::size_t>();
    c.sigma = j.at("sigma").get<double>();
    c.u = j.at("u").get<std::vector<double>>();
    c.v = j.at("v").get<std::vector<double>>();
    c.u_whitened = j.at("u_whitened").get<std::vector<double>>();
    c.v_whitened = j.at("v_whitened").get<std::vector<double>>();
    c.utility = j.at("utility").get<double>();
    c.cost = j.at("cost").get<std::size_t>();
    return c;
}

inline json plan_to_json(const BudgetPlan& plan) {
    json ranks = json::array();
    for (const auto& [layer, rank] : plan.ranks)
        ranks.push_back(json{{"layer", layer}, {"rank", rank}});
    json log = json::array();
    for (const auto& c : plan.selection_log) log.push_back(candidate_to_json(c));
    return json{{"ranks", ranks},
                {"budget_limit", plan.budget_limit},
                {"spent", plan.spent},
                {"selection_log", log}};
}

inline BudgetPlan plan_from_json(const json& j) {
    BudgetPlan plan;
    for (const auto& entry : j.at("ranks"))
        plan.ranks[entry.at("layer").get<std::size_t>()] = entry.at("rank").get<std::size_t>();
    plan.budget_limit = j.at("budget_limit").get<std::size_t>();
    plan.spent = j.at("spent").get<std::size_t>();
    if (j.contains("selection_log"))
        for (const auto& entry : j.at("selection_log"))
            plan.selection_log.push_back(candidate_from_json(entry));
    return plan;
}

inline json proxy_to_json(const CurvatureProxy& p) {
    json j;
    j["layer"] = p.layer_id;
    j["kind"] = to_string(p.kind);
    if (p.kind == ProxyKind::kfac) {
        j["l_factor"] = matrix_to_json(p.l_factor.to_matrix());
        j["r_factor"] = matrix_to_json(p.r_factor.to_matrix());
    } else {
        j["d_entries"] = matrix_to_json(p.d_entries);
    }
    j["l_damping"] = p.l_damping;
    j["r_damping"] = p.r_damping;
    j["sample_count"] = p.sample_count;
    j["step_estimated"] = p.step_estimated;
    j["estimator"] = p.estimator;
    return j;
}

inline CurvatureProxy proxy_from_json(const json& j) {
    CurvatureProxy p;
    p.layer_id = j.at("layer").get<std::size_t>();
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "kfac") {
        p.kind = ProxyKind::kfac;
        p.l_factor = SpdMatrix::from_matrix(matrix_from_json(j.at("l_factor")));
        p.r_factor = SpdMatrix::from_matrix(matrix_from_json(j.at("r_factor")));
    } else if (kind == "diagonal") {
        p.kind = ProxyKind::diagonal;
        p.d_entries = matrix_from_json(j.at("d_entries"));
    } else {
        throw ConfigError("unknown proxy kind '" + kind + "'");
    }
    p.l_damping = j.at("l_damping").get<double>();
    p.r_damping = j.at("r_damping").get<double>();
    p.sample_count = j.at("sample_count").get<std::size_t>();
    p.step_estimated = j.at("step_estimated").get<std::size_t>();
    p.estimator = j.at("estimator").get<std::string>();
    return p;
}

inline json adapters_to_json(const AdapterSet& adapters) {
    json arr = json::array();
    for (const auto& p : adapters)
        arr.push_back(json{{"layer", p.layer_id},
                           {"a", matrix_to_json(p.a)},
                           {"b", matrix_to_json(p.b)}});
    return arr;
}

inline AdapterSet adapters_from_json(const json& j) {
    AdapterSet out;
    for (const auto& entry : j) {
        AdapterPair p;
        p.layer_id = entry.at("layer").get<std::size_t>();
        p.a = matrix_from_json(entry.at("a"));
        p.b = matrix_from_json(entry.at("b"));
        out.push_back(std::move(p));
    }
    return out;
}

inline json optimizer_to_json(const OptimizerState& s) {
    const auto dump = [](const std::vector<Matrix>& ms) {
        json arr = json::array();
        for (const auto& m : ms) arr.push_back(matrix_to_json(m));
        return arr;
    };
    return json{{"t", s.t},           {"beta1", s.beta1},   {"beta2", s.beta2},
                {"eps", s.eps},       {"m_a", dump(s.m_a)}, {"v_a", dump(s.v_a)},
                {"m_b", dump(s.m_b)}, {"v_b", dump(s.v_b)}};
}

inline OptimizerState optimizer_from_json(const json& j) {
    OptimizerState s;
    s.t = j.at("t").get<std::size_t>();
    s.beta1 = j.at("beta1").get<double>();
    s.beta2 = j.at("beta2").get<double>();
    s.eps = j.at("eps").get<double>();
    const auto read = [&j](const char* key, std::vector<Matrix>& dst) {
        for (const auto& entry : j.at(key)) dst.push_back(matrix_from_json(entry));
    };
    read("m_a", s.m_a);
    read("v_a", s.v_a);
    read("m_b", s.m_b);
    read("v_b", s.v_b);
    return s;
}

inline json metrics_to_json(const MetricsRecord& r) {
    json j;
    j["step"] = r.step;
    j["task_loss"] = r.task_loss;
    j["penalty_value"] = r.penalty_value;
    j["total_loss"] = r.total_loss;
    j["lambda"] = r.lambda;
    j["lr"] = r.lr;
    j["grad_norm"] = r.grad_norm;
    json per_layer = json::array();
    for (const auto& [layer, v] : r.layer_penalty)
        per_layer.push_back(json{{"layer", layer}, {"value", v}});
    j["layer_penalty"] = per_layer;
    if (r.has_eval) {
        j["eval_loss"] = r.eval_loss;
        j["eval_accuracy"] = r.eval_accuracy;
    }
    j["wall_ms"] = r.wall_ms;
    return j;
}

}  // namespace jsonio

constexpr std::size_t kCheckpointVersion = 1;

/// Self-contained snapshot of a run: architecture + base weights, the full
/// TrainState, and the seed every random stream is derived from (streams are
/// stateless functions of seed and step, so the seed is the RNG state).
struct Checkpoint {
    ArchSpec arch;
    std::uint64_t arch_seed = 0;
    std::vector<Matrix> base_weights;
    std::vector<std::vector<double>> base_biases;
    TrainState state;
    std::uint64_t run_seed = 0;
};

inline Checkpoint make_checkpoint(const BaseNetwork& net, std::uint64_t arch_seed,
                                  const TrainState& state, std::uint64_t run_seed) {
    Checkpoint ck;
    ck.arch = net.spec;
    ck.arch_seed = arch_seed;
    for (const auto& layer : net.layers) {
        ck.base_weights.push_back(layer.weight);
        ck.base_biases.push_back(layer.bias);
    }
    ck.state = state;
    ck.run_seed = run_seed;
    return ck;
}

inline jsonio::json checkpoint_to_json(const Checkpoint& ck) {
    using jsonio::json;
    json j;
    j["format"] = "ctrlora-checkpoint";
    j["version"] = kCheckpointVersion;
    j["arch"] = jsonio::arch_to_json(ck.arch);
    j["arch_seed"] = ck.arch_seed;
    json weights = json::array();
    for (std::size_t i = 0; i < ck.base_weights.size(); ++i)
        weights.push_back(json{{"weight", jsonio::matrix_to_json(ck.base_weights[i])},
                               {"bias", ck.base_biases[i]}});
    j["base_layers"] = weights;
    j["adapters"] = jsonio::adapters_to_json(ck.state.adapters);
    j["optimizer"] = jsonio::optimizer_to_json(ck.state.opt);
    json proxies = json::array();
    for (const auto& p : ck.state.proxies) proxies.push_back(jsonio::proxy_to_json(p));
    j["proxies"] = proxies;
    j["plan"] = jsonio::plan_to_json(ck.state.plan);
    j["step"] = ck.state.step;
    if (std::isnan(ck.state.initial_loss)) {
        j["initial_loss"] = nullptr;
    } else {
        j["initial_loss"] = ck.state.initial_loss;
    }
    j["run_seed"] = ck.run_seed;
    return j;
}

inline Checkpoint checkpoint_from_json(const jsonio::json& j) {
    if (j.value("format", "") != "ctrlora-checkpoint")
        throw ConfigError("checkpoint: unrecognized file format");
    if (j.at("version").get<std::size_t>() != kCheckpointVersion)
        throw ConfigError("checkpoint: unsupported version");
    Checkpoint ck;
    ck.arch = jsonio::arch_from_json(j.at("arch"));
    ck.arch_seed = j.at("arch_seed").get<std::uint64_t>();
    for (const auto& entry : j.at("base_layers")) {
        ck.base_weights.push_back(jsonio::matrix_from_json(entry.at("weight")));
        ck.base_biases.push_back(entry.at("bias").get<std::vector<double>>());
    }
    ck.state.adapters = jsonio::adapters_from_json(j.at("adapters"));
    ck.state.opt = jsonio::optimizer_from_json(j.at("optimizer"));
    for (const auto& entry : j.at("proxies"))
        ck.state.proxies.push_back(jsonio::proxy_from_json(entry));
    ck.state.plan = jsonio::plan_from_json(j.at("plan"));
    ck.state.step = j.at("step").get<std::size_t>();
    const auto& init = j.at("initial_loss");
    ck.state.initial_loss =
        init.is_null() ? std::numeric_limits<double>::quiet_NaN() : init.get<double>();
    ck.run_seed = j.at("run_seed").get<std::uint64_t>();
    return ck;
}

/// Rebuild the frozen network from the checkpoint: architecture from the
/// spec, weights overwritten with the stored tensors.
inline BaseNetwork network_from_checkpoint(const Checkpoint& ck) {
    BaseNetwork net = build_network(ck.arch, ck.arch_seed);
    if (net.layers.size() != ck.base_weights.size())
        throw ConfigError("checkpoint: layer count does not match architecture");
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        if (net.layers[i].weight.rows() != ck.base_weights[i].rows() ||
            net.layers[i].weight.cols() != ck.base_weights[i].cols() ||
            net.layers[i].bias.size() != ck.base_biases[i].size())
            throw ConfigError("checkpoint: stored weights do not match architecture");
        net.layers[i].weight = ck.base_weights[i];
        net.layers[i].bias = ck.base_biases[i];
    }
    return net;
}

namespace detail {

inline jsonio::json parse_json_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw ConfigError(std::string(what) + ": cannot open " + path);
    try {
        return jsonio::json::parse(in);
    } catch (const jsonio::json::exception& e) {
        throw ConfigError(std::string(what) + ": " + path + ": " + e.what());
    }
}

inline void write_text_file(const std::string& path, const std::string& text,
                            const char* what) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError(std::string(what) + ": cannot open " + path + " for writing");
    out << text;
    if (!out) throw ConfigError(std::string(what) + ": write failed for " + path);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    detail::write_text_file(path, checkpoint_to_json(ck).dump() + "\n", "checkpoint");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return checkpoint_from_json(detail::parse_json_file(path, "checkpoint"));
}

inline void save_plan(const std::string& path, const BudgetPlan& plan) {
    jsonio::json j;
    j["format"] = "ctrlora-plan";
    j["version"] = kCheckpointVersion;
    j["plan"] = jsonio::plan_to_json(plan);
    detail::write_text_file(path, j.dump(2) + "\n", "plan");
}

inline BudgetPlan load_plan(const std::string& path) {
    const jsonio::json j = detail::parse_json_file(path, "plan");
    if (j.value("format", "") != "ctrlora-plan")
        throw ConfigError("plan: unrecognized file format");
    return jsonio::plan_from_json(j.at("plan"));
}

namespace detail {

constexpr char kDatasetMagic[8] = {'C', 'T', 'R', 'D', 'S', 'E', 'T', '1'};

template <typename T>
void write_raw(std::ofstream& out, const T* data, std::size_t count) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
}

template <typename T>
void read_raw(std::ifstream& in, T* data, std::size_t count) {
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
    if (!in) throw ConfigError("dataset: truncated file");
}

inline void write_index(std::ofstream& out, const std::vector<std::size_t>& idx) {
    const std::uint64_t n = idx.size();
    write_raw(out, &n, 1);
    for (std::size_t i : idx) {
        const std::uint64_t v = i;
        write_raw(out, &v, 1);
    }
}

inline std::vector<std::size_t> read_index(std::ifstream& in, std::size_t limit) {
    std::uint64_t n = 0;
    read_raw(in, &n, 1);
    if (n > limit) throw ConfigError("dataset: index set larger than dataset");
    std::vector<std::size_t> idx(n);
    for (auto& v : idx) {
        std::uint64_t raw = 0;
        read_raw(in, &raw, 1);
        if (raw >= limit) throw ConfigError("dataset: index out of range");
        v = static_cast<std::size_t>(raw);
    }
    return idx;
}

}  // namespace detail

/// Flat little-endian binary dump of a dataset with its splits. Raw IEEE
/// doubles, so round-trips are bit-exact.
inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("dataset: cannot open " + path + " for writing");
    out.write(detail::kDatasetMagic, sizeof(detail::kDatasetMagic));
    const std::uint64_t header[4] = {ds.classification() ? 1ull : 0ull, ds.size(),
                                     ds.inputs.cols(),
                                     ds.classification() ? 0ull : ds.targets.cols()};
    detail::write_raw(out, header, 4);
    detail::write_raw(out, ds.inputs.data().data(), ds.inputs.size());
    if (ds.classification()) {
        for (int label : ds.labels) {
            const std::int64_t v = label;
            detail::write_raw(out, &v, 1);
        }
    } else {
        detail::write_raw(out, ds.targets.data().data(), ds.targets.size());
    }
    detail::write_index(out, ds.train_idx);
    detail::write_index(out, ds.eval_idx);
    detail::write_index(out, ds.calibration_idx);
    if (!out) throw ConfigError("dataset: write failed for " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("dataset: cannot open " + path);
    char magic[8];
    detail::read_raw(in, magic, 8);
    if (std::memcmp(magic, detail::kDatasetMagic, 8) != 0)
        throw ConfigError("dataset: unrecognized file format");
    std::uint64_t header[4];
    detail::read_raw(in, header, 4);
    Dataset ds;
    ds.task_kind = header[0] == 1 ? LossKind::cross_entropy : LossKind::mse;
    const std::size_t n = static_cast<std::size_t>(header[1]);
    const std::size_t d_in = static_cast<std::size_t>(header[2]);
    const std::size_t d_out = static_cast<std::size_t>(header[3]);
    ds.inputs = Matrix(n, d_in);
    detail::read_raw(in, ds.inputs.data().data(), ds.inputs.size());
    if (ds.classification()) {
        ds.labels.resize(n);
        for (auto& label : ds.labels) {
            std::int64_t v = 0;
            detail::read_raw(in, &v, 1);
            label = static_cast<int>(v);
        }
    } else {
        ds.targets = Matrix(n, d_out);
        detail::read_raw(in, ds.targets.data().data(), ds.targets.size());
    }
    ds.train_idx = detail::read_index(in, n);
    ds.eval_idx = detail::read_index(in, n);
    ds.calibration_idx = detail::read_index(in, n);
    return ds;
}

}  // namespace ctrlora
