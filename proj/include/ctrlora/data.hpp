// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctrlora/errors.hpp"
#include "ctrlora/linalg.hpp"
#include "ctrlora/matrix.hpp"
#include "ctrlora/model.hpp"
#include "ctrlora/rng.hpp"

namespace ctrlora {

/// A synthetic task plus index splits. `targets` is used for regression,
/// `labels` for classification; the other stays empty.
struct Dataset {
    Matrix inputs;  // n x d_in
    Matrix targets; // n x d_out (regression only)
    std::vector<int> labels;
    LossKind task_kind = LossKind::mse;

    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> eval_idx;
    std::vector<std::size_t> calibration_idx;

    std::size_t size() const { return inputs.rows(); }
    bool classification() const { return task_kind == LossKind::cross_entropy; }
};

/// Low-rank teacher perturbation for one layer: rank and singular-value scale.
struct PlantedLayer {
    std::size_t rank = 0;
    double scale = 0.0;
};

/// Ground truth for a planted task. Layers absent from `layers` get no
/// perturbation.
struct PlantedSpec {
    std::map<std::size_t, PlantedLayer> layers;  // layer_id -> perturbation
    std::size_t samples = 1024;
    double noise_std = 0.0;
    double input_std = 1.0;
    std::uint64_t seed = 0;
};

/// Teacher perturbations as adapter factors: A = s * Q_out, B = Q_in with
/// orthonormal columns, so every nonzero singular value of A B^T equals s
/// exactly. Also the witness for the zero-loss identifiability check.
inline AdapterSet planted_adapters(const BaseNetwork& net, const PlantedSpec& spec) {
    const Rng base = Rng(spec.seed).fork(stream::kTeacher);
    AdapterSet out;
    for (const auto& [layer_id, planted] : spec.layers) {
        if (layer_id >= net.layers.size())
            throw ConfigError("planted layer id " + std::to_string(layer_id) + " out of range");
        const auto& layer = net.layers[layer_id];
        if (!layer.adapter_eligible)
            throw ConfigError("planted layer " + layer.name + " is not adapter-eligible");
        if (planted.scale < 0.0)
            throw ConfigError("planted scale must be >= 0");
        const std::size_t d_out = layer.weight.rows(), d_in = layer.weight.cols();
        if (planted.rank > std::min(d_out, d_in))
            throw DimensionError("planted rank " + std::to_string(planted.rank) +
                                 " exceeds min dim of layer " + layer.name);
        if (planted.rank == 0 || planted.scale == 0.0) continue;
        Rng rng = base.fork(layer_id);
        AdapterPair pair;
        pair.layer_id = layer_id;
        pair.a = random_orthonormal(d_out, planted.rank, rng);
        pair.a *= planted.scale;
        pair.b = random_orthonormal(d_in, planted.rank, rng);
        out.push_back(std::move(pair));
    }
    return out;
}

/// Synthetic task from a planted low-rank teacher. Regression targets are
/// teacher outputs plus Gaussian noise; classification labels are the argmax
/// of the clean teacher logits, so Bayes accuracy is deterministic.
inline Dataset gen_planted_task(const BaseNetwork& net, const PlantedSpec& spec) {
    if (spec.samples == 0) throw ConfigError("planted task needs at least one sample");
    if (spec.noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
    if (spec.input_std <= 0.0) throw ConfigError("input_std must be > 0");

    const BaseNetwork teacher = merge_adapters(net, planted_adapters(net, spec));
    const Rng base(spec.seed);
    Rng rx = base.fork(stream::kData).fork(0);
    Rng rn = base.fork(stream::kData).fork(1);

    Dataset ds;
    ds.task_kind = net.classification() ? LossKind::cross_entropy : LossKind::mse;
    ds.inputs = Matrix::gaussian(spec.samples, net.input_dim(), spec.input_std, rx);
    const Matrix logits = predict_logits(teacher, {}, ds.inputs);

    if (ds.classification()) {
        ds.labels.resize(spec.samples);
        for (std::size_t i = 0; i < spec.samples; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < logits.cols(); ++c)
                if (logits(i, c) > logits(i, best)) best = c;
            ds.labels[i] = static_cast<int>(best);
        }
    } else {
        ds.targets = logits;
        if (spec.noise_std > 0.0) {
            for (std::size_t i = 0; i < ds.targets.rows(); ++i)
                for (std::size_t j = 0; j < ds.targets.cols(); ++j)
                    ds.targets(i, j) += rn.normal(0.0, spec.noise_std);
        }
    }
    return ds;
}

namespace detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

}  // namespace detail

/// Deterministic disjoint train/eval split with a calibration subset of
/// train. Returns a copy with the index sets filled (sorted ascending).
inline Dataset split(Dataset ds, std::size_t calibration_size, double eval_fraction,
                     std::uint64_t seed) {
    const std::size_t n = ds.size();
    if (n == 0) throw ConfigError("split: empty dataset");
    if (calibration_size == 0)
        throw ConfigError("split: calibration_size must be >= 1 (curvature needs samples)");
    if (eval_fraction < 0.0 || eval_fraction >= 1.0)
        throw ConfigError("split: eval_fraction must lie in [0, 1)");
    const std::size_t eval_size =
        static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(n)));
    const std::size_t train_size = n - eval_size;
    if (calibration_size > train_size)
        throw ConfigError("split: calibration_size " + std::to_string(calibration_size) +
                          " exceeds train size " + std::to_string(train_size));

    const auto perm = detail::shuffled_indices(n, Rng(seed).fork(stream::kSplit));
    ds.eval_idx.assign(perm.begin(), perm.begin() + eval_size);
    ds.train_idx.assign(perm.begin() + eval_size, perm.end());
    ds.calibration_idx.assign(ds.train_idx.begin(), ds.train_idx.begin() + calibration_size);
    std::sort(ds.eval_idx.begin(), ds.eval_idx.end());
    std::sort(ds.train_idx.begin(), ds.train_idx.end());
    std::sort(ds.calibration_idx.begin(), ds.calibration_idx.end());
    return ds;
}

/// Materialize the rows at `idx[start .. start+count)` as a batch.
inline Batch gather(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t start,
                    std::size_t count) {
    if (start + count > idx.size()) throw DimensionError("gather: range out of bounds");
    if (count == 0) throw DimensionError("gather: empty range");
    Batch batch;
    batch.inputs = Matrix(count, ds.inputs.cols());
    if (ds.classification()) {
        batch.labels.resize(count);
    } else {
        batch.targets = Matrix(count, ds.targets.cols());
    }
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t row = idx[start + i];
        for (std::size_t j = 0; j < ds.inputs.cols(); ++j)
            batch.inputs(i, j) = ds.inputs(row, j);
        if (ds.classification()) {
            batch.labels[i] = ds.labels[row];
        } else {
            for (std::size_t j = 0; j < ds.targets.cols(); ++j)
                batch.targets(i, j) = ds.targets(row, j);
        }
    }
    return batch;
}

inline Batch gather(const Dataset& ds, const std::vector<std::size_t>& idx) {
    return gather(ds, idx, 0, idx.size());
}

/// Training-order permutation for one epoch. Stateless: any epoch's order can
/// be reproduced from (seed, epoch) alone, which keeps resumption exact.
inline std::vector<std::size_t> epoch_order(const Dataset& ds, std::uint64_t seed,
                                            std::size_t epoch) {
    std::vector<std::size_t> order = ds.train_idx;
    Rng rng = Rng(seed).fork(stream::kShuffle).fork(epoch);
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

/// Calibration split sliced into batches of at most `batch_size` rows, in
/// index order. The tail batch may be short.
inline std::vector<Batch> calibration_batches(const Dataset& ds, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("calibration_batches: batch_size must be >= 1");
    if (ds.calibration_idx.empty())
        throw ConfigError("calibration_batches: dataset has no calibration split");
    std::vector<Batch> out;
    for (std::size_t start = 0; start < ds.calibration_idx.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, ds.calibration_idx.size() - start);
        out.push_back(gather(ds, ds.calibration_idx, start, count));
    }
    return out;
}

}  // namespace ctrlora
