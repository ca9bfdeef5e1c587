// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ctrlora/errors.hpp"
#include "ctrlora/matrix.hpp"
#include "ctrlora/plan.hpp"
#include "ctrlora/rng.hpp"

namespace ctrlora {

enum class ArchKind { mlp, tiny_transformer_block };
enum class Nonlinearity { none, relu, gelu, softmax_head };
enum class LossKind { mse, cross_entropy };

inline const char* to_string(ArchKind k) {
    return k == ArchKind::mlp ? "mlp" : "tiny_transformer_block";
}

inline const char* to_string(Nonlinearity n) {
    switch (n) {
        case Nonlinearity::none: return "none";
        case Nonlinearity::relu: return "relu";
        case Nonlinearity::gelu: return "gelu";
        case Nonlinearity::softmax_head: return "softmax_head";
    }
    return "none";
}

/// Architecture description. For `mlp`, `dims` is the chain
/// [d_in, h_1, ..., d_out] and `ineligible` lists layer indices that never
/// receive adapters. For `tiny_transformer_block` the geometry fields below
/// `dims` apply and the head is always ineligible.
struct ArchSpec {
    ArchKind kind = ArchKind::mlp;
    LossKind loss = LossKind::mse;

    std::vector<std::size_t> dims;
    std::vector<std::size_t> ineligible;
    Nonlinearity hidden_act = Nonlinearity::relu;

    std::size_t d_model = 16;
    std::size_t heads = 2;
    std::size_t seq_len = 4;
    std::size_t ffn_mult = 4;
    std::size_t out_dim = 4;
};

struct LayerSpec {
    std::string name;
    Matrix weight;  // d_out x d_in
    std::vector<double> bias;
    Nonlinearity act = Nonlinearity::none;
    bool adapter_eligible = true;

    std::size_t d_out() const { return weight.rows(); }
    std::size_t d_in() const { return weight.cols(); }
};

/// Frozen base network. Training never mutates the weights here; adapters
/// live in a separate AdapterSet keyed by layer id.
struct BaseNetwork {
    ArchSpec spec;
    std::vector<LayerSpec> layers;

    std::size_t input_dim() const {
        if (spec.kind == ArchKind::mlp) return spec.dims.front();
        return spec.seq_len * spec.d_model;
    }
    std::size_t output_dim() const {
        if (spec.kind == ArchKind::mlp) return spec.dims.back();
        return spec.out_dim;
    }
    bool classification() const { return spec.loss == LossKind::cross_entropy; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    std::vector<std::size_t> eligible_layers() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].adapter_eligible) out.push_back(i);
        return out;
    }
};

/// Low-rank update W_eff = W + A B^T with A (d_out x r), B (d_in x r).
struct AdapterPair {
    std::size_t layer_id = 0;
    Matrix a;
    Matrix b;

    std::size_t rank() const { return a.cols(); }
};

using AdapterSet = std::vector<AdapterPair>;

struct Batch {
    Matrix inputs;              // n x input_dim
    Matrix targets;             // n x output_dim, regression only
    std::vector<int> labels;    // classification only
    std::size_t size() const { return inputs.rows(); }
};

/// Per-layer activation/output-gradient rows captured during a pass. Rows of
/// `g_rows` are gradients of the per-sample loss (batch-mean scaling removed),
/// so factor estimates are sample means regardless of batch size.
struct LayerCapture {
    Matrix a_rows;
    Matrix g_rows;
};

struct BatchCache {
    double loss = 0.0;
    std::vector<LayerCapture> captures;  // indexed by layer id; empty if off
};

struct GradientBundle {
    double loss = 0.0;
    // Indexed by layer id; only eligible layers are populated, and only when
    // full-matrix gradients were requested.
    std::vector<Matrix> layer_grads;
    // Aligned with the AdapterSet passed to backward.
    std::vector<Matrix> adapter_grad_a;
    std::vector<Matrix> adapter_grad_b;
};

struct BackwardOptions {
    bool full_matrix = true;   // materialize G_l on eligible layers
    bool capture = false;      // record a/g rows for curvature estimation
    // Optional additive perturbation of a single base weight, used by
    // Hessian-vector products: effective weight at `offset_layer` becomes
    // W + offset + A B^T.
    const Matrix* weight_offset = nullptr;
    std::size_t offset_layer = 0;
};

struct BackwardResult {
    GradientBundle grads;
    BatchCache cache;
};

namespace detail {

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

inline void apply_activation(Matrix& z, Nonlinearity act) {
    switch (act) {
        case Nonlinearity::none:
        case Nonlinearity::softmax_head:
            return;
        case Nonlinearity::relu:
            for (std::size_t i = 0; i < z.size(); ++i)
                if (z.data()[i] < 0.0) z.data()[i] = 0.0;
            return;
        case Nonlinearity::gelu:
            for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] = gelu(z.data()[i]);
            return;
    }
}

// dz := dh .* act'(z_pre), in place on dz.
inline void activation_backward(Matrix& dz, const Matrix& z_pre, Nonlinearity act) {
    switch (act) {
        case Nonlinearity::none:
        case Nonlinearity::softmax_head:
            return;
        case Nonlinearity::relu:
            for (std::size_t i = 0; i < dz.size(); ++i)
                if (z_pre.data()[i] <= 0.0) dz.data()[i] = 0.0;
            return;
        case Nonlinearity::gelu:
            for (std::size_t i = 0; i < dz.size(); ++i)
                dz.data()[i] *= gelu_grad(z_pre.data()[i]);
            return;
    }
}

// Z = X W^T + (X B) A^T + bias, with the low-rank term applied separately so
// the base weight is never densified.
inline Matrix apply_linear(const Matrix& x, const LayerSpec& layer, const AdapterPair* adapter,
                           const Matrix* offset = nullptr) {
    if (x.cols() != layer.d_in())
        throw DimensionError("apply_linear: input cols " + std::to_string(x.cols()) +
                             " != layer d_in " + std::to_string(layer.d_in()));
    Matrix z = matmul_nt(x, layer.weight);
    if (offset != nullptr) {
        Matrix zo = matmul_nt(x, *offset);
        z += zo;
    }
    if (adapter != nullptr && adapter->rank() > 0) {
        Matrix xb = matmul(x, adapter->b);      // n x r
        Matrix lowrank = matmul_nt(xb, adapter->a);
        z += lowrank;
    }
    if (!layer.bias.empty()) {
        for (std::size_t i = 0; i < z.rows(); ++i)
            for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += layer.bias[j];
    }
    return z;
}

// dX = dZ W_eff = dZ W + (dZ A) B^T.
inline Matrix linear_input_grad(const Matrix& dz, const LayerSpec& layer,
                                const AdapterPair* adapter, const Matrix* offset = nullptr) {
    Matrix dx = matmul(dz, layer.weight);
    if (offset != nullptr) {
        Matrix dxo = matmul(dz, *offset);
        dx += dxo;
    }
    if (adapter != nullptr && adapter->rank() > 0) {
        Matrix da = matmul(dz, adapter->a);     // n x r
        Matrix low = matmul_nt(da, adapter->b);
        dx += low;
    }
    return dx;
}

inline void softmax_rows(Matrix& z) {
    for (std::size_t i = 0; i < z.rows(); ++i) {
        double m = z(i, 0);
        for (std::size_t j = 1; j < z.cols(); ++j) m = std::max(m, z(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < z.cols(); ++j) {
            z(i, j) = std::exp(z(i, j) - m);
            sum += z(i, j);
        }
        for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) /= sum;
    }
}

// Mean cross-entropy over rows of logits, with the softmax fused in.
// On return `logits` holds softmax probabilities.
inline double cross_entropy_inplace(Matrix& logits, const std::vector<int>& labels) {
    if (labels.size() != logits.rows())
        throw DimensionError("cross_entropy: label count mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= logits.cols())
            throw DimensionError("cross_entropy: label out of range");
        double m = logits(i, 0);
        for (std::size_t j = 1; j < logits.cols(); ++j) m = std::max(m, logits(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols(); ++j) sum += std::exp(logits(i, j) - m);
        const double lse = m + std::log(sum);
        total += lse - logits(i, y);
        for (std::size_t j = 0; j < logits.cols(); ++j)
            logits(i, j) = std::exp(logits(i, j) - lse);
    }
    const double loss = total / static_cast<double>(logits.rows());
    if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
    return loss;
}

inline double mse(const Matrix& pred, const Matrix& targets) {
    pred.require_same_shape(targets, "mse");
    double total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.data()[i] - targets.data()[i];
        total += d * d;
    }
    const double loss = total / static_cast<double>(pred.size());
    if (!std::isfinite(loss)) throw NumericError("mse: non-finite loss");
    return loss;
}

// d(mean loss)/d(logits or preds), written into `out`.
inline Matrix loss_grad(const Matrix& out_or_probs, const Batch& batch, LossKind loss) {
    const double n = static_cast<double>(out_or_probs.rows());
    Matrix g(out_or_probs.rows(), out_or_probs.cols());
    if (loss == LossKind::cross_entropy) {
        g = out_or_probs;  // softmax probabilities
        for (std::size_t i = 0; i < g.rows(); ++i) g(i, batch.labels[i]) -= 1.0;
        g *= 1.0 / n;
    } else {
        for (std::size_t i = 0; i < g.size(); ++i)
            g.data()[i] = 2.0 * (out_or_probs.data()[i] - batch.targets.data()[i]) /
                          static_cast<double>(out_or_probs.size());
    }
    return g;
}

// Parameterless pre-norm LayerNorm over each row; caches mean and the
// inverse stddev so the backward pass can be replayed.
struct LayerNormCache {
    std::vector<double> mean;
    std::vector<double> inv_std;
};

inline Matrix layer_norm(const Matrix& x, LayerNormCache& cache) {
    const std::size_t n = x.rows(), d = x.cols();
    cache.mean.resize(n);
    cache.inv_std.resize(n);
    Matrix out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x(i, j);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x(i, j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + 1e-6);
        cache.mean[i] = mu;
        cache.inv_std[i] = inv;
        for (std::size_t j = 0; j < d; ++j) out(i, j) = (x(i, j) - mu) * inv;
    }
    return out;
}

inline Matrix layer_norm_backward(const Matrix& x, const LayerNormCache& cache,
                                  const Matrix& dnorm) {
    const std::size_t n = x.rows(), d = x.cols();
    Matrix dx(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double inv = cache.inv_std[i];
        double mean_dn = 0.0, mean_dn_nh = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double nh = (x(i, j) - cache.mean[i]) * inv;
            mean_dn += dnorm(i, j);
            mean_dn_nh += dnorm(i, j) * nh;
        }
        mean_dn /= static_cast<double>(d);
        mean_dn_nh /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double nh = (x(i, j) - cache.mean[i]) * inv;
            dx(i, j) = inv * (dnorm(i, j) - mean_dn - nh * mean_dn_nh);
        }
    }
    return dx;
}

struct SiteSlot {
    const AdapterPair* adapter = nullptr;
    std::size_t adapter_index = 0;  // position in the AdapterSet
    bool has_adapter = false;
};

inline std::vector<SiteSlot> index_adapters(const BaseNetwork& net, const AdapterSet& adapters) {
    std::vector<SiteSlot> slots(net.layers.size());
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        const auto& ap = adapters[i];
        if (ap.layer_id >= net.layers.size())
            throw DimensionError("adapter layer_id out of range");
        const auto& layer = net.layers[ap.layer_id];
        if (!layer.adapter_eligible)
            throw DimensionError("adapter attached to ineligible layer " +
                                 std::to_string(ap.layer_id));
        if (ap.rank() > 0 &&
            (ap.a.rows() != layer.d_out() || ap.b.rows() != layer.d_in() ||
             ap.a.cols() != ap.b.cols()))
            throw DimensionError("adapter shape mismatch on layer " + std::to_string(ap.layer_id));
        slots[ap.layer_id] = SiteSlot{&ap, i, true};
    }
    return slots;
}

}  // namespace detail

/// Deterministic base-network construction; same spec and seed give
/// bit-identical weights. Weights ~ N(0, 1/d_in), biases zero.
inline BaseNetwork build_network(const ArchSpec& spec, std::uint64_t seed) {
    BaseNetwork net;
    net.spec = spec;
    Rng rng = Rng(seed).fork(stream::kWeights);

    auto make_layer = [&](const std::string& name, std::size_t d_out, std::size_t d_in,
                          Nonlinearity act, bool eligible) {
        LayerSpec l;
        l.name = name;
        l.weight = Matrix::gaussian(d_out, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
        l.bias.assign(d_out, 0.0);
        l.act = act;
        l.adapter_eligible = eligible;
        net.layers.push_back(std::move(l));
    };

    if (spec.kind == ArchKind::mlp) {
        if (spec.dims.size() < 2) throw ConfigError("mlp needs at least [d_in, d_out]");
        for (std::size_t idx : spec.ineligible)
            if (idx + 1 >= spec.dims.size())
                throw ConfigError("ineligible layer index out of range");
        const Nonlinearity head =
            spec.loss == LossKind::cross_entropy ? Nonlinearity::softmax_head : Nonlinearity::none;
        for (std::size_t i = 0; i + 1 < spec.dims.size(); ++i) {
            const bool last = (i + 2 == spec.dims.size());
            bool eligible = true;
            for (std::size_t idx : spec.ineligible)
                if (idx == i) eligible = false;
            make_layer("fc" + std::to_string(i), spec.dims[i + 1], spec.dims[i],
                       last ? head : spec.hidden_act, eligible);
        }
    } else {
        if (spec.d_model == 0 || spec.heads == 0 || spec.d_model % spec.heads != 0)
            throw ConfigError("d_model must be a positive multiple of heads");
        if (spec.seq_len == 0 || spec.ffn_mult == 0 || spec.out_dim == 0)
            throw ConfigError("seq_len, ffn_mult, out_dim must be positive");
        const std::size_t d = spec.d_model;
        const Nonlinearity head =
            spec.loss == LossKind::cross_entropy ? Nonlinearity::softmax_head : Nonlinearity::none;
        make_layer("wq", d, d, Nonlinearity::none, true);
        make_layer("wk", d, d, Nonlinearity::none, true);
        make_layer("wv", d, d, Nonlinearity::none, true);
        make_layer("wo", d, d, Nonlinearity::none, true);
        make_layer("ffn_in", d * spec.ffn_mult, d, Nonlinearity::gelu, true);
        make_layer("ffn_out", d, d * spec.ffn_mult, Nonlinearity::none, true);
        make_layer("head", spec.out_dim, d, head, false);
    }
    return net;
}

/// A ~ N(0, sigma^2), B = 0, so adapters start as an exact no-op. Layers with
/// rank 0 in the plan get empty factors and are skipped everywhere.
inline AdapterSet init_adapters(const BaseNetwork& net, const BudgetPlan& plan, double init_sigma,
                                std::uint64_t seed) {
    AdapterSet out;
    Rng base = Rng(seed).fork(stream::kAdapterInit);
    for (std::size_t layer_id : net.eligible_layers()) {
        const auto& layer = net.layers[layer_id];
        const std::size_t r = plan.rank_for(layer_id);
        if (r > std::min(layer.d_in(), layer.d_out()))
            throw DimensionError("rank " + std::to_string(r) + " exceeds min dim of layer " +
                                 std::to_string(layer_id));
        AdapterPair ap;
        ap.layer_id = layer_id;
        if (r > 0) {
            Rng rng = base.fork(layer_id);
            ap.a = Matrix::gaussian(layer.d_out(), r, init_sigma, rng);
            ap.b = Matrix(layer.d_in(), r);
        } else {
            ap.a = Matrix(layer.d_out(), 0);
            ap.b = Matrix(layer.d_in(), 0);
        }
        out.push_back(std::move(ap));
    }
    return out;
}

/// Sum of r_l (d_in + d_out) over the plan.
inline std::size_t count_trainable(const BaseNetwork& net, const BudgetPlan& plan) {
    std::size_t n = 0;
    for (const auto& [layer_id, r] : plan.ranks) {
        if (layer_id >= net.layers.size())
            throw DimensionError("plan references layer " + std::to_string(layer_id));
        const auto& layer = net.layers[layer_id];
        n += r * (layer.d_in() + layer.d_out());
    }
    return n;
}

namespace detail {

struct MlpPass {
    std::vector<Matrix> pre;   // pre-activation per layer
    std::vector<Matrix> post;  // post-activation per layer (probs for softmax head)
};

inline const Matrix* offset_for(const BackwardOptions* opts, std::size_t layer) {
    if (opts == nullptr || opts->weight_offset == nullptr) return nullptr;
    return opts->offset_layer == layer ? opts->weight_offset : nullptr;
}

inline double mlp_forward(const BaseNetwork& net, const std::vector<SiteSlot>& slots,
                          const Batch& batch, MlpPass* pass, Matrix* final_out,
                          const BackwardOptions* opts = nullptr) {
    Matrix x = batch.inputs;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& layer = net.layers[i];
        Matrix z = apply_linear(x, layer, slots[i].has_adapter ? slots[i].adapter : nullptr,
                                offset_for(opts, i));
        ensure_finite(z, "layer " + layer.name);
        if (pass != nullptr) pass->pre.push_back(z);
        apply_activation(z, layer.act);
        if (pass != nullptr) pass->post.push_back(z);
        x = std::move(z);
    }
    double loss;
    if (net.classification()) {
        loss = cross_entropy_inplace(x, batch.labels);  // x becomes probabilities
    } else {
        loss = mse(x, batch.targets);
    }
    if (final_out != nullptr) *final_out = std::move(x);
    return loss;
}

struct TransformerStash {
    Matrix x;      // seq_len x d
    LayerNormCache ln1, ln2;
    Matrix n1;
    Matrix q, k, v;
    std::vector<Matrix> p;  // per-head attention probabilities
    Matrix o;      // concatenated head outputs
    Matrix x2;
    Matrix n2;
    Matrix f1pre;
    Matrix f1;
    Matrix x3;
    std::vector<double> pooled;
};

// Layer ids inside the transformer block.
enum : std::size_t { kWq = 0, kWk = 1, kWv = 2, kWo = 3, kFfnIn = 4, kFfnOut = 5, kHead = 6 };

inline Matrix reshape_sample(const Batch& batch, std::size_t s, std::size_t seq_len,
                             std::size_t d) {
    Matrix x(seq_len, d);
    for (std::size_t t = 0; t < seq_len; ++t)
        for (std::size_t j = 0; j < d; ++j) x(t, j) = batch.inputs(s, t * d + j);
    return x;
}

inline void transformer_sample_forward(const BaseNetwork& net, const std::vector<SiteSlot>& slots,
                                       const Batch& batch, std::size_t s, TransformerStash& st,
                                       std::vector<double>& logits_row,
                                       const BackwardOptions* opts) {
    const auto& spec = net.spec;
    const std::size_t d = spec.d_model, heads = spec.heads, dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    auto ad = [&](std::size_t i) { return slots[i].has_adapter ? slots[i].adapter : nullptr; };

    st.x = reshape_sample(batch, s, spec.seq_len, d);
    st.n1 = layer_norm(st.x, st.ln1);
    st.q = apply_linear(st.n1, net.layers[kWq], ad(kWq), offset_for(opts, kWq));
    st.k = apply_linear(st.n1, net.layers[kWk], ad(kWk), offset_for(opts, kWk));
    st.v = apply_linear(st.n1, net.layers[kWv], ad(kWv), offset_for(opts, kWv));

    st.p.assign(heads, Matrix());
    st.o = Matrix(spec.seq_len, d);
    for (std::size_t h = 0; h < heads; ++h) {
        Matrix scores(spec.seq_len, spec.seq_len);
        for (std::size_t t = 0; t < spec.seq_len; ++t)
            for (std::size_t u = 0; u < spec.seq_len; ++u) {
                double acc = 0.0;
                for (std::size_t j = 0; j < dh; ++j)
                    acc += st.q(t, h * dh + j) * st.k(u, h * dh + j);
                scores(t, u) = acc * scale;
            }
        softmax_rows(scores);
        for (std::size_t t = 0; t < spec.seq_len; ++t)
            for (std::size_t j = 0; j < dh; ++j) {
                double acc = 0.0;
                for (std::size_t u = 0; u < spec.seq_len; ++u)
                    acc += scores(t, u) * st.v(u, h * dh + j);
                st.o(t, h * dh + j) = acc;
            }
        st.p[h] = std::move(scores);
    }

    Matrix attn = apply_linear(st.o, net.layers[kWo], ad(kWo), offset_for(opts, kWo));
    st.x2 = st.x;
    st.x2 += attn;
    ensure_finite(st.x2, "attention output");

    st.n2 = layer_norm(st.x2, st.ln2);
    st.f1pre = apply_linear(st.n2, net.layers[kFfnIn], ad(kFfnIn), offset_for(opts, kFfnIn));
    st.f1 = st.f1pre;
    apply_activation(st.f1, Nonlinearity::gelu);
    Matrix f2 = apply_linear(st.f1, net.layers[kFfnOut], ad(kFfnOut), offset_for(opts, kFfnOut));
    st.x3 = st.x2;
    st.x3 += f2;
    ensure_finite(st.x3, "ffn output");

    st.pooled.assign(d, 0.0);
    for (std::size_t t = 0; t < spec.seq_len; ++t)
        for (std::size_t j = 0; j < d; ++j) st.pooled[j] += st.x3(t, j);
    for (std::size_t j = 0; j < d; ++j) st.pooled[j] /= static_cast<double>(spec.seq_len);

    const auto& head = net.layers[kHead];
    logits_row.assign(spec.out_dim, 0.0);
    for (std::size_t c = 0; c < spec.out_dim; ++c) {
        double acc = head.bias[c];
        for (std::size_t j = 0; j < d; ++j) acc += head.weight(c, j) * st.pooled[j];
        logits_row[c] = acc;
    }
}

struct CaptureSink {
    bool enabled = false;
    std::vector<LayerCapture>* captures = nullptr;
    std::vector<std::size_t> cursor;  // next row per layer
};

// Append activation rows and per-sample gradient rows (dz scaled by n) for one
// adapter site.
inline void record_rows(CaptureSink& sink, std::size_t layer_id, const Matrix& a_rows,
                        const Matrix& dz_rows, double n) {
    if (!sink.enabled) return;
    auto& cap = (*sink.captures)[layer_id];
    std::size_t& at = sink.cursor[layer_id];
    for (std::size_t i = 0; i < a_rows.rows(); ++i, ++at) {
        for (std::size_t j = 0; j < a_rows.cols(); ++j) cap.a_rows(at, j) = a_rows(i, j);
        for (std::size_t j = 0; j < dz_rows.cols(); ++j) cap.g_rows(at, j) = dz_rows(i, j) * n;
    }
}

}  // namespace detail

/// Forward pass: mean loss over the batch, plus activation captures for
/// eligible layers when requested (gradient rows require backward()).
inline double forward_loss(const BaseNetwork& net, const AdapterSet& adapters,
                           const Batch& batch) {
    if (batch.size() == 0) throw DimensionError("forward: empty batch");
    if (batch.inputs.cols() != net.input_dim())
        throw DimensionError("forward: input dim " + std::to_string(batch.inputs.cols()) +
                             " != network input " + std::to_string(net.input_dim()));
    const auto slots = detail::index_adapters(net, adapters);
    if (net.spec.kind == ArchKind::mlp)
        return detail::mlp_forward(net, slots, batch, nullptr, nullptr);

    const std::size_t n = batch.size();
    Matrix logits(n, net.spec.out_dim);
    detail::TransformerStash st;
    std::vector<double> row;
    for (std::size_t s = 0; s < n; ++s) {
        detail::transformer_sample_forward(net, slots, batch, s, st, row, nullptr);
        for (std::size_t c = 0; c < row.size(); ++c) logits(s, c) = row[c];
    }
    ensure_finite(logits, "logits");
    if (net.classification()) return detail::cross_entropy_inplace(logits, batch.labels);
    return detail::mse(logits, batch.targets);
}

/// Reverse-mode gradients. Adapter-factor gradients are always produced for
/// every adapter with rank > 0; full-matrix layer gradients and a/g captures
/// are opt-in. The base network is read-only throughout.
inline BackwardResult backward(const BaseNetwork& net, const AdapterSet& adapters,
                               const Batch& batch, const BackwardOptions& opts = {}) {
    if (batch.size() == 0) throw DimensionError("backward: empty batch");
    if (batch.inputs.cols() != net.input_dim())
        throw DimensionError("backward: input dim mismatch");
    const auto slots = detail::index_adapters(net, adapters);
    const double n = static_cast<double>(batch.size());

    BackwardResult result;
    result.grads.layer_grads.resize(net.layers.size());
    result.grads.adapter_grad_a.resize(adapters.size());
    result.grads.adapter_grad_b.resize(adapters.size());
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        result.grads.adapter_grad_a[i] = Matrix(adapters[i].a.rows(), adapters[i].a.cols());
        result.grads.adapter_grad_b[i] = Matrix(adapters[i].b.rows(), adapters[i].b.cols());
    }

    detail::CaptureSink sink;
    if (opts.capture) {
        result.cache.captures.resize(net.layers.size());
        sink.enabled = true;
        sink.captures = &result.cache.captures;
        sink.cursor.assign(net.layers.size(), 0);
        const std::size_t rows = net.spec.kind == ArchKind::mlp
                                     ? batch.size()
                                     : batch.size() * net.spec.seq_len;
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            if (!net.layers[i].adapter_eligible) continue;
            result.cache.captures[i].a_rows = Matrix(rows, net.layers[i].d_in());
            result.cache.captures[i].g_rows = Matrix(rows, net.layers[i].d_out());
        }
    }

    auto want_full = [&](std::size_t layer_id) {
        return opts.full_matrix && net.layers[layer_id].adapter_eligible;
    };
    auto ensure_full = [&](std::size_t layer_id) -> Matrix& {
        Matrix& g = result.grads.layer_grads[layer_id];
        if (g.size() == 0)
            g = Matrix(net.layers[layer_id].d_out(), net.layers[layer_id].d_in());
        return g;
    };
    // Accumulate d(mean loss)/dW = dz^T a plus adapter-factor grads
    // dA = G A-side shortcut: dA += dz^T (a B), dB += a^T (dz A).
    auto accumulate_site = [&](std::size_t layer_id, const Matrix& a_rows, const Matrix& dz) {
        if (want_full(layer_id)) {
            Matrix& g = ensure_full(layer_id);
            Matrix contrib = matmul_tn(dz, a_rows);
            g += contrib;
        }
        if (slots[layer_id].has_adapter && slots[layer_id].adapter->rank() > 0) {
            const auto& ap = *slots[layer_id].adapter;
            const std::size_t idx = slots[layer_id].adapter_index;
            Matrix ab = matmul(a_rows, ap.b);  // rows x r
            Matrix da = matmul_tn(dz, ab);
            result.grads.adapter_grad_a[idx] += da;
            Matrix dza = matmul(dz, ap.a);     // rows x r
            Matrix db = matmul_tn(a_rows, dza);
            result.grads.adapter_grad_b[idx] += db;
        }
        detail::record_rows(sink, layer_id, a_rows, dz, n);
    };

    if (net.spec.kind == ArchKind::mlp) {
        detail::MlpPass pass;
        Matrix out;
        result.grads.loss = detail::mlp_forward(net, slots, batch, &pass, &out, &opts);
        Matrix dz = detail::loss_grad(out, batch, net.spec.loss);
        for (std::size_t li = net.layers.size(); li-- > 0;) {
            const auto& layer = net.layers[li];
            if (layer.act == Nonlinearity::relu || layer.act == Nonlinearity::gelu)
                detail::activation_backward(dz, pass.pre[li], layer.act);
            const Matrix& a_rows = li == 0 ? batch.inputs : pass.post[li - 1];
            if (layer.adapter_eligible) accumulate_site(li, a_rows, dz);
            if (li > 0) {
                dz = detail::linear_input_grad(
                    dz, layer, slots[li].has_adapter ? slots[li].adapter : nullptr,
                    detail::offset_for(&opts, li));
            }
        }
        result.cache.loss = result.grads.loss;
        return result;
    }

    // Transformer block: run per sample, accumulate across the batch.
    const auto& spec = net.spec;
    const std::size_t d = spec.d_model, heads = spec.heads, dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t nsize = batch.size();

    std::vector<detail::TransformerStash> stash(nsize);
    Matrix logits(nsize, spec.out_dim);
    std::vector<double> row;
    for (std::size_t s = 0; s < nsize; ++s) {
        detail::transformer_sample_forward(net, slots, batch, s, stash[s], row, &opts);
        for (std::size_t c = 0; c < row.size(); ++c) logits(s, c) = row[c];
    }
    ensure_finite(logits, "logits");
    double loss;
    if (net.classification())
        loss = detail::cross_entropy_inplace(logits, batch.labels);
    else
        loss = detail::mse(logits, batch.targets);
    result.grads.loss = loss;
    result.cache.loss = loss;
    Matrix dlogits = detail::loss_grad(logits, batch, spec.loss);

    auto ad = [&](std::size_t i) { return slots[i].has_adapter ? slots[i].adapter : nullptr; };

    for (std::size_t s = 0; s < nsize; ++s) {
        const auto& st = stash[s];
        // head (ineligible, no gradient wanted) -> pooled
        std::vector<double> dpooled(d, 0.0);
        const auto& head = net.layers[detail::kHead];
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < spec.out_dim; ++c) acc += head.weight(c, j) * dlogits(s, c);
            dpooled[j] = acc;
        }
        Matrix dx3(spec.seq_len, d);
        for (std::size_t t = 0; t < spec.seq_len; ++t)
            for (std::size_t j = 0; j < d; ++j)
                dx3(t, j) = dpooled[j] / static_cast<double>(spec.seq_len);

        // ffn branch
        accumulate_site(detail::kFfnOut, st.f1, dx3);
        Matrix df1 = detail::linear_input_grad(dx3, net.layers[detail::kFfnOut],
                                               ad(detail::kFfnOut),
                                               detail::offset_for(&opts, detail::kFfnOut));
        detail::activation_backward(df1, st.f1pre, Nonlinearity::gelu);
        accumulate_site(detail::kFfnIn, st.n2, df1);
        Matrix dn2 = detail::linear_input_grad(df1, net.layers[detail::kFfnIn],
                                               ad(detail::kFfnIn),
                                               detail::offset_for(&opts, detail::kFfnIn));
        Matrix dx2 = detail::layer_norm_backward(st.x2, st.ln2, dn2);
        dx2 += dx3;  // residual

        // attention branch
        accumulate_site(detail::kWo, st.o, dx2);
        Matrix do_ = detail::linear_input_grad(dx2, net.layers[detail::kWo], ad(detail::kWo),
                                               detail::offset_for(&opts, detail::kWo));
        Matrix dq(spec.seq_len, d), dk(spec.seq_len, d), dv(spec.seq_len, d);
        for (std::size_t h = 0; h < heads; ++h) {
            const Matrix& p = st.p[h];
            Matrix dp(spec.seq_len, spec.seq_len);
            for (std::size_t t = 0; t < spec.seq_len; ++t)
                for (std::size_t u = 0; u < spec.seq_len; ++u) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < dh; ++j)
                        acc += do_(t, h * dh + j) * st.v(u, h * dh + j);
                    dp(t, u) = acc;
                }
            for (std::size_t u = 0; u < spec.seq_len; ++u)
                for (std::size_t j = 0; j < dh; ++j) {
                    double acc = 0.0;
                    for (std::size_t t = 0; t < spec.seq_len; ++t)
                        acc += p(t, u) * do_(t, h * dh + j);
                    dv(u, h * dh + j) = acc;
                }
            // softmax rows: ds = p .* (dp - rowsum(dp .* p))
            Matrix ds(spec.seq_len, spec.seq_len);
            for (std::size_t t = 0; t < spec.seq_len; ++t) {
                double dot = 0.0;
                for (std::size_t u = 0; u < spec.seq_len; ++u) dot += dp(t, u) * p(t, u);
                for (std::size_t u = 0; u < spec.seq_len; ++u)
                    ds(t, u) = p(t, u) * (dp(t, u) - dot);
            }
            for (std::size_t t = 0; t < spec.seq_len; ++t)
                for (std::size_t j = 0; j < dh; ++j) {
                    double accq = 0.0;
                    for (std::size_t u = 0; u < spec.seq_len; ++u)
                        accq += ds(t, u) * st.k(u, h * dh + j);
                    dq(t, h * dh + j) = accq * scale;
                }
            for (std::size_t u = 0; u < spec.seq_len; ++u)
                for (std::size_t j = 0; j < dh; ++j) {
                    double acck = 0.0;
                    for (std::size_t t = 0; t < spec.seq_len; ++t)
                        acck += ds(t, u) * st.q(t, h * dh + j);
                    dk(u, h * dh + j) = acck * scale;
                }
        }
        accumulate_site(detail::kWq, st.n1, dq);
        accumulate_site(detail::kWk, st.n1, dk);
        accumulate_site(detail::kWv, st.n1, dv);
        // Input gradients are never consumed, so the pass stops at the first
        // layer norm.
    }
    return result;
}

/// Raw network outputs (logits for classification, predictions for
/// regression) without any loss: n x output_dim.
inline Matrix predict_logits(const BaseNetwork& net, const AdapterSet& adapters,
                             const Matrix& inputs) {
    if (inputs.rows() == 0) throw DimensionError("predict: empty input");
    if (inputs.cols() != net.input_dim())
        throw DimensionError("predict: input dim mismatch");
    const auto slots = detail::index_adapters(net, adapters);
    Batch batch;
    batch.inputs = inputs;
    if (net.spec.kind == ArchKind::mlp) {
        Matrix x = batch.inputs;
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            const auto& layer = net.layers[i];
            Matrix z =
                detail::apply_linear(x, layer, slots[i].has_adapter ? slots[i].adapter : nullptr);
            ensure_finite(z, "layer " + layer.name);
            if (layer.act == Nonlinearity::relu || layer.act == Nonlinearity::gelu)
                detail::apply_activation(z, layer.act);
            x = std::move(z);
        }
        return x;
    }
    Matrix logits(inputs.rows(), net.spec.out_dim);
    detail::TransformerStash st;
    std::vector<double> row;
    for (std::size_t s = 0; s < inputs.rows(); ++s) {
        detail::transformer_sample_forward(net, slots, batch, s, st, row, nullptr);
        for (std::size_t c = 0; c < row.size(); ++c) logits(s, c) = row[c];
    }
    ensure_finite(logits, "logits");
    return logits;
}

/// Fold adapters into the base weights: W <- W + A B^T. The returned network
/// has the same architecture and no attached adapters.
inline BaseNetwork merge_adapters(const BaseNetwork& net, const AdapterSet& adapters) {
    BaseNetwork merged = net;
    const auto slots = detail::index_adapters(net, adapters);
    for (std::size_t i = 0; i < merged.layers.size(); ++i) {
        if (!slots[i].has_adapter || slots[i].adapter->rank() == 0) continue;
        Matrix update = matmul_nt(slots[i].adapter->a, slots[i].adapter->b);
        merged.layers[i].weight += update;
    }
    return merged;
}

}  // namespace ctrlora
