#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "segtrain/common.hpp"
#include "segtrain/matrix.hpp"
#include "segtrain/partition.hpp"
#include "segtrain/tape.hpp"

namespace segtrain {

// ----- parameters -----

struct ParamStore {
    struct Entry {
        std::string name;
        Mat value;
        Mat grad;
        Mat m, v;       // Adam moments
        long long step = 0;
    };
    std::vector<Entry> entries;

    Entry& add(const std::string& name, int rows, int cols) {
        entries.push_back(Entry{name, Mat(rows, cols), Mat(rows, cols), Mat(rows, cols),
                                Mat(rows, cols), 0});
        return entries.back();
    }
    Entry& by_name(const std::string& name) {
        for (auto& e : entries)
            if (e.name == name) return e;
        throw ConfigError("unknown parameter: " + name);
    }
    const Entry& by_name(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return e;
        throw ConfigError("unknown parameter: " + name);
    }
    void zero_grads() {
        for (auto& e : entries)
            for (double& g : e.grad.a) g = 0.0;
    }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.value.size();
        return n;
    }
    // order-independent content hash (used to prove a stage left params alone)
    std::uint64_t value_hash(const std::string& prefix = "") const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& e : entries) {
            if (e.name.rfind(prefix, 0) != 0) continue;
            h = splitmix64(h ^ fnv1a64(e.name));
            for (double v : e.value.a) {
                std::uint64_t bits;
                static_assert(sizeof(bits) == sizeof(v));
                std::memcpy(&bits, &v, sizeof(bits));
                h = splitmix64(h ^ bits);
            }
        }
        return h;
    }
};

struct AdamConfig {
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled, applied at the step
};

// One Adam update over params whose name matches the filter (empty = all).
// Aborts on non-finite gradients and guarantees finite parameters afterwards.
inline void adam_step(ParamStore& params, const AdamConfig& cfg,
                      const std::string& prefix = "") {
    for (auto& e : params.entries) {
        if (e.name.rfind(prefix, 0) != 0) continue;
        if (!e.grad.all_finite())
            throw std::runtime_error("non-finite gradient in parameter " + e.name);
        ++e.step;
        double b1t = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
        double b2t = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
        for (std::size_t i = 0; i < e.value.a.size(); ++i) {
            double g = e.grad.a[i];
            e.m.a[i] = cfg.beta1 * e.m.a[i] + (1.0 - cfg.beta1) * g;
            e.v.a[i] = cfg.beta2 * e.v.a[i] + (1.0 - cfg.beta2) * g * g;
            double mhat = e.m.a[i] / b1t;
            double vhat = e.v.a[i] / b2t;
            double upd = cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            if (cfg.weight_decay != 0.0) upd += cfg.lr * cfg.weight_decay * e.value.a[i];
            e.value.a[i] -= upd;
        }
        if (!e.value.all_finite())
            throw std::runtime_error("non-finite parameter after update: " + e.name);
    }
}

// ----- model -----

struct ModelConfig {
    int feature_width = 4;
    int hidden = 24;      // embedding width
    int mp_layers = 2;    // message-passing depth
    int head_hidden = 1;  // hidden layers in the prediction head
    int out_dim = 2;      // classes, or 1 for ranking scores

    void validate() const {
        if (feature_width < 1 || hidden < 1 || mp_layers < 0 || head_hidden < 0 || out_dim < 1)
            throw ConfigError("model dimensions must be positive");
    }
};

// Segment encoder: linear pre-layer, mp_layers rounds of
// relu(W * [self || neighbor-mean]), a per-node post layer, then mean readout
// over the segment's nodes. Prediction head: MLP on the aggregated embedding.
struct Model {
    ModelConfig cfg;
    ParamStore params;

    static Model build(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        auto lin = [&](const std::string& name, int in, int out) {
            auto& w = m.params.add(name + ".w", in, out);
            Rng rng = derived_rng(seed, "init", fnv1a64(name));
            double bound = std::sqrt(6.0 / (in + out));
            for (double& v : w.value.a) v = rng.uniform(-bound, bound);
            auto& b = m.params.add(name + ".b", 1, out);
            // Start rectified units slightly active so an unlucky early
            // optimization phase cannot silence a whole layer for good.
            if (name.rfind("bb.", 0) == 0)
                for (double& v : b.value.a) v = 0.1;
        };
        lin("bb.pre", cfg.feature_width, cfg.hidden);
        for (int l = 0; l < cfg.mp_layers; ++l)
            lin("bb.mp" + std::to_string(l), 2 * cfg.hidden, cfg.hidden);
        lin("bb.post", cfg.hidden, cfg.hidden);
        for (int l = 0; l < cfg.head_hidden; ++l)
            lin("head.h" + std::to_string(l), cfg.hidden, cfg.hidden);
        lin("head.out", cfg.hidden, cfg.out_dim);
        return m;
    }
};

// The same forward written once and instantiated twice: TapeCtx records for
// backward, EvalCtx just computes. Both call the matrix.hpp kernels in the
// same order, so values agree bit for bit.

struct TapeCtx {
    Tape* tape;
    ParamStore* params;
    using Ref = Tape::Id;

    Ref feat(const Mat& m) { return tape->constant(m); }
    Ref weight(ParamStore::Entry& e) { return tape->param(e.value, &e.grad); }
    Ref linear(Ref x, const std::string& name) {
        auto& w = params->by_name(name + ".w");
        auto& b = params->by_name(name + ".b");
        return tape->add_row(tape->matmul(x, weight(w)), weight(b));
    }
    Ref relu(Ref x) { return tape->relu(x); }
    Ref hconcat(Ref a, Ref b) { return tape->hconcat(a, b); }
    Ref neighbor_mean(Ref x, const Csr& adj) { return tape->neighbor_mean(x, &adj); }
    Ref row_mean(Ref x) { return tape->row_mean(x); }
};

struct EvalCtx {
    const ParamStore* params;
    using Ref = Mat;

    Ref feat(const Mat& m) { return m; }
    Ref linear(const Ref& x, const std::string& name) {
        return add_row(matmul(x, params->by_name(name + ".w").value),
                       params->by_name(name + ".b").value);
    }
    Ref relu(const Ref& x) { return segtrain::relu(x); }
    Ref hconcat(const Ref& a, const Ref& b) { return segtrain::hconcat(a, b); }
    Ref neighbor_mean(const Ref& x, const Csr& adj) { return apply_neighbor_mean(x, adj); }
    Ref row_mean(const Ref& x) { return segtrain::row_mean(x); }
};

// features (n x d_in) + adjacency -> 1 x hidden segment embedding
template <class Ctx>
typename Ctx::Ref embed_nodes(Ctx& cx, const Model& m, const Mat& features, const Csr& adj) {
    auto x = cx.relu(cx.linear(cx.feat(features), "bb.pre"));
    for (int l = 0; l < m.cfg.mp_layers; ++l) {
        auto nb = cx.neighbor_mean(x, adj);
        x = cx.relu(cx.linear(cx.hconcat(x, nb), "bb.mp" + std::to_string(l)));
    }
    x = cx.relu(cx.linear(x, "bb.post"));
    return cx.row_mean(x);
}

// 1 x hidden aggregated embedding -> 1 x out_dim prediction
template <class Ctx>
typename Ctx::Ref head_forward(Ctx& cx, const Model& m, typename Ctx::Ref embedding) {
    auto x = embedding;
    for (int l = 0; l < m.cfg.head_hidden; ++l)
        x = cx.relu(cx.linear(x, "head.h" + std::to_string(l)));
    return cx.linear(x, "head.out");
}

// grad-enabled segment forward; registers the segment's activations with the
// tape budget.
inline Tape::Id forward_segment(Tape& tape, Model& m, const Segment& seg) {
    tape.note_retained(seg.node_count(), "segment forward");
    TapeCtx cx{&tape, &m.params};
    return embed_nodes(cx, m, seg.features, seg.adj);
}

// grad-disabled forward: nothing retained, same values
inline Mat forward_segment_nograd(const Model& m, const Segment& seg) {
    EvalCtx cx{&m.params};
    return embed_nodes(cx, m, seg.features, seg.adj);
}

inline Mat head_forward_nograd(const Model& m, const Mat& embedding) {
    EvalCtx cx{&m.params};
    return head_forward(cx, m, embedding);
}

// optimizer entry point; Adam with decoupled weight decay is the only one
inline void optimizer_step(ParamStore& params, const AdamConfig& cfg,
                           const std::string& prefix = "") {
    adam_step(params, cfg, prefix);
}

}  // namespace segtrain
