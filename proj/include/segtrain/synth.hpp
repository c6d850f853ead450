#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "segtrain/common.hpp"
#include "segtrain/graph.hpp"

namespace segtrain {

// ----- classification family -----
//
// Community graphs whose class is the band of the global marked-node
// fraction. The fraction is drawn anywhere inside the class band (so graphs
// near a band edge need a precise whole-graph estimate), and each
// community's own marked fraction scatters widely around that target, so one
// community (and hence one segment) overlaps several classes and the label
// only emerges from averaging across the whole graph.

struct ClassificationSpec {
    int num_graphs = 300;
    int num_classes = 5;
    int min_nodes = 200;
    int max_nodes = 2000;
    int community_target = 150;      // aimed community size
    double intra_edge_factor = 3.0;  // intra-community edges per node
    int bridge_edges = 2;            // edges between adjacent communities
    double low_fraction = 0.1;
    double high_fraction = 0.9;
    double community_spread = 0.35;  // per-community deviation from the graph target
    double band_margin = 0.1;        // share of band width kept clear at each edge
    int feature_width = 4;
    std::uint64_t seed = 1;

    void validate() const {
        if (num_graphs < 1 || num_classes < 2) throw ConfigError("need graphs and >= 2 classes");
        if (min_nodes < 20 || max_nodes < min_nodes) throw ConfigError("bad node range");
        if (community_target < 10) throw ConfigError("community_target too small");
        if (!(low_fraction >= 0.0 && high_fraction <= 1.0 && low_fraction < high_fraction))
            throw ConfigError("need 0 <= low_fraction < high_fraction <= 1");
        if (!(community_spread >= 0.0 && community_spread <= 1.0))
            throw ConfigError("community_spread must be in [0, 1]");
        if (!(band_margin >= 0.0 && band_margin < 0.5))
            throw ConfigError("band_margin must be in [0, 0.5)");
        if (feature_width < 3) throw ConfigError("feature_width must be >= 3");
    }

    double band_width() const { return (high_fraction - low_fraction) / num_classes; }

    // center of class k's marked-fraction band
    double class_fraction(int k) const {
        double rho = (2.0 * k + 1.0) / (2.0 * num_classes);
        return low_fraction + (high_fraction - low_fraction) * rho;
    }
};

// whole-graph labeling rule: which equal-width band of [low, high] the
// marked fraction falls in (clamped at the ends)
inline int fraction_class(double fraction, const ClassificationSpec& spec) {
    int k = static_cast<int>(std::floor((fraction - spec.low_fraction) / spec.band_width()));
    return std::clamp(k, 0, spec.num_classes - 1);
}

// A node is "marked" when its first two feature channels agree in sign.
// Each channel alone is symmetric around zero in both populations, so the
// mark is invisible to any linear readout of mean-pooled raw features; a
// model has to form the channel interaction per node before pooling.
inline bool node_marked(const double* x) { return x[0] * x[1] > 0.0; }

// fraction of marked nodes (whole-graph counting oracle)
inline double marked_fraction(const Mat& features) {
    if (features.rows == 0) return 0.0;
    int m = 0;
    for (int i = 0; i < features.rows; ++i)
        if (node_marked(features.row(i))) ++m;
    return static_cast<double>(m) / features.rows;
}

inline Dataset generate_classification(const ClassificationSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.task = Task::classification;
    ds.num_classes = spec.num_classes;
    ds.feature_width = spec.feature_width;
    for (int gi = 0; gi < spec.num_graphs; ++gi) {
        Rng rng = derived_rng(spec.seed, "cls-graph", static_cast<std::uint64_t>(gi));
        int cls = gi % spec.num_classes;  // exact balance up to one graph
        int n = spec.min_nodes + rng.below_int(spec.max_nodes - spec.min_nodes + 1);

        int C = std::max(spec.num_classes,
                         static_cast<int>(std::lround(static_cast<double>(n) / spec.community_target)));
        std::vector<int> sizes(static_cast<std::size_t>(C));
        int floor_sz = std::max(1, std::min(10, n / C));
        int left = n;
        for (int c = 0; c < C; ++c) {
            int base = left / (C - c);
            int jitter = c + 1 == C ? 0 : static_cast<int>(std::lround(base * rng.uniform(-0.2, 0.2)));
            sizes[static_cast<std::size_t>(c)] = std::max(floor_sz, base + jitter);
            left -= sizes[static_cast<std::size_t>(c)];
        }
        // fold any remainder into the last community
        sizes.back() += left;
        if (sizes.back() < floor_sz) {
            sizes[sizes.size() - 2] += sizes.back() - floor_sz;
            sizes.back() = floor_sz;
        }
        std::vector<int> start(static_cast<std::size_t>(C) + 1, 0);
        for (int c = 0; c < C; ++c)
            start[static_cast<std::size_t>(c) + 1] = start[static_cast<std::size_t>(c)] +
                                                     sizes[static_cast<std::size_t>(c)];

        // target fraction anywhere inside the class band (margin keeps the
        // rounded count safely in-band), scattered over communities, global
        // count then pinned exactly
        double W = spec.band_width();
        double lo_f = spec.low_fraction + (cls + spec.band_margin) * W;
        double hi_f = spec.low_fraction + (cls + 1.0 - spec.band_margin) * W;
        double target = rng.uniform(lo_f, hi_f);
        int want = static_cast<int>(std::lround(target * n));
        // rounding on very small graphs could slip out of the band; nudge back
        while (want < n && fraction_class(static_cast<double>(want) / n, spec) < cls) ++want;
        while (want > 0 && fraction_class(static_cast<double>(want) / n, spec) > cls) --want;
        std::vector<int> marks(static_cast<std::size_t>(C));
        int got = 0;
        for (int c = 0; c < C; ++c) {
            double lvl = std::clamp(target + rng.uniform(-spec.community_spread, spec.community_spread),
                                    0.02, 0.98);
            marks[static_cast<std::size_t>(c)] =
                std::clamp(static_cast<int>(std::lround(lvl * sizes[static_cast<std::size_t>(c)])), 0,
                           sizes[static_cast<std::size_t>(c)]);
            got += marks[static_cast<std::size_t>(c)];
        }
        for (int guard = 0; got != want && guard < 4 * n; ++guard) {
            int c = rng.below_int(C);
            if (got < want && marks[static_cast<std::size_t>(c)] < sizes[static_cast<std::size_t>(c)]) {
                ++marks[static_cast<std::size_t>(c)];
                ++got;
            } else if (got > want && marks[static_cast<std::size_t>(c)] > 0) {
                --marks[static_cast<std::size_t>(c)];
                --got;
            }
        }
        if (got != want) throw std::logic_error("mark allocation failed");

        std::vector<char> marked(static_cast<std::size_t>(n), 0);
        for (int c = 0; c < C; ++c) {
            int s0 = start[static_cast<std::size_t>(c)], sz = sizes[static_cast<std::size_t>(c)];
            std::vector<int> local(static_cast<std::size_t>(sz));
            std::iota(local.begin(), local.end(), 0);
            rng.shuffle(local);
            for (int i = 0; i < marks[static_cast<std::size_t>(c)]; ++i)
                marked[static_cast<std::size_t>(s0 + local[static_cast<std::size_t>(i)])] = 1;
        }

        Graph g;
        g.id = gi;
        g.group = gi;
        g.features = Mat(n, spec.feature_width);
        // Marked nodes lean slightly positive on channel 0 (a weak linear
        // cue that gets optimization started); the exact mark is the sign
        // agreement of channels 0 and 1, which only a learned channel
        // interaction can read out precisely.
        for (int v = 0; v < n; ++v) {
            bool mk = marked[static_cast<std::size_t>(v)] != 0;
            double s = rng.bernoulli(mk ? 0.65 : 0.5) ? 1.0 : -1.0;
            double a = rng.uniform(0.5, 1.5), b = rng.uniform(0.5, 1.5);
            g.features.at(v, 0) = s * a;
            g.features.at(v, 1) = mk ? s * b : -s * b;
            for (int f = 2; f + 1 < spec.feature_width; ++f) g.features.at(v, f) = rng.normal();
            g.features.at(v, spec.feature_width - 1) = 1.0;
        }

        std::vector<std::pair<int, int>> edges;
        for (int c = 0; c < C; ++c) {
            int s0 = start[static_cast<std::size_t>(c)], sz = sizes[static_cast<std::size_t>(c)];
            int m = static_cast<int>(std::lround(spec.intra_edge_factor * sz));
            for (int e = 0; e < m; ++e) {
                int u = s0 + rng.below_int(sz), v = s0 + rng.below_int(sz);
                if (u != v) edges.emplace_back(u, v);
            }
            if (C > 1) {
                int c2 = (c + 1) % C;
                for (int e = 0; e < spec.bridge_edges; ++e)
                    edges.emplace_back(s0 + rng.below_int(sz),
                                       start[static_cast<std::size_t>(c2)] +
                                           rng.below_int(sizes[static_cast<std::size_t>(c2)]));
            }
        }
        g.adj = build_csr(n, edges);

        g.label.kind = Task::classification;
        g.label.class_index = fraction_class(marked_fraction(g.features), spec);
        if (g.label.class_index != cls)
            throw std::logic_error("generated fraction fell outside its class band");
        ds.graphs.push_back(std::move(g));
    }
    return ds;
}

// ----- ranking family -----
//
// Base graphs with per-node features; each configuration perturbs the
// features, and the target is a fixed nonlinear per-node function summed over
// the whole node set. Configurations of one base graph share a group.

struct RankingSpec {
    int num_base_graphs = 40;
    int configs_per_graph = 6;
    int min_nodes = 100;
    int max_nodes = 600;
    int community_target = 120;
    double intra_edge_factor = 3.0;
    int bridge_edges = 2;
    int feature_width = 4;
    double perturb = 0.5;  // half-width of per-config feature shifts
    std::uint64_t seed = 1;

    void validate() const {
        if (num_base_graphs < 1 || configs_per_graph < 2)
            throw ConfigError("need base graphs and >= 2 configs each");
        if (min_nodes < 20 || max_nodes < min_nodes) throw ConfigError("bad node range");
        if (feature_width < 3) throw ConfigError("feature_width must be >= 3");
    }
};

// per-node cost whose whole-graph sum is the ranking target
inline double node_cost(const double* x) {
    return (x[0] - 0.4 * x[1] + 0.1 > 0.0 ? x[0] - 0.4 * x[1] + 0.1 : 0.0) + 0.3 * x[2];
}

inline double ranking_target(const Mat& features) {
    double y = 0.0;
    for (int i = 0; i < features.rows; ++i) y += node_cost(features.row(i));
    return y;
}

inline Dataset generate_ranking(const RankingSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.task = Task::regression_ranking;
    ds.feature_width = spec.feature_width;
    for (int b = 0; b < spec.num_base_graphs; ++b) {
        Rng rng = derived_rng(spec.seed, "rank-base", static_cast<std::uint64_t>(b));
        int n = spec.min_nodes + rng.below_int(spec.max_nodes - spec.min_nodes + 1);
        int C = std::max(1, static_cast<int>(std::lround(static_cast<double>(n) / spec.community_target)));
        std::vector<int> sizes(static_cast<std::size_t>(C), n / C);
        for (int c = 0; c < n % C; ++c) ++sizes[static_cast<std::size_t>(c)];
        std::vector<int> start(static_cast<std::size_t>(C) + 1, 0);
        for (int c = 0; c < C; ++c)
            start[static_cast<std::size_t>(c) + 1] =
                start[static_cast<std::size_t>(c)] + sizes[static_cast<std::size_t>(c)];

        std::vector<std::pair<int, int>> edges;
        for (int c = 0; c < C; ++c) {
            int s0 = start[static_cast<std::size_t>(c)], sz = sizes[static_cast<std::size_t>(c)];
            int m = static_cast<int>(std::lround(spec.intra_edge_factor * sz));
            for (int e = 0; e < m; ++e) {
                int u = s0 + rng.below_int(sz), v = s0 + rng.below_int(sz);
                if (u != v) edges.emplace_back(u, v);
            }
            if (C > 1) {
                int c2 = (c + 1) % C;
                for (int e = 0; e < spec.bridge_edges; ++e)
                    edges.emplace_back(s0 + rng.below_int(sz),
                                       start[static_cast<std::size_t>(c2)] +
                                           rng.below_int(sizes[static_cast<std::size_t>(c2)]));
            }
        }
        Csr adj = build_csr(n, edges);

        Mat base(n, spec.feature_width);
        for (int v = 0; v < n; ++v) {
            for (int f = 0; f + 1 < spec.feature_width; ++f) base.at(v, f) = rng.uniform(-1.0, 1.0);
            base.at(v, spec.feature_width - 1) = 1.0;
        }

        for (int c = 0; c < spec.configs_per_graph; ++c) {
            Rng crng = derived_rng(spec.seed, "rank-config", static_cast<std::uint64_t>(b),
                                   static_cast<std::uint64_t>(c));
            Graph g;
            g.id = b * spec.configs_per_graph + c;
            g.group = b;
            g.adj = adj;
            g.features = base;
            for (int v = 0; v < n; ++v)
                for (int f = 0; f + 1 < spec.feature_width; ++f)
                    g.features.at(v, f) += crng.uniform(-spec.perturb, spec.perturb);
            g.label.kind = Task::regression_ranking;
            g.label.target = ranking_target(g.features);
            ds.graphs.push_back(std::move(g));
        }
    }
    return ds;
}

// ----- default splits -----

// classification: stratified by class; ranking: whole groups stay together
inline Splits default_splits(const Dataset& ds, double train_frac, double val_frac,
                             std::uint64_t seed) {
    if (train_frac <= 0.0 || val_frac < 0.0 || train_frac + val_frac >= 1.0)
        throw ConfigError("split fractions must satisfy 0 < train, 0 <= val, train+val < 1");
    Splits sp;
    auto deal = [&](std::vector<int>& ids) {
        std::size_t n = ids.size();
        std::size_t ntrain = static_cast<std::size_t>(std::lround(train_frac * n));
        std::size_t nval = static_cast<std::size_t>(std::lround(val_frac * n));
        for (std::size_t i = 0; i < n; ++i) {
            if (i < ntrain)
                sp.train.push_back(ids[i]);
            else if (i < ntrain + nval)
                sp.val.push_back(ids[i]);
            else
                sp.test.push_back(ids[i]);
        }
    };
    if (ds.task == Task::classification) {
        for (int k = 0; k < ds.num_classes; ++k) {
            std::vector<int> ids;
            for (const auto& g : ds.graphs)
                if (g.label.class_index == k) ids.push_back(g.id);
            Rng rng = derived_rng(seed, "split", static_cast<std::uint64_t>(k));
            rng.shuffle(ids);
            deal(ids);
        }
    } else {
        std::vector<int> groups;
        for (const auto& g : ds.graphs)
            if (std::find(groups.begin(), groups.end(), g.group) == groups.end())
                groups.push_back(g.group);
        Rng rng = derived_rng(seed, "split");
        rng.shuffle(groups);
        std::size_t n = groups.size();
        std::size_t ntrain = static_cast<std::size_t>(std::lround(train_frac * n));
        std::size_t nval = static_cast<std::size_t>(std::lround(val_frac * n));
        for (std::size_t i = 0; i < n; ++i) {
            auto* dst = i < ntrain ? &sp.train : (i < ntrain + nval ? &sp.val : &sp.test);
            for (const auto& g : ds.graphs)
                if (g.group == groups[i]) dst->push_back(g.id);
        }
    }
    std::sort(sp.train.begin(), sp.train.end());
    std::sort(sp.val.begin(), sp.val.end());
    std::sort(sp.test.begin(), sp.test.end());
    return sp;
}

}  // namespace segtrain
