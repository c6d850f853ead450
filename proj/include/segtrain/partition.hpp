#pragma once

#include <algorithm>
#include <deque>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "segtrain/graph.hpp"

namespace segtrain {

enum class PartitionMethod {
    random_edge_cut,
    locality_edge_cut,
    random_vertex_cut,
    degree_hash_vertex_cut,
};

inline std::string to_string(PartitionMethod m) {
    switch (m) {
        case PartitionMethod::random_edge_cut: return "random-edge-cut";
        case PartitionMethod::locality_edge_cut: return "locality-edge-cut";
        case PartitionMethod::random_vertex_cut: return "random-vertex-cut";
        case PartitionMethod::degree_hash_vertex_cut: return "degree-hash-vertex-cut";
    }
    return "?";
}

inline PartitionMethod partition_method_from(const std::string& s) {
    if (s == "random-edge-cut") return PartitionMethod::random_edge_cut;
    if (s == "locality-edge-cut") return PartitionMethod::locality_edge_cut;
    if (s == "random-vertex-cut") return PartitionMethod::random_vertex_cut;
    if (s == "degree-hash-vertex-cut") return PartitionMethod::degree_hash_vertex_cut;
    throw ConfigError("unknown partition method: " + s);
}

// One piece of a parent graph. nodes holds parent indices (sorted); adj and
// features are local to the segment.
struct Segment {
    int segment_id = 0;
    std::vector<int> nodes;
    Csr adj;
    Mat features;

    int node_count() const { return static_cast<int>(nodes.size()); }
};

struct SegmentedGraph {
    int parent_id = 0;
    int group = 0;
    Label label;
    int parent_nodes = 0;
    int parent_edges = 0;
    std::vector<Segment> segments;

    int segment_count() const { return static_cast<int>(segments.size()); }
    int max_segment_nodes() const {
        int m = 0;
        for (const auto& s : segments) m = std::max(m, s.node_count());
        return m;
    }
};

struct PartitionStats {
    int segment_count = 0;
    std::vector<int> sizes;
    double edge_cut_ratio = 0.0;      // dropped parent edges / parent edges
    double replication_factor = 1.0;  // sum of segment sizes / parent nodes
};

namespace detail {

// Materializes segments from a node-assignment (edge-cut: every parent edge
// with both endpoints in one segment stays; cross edges drop).
inline std::vector<Segment> segments_from_assignment(const Graph& g,
                                                     const std::vector<std::vector<int>>& groups) {
    std::vector<int> owner(static_cast<std::size_t>(g.node_count()), -1);
    for (std::size_t s = 0; s < groups.size(); ++s)
        for (int v : groups[s]) owner[static_cast<std::size_t>(v)] = static_cast<int>(s);
    std::vector<Segment> out;
    for (std::size_t s = 0; s < groups.size(); ++s) {
        Segment seg;
        seg.segment_id = static_cast<int>(s);
        seg.nodes = groups[s];
        std::sort(seg.nodes.begin(), seg.nodes.end());
        std::unordered_map<int, int> local;
        local.reserve(seg.nodes.size());
        for (std::size_t i = 0; i < seg.nodes.size(); ++i)
            local[seg.nodes[i]] = static_cast<int>(i);
        std::vector<std::pair<int, int>> edges;
        for (int u : seg.nodes)
            for (int v : g.adj.neighbors(u))
                if (u < v && owner[static_cast<std::size_t>(v)] == static_cast<int>(s))
                    edges.emplace_back(local[u], local[v]);
        seg.adj = build_csr(seg.node_count(), edges);
        seg.features = Mat(seg.node_count(), g.features.cols);
        for (int i = 0; i < seg.node_count(); ++i)
            for (int k = 0; k < g.features.cols; ++k)
                seg.features.at(i, k) = g.features.at(seg.nodes[static_cast<std::size_t>(i)], k);
        out.push_back(std::move(seg));
    }
    return out;
}

// Materializes segments from an edge-assignment (vertex-cut: nodes replicate
// wherever their edges land). leftover nodes land round-robin afterwards.
inline std::vector<Segment> segments_from_edge_assignment(
    const Graph& g, const std::vector<std::vector<std::pair<int, int>>>& edge_groups, int cap) {
    std::vector<std::vector<int>> node_groups(edge_groups.size());
    std::vector<std::vector<std::pair<int, int>>> kept(edge_groups.size());
    for (std::size_t s = 0; s < edge_groups.size(); ++s) {
        std::vector<int> nodes;
        for (auto [u, v] : edge_groups[s]) {
            nodes.push_back(u);
            nodes.push_back(v);
        }
        std::sort(nodes.begin(), nodes.end());
        nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
        node_groups[s] = std::move(nodes);
        kept[s] = edge_groups[s];
    }

    // cover nodes that touched no edge
    std::vector<char> covered(static_cast<std::size_t>(g.node_count()), 0);
    for (const auto& ns : node_groups)
        for (int v : ns) covered[static_cast<std::size_t>(v)] = 1;
    std::size_t cursor = 0;
    for (int v = 0; v < g.node_count(); ++v) {
        if (covered[static_cast<std::size_t>(v)]) continue;
        bool placed = false;
        for (std::size_t tries = 0; tries < node_groups.size() && !placed; ++tries) {
            std::size_t s = (cursor + tries) % node_groups.size();
            if (static_cast<int>(node_groups[s].size()) < cap) {
                node_groups[s].push_back(v);
                cursor = (s + 1) % node_groups.size();
                placed = true;
            }
        }
        if (!placed) {
            node_groups.push_back({v});
            kept.push_back({});
        }
    }

    // drop segments that ended up empty
    std::vector<Segment> out;
    for (std::size_t s = 0; s < node_groups.size(); ++s) {
        if (node_groups[s].empty()) continue;
        Segment seg;
        seg.segment_id = static_cast<int>(out.size());
        seg.nodes = node_groups[s];
        std::sort(seg.nodes.begin(), seg.nodes.end());
        std::unordered_map<int, int> local;
        local.reserve(seg.nodes.size());
        for (std::size_t i = 0; i < seg.nodes.size(); ++i)
            local[seg.nodes[i]] = static_cast<int>(i);
        std::vector<std::pair<int, int>> edges;
        edges.reserve(kept[s].size());
        for (auto [u, v] : kept[s]) edges.emplace_back(local[u], local[v]);
        seg.adj = build_csr(seg.node_count(), edges);
        seg.features = Mat(seg.node_count(), g.features.cols);
        for (int i = 0; i < seg.node_count(); ++i)
            for (int k = 0; k < g.features.cols; ++k)
                seg.features.at(i, k) = g.features.at(seg.nodes[static_cast<std::size_t>(i)], k);
        out.push_back(std::move(seg));
    }
    return out;
}

inline std::vector<std::vector<int>> random_node_groups(const Graph& g, int cap, Rng& rng) {
    int n = g.node_count();
    int target = (n + cap - 1) / cap;
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<std::vector<int>> groups(static_cast<std::size_t>(target));
    // deal into equal chunks; first (n % target) groups get one extra
    int base = n / target, extra = n % target;
    std::size_t pos = 0;
    for (int s = 0; s < target; ++s) {
        int take = base + (s < extra ? 1 : 0);
        for (int i = 0; i < take; ++i) groups[static_cast<std::size_t>(s)].push_back(perm[pos++]);
    }
    return groups;
}

// farthest-point seeds, then balanced multi-source BFS growth. The smallest
// growable segment expands next, so sizes stay even; when every frontier
// stalls with nodes left (disconnected parents), the smallest open segment
// restarts from the lowest unassigned node.
inline std::vector<std::vector<int>> bfs_node_groups(const Graph& g, int cap, Rng& rng) {
    int n = g.node_count();
    int target = (n + cap - 1) / cap;
    std::vector<int> owner(static_cast<std::size_t>(n), -1);

    std::vector<int> seeds;
    seeds.push_back(rng.below_int(n));
    std::vector<int> dist(static_cast<std::size_t>(n), -1);
    for (int s = 1; s < target; ++s) {
        std::fill(dist.begin(), dist.end(), -1);
        std::deque<int> q;
        for (int v : seeds) {
            dist[static_cast<std::size_t>(v)] = 0;
            q.push_back(v);
        }
        while (!q.empty()) {
            int u = q.front();
            q.pop_front();
            for (int v : g.adj.neighbors(u))
                if (dist[static_cast<std::size_t>(v)] < 0) {
                    dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
                    q.push_back(v);
                }
        }
        int best = -1, best_d = -1;
        for (int v = 0; v < n; ++v) {
            bool taken = std::find(seeds.begin(), seeds.end(), v) != seeds.end();
            int d = dist[static_cast<std::size_t>(v)] < 0 ? n + 1 : dist[static_cast<std::size_t>(v)];
            if (!taken && d > best_d) {
                best_d = d;
                best = v;
            }
        }
        seeds.push_back(best);
    }

    std::vector<std::vector<int>> groups(static_cast<std::size_t>(target));
    std::vector<std::deque<int>> frontier(static_cast<std::size_t>(target));
    for (int s = 0; s < target; ++s) {
        owner[static_cast<std::size_t>(seeds[static_cast<std::size_t>(s)])] = s;
        groups[static_cast<std::size_t>(s)].push_back(seeds[static_cast<std::size_t>(s)]);
        for (int v : g.adj.neighbors(seeds[static_cast<std::size_t>(s)]))
            frontier[static_cast<std::size_t>(s)].push_back(v);
    }
    int assigned = target;
    int next_unassigned = 0;
    while (assigned < n) {
        // smallest open segment with a live frontier; ties to lowest id
        int pick = -1;
        for (int s = 0; s < target; ++s) {
            if (static_cast<int>(groups[static_cast<std::size_t>(s)].size()) >= cap) continue;
            if (frontier[static_cast<std::size_t>(s)].empty()) continue;
            if (pick < 0 || groups[static_cast<std::size_t>(s)].size() <
                                 groups[static_cast<std::size_t>(pick)].size())
                pick = s;
        }
        if (pick < 0) {
            // all frontiers stalled: restart smallest open segment elsewhere
            for (int s = 0; s < target; ++s) {
                if (static_cast<int>(groups[static_cast<std::size_t>(s)].size()) >= cap) continue;
                if (pick < 0 || groups[static_cast<std::size_t>(s)].size() <
                                     groups[static_cast<std::size_t>(pick)].size())
                    pick = s;
            }
            while (owner[static_cast<std::size_t>(next_unassigned)] >= 0) ++next_unassigned;
            frontier[static_cast<std::size_t>(pick)].push_back(next_unassigned);
        }
        auto& q = frontier[static_cast<std::size_t>(pick)];
        int v = q.front();
        q.pop_front();
        if (owner[static_cast<std::size_t>(v)] >= 0) continue;
        owner[static_cast<std::size_t>(v)] = pick;
        groups[static_cast<std::size_t>(pick)].push_back(v);
        ++assigned;
        for (int u : g.adj.neighbors(v))
            if (owner[static_cast<std::size_t>(u)] < 0) q.push_back(u);
    }
    return groups;
}

inline std::vector<std::vector<std::pair<int, int>>> random_edge_groups(const Graph& g, int cap,
                                                                        Rng& rng) {
    auto edges = edge_pairs(g.adj);
    if (!edges.empty() && cap < 2)
        throw ConfigError("vertex-cut needs cap >= 2 to hold an edge");
    int n = g.node_count();
    int target = (n + cap - 1) / cap;
    std::vector<std::vector<std::pair<int, int>>> groups(static_cast<std::size_t>(target));
    std::vector<std::unordered_map<int, char>> members(static_cast<std::size_t>(target));
    rng.shuffle(edges);
    std::vector<int> feasible;
    for (auto [u, v] : edges) {
        feasible.clear();
        for (std::size_t s = 0; s < groups.size(); ++s) {
            int extra = (members[s].count(u) ? 0 : 1) + (members[s].count(v) ? 0 : 1);
            if (static_cast<int>(members[s].size()) + extra <= cap)
                feasible.push_back(static_cast<int>(s));
        }
        int s;
        if (feasible.empty()) {
            groups.emplace_back();
            members.emplace_back();
            s = static_cast<int>(groups.size()) - 1;
        } else {
            s = feasible[static_cast<std::size_t>(rng.below(feasible.size()))];
        }
        groups[static_cast<std::size_t>(s)].emplace_back(u, v);
        members[static_cast<std::size_t>(s)][u] = 1;
        members[static_cast<std::size_t>(s)][v] = 1;
    }
    return groups;
}

inline std::vector<std::vector<std::pair<int, int>>> degree_hash_edge_groups(const Graph& g,
                                                                             int cap,
                                                                             std::uint64_t seed) {
    auto edges = edge_pairs(g.adj);
    if (!edges.empty() && cap < 2)
        throw ConfigError("vertex-cut needs cap >= 2 to hold an edge");
    int n = g.node_count();
    int target = (n + cap - 1) / cap;
    // bucket by the lower-degree endpoint so hub edges scatter across buckets
    std::vector<std::vector<std::pair<int, int>>> buckets(static_cast<std::size_t>(target));
    for (auto [u, v] : edges) {
        int du = g.adj.degree(u), dv = g.adj.degree(v);
        int key = (du < dv || (du == dv && u < v)) ? u : v;
        std::uint64_t h = derive_seed(seed, "degree-hash", static_cast<std::uint64_t>(key));
        buckets[static_cast<std::size_t>(h % static_cast<std::uint64_t>(target))].emplace_back(u, v);
    }
    // each bucket splits greedily so no piece exceeds the node cap
    std::vector<std::vector<std::pair<int, int>>> groups;
    for (auto& bucket : buckets) {
        if (bucket.empty()) continue;
        std::vector<std::pair<int, int>> cur;
        std::unordered_map<int, char> nodes;
        for (auto [u, v] : bucket) {
            int extra = (nodes.count(u) ? 0 : 1) + (nodes.count(v) ? 0 : 1);
            if (static_cast<int>(nodes.size()) + extra > cap && !cur.empty()) {
                groups.push_back(std::move(cur));
                cur = {};
                nodes.clear();
            }
            cur.emplace_back(u, v);
            nodes[u] = 1;
            nodes[v] = 1;
        }
        if (!cur.empty()) groups.push_back(std::move(cur));
    }
    if (groups.empty()) groups.resize(static_cast<std::size_t>(target));
    return groups;
}

}  // namespace detail

inline SegmentedGraph partition_graph(const Graph& g, PartitionMethod method, int cap,
                                      std::uint64_t seed) {
    if (cap < 1) throw ConfigError("segment cap must be >= 1");
    SegmentedGraph sg;
    sg.parent_id = g.id;
    sg.group = g.group;
    sg.label = g.label;
    sg.parent_nodes = g.node_count();
    sg.parent_edges = g.edge_count();
    Rng rng(derive_seed(seed, "partition", static_cast<std::uint64_t>(g.id)));
    switch (method) {
        case PartitionMethod::random_edge_cut:
            sg.segments = detail::segments_from_assignment(g, detail::random_node_groups(g, cap, rng));
            break;
        case PartitionMethod::locality_edge_cut:
            sg.segments = detail::segments_from_assignment(g, detail::bfs_node_groups(g, cap, rng));
            break;
        case PartitionMethod::random_vertex_cut:
            sg.segments =
                detail::segments_from_edge_assignment(g, detail::random_edge_groups(g, cap, rng), cap);
            break;
        case PartitionMethod::degree_hash_vertex_cut:
            sg.segments = detail::segments_from_edge_assignment(
                g, detail::degree_hash_edge_groups(g, cap, seed), cap);
            break;
    }
    return sg;
}

inline SegmentedGraph partition(const Graph& g, PartitionMethod method, int cap,
                                std::uint64_t seed) {
    return partition_graph(g, method, cap, seed);
}

inline PartitionStats partition_stats(const SegmentedGraph& sg) {
    PartitionStats st;
    st.segment_count = sg.segment_count();
    int kept_edges = 0;
    long long total_nodes = 0;
    for (const auto& s : sg.segments) {
        st.sizes.push_back(s.node_count());
        kept_edges += s.adj.edge_count();
        total_nodes += s.node_count();
    }
    st.edge_cut_ratio =
        sg.parent_edges == 0 ? 0.0 : 1.0 - static_cast<double>(kept_edges) / sg.parent_edges;
    st.replication_factor =
        sg.parent_nodes == 0 ? 1.0 : static_cast<double>(total_nodes) / sg.parent_nodes;
    return st;
}

inline std::vector<SegmentedGraph> partition_dataset(const Dataset& ds, PartitionMethod method,
                                                     int cap, std::uint64_t seed) {
    std::vector<SegmentedGraph> out;
    out.reserve(ds.graphs.size());
    for (const auto& g : ds.graphs) out.push_back(partition_graph(g, method, cap, seed));
    return out;
}

// whole graph as a single segment; how unsegmented training and full-graph
// evaluation enter the same code path
inline SegmentedGraph whole_graph_segment(const Graph& g) {
    SegmentedGraph sg;
    sg.parent_id = g.id;
    sg.group = g.group;
    sg.label = g.label;
    sg.parent_nodes = g.node_count();
    sg.parent_edges = g.edge_count();
    Segment s;
    s.segment_id = 0;
    s.nodes.resize(static_cast<std::size_t>(g.node_count()));
    std::iota(s.nodes.begin(), s.nodes.end(), 0);
    s.adj = g.adj;
    s.features = g.features;
    sg.segments.push_back(std::move(s));
    return sg;
}

inline std::vector<SegmentedGraph> whole_graph_segmentation(const Dataset& ds) {
    std::vector<SegmentedGraph> out;
    out.reserve(ds.graphs.size());
    for (const auto& g : ds.graphs) out.push_back(whole_graph_segment(g));
    return out;
}

// ----- cache IO -----
// JSON-lines; header row pins (dataset hash, method, cap, seed), then one
// segmented graph per line with the graph-core edge/feature encoding.

inline void save_segment_cache(const std::vector<SegmentedGraph>& sgs, std::uint64_t ds_hash,
                               PartitionMethod method, int cap, std::uint64_t seed,
                               const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    nlohmann::json header;
    header["dataset_hash"] = hex64(ds_hash);
    header["method"] = to_string(method);
    header["cap"] = cap;
    header["seed"] = seed;
    out << header.dump() << "\n";
    for (const auto& sg : sgs) {
        nlohmann::json j;
        j["parent"] = sg.parent_id;
        j["group"] = sg.group;
        j["parent_nodes"] = sg.parent_nodes;
        j["parent_edges"] = sg.parent_edges;
        if (sg.label.kind == Task::classification)
            j["label"] = {{"class", sg.label.class_index}};
        else
            j["label"] = {{"target", sg.label.target}};
        auto segs = nlohmann::json::array();
        for (const auto& s : sg.segments) {
            nlohmann::json sj;
            sj["nodes"] = s.nodes;
            auto edges = nlohmann::json::array();
            for (auto [u, v] : edge_pairs(s.adj)) edges.push_back({u, v});
            sj["edges"] = std::move(edges);
            auto feats = nlohmann::json::array();
            for (int i = 0; i < s.features.rows; ++i) {
                auto row = nlohmann::json::array();
                for (int k = 0; k < s.features.cols; ++k) row.push_back(s.features.at(i, k));
                feats.push_back(std::move(row));
            }
            sj["features"] = std::move(feats);
            segs.push_back(std::move(sj));
        }
        j["segments"] = std::move(segs);
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

struct SegmentCacheKey {
    std::uint64_t dataset_hash = 0;
    PartitionMethod method = PartitionMethod::locality_edge_cut;
    int cap = 0;
    std::uint64_t seed = 0;
};

// Returns nullopt when the header does not match the requested key.
inline std::optional<std::vector<SegmentedGraph>> load_segment_cache(const std::string& path,
                                                                     const SegmentCacheKey& key) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError(path + ": empty cache file");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ":1: " + e.what());
    }
    if (header.value("dataset_hash", "") != hex64(key.dataset_hash) ||
        header.value("method", "") != to_string(key.method) || header.value("cap", -1) != key.cap ||
        header.value("seed", std::uint64_t{0}) != key.seed)
        return std::nullopt;

    std::vector<SegmentedGraph> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::string where = path + ":" + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(where + ": " + e.what());
        }
        SegmentedGraph sg;
        sg.parent_id = j.at("parent").get<int>();
        sg.group = j.value("group", sg.parent_id);
        sg.parent_nodes = j.at("parent_nodes").get<int>();
        sg.parent_edges = j.at("parent_edges").get<int>();
        const auto& lab = j.at("label");
        if (lab.contains("class")) {
            sg.label.kind = Task::classification;
            sg.label.class_index = lab["class"].get<int>();
        } else {
            sg.label.kind = Task::regression_ranking;
            sg.label.target = lab.at("target").get<double>();
        }
        int sid = 0;
        for (const auto& sj : j.at("segments")) {
            Segment s;
            s.segment_id = sid++;
            s.nodes = sj.at("nodes").get<std::vector<int>>();
            std::vector<std::pair<int, int>> edges;
            for (const auto& e : sj.at("edges"))
                edges.emplace_back(e[0].get<int>(), e[1].get<int>());
            s.adj = build_csr(s.node_count(), edges);
            const auto& feats = sj.at("features");
            if (static_cast<int>(feats.size()) != s.node_count())
                throw IoError(where + ": segment feature rows mismatch");
            int width = feats.empty() ? 0 : static_cast<int>(feats[0].size());
            s.features = Mat(s.node_count(), width);
            for (int i = 0; i < s.node_count(); ++i)
                for (int k = 0; k < width; ++k) s.features.at(i, k) = feats[i][k].get<double>();
            sg.segments.push_back(std::move(s));
        }
        out.push_back(std::move(sg));
    }
    return out;
}

}  // namespace segtrain
