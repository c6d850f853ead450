#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "segtrain/common.hpp"
#include "segtrain/matrix.hpp"

namespace segtrain {

// Compressed adjacency, symmetric (undirected graphs only).
struct Csr {
    int node_count = 0;
    std::vector<int> offsets;  // size node_count + 1
    std::vector<int> targets;

    std::span<const int> neighbors(int v) const {
        return {targets.data() + offsets[static_cast<std::size_t>(v)],
                targets.data() + offsets[static_cast<std::size_t>(v) + 1]};
    }
    int degree(int v) const {
        return offsets[static_cast<std::size_t>(v) + 1] - offsets[static_cast<std::size_t>(v)];
    }
    int edge_count() const { return static_cast<int>(targets.size() / 2); }
};

// Builds symmetric CSR from undirected pairs: self-loops dropped, duplicates
// collapsed, neighbor lists sorted.
inline Csr build_csr(int node_count, const std::vector<std::pair<int, int>>& edges) {
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(node_count));
    for (auto [u, v] : edges) {
        if (u == v) continue;
        adj[static_cast<std::size_t>(u)].push_back(v);
        adj[static_cast<std::size_t>(v)].push_back(u);
    }
    Csr c;
    c.node_count = node_count;
    c.offsets.assign(static_cast<std::size_t>(node_count) + 1, 0);
    for (int v = 0; v < node_count; ++v) {
        auto& nb = adj[static_cast<std::size_t>(v)];
        std::sort(nb.begin(), nb.end());
        nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
        c.offsets[static_cast<std::size_t>(v) + 1] =
            c.offsets[static_cast<std::size_t>(v)] + static_cast<int>(nb.size());
    }
    c.targets.reserve(static_cast<std::size_t>(c.offsets.back()));
    for (auto& nb : adj) c.targets.insert(c.targets.end(), nb.begin(), nb.end());
    return c;
}

// Unique undirected pairs (u < v), sorted. The canonical edge list for IO.
inline std::vector<std::pair<int, int>> edge_pairs(const Csr& c) {
    std::vector<std::pair<int, int>> out;
    out.reserve(static_cast<std::size_t>(c.edge_count()));
    for (int u = 0; u < c.node_count; ++u)
        for (int v : c.neighbors(u))
            if (u < v) out.emplace_back(u, v);
    return out;
}

enum class Task { classification, regression_ranking };

struct Label {
    Task kind = Task::classification;
    int class_index = 0;
    double target = 0.0;
};

struct Graph {
    int id = 0;
    int group = 0;  // ranking: configurations of one base graph share a group
    Csr adj;
    Mat features;  // node_count x feature_width
    Label label;

    int node_count() const { return adj.node_count; }
    int edge_count() const { return adj.edge_count(); }
};

struct Splits {
    std::vector<int> train, val, test;
};

struct Dataset {
    Task task = Task::classification;
    int num_classes = 0;  // classification only
    int feature_width = 0;
    std::vector<Graph> graphs;

    const Graph& by_id(int id) const {
        for (const auto& g : graphs)
            if (g.id == id) return g;
        throw ConfigError("unknown graph id " + std::to_string(id));
    }
    std::size_t index_of(int id) const {
        for (std::size_t i = 0; i < graphs.size(); ++i)
            if (graphs[i].id == id) return i;
        throw ConfigError("unknown graph id " + std::to_string(id));
    }
};

// ----- JSON-lines IO -----
// One graph per line:
//   {"id":0,"num_nodes":3,"edges":[[0,1],[1,2]],"features":[[...],...],
//    "label":{"class":1} | {"target":2.5}, "group":0?}

inline nlohmann::json graph_to_json(const Graph& g) {
    nlohmann::json j;
    j["id"] = g.id;
    j["num_nodes"] = g.node_count();
    auto edges = nlohmann::json::array();
    for (auto [u, v] : edge_pairs(g.adj)) edges.push_back({u, v});
    j["edges"] = std::move(edges);
    auto feats = nlohmann::json::array();
    for (int i = 0; i < g.features.rows; ++i) {
        auto row = nlohmann::json::array();
        for (int k = 0; k < g.features.cols; ++k) row.push_back(g.features.at(i, k));
        feats.push_back(std::move(row));
    }
    j["features"] = std::move(feats);
    if (g.label.kind == Task::classification)
        j["label"] = {{"class", g.label.class_index}};
    else
        j["label"] = {{"target", g.label.target}};
    if (g.group != g.id) j["group"] = g.group;
    return j;
}

inline Graph graph_from_json(const nlohmann::json& j, const std::string& where) {
    auto fail = [&](const std::string& msg) -> void { throw IoError(where + ": " + msg); };
    Graph g;
    if (!j.contains("id") || !j["id"].is_number_integer()) fail("missing integer 'id'");
    g.id = j["id"].get<int>();
    g.group = j.value("group", g.id);
    if (!j.contains("num_nodes") || !j["num_nodes"].is_number_integer())
        fail("missing integer 'num_nodes'");
    int n = j["num_nodes"].get<int>();
    if (n <= 0) fail("num_nodes must be positive");

    std::vector<std::pair<int, int>> edges;
    if (!j.contains("edges") || !j["edges"].is_array()) fail("missing 'edges' array");
    for (const auto& e : j["edges"]) {
        if (!e.is_array() || e.size() != 2) fail("edge entries must be [u,v]");
        int u = e[0].get<int>(), v = e[1].get<int>();
        if (u < 0 || u >= n || v < 0 || v >= n)
            fail("edge endpoint out of range: [" + std::to_string(u) + "," + std::to_string(v) + "]");
        edges.emplace_back(u, v);
    }
    g.adj = build_csr(n, edges);

    if (!j.contains("features") || !j["features"].is_array() ||
        static_cast<int>(j["features"].size()) != n)
        fail("'features' must have one row per node");
    int width = -1;
    for (const auto& row : j["features"]) {
        if (!row.is_array()) fail("feature rows must be arrays");
        if (width < 0) width = static_cast<int>(row.size());
        if (static_cast<int>(row.size()) != width) fail("ragged feature rows");
    }
    if (width <= 0) fail("feature width must be positive");
    g.features = Mat(n, width);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < width; ++k) g.features.at(i, k) = j["features"][i][k].get<double>();

    if (!j.contains("label") || !j["label"].is_object()) fail("missing 'label' object");
    const auto& lab = j["label"];
    if (lab.contains("class")) {
        g.label.kind = Task::classification;
        g.label.class_index = lab["class"].get<int>();
        if (g.label.class_index < 0) fail("label class must be >= 0");
    } else if (lab.contains("target")) {
        g.label.kind = Task::regression_ranking;
        g.label.target = lab["target"].get<double>();
        if (!std::isfinite(g.label.target)) fail("label target must be finite");
    } else {
        fail("label needs 'class' or 'target'");
    }
    return g;
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    Dataset ds;
    std::string line;
    int lineno = 0;
    std::unordered_set<int> seen;
    bool first = true;
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
        Graph g = graph_from_json(j, where);
        if (!seen.insert(g.id).second) throw IoError(where + ": duplicate graph id");
        if (first) {
            ds.task = g.label.kind;
            ds.feature_width = g.features.cols;
            first = false;
        } else {
            if (g.label.kind != ds.task) throw IoError(where + ": mixed label kinds");
            if (g.features.cols != ds.feature_width)
                throw IoError(where + ": feature width differs from earlier graphs");
        }
        if (ds.task == Task::classification)
            ds.num_classes = std::max(ds.num_classes, g.label.class_index + 1);
        ds.graphs.push_back(std::move(g));
    }
    if (ds.graphs.empty()) throw IoError(path + ": no graphs");
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    for (const auto& g : ds.graphs) out << graph_to_json(g).dump() << "\n";
    if (!out) throw IoError("write failed: " + path);
}

inline Splits load_splits(const std::string& path, const Dataset& ds) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + e.what());
    }
    Splits sp;
    std::unordered_set<int> used;
    auto read = [&](const char* key, std::vector<int>& out) {
        if (!j.contains(key) || !j[key].is_array())
            throw IoError(path + ": missing '" + key + "' array");
        for (const auto& v : j[key]) {
            int id = v.get<int>();
            ds.index_of(id);  // unknown ids rejected
            if (!used.insert(id).second)
                throw IoError(path + ": graph id " + std::to_string(id) +
                              " appears in more than one split");
            out.push_back(id);
        }
    };
    read("train", sp.train);
    read("val", sp.val);
    read("test", sp.test);
    return sp;
}

inline void save_splits(const Splits& sp, const std::string& path) {
    nlohmann::json j;
    j["train"] = sp.train;
    j["val"] = sp.val;
    j["test"] = sp.test;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

// Hash of the canonical serialization; keys partition caches to their dataset.
inline std::uint64_t dataset_hash(const Dataset& ds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& g : ds.graphs) {
        std::string s = graph_to_json(g).dump();
        h = splitmix64(h ^ fnv1a64(s));
    }
    return h;
}

}  // namespace segtrain
