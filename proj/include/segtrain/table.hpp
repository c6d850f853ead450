#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "segtrain/common.hpp"
#include "segtrain/matrix.hpp"

namespace segtrain {

// Historical segment embeddings keyed by (graph id, segment id). Reads never
// touch written_at; staleness of an entry at iteration t is t - written_at.
class EmbeddingTable {
public:
    struct Entry {
        Mat embedding;  // 1 x width
        long long written_at = 0;
    };

    const Entry* find(int graph_id, int segment_id) const {
        auto it = map_.find(pack(graph_id, segment_id));
        return it == map_.end() ? nullptr : &it->second;
    }

    void insert_or_update(int graph_id, int segment_id, Mat embedding, long long written_at) {
        auto& e = map_[pack(graph_id, segment_id)];
        e.embedding = std::move(embedding);
        e.written_at = written_at;
    }

    std::size_t size() const { return map_.size(); }
    void clear() { map_.clear(); }

    struct StalenessStats {
        long long max = 0;
        double mean = 0.0;
        std::size_t entries = 0;
    };

    StalenessStats staleness(long long current_iteration) const {
        StalenessStats st;
        st.entries = map_.size();
        if (map_.empty()) return st;
        long long total = 0;
        for (const auto& [k, e] : map_) {
            long long s = current_iteration - e.written_at;
            if (s < 0) throw std::logic_error("embedding table entry from the future");
            st.max = std::max(st.max, s);
            total += s;
        }
        st.mean = static_cast<double>(total) / static_cast<double>(map_.size());
        return st;
    }

    // deterministic order for serialization
    std::vector<std::pair<std::uint64_t, const Entry*>> sorted_entries() const {
        std::vector<std::pair<std::uint64_t, const Entry*>> v;
        v.reserve(map_.size());
        for (const auto& [k, e] : map_) v.emplace_back(k, &e);
        std::sort(v.begin(), v.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        return v;
    }

    nlohmann::json to_json() const {
        auto arr = nlohmann::json::array();
        for (const auto& [k, e] : sorted_entries()) {
            nlohmann::json j;
            j["graph"] = static_cast<int>(k >> 32);
            j["segment"] = static_cast<int>(k & 0xffffffffULL);
            j["written_at"] = e->written_at;
            j["embedding"] = e->embedding.a;
            arr.push_back(std::move(j));
        }
        return arr;
    }

    static EmbeddingTable from_json(const nlohmann::json& arr) {
        EmbeddingTable t;
        for (const auto& j : arr) {
            Mat emb(1, static_cast<int>(j.at("embedding").size()),
                    j.at("embedding").get<std::vector<double>>());
            t.insert_or_update(j.at("graph").get<int>(), j.at("segment").get<int>(),
                               std::move(emb), j.at("written_at").get<long long>());
        }
        return t;
    }

private:
    static std::uint64_t pack(int graph_id, int segment_id) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(graph_id)) << 32) |
               static_cast<std::uint32_t>(segment_id);
    }

    std::unordered_map<std::uint64_t, Entry> map_;
};

// entry plus its age at the given iteration; nullopt when the key is missing
struct LookupResult {
    const Mat* embedding = nullptr;
    long long staleness = 0;
};

inline std::optional<LookupResult> lookup(const EmbeddingTable& t, int graph_id, int segment_id,
                                          long long current_iteration) {
    const EmbeddingTable::Entry* e = t.find(graph_id, segment_id);
    if (!e) return std::nullopt;
    long long s = current_iteration - e->written_at;
    if (s < 0) throw std::logic_error("embedding table entry from the future");
    return LookupResult{&e->embedding, s};
}

// aggregate staleness view with a full age histogram
struct StalenessReport {
    long long max = 0;
    double mean = 0.0;
    std::size_t entries = 0;
    std::map<long long, long long> histogram;  // age -> entry count
};

inline StalenessReport staleness_stats(const EmbeddingTable& t, long long current_iteration) {
    StalenessReport rep;
    auto base = t.staleness(current_iteration);
    rep.max = base.max;
    rep.mean = base.mean;
    rep.entries = base.entries;
    for (const auto& [k, e] : t.sorted_entries())
        ++rep.histogram[current_iteration - e->written_at];
    return rep;
}

}  // namespace segtrain
