#pragma once

#include <cmath>
#include <optional>
#include <unordered_map>
#include <vector>

#include "segtrain/common.hpp"
#include "segtrain/matrix.hpp"
#include "segtrain/tape.hpp"

namespace segtrain {

// stable softmax of a 1-row matrix
inline Mat softmax_row(const Mat& logits) {
    Mat out = logits;
    double mx = out.a[0];
    for (double v : out.a) mx = std::max(mx, v);
    double z = 0.0;
    for (double& v : out.a) {
        v = std::exp(v - mx);
        z += v;
    }
    for (double& v : out.a) v /= z;
    return out;
}

// -log softmax(logits)[cls]
inline double cross_entropy(const Mat& logits, int cls) {
    if (logits.rows != 1) throw ConfigError("cross_entropy expects a single logits row");
    if (cls < 0 || cls >= logits.cols) throw ConfigError("cross_entropy: class out of range");
    double mx = logits.a[0];
    for (double v : logits.a) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits.a) z += std::exp(v - mx);
    return std::log(z) - (logits.a[static_cast<std::size_t>(cls)] - mx);
}

// d(cross_entropy)/d(logits) = softmax - onehot
inline Mat cross_entropy_grad(const Mat& logits, int cls) {
    Mat g = softmax_row(logits);
    g.a[static_cast<std::size_t>(cls)] -= 1.0;
    return g;
}

// argmax with ties resolved to the lowest index
inline int argmax_row(const Mat& row) {
    int best = 0;
    for (int j = 1; j < row.cols; ++j)
        if (row.a[static_cast<std::size_t>(j)] > row.a[static_cast<std::size_t>(best)]) best = j;
    return best;
}

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
    if (predicted.size() != truth.size() || predicted.empty())
        throw ConfigError("accuracy: size mismatch or empty");
    int hit = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i)
        if (predicted[i] == truth[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

// sum over ordered pairs in the same group with y_i > y_j of
// max(0, 1 - (s_i - s_j)). Groups with fewer than two members contribute 0.
inline double pairwise_hinge(const std::vector<double>& scores, const std::vector<double>& targets,
                             const std::vector<int>& groups) {
    if (scores.size() != targets.size() || scores.size() != groups.size())
        throw ConfigError("pairwise_hinge: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (groups[i] != groups[j] || targets[i] <= targets[j]) continue;
            double m = 1.0 - (scores[i] - scores[j]);
            if (m > 0.0) total += m;
        }
    return total;
}

// ordered-pair accuracy per group (strict inequalities; ties never concord),
// averaged over groups that have at least one ordered pair. No valid group
// anywhere -> missing.
inline std::optional<double> ordered_pair_accuracy(const std::vector<double>& scores,
                                                   const std::vector<double>& targets,
                                                   const std::vector<int>& groups) {
    if (scores.size() != targets.size() || scores.size() != groups.size())
        throw ConfigError("ordered_pair_accuracy: size mismatch");
    std::unordered_map<int, std::vector<std::size_t>> by_group;
    for (std::size_t i = 0; i < groups.size(); ++i) by_group[groups[i]].push_back(i);
    double acc_sum = 0.0;
    int counted = 0;
    for (auto& [gid, idx] : by_group) {
        long long pairs = 0, concordant = 0;
        for (std::size_t a : idx)
            for (std::size_t b : idx) {
                if (targets[a] > targets[b]) {
                    ++pairs;
                    if (scores[a] > scores[b]) ++concordant;
                }
            }
        if (pairs == 0) continue;
        acc_sum += static_cast<double>(concordant) / static_cast<double>(pairs);
        ++counted;
    }
    if (counted == 0) return std::nullopt;
    return acc_sum / counted;
}

// single-group conveniences
inline double pairwise_hinge(const std::vector<double>& scores,
                             const std::vector<double>& targets) {
    return pairwise_hinge(scores, targets, std::vector<int>(scores.size(), 0));
}

inline std::optional<double> opa(const std::vector<double>& scores,
                                 const std::vector<double>& targets,
                                 const std::vector<int>& groups) {
    return ordered_pair_accuracy(scores, targets, groups);
}

inline std::optional<double> opa(const std::vector<double>& scores,
                                 const std::vector<double>& targets) {
    return ordered_pair_accuracy(scores, targets, std::vector<int>(scores.size(), 0));
}

// ----- tape-integrated losses -----

inline Tape::Id tape_cross_entropy(Tape& t, Tape::Id logits, int cls) {
    const Mat& lv = t.value(logits);
    Mat v(1, 1);
    v.a[0] = cross_entropy(lv, cls);
    return t.custom(std::move(v), t.needs(logits), [logits, cls](Tape& tt, Tape::Id self) {
        if (!tt.needs(logits)) return;
        double g = tt.grad_buf(self).a[0];
        Mat gl = cross_entropy_grad(tt.value(logits), cls);
        axpy(g, gl, tt.grad_buf(logits));
    });
}

// scalar = pairwise hinge over the given scalar prediction nodes
inline Tape::Id tape_pairwise_hinge(Tape& t, const std::vector<Tape::Id>& preds,
                                    const std::vector<double>& targets,
                                    const std::vector<int>& groups) {
    std::vector<double> scores;
    scores.reserve(preds.size());
    bool ng = false;
    for (Tape::Id id : preds) {
        scores.push_back(t.value(id).a[0]);
        ng = ng || t.needs(id);
    }
    Mat v(1, 1);
    v.a[0] = pairwise_hinge(scores, targets, groups);
    return t.custom(std::move(v), ng, [preds, targets, groups](Tape& tt, Tape::Id self) {
        double g = tt.grad_buf(self).a[0];
        std::vector<double> scores;
        scores.reserve(preds.size());
        for (Tape::Id id : preds) scores.push_back(tt.value(id).a[0]);
        for (std::size_t i = 0; i < preds.size(); ++i)
            for (std::size_t j = 0; j < preds.size(); ++j) {
                if (groups[i] != groups[j] || targets[i] <= targets[j]) continue;
                if (1.0 - (scores[i] - scores[j]) > 0.0) {
                    if (tt.needs(preds[i])) tt.grad_buf(preds[i]).a[0] -= g;
                    if (tt.needs(preds[j])) tt.grad_buf(preds[j]).a[0] += g;
                }
            }
    });
}

}  // namespace segtrain
