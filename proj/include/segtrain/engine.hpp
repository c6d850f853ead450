#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "segtrain/common.hpp"
#include "segtrain/metrics.hpp"
#include "segtrain/model.hpp"
#include "segtrain/partition.hpp"
#include "segtrain/table.hpp"

namespace segtrain {

enum class Variant { full, gst_one, gst, gst_e, gst_efd };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::gst_one: return "gst-one";
        case Variant::gst: return "gst";
        case Variant::gst_e: return "gst-e";
        case Variant::gst_efd: return "gst-efd";
    }
    return "?";
}

inline Variant variant_from(const std::string& s) {
    if (s == "full") return Variant::full;
    if (s == "gst-one") return Variant::gst_one;
    if (s == "gst") return Variant::gst;
    if (s == "gst-e") return Variant::gst_e;
    if (s == "gst-efd") return Variant::gst_efd;
    throw ConfigError("unknown variant: " + s);
}

inline bool variant_uses_table(Variant v) {
    return v == Variant::gst_e || v == Variant::gst_efd;
}

struct TrainPlan {
    Variant variant = Variant::gst_efd;
    int S = 1;                 // segments per graph that carry gradients
    double p = 0.5;            // keep probability for stale embeddings
    int batch_size = 4;
    int epochs = 40;           // segment-training stage
    int finetune_epochs = 10;  // head-only stage on refreshed embeddings
    AdamConfig adam;
    std::uint64_t seed = 1;
    std::optional<long long> budget_nodes;  // retained-activation cap per step
    int eval_every = 5;

    void validate() const {
        if (S < 1) throw ConfigError("S must be >= 1");
        if (p < 0.0 || p > 1.0) throw ConfigError("p must lie in [0,1]");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 0 || finetune_epochs < 0) throw ConfigError("epoch counts must be >= 0");
        if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
        if (budget_nodes && *budget_nodes < 1) throw ConfigError("budget_nodes must be >= 1");
    }
};

// uniform draw of `take` distinct segment ids out of J, sorted; S >= J keeps
// everything
inline std::vector<int> sample_segments(int J, int take, Rng& rng) {
    if (J < 1) throw ConfigError("sample_segments: J must be >= 1");
    if (take >= J) {
        std::vector<int> all(static_cast<std::size_t>(J));
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    // partial Fisher-Yates over segment ids
    std::vector<int> ids(static_cast<std::size_t>(J));
    std::iota(ids.begin(), ids.end(), 0);
    for (int i = 0; i < take; ++i) {
        int j = i + rng.below_int(J - i);
        std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
    }
    ids.resize(static_cast<std::size_t>(take));
    std::sort(ids.begin(), ids.end());
    return ids;
}

// stale-embedding dropout weights: selected segments get p + (1-p) * J/S,
// the rest independently keep weight 1 with probability p, else 0.
inline std::vector<double> sed_weights(int J, int S, const std::vector<int>& selected, double p,
                                       Rng& rng) {
    if (p < 0.0 || p > 1.0) throw ConfigError("sed_weights: p must lie in [0,1]");
    std::vector<char> is_sel(static_cast<std::size_t>(J), 0);
    for (int s : selected) is_sel[static_cast<std::size_t>(s)] = 1;
    double sel_w = p + (1.0 - p) * (static_cast<double>(J) / static_cast<double>(S));
    std::vector<double> w(static_cast<std::size_t>(J), 0.0);
    for (int j = 0; j < J; ++j)
        w[static_cast<std::size_t>(j)] =
            is_sel[static_cast<std::size_t>(j)] ? sel_w : (rng.bernoulli(p) ? 1.0 : 0.0);
    return w;
}

// value-level aggregation used at evaluation time: same contract as the tape
// op (zero weights skipped, classification means over the graph's J segments,
// ranking sums). J is the segment count of the whole graph, which may exceed
// the number of embeddings actually passed when zero-weight ones were skipped.
inline Mat aggregate(const std::vector<Mat>& embeddings, const std::vector<double>& weights,
                     Task task, int J) {
    if (embeddings.empty()) throw ConfigError("aggregate: no embeddings");
    if (embeddings.size() != weights.size()) throw ConfigError("aggregate: weight count mismatch");
    if (J < static_cast<int>(embeddings.size())) throw ConfigError("aggregate: J too small");
    Mat acc = zeros_like(embeddings[0]);
    for (std::size_t k = 0; k < embeddings.size(); ++k) {
        if (weights[k] == 0.0) continue;
        axpy(weights[k], embeddings[k], acc);
    }
    if (task == Task::classification) acc = scale(acc, 1.0 / static_cast<double>(J));
    return acc;
}

struct StepCounters {
    long long grad_nodes = 0;     // nodes forwarded with gradients retained
    long long nograd_nodes = 0;   // fresh grad-disabled forward nodes
    long long table_lookups = 0;  // embeddings served from the table
    long long table_skips = 0;    // zero-weight lookups skipped entirely
    long long warmups = 0;        // lazy inserts for missing keys
    long long peak_retained = 0;
    long long staleness_max = 0;
    long long staleness_sum = 0;
    long long staleness_count = 0;

    void merge(const StepCounters& o) {
        grad_nodes += o.grad_nodes;
        nograd_nodes += o.nograd_nodes;
        table_lookups += o.table_lookups;
        table_skips += o.table_skips;
        warmups += o.warmups;
        peak_retained = std::max(peak_retained, o.peak_retained);
        staleness_max = std::max(staleness_max, o.staleness_max);
        staleness_sum += o.staleness_sum;
        staleness_count += o.staleness_count;
    }
    // grad-disabled work a variant performs on top of its gradient segments
    long long extra_ops() const { return nograd_nodes + table_lookups; }
};

struct GraphStepPlan {
    std::vector<int> selected;    // sorted segment ids carrying gradients
    std::vector<double> weights;  // per segment, resolved for the variant
};

// Resolves all per-step randomness up front. Selection and dropout draw from
// separate streams keyed by (seed, iteration, graph id), so limiting cases of
// one variant replay another variant's choices exactly.
inline GraphStepPlan resolve_graph_step(const TrainPlan& plan, const SegmentedGraph& sg,
                                        long long iteration) {
    GraphStepPlan out;
    int J = sg.segment_count();
    int take = std::min(plan.S, J);
    Rng sel_rng = derived_rng(plan.seed, "segsel", static_cast<std::uint64_t>(iteration),
                              static_cast<std::uint64_t>(sg.parent_id));
    out.selected = sample_segments(J, take, sel_rng);
    switch (plan.variant) {
        case Variant::gst_one: {
            out.weights.assign(static_cast<std::size_t>(J), 0.0);
            double w = static_cast<double>(J) / static_cast<double>(take);
            for (int s : out.selected) out.weights[static_cast<std::size_t>(s)] = w;
            break;
        }
        case Variant::full:
        case Variant::gst:
        case Variant::gst_e:
            out.weights.assign(static_cast<std::size_t>(J), 1.0);
            break;
        case Variant::gst_efd: {
            Rng sed_rng = derived_rng(plan.seed, "sed", static_cast<std::uint64_t>(iteration),
                                      static_cast<std::uint64_t>(sg.parent_id));
            out.weights = sed_weights(J, take, out.selected, plan.p, sed_rng);
            break;
        }
    }
    return out;
}

struct PendingWrite {
    int graph_id;
    int segment_id;
    Mat embedding;
};

struct BatchBuild {
    Tape::Id loss = -1;
    std::vector<Tape::Id> preds;
    StepCounters counters;
    std::vector<PendingWrite> writes;
};

// Builds the loss for one batch on the tape. Table reads may lazily warm up
// missing keys (grad-disabled forward + insert at the current iteration);
// everything else leaves the table untouched until the caller applies
// `writes`.
inline BatchBuild build_batch(Tape& tape, Model& model, EmbeddingTable* table,
                              const std::vector<const SegmentedGraph*>& batch,
                              const std::vector<GraphStepPlan>& plans, const TrainPlan& plan,
                              Task task, long long iteration) {
    BatchBuild out;
    std::vector<Tape::Id> losses;
    std::vector<double> targets;
    std::vector<int> groups;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const SegmentedGraph& sg = *batch[b];
        const GraphStepPlan& gp = plans[b];
        int J = sg.segment_count();
        std::vector<char> is_sel(static_cast<std::size_t>(J), 0);
        for (int s : gp.selected) is_sel[static_cast<std::size_t>(s)] = 1;

        std::vector<Tape::Id> parts;
        std::vector<double> ws;
        for (int j = 0; j < J; ++j) {
            double w = gp.weights[static_cast<std::size_t>(j)];
            const Segment& seg = sg.segments[static_cast<std::size_t>(j)];
            if (is_sel[static_cast<std::size_t>(j)]) {
                Tape::Id id = forward_segment(tape, model, seg);
                out.counters.grad_nodes += seg.node_count();
                parts.push_back(id);
                ws.push_back(w);
                if (variant_uses_table(plan.variant))
                    out.writes.push_back(
                        PendingWrite{sg.parent_id, seg.segment_id, tape.value(id)});
                continue;
            }
            switch (plan.variant) {
                case Variant::full:
                case Variant::gst_one:
                    break;  // not aggregated
                case Variant::gst: {
                    Mat v = forward_segment_nograd(model, seg);
                    out.counters.nograd_nodes += seg.node_count();
                    parts.push_back(tape.constant(std::move(v)));
                    ws.push_back(w);
                    break;
                }
                case Variant::gst_e:
                case Variant::gst_efd: {
                    if (w == 0.0) {
                        // dropped: skip the lookup entirely
                        ++out.counters.table_skips;
                        break;
                    }
                    const EmbeddingTable::Entry* e = table->find(sg.parent_id, seg.segment_id);
                    if (!e) {
                        Mat v = forward_segment_nograd(model, seg);
                        out.counters.nograd_nodes += seg.node_count();
                        ++out.counters.warmups;
                        table->insert_or_update(sg.parent_id, seg.segment_id, std::move(v),
                                                iteration);
                        e = table->find(sg.parent_id, seg.segment_id);
                    } else {
                        ++out.counters.table_lookups;
                        long long st = iteration - e->written_at;
                        out.counters.staleness_max = std::max(out.counters.staleness_max, st);
                        out.counters.staleness_sum += st;
                        ++out.counters.staleness_count;
                    }
                    parts.push_back(tape.constant(e->embedding));
                    ws.push_back(w);
                    break;
                }
            }
        }
        Tape::Id agg = tape.weighted_sum(
            std::move(parts), std::move(ws),
            task == Task::classification ? 1.0 / static_cast<double>(J) : 1.0);
        TapeCtx cx{&tape, &model.params};
        Tape::Id pred = head_forward(cx, model, agg);
        out.preds.push_back(pred);
        if (task == Task::classification) {
            losses.push_back(tape_cross_entropy(tape, pred, sg.label.class_index));
        } else {
            targets.push_back(sg.label.target);
            groups.push_back(sg.group);
        }
    }
    if (task == Task::classification) {
        out.loss = tape.mean_scalar(std::move(losses));
    } else {
        Tape::Id h = tape_pairwise_hinge(tape, out.preds, targets, groups);
        out.loss = tape.scale(h, 1.0 / static_cast<double>(batch.size()));
    }
    out.counters.peak_retained = tape.peak_retained();
    return out;
}

struct TrainState {
    Model model;
    EmbeddingTable table;
    long long iteration = 0;
    int epoch = 0;  // completed epochs across both stages
};

struct StepResult {
    double loss = 0.0;
    StepCounters counters;
    std::vector<int> predicted_class;   // classification
    std::vector<double> scores;         // ranking
    std::vector<double> targets;
    std::vector<int> groups;
};

// one optimizer step over a batch of segmented graphs
inline StepResult train_step(TrainState& st, const TrainPlan& plan, Task task,
                             const std::vector<const SegmentedGraph*>& batch) {
    std::vector<GraphStepPlan> plans;
    plans.reserve(batch.size());
    for (const auto* sg : batch) plans.push_back(resolve_graph_step(plan, *sg, st.iteration));

    Tape tape(plan.budget_nodes);
    EmbeddingTable* table = variant_uses_table(plan.variant) ? &st.table : nullptr;
    BatchBuild build = build_batch(tape, st.model, table, batch, plans, plan, task, st.iteration);

    st.model.params.zero_grads();
    tape.backward(build.loss);
    double loss_value = tape.value(build.loss).a[0];
    if (!std::isfinite(loss_value)) throw std::runtime_error("non-finite training loss");
    adam_step(st.model.params, plan.adam);

    for (auto& w : build.writes)
        st.table.insert_or_update(w.graph_id, w.segment_id, std::move(w.embedding), st.iteration);
    ++st.iteration;

    StepResult res;
    res.loss = loss_value;
    res.counters = build.counters;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (task == Task::classification) {
            res.predicted_class.push_back(argmax_row(tape.value(build.preds[b])));
        } else {
            res.scores.push_back(tape.value(build.preds[b]).a[0]);
            res.targets.push_back(batch[b]->label.target);
            res.groups.push_back(batch[b]->group);
        }
    }
    return res;
}

// recomputes every table entry with the current parameters
inline StepCounters refresh_all(TrainState& st, const std::vector<const SegmentedGraph*>& graphs) {
    StepCounters c;
    std::vector<std::vector<Mat>> fresh(graphs.size());
    int threads = worker_count();
    parallel_for(graphs.size(), threads, [&](std::size_t i) {
        const SegmentedGraph& sg = *graphs[i];
        fresh[i].reserve(sg.segments.size());
        for (const auto& seg : sg.segments) fresh[i].push_back(forward_segment_nograd(st.model, seg));
    });
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        const SegmentedGraph& sg = *graphs[i];
        for (std::size_t j = 0; j < sg.segments.size(); ++j) {
            st.table.insert_or_update(sg.parent_id, sg.segments[j].segment_id, std::move(fresh[i][j]),
                                      st.iteration);
            c.nograd_nodes += sg.segments[j].node_count();
        }
    }
    return c;
}

inline const EmbeddingTable::Entry* table_entry_or_throw(const EmbeddingTable& t,
                                                         const SegmentedGraph& sg, int j) {
    const EmbeddingTable::Entry* e = t.find(sg.parent_id, j);
    if (!e)
        throw std::logic_error("missing table entry for graph " + std::to_string(sg.parent_id) +
                               " segment " + std::to_string(j) + "; refresh_all must run first");
    return e;
}

// head-only step on refreshed table embeddings, unit weights
inline StepResult finetune_step(TrainState& st, const TrainPlan& plan, Task task,
                                const std::vector<const SegmentedGraph*>& batch) {
    Tape tape;  // no segment activations are retained in this stage
    std::vector<Tape::Id> losses, preds;
    std::vector<double> targets;
    std::vector<int> groups;
    for (const auto* sgp : batch) {
        const SegmentedGraph& sg = *sgp;
        int J = sg.segment_count();
        std::vector<Mat> embs;
        embs.reserve(static_cast<std::size_t>(J));
        for (int j = 0; j < J; ++j) {
            const EmbeddingTable::Entry* e = table_entry_or_throw(st.table, sg, j);
            embs.push_back(e->embedding);
        }
        Mat agg =
            aggregate(embs, std::vector<double>(static_cast<std::size_t>(J), 1.0), task, J);
        Tape::Id aggid = tape.constant(std::move(agg));
        TapeCtx cx{&tape, &st.model.params};
        Tape::Id pred = head_forward(cx, st.model, aggid);
        preds.push_back(pred);
        if (task == Task::classification)
            losses.push_back(tape_cross_entropy(tape, pred, sg.label.class_index));
        else {
            targets.push_back(sg.label.target);
            groups.push_back(sg.group);
        }
    }
    Tape::Id loss;
    if (task == Task::classification)
        loss = tape.mean_scalar(std::move(losses));
    else
        loss = tape.scale(tape_pairwise_hinge(tape, preds, targets, groups),
                          1.0 / static_cast<double>(batch.size()));

    st.model.params.zero_grads();
    tape.backward(loss);
    double loss_value = tape.value(loss).a[0];
    if (!std::isfinite(loss_value)) throw std::runtime_error("non-finite finetuning loss");
    adam_step(st.model.params, plan.adam, "head.");
    ++st.iteration;

    StepResult res;
    res.loss = loss_value;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (task == Task::classification)
            res.predicted_class.push_back(argmax_row(tape.value(preds[b])));
        else {
            res.scores.push_back(tape.value(preds[b]).a[0]);
            res.targets.push_back(batch[b]->label.target);
            res.groups.push_back(batch[b]->group);
        }
    }
    return res;
}

// head-only training stage: `epochs` passes over the graphs in a seeded
// shuffled order, one optimizer step per batch. The table must have been
// refreshed immediately before (finetune_step throws on missing entries).
inline void finetune_head(TrainState& st, const TrainPlan& plan, Task task,
                          const std::vector<const SegmentedGraph*>& graphs, int epochs) {
    if (epochs < 0) throw ConfigError("finetune_head: epochs must be >= 0");
    std::vector<std::size_t> order(graphs.size());
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < epochs; ++e) {
        Rng rng = derived_rng(plan.seed, "finetune-shuffle", static_cast<std::uint64_t>(e));
        rng.shuffle(order);
        for (std::size_t pos = 0; pos < order.size();
             pos += static_cast<std::size_t>(plan.batch_size)) {
            std::vector<const SegmentedGraph*> batch;
            for (std::size_t k = pos;
                 k < std::min(order.size(), pos + static_cast<std::size_t>(plan.batch_size)); ++k)
                batch.push_back(graphs[order[k]]);
            finetune_step(st, plan, task, batch);
        }
        ++st.epoch;
    }
}

struct EvalOutcome {
    double loss = 0.0;
    std::optional<double> metric;  // accuracy or ordered-pair accuracy
    int count = 0;
};

// fresh-segment evaluation: every segment forwarded grad-disabled with the
// current parameters, unit weights
inline EvalOutcome evaluate(const Model& model, const std::vector<const SegmentedGraph*>& graphs,
                            Task task) {
    EvalOutcome out;
    out.count = static_cast<int>(graphs.size());
    if (graphs.empty()) return out;
    std::vector<Mat> preds(graphs.size());
    int threads = worker_count();
    parallel_for(graphs.size(), threads, [&](std::size_t i) {
        const SegmentedGraph& sg = *graphs[i];
        std::vector<Mat> embs;
        embs.reserve(sg.segments.size());
        for (const auto& seg : sg.segments) embs.push_back(forward_segment_nograd(model, seg));
        Mat agg = aggregate(embs, std::vector<double>(sg.segments.size(), 1.0), task,
                            sg.segment_count());
        preds[i] = head_forward_nograd(model, agg);
    });
    if (task == Task::classification) {
        std::vector<int> phat, truth;
        double loss = 0.0;
        for (std::size_t i = 0; i < graphs.size(); ++i) {
            loss += cross_entropy(preds[i], graphs[i]->label.class_index);
            phat.push_back(argmax_row(preds[i]));
            truth.push_back(graphs[i]->label.class_index);
        }
        out.loss = loss / static_cast<double>(graphs.size());
        out.metric = accuracy(phat, truth);
    } else {
        std::vector<double> scores, targets;
        std::vector<int> groups;
        for (std::size_t i = 0; i < graphs.size(); ++i) {
            scores.push_back(preds[i].a[0]);
            targets.push_back(graphs[i]->label.target);
            groups.push_back(graphs[i]->group);
        }
        out.loss = pairwise_hinge(scores, targets, groups) / static_cast<double>(graphs.size());
        out.metric = ordered_pair_accuracy(scores, targets, groups);
    }
    return out;
}

}  // namespace segtrain
