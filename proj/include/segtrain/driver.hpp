#pragma once

#include <chrono>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "segtrain/engine.hpp"

namespace segtrain {

// ----- checkpoints -----
// Single JSON document: parameters with optimizer state, embedding table,
// progress counters and the master seed. Doubles round-trip exactly, so a
// reloaded run continues bit-for-bit.

inline nlohmann::json checkpoint_to_json(const TrainState& st, const TrainPlan& plan,
                                         const ModelConfig& mc, std::uint64_t config_hash) {
    nlohmann::json j;
    j["config_hash"] = hex64(config_hash);
    j["seed"] = plan.seed;
    j["iteration"] = st.iteration;
    j["epoch"] = st.epoch;
    j["model"] = {{"feature_width", mc.feature_width}, {"hidden", mc.hidden},
                  {"mp_layers", mc.mp_layers},         {"head_hidden", mc.head_hidden},
                  {"out_dim", mc.out_dim}};
    auto params = nlohmann::json::array();
    for (const auto& e : st.model.params.entries) {
        nlohmann::json pj;
        pj["name"] = e.name;
        pj["rows"] = e.value.rows;
        pj["cols"] = e.value.cols;
        pj["value"] = e.value.a;
        pj["m"] = e.m.a;
        pj["v"] = e.v.a;
        pj["step"] = e.step;
        params.push_back(std::move(pj));
    }
    j["params"] = std::move(params);
    j["table"] = st.table.to_json();
    return j;
}

inline TrainState checkpoint_from_json(const nlohmann::json& j, ModelConfig* mc_out = nullptr) {
    ModelConfig mc;
    mc.feature_width = j.at("model").at("feature_width").get<int>();
    mc.hidden = j.at("model").at("hidden").get<int>();
    mc.mp_layers = j.at("model").at("mp_layers").get<int>();
    mc.head_hidden = j.at("model").at("head_hidden").get<int>();
    mc.out_dim = j.at("model").at("out_dim").get<int>();
    if (mc_out) *mc_out = mc;
    TrainState st;
    st.model = Model::build(mc, j.at("seed").get<std::uint64_t>());
    for (const auto& pj : j.at("params")) {
        auto& e = st.model.params.by_name(pj.at("name").get<std::string>());
        e.value.a = pj.at("value").get<std::vector<double>>();
        e.m.a = pj.at("m").get<std::vector<double>>();
        e.v.a = pj.at("v").get<std::vector<double>>();
        e.step = pj.at("step").get<long long>();
    }
    st.table = EmbeddingTable::from_json(j.at("table"));
    st.iteration = j.at("iteration").get<long long>();
    st.epoch = j.at("epoch").get<int>();
    return st;
}

inline void save_checkpoint(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump() << "\n";
    if (!out) throw IoError("write failed: " + path);
}

inline nlohmann::json load_checkpoint_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + e.what());
    }
}

// ----- run log -----

struct EpochRecord {
    int epoch = 0;
    std::string stage;  // "train" or "finetune"
    double loss = 0.0;
    double train_metric = 0.0;  // metric over the stage's own step predictions
    std::optional<double> val_metric;
    std::optional<double> test_metric;
    StepCounters counters;
    long long table_entries = 0;
    long long table_staleness_max = 0;
    double table_staleness_mean = 0.0;
    double wall_ms = 0.0;

    nlohmann::json to_json(std::uint64_t config_hash) const {
        nlohmann::json j;
        j["config_hash"] = hex64(config_hash);
        j["epoch"] = epoch;
        j["stage"] = stage;
        j["loss"] = loss;
        j["train_metric"] = train_metric;
        if (val_metric) j["val_metric"] = *val_metric;
        if (test_metric) j["test_metric"] = *test_metric;
        j["grad_nodes"] = counters.grad_nodes;
        j["nograd_nodes"] = counters.nograd_nodes;
        j["table_lookups"] = counters.table_lookups;
        j["table_skips"] = counters.table_skips;
        j["warmups"] = counters.warmups;
        j["peak_retained"] = counters.peak_retained;
        j["table_entries"] = table_entries;
        j["table_staleness_max"] = table_staleness_max;
        j["table_staleness_mean"] = table_staleness_mean;
        j["wall_ms"] = wall_ms;
        return j;
    }
};

struct TrainOutput {
    TrainState state;
    std::vector<EpochRecord> records;
    std::vector<double> step_losses;  // every optimizer step, both stages
    EvalOutcome final_train, final_val, final_test;
    std::optional<double> pre_finetune_test_metric;
    std::optional<double> pre_finetune_train_metric;

    nlohmann::json summary(std::uint64_t config_hash) const {
        nlohmann::json j;
        j["config_hash"] = hex64(config_hash);
        j["epochs"] = state.epoch;
        j["iterations"] = state.iteration;
        j["final_train_loss"] = final_train.loss;
        if (final_train.metric) j["final_train_metric"] = *final_train.metric;
        if (final_val.metric) j["final_val_metric"] = *final_val.metric;
        if (final_test.metric) j["final_test_metric"] = *final_test.metric;
        if (pre_finetune_test_metric) j["pre_finetune_test_metric"] = *pre_finetune_test_metric;
        if (pre_finetune_train_metric) j["pre_finetune_train_metric"] = *pre_finetune_train_metric;
        return j;
    }
};

struct RunHooks {
    // called after each completed epoch (either stage)
    std::function<void(const TrainState&, const EpochRecord&)> on_epoch;
    // checkpoint cadence handled by the caller inside on_epoch
};

namespace detail {

inline double metric_from_steps(Task task, const std::vector<int>& phat,
                                const std::vector<int>& truth, const std::vector<double>& scores,
                                const std::vector<double>& targets,
                                const std::vector<int>& groups) {
    if (task == Task::classification) {
        if (phat.empty()) return 0.0;
        return accuracy(phat, truth);
    }
    auto m = ordered_pair_accuracy(scores, targets, groups);
    return m ? *m : 0.0;
}

}  // namespace detail

// Full run: `epochs` of segment training, then refresh_all and
// `finetune_epochs` of head-only training. Resumes mid-run when `start`
// carries a state whose epoch > 0. Order of graphs, segment choices and
// dropout all derive from plan.seed, so equal inputs give equal runs.
inline TrainOutput run_training(const std::vector<SegmentedGraph>& train,
                                const std::vector<SegmentedGraph>& val,
                                const std::vector<SegmentedGraph>& test, const TrainPlan& plan,
                                const ModelConfig& model_cfg, Task task,
                                std::optional<TrainState> start = std::nullopt,
                                const RunHooks& hooks = {}) {
    plan.validate();
    model_cfg.validate();
    if (train.empty()) throw ConfigError("training split is empty");

    TrainOutput out;
    if (start) {
        out.state = std::move(*start);
    } else {
        out.state.model = Model::build(model_cfg, plan.seed);
    }
    TrainState& st = out.state;

    auto ptrs = [](const std::vector<SegmentedGraph>& v) {
        std::vector<const SegmentedGraph*> p;
        p.reserve(v.size());
        for (const auto& sg : v) p.push_back(&sg);
        return p;
    };
    std::vector<const SegmentedGraph*> train_ptrs = ptrs(train);
    std::vector<const SegmentedGraph*> val_ptrs = ptrs(val);
    std::vector<const SegmentedGraph*> test_ptrs = ptrs(test);

    int total_epochs = plan.epochs + plan.finetune_epochs;
    bool refreshed = st.epoch > plan.epochs;  // resuming inside the finetune stage

    for (int epoch = st.epoch; epoch < total_epochs; ++epoch) {
        bool finetune = epoch >= plan.epochs;
        if (finetune && !refreshed) {
            if (!val_ptrs.empty() || !test_ptrs.empty()) {
                // snapshot the gap before the head is retrained
                EvalOutcome pre_test = evaluate(st.model, test_ptrs, task);
                out.pre_finetune_test_metric = pre_test.metric;
            }
            refresh_all(st, train_ptrs);
            refreshed = true;
        }
        auto t0 = std::chrono::steady_clock::now();

        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng = derived_rng(plan.seed, finetune ? "shuffle-ft" : "shuffle",
                                      static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        if (task == Task::regression_ranking) {
            // The pairwise loss only compares graphs sharing a group, so keep
            // each group's configurations contiguous (group blocks shuffled,
            // members shuffled within the block) or batches rarely contain a
            // comparable pair at all.
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return train[a].group < train[b].group;
            });
            std::vector<int> uniq;
            for (std::size_t i : order)
                if (uniq.empty() || uniq.back() != train[i].group) uniq.push_back(train[i].group);
            shuffle_rng.shuffle(uniq);
            std::unordered_map<int, std::size_t> rank;
            for (std::size_t r = 0; r < uniq.size(); ++r)
                rank[uniq[r]] = r;
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return rank[train[a].group] < rank[train[b].group];
            });
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.stage = finetune ? "finetune" : "train";
        double loss_sum = 0.0;
        int steps = 0;
        std::vector<int> phat, truth;
        std::vector<double> scores, targets;
        std::vector<int> groups;

        for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(plan.batch_size)) {
            std::vector<const SegmentedGraph*> batch;
            for (std::size_t k = pos;
                 k < std::min(order.size(), pos + static_cast<std::size_t>(plan.batch_size)); ++k)
                batch.push_back(train_ptrs[order[k]]);
            StepResult sr = finetune ? finetune_step(st, plan, task, batch)
                                     : train_step(st, plan, task, batch);
            loss_sum += sr.loss;
            ++steps;
            out.step_losses.push_back(sr.loss);
            rec.counters.merge(sr.counters);
            if (task == Task::classification) {
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    phat.push_back(sr.predicted_class[b]);
                    truth.push_back(batch[b]->label.class_index);
                }
            } else {
                scores.insert(scores.end(), sr.scores.begin(), sr.scores.end());
                targets.insert(targets.end(), sr.targets.begin(), sr.targets.end());
                groups.insert(groups.end(), sr.groups.begin(), sr.groups.end());
            }
        }
        st.epoch = epoch + 1;

        rec.loss = steps ? loss_sum / steps : 0.0;
        rec.train_metric = detail::metric_from_steps(task, phat, truth, scores, targets, groups);
        bool last = epoch + 1 == total_epochs;
        if (!val_ptrs.empty() && (epoch % plan.eval_every == plan.eval_every - 1 || last))
            rec.val_metric = evaluate(st.model, val_ptrs, task).metric;
        auto st_stats = st.table.staleness(st.iteration);
        rec.table_entries = static_cast<long long>(st_stats.entries);
        rec.table_staleness_max = st_stats.max;
        rec.table_staleness_mean = st_stats.mean;
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                                t0)
                          .count();
        if (hooks.on_epoch) hooks.on_epoch(st, rec);
        out.records.push_back(std::move(rec));
    }

    // pre-finetune training metric for gap reporting: last train-stage record
    for (const auto& r : out.records)
        if (r.stage == "train") out.pre_finetune_train_metric = r.train_metric;

    out.final_train = evaluate(st.model, train_ptrs, task);
    if (!val_ptrs.empty()) out.final_val = evaluate(st.model, val_ptrs, task);
    if (!test_ptrs.empty()) out.final_test = evaluate(st.model, test_ptrs, task);
    return out;
}

}  // namespace segtrain
