#pragma once

#include <fstream>
#include <string>

#include "json.hpp"
#include "segtrain/common.hpp"
#include "segtrain/engine.hpp"
#include "segtrain/model.hpp"
#include "segtrain/partition.hpp"

namespace segtrain {

// Everything one training run needs, JSON round-trippable. Width fields left
// at 0 mean "infer from the dataset" (feature_width, and out_dim = classes or
// 1 for ranking scores).

struct ExperimentConfig {
    std::string dataset;
    std::string splits;
    std::string cache;  // segment cache path; empty = repartition every run
    std::string out_dir = "run-out";
    PartitionMethod method = PartitionMethod::locality_edge_cut;
    int cap = 200;
    TrainPlan plan;
    ModelConfig model{0, 24, 2, 1, 0};
    int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only

    void validate() const {
        plan.validate();
        if (cap < 1) throw ConfigError("partition cap must be >= 1");
        if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
        if (model.hidden < 1 || model.mp_layers < 0 || model.head_hidden < 0 ||
            model.feature_width < 0 || model.out_dim < 0)
            throw ConfigError("model dimensions must be non-negative");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["dataset"] = dataset;
        j["splits"] = splits;
        j["cache"] = cache;
        j["out_dir"] = out_dir;
        j["partition"] = {{"method", to_string(method)}, {"cap", cap}};
        nlohmann::json t;
        t["variant"] = to_string(plan.variant);
        t["S"] = plan.S;
        t["p"] = plan.p;
        t["batch_size"] = plan.batch_size;
        t["epochs"] = plan.epochs;
        t["finetune_epochs"] = plan.finetune_epochs;
        t["seed"] = plan.seed;
        t["eval_every"] = plan.eval_every;
        if (plan.budget_nodes) t["budget_nodes"] = *plan.budget_nodes;
        j["train"] = std::move(t);
        j["adam"] = {{"lr", plan.adam.lr},
                     {"beta1", plan.adam.beta1},
                     {"beta2", plan.adam.beta2},
                     {"eps", plan.adam.eps},
                     {"weight_decay", plan.adam.weight_decay}};
        j["model"] = {{"feature_width", model.feature_width},
                      {"hidden", model.hidden},
                      {"mp_layers", model.mp_layers},
                      {"head_hidden", model.head_hidden},
                      {"out_dim", model.out_dim}};
        j["checkpoint_every"] = checkpoint_every;
        return j;
    }

    // canonical dump (sorted keys) keeps the hash stable across field order
    std::uint64_t hash() const { return fnv1a64(to_json().dump()); }

    static ExperimentConfig from_json(const nlohmann::json& j);
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                           const std::string& where) {
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (item.key() == a) ok = true;
        if (!ok) throw ConfigError(where + ": unknown key \"" + item.key() + "\"");
    }
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    detail::reject_unknown(j,
                           {"dataset", "splits", "cache", "out_dir", "partition", "train", "adam",
                            "model", "checkpoint_every"},
                           "config");
    ExperimentConfig c;
    try {
        c.dataset = j.value("dataset", c.dataset);
        c.splits = j.value("splits", c.splits);
        c.cache = j.value("cache", c.cache);
        c.out_dir = j.value("out_dir", c.out_dir);
        if (j.contains("partition")) {
            const auto& p = j["partition"];
            detail::reject_unknown(p, {"method", "cap"}, "config.partition");
            if (p.contains("method")) c.method = partition_method_from(p["method"].get<std::string>());
            c.cap = p.value("cap", c.cap);
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            detail::reject_unknown(t,
                                   {"variant", "S", "p", "batch_size", "epochs", "finetune_epochs",
                                    "seed", "eval_every", "budget_nodes"},
                                   "config.train");
            if (t.contains("variant")) c.plan.variant = variant_from(t["variant"].get<std::string>());
            c.plan.S = t.value("S", c.plan.S);
            c.plan.p = t.value("p", c.plan.p);
            c.plan.batch_size = t.value("batch_size", c.plan.batch_size);
            c.plan.epochs = t.value("epochs", c.plan.epochs);
            c.plan.finetune_epochs = t.value("finetune_epochs", c.plan.finetune_epochs);
            c.plan.seed = t.value("seed", c.plan.seed);
            c.plan.eval_every = t.value("eval_every", c.plan.eval_every);
            if (t.contains("budget_nodes") && !t["budget_nodes"].is_null())
                c.plan.budget_nodes = t["budget_nodes"].get<long long>();
        }
        if (j.contains("adam")) {
            const auto& a = j["adam"];
            detail::reject_unknown(a, {"lr", "beta1", "beta2", "eps", "weight_decay"},
                                   "config.adam");
            c.plan.adam.lr = a.value("lr", c.plan.adam.lr);
            c.plan.adam.beta1 = a.value("beta1", c.plan.adam.beta1);
            c.plan.adam.beta2 = a.value("beta2", c.plan.adam.beta2);
            c.plan.adam.eps = a.value("eps", c.plan.adam.eps);
            c.plan.adam.weight_decay = a.value("weight_decay", c.plan.adam.weight_decay);
        }
        if (j.contains("model")) {
            const auto& m = j["model"];
            detail::reject_unknown(
                m, {"feature_width", "hidden", "mp_layers", "head_hidden", "out_dim"},
                "config.model");
            c.model.feature_width = m.value("feature_width", c.model.feature_width);
            c.model.hidden = m.value("hidden", c.model.hidden);
            c.model.mp_layers = m.value("mp_layers", c.model.mp_layers);
            c.model.head_hidden = m.value("head_hidden", c.model.head_hidden);
            c.model.out_dim = m.value("out_dim", c.model.out_dim);
        }
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

// fills inferred widths from the dataset; everything else must already be set
inline ModelConfig resolve_model(const ExperimentConfig& c, const Dataset& ds) {
    ModelConfig mc = c.model;
    if (mc.feature_width == 0) mc.feature_width = ds.feature_width;
    if (mc.out_dim == 0)
        mc.out_dim = ds.task == Task::classification ? ds.num_classes : 1;
    if (mc.feature_width != ds.feature_width)
        throw ConfigError("config feature_width does not match the dataset");
    if (ds.task == Task::classification && mc.out_dim != ds.num_classes)
        throw ConfigError("config out_dim does not match the dataset's class count");
    if (ds.task == Task::regression_ranking && mc.out_dim != 1)
        throw ConfigError("ranking needs out_dim 1");
    mc.validate();
    return mc;
}

}  // namespace segtrain
