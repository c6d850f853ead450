// Command-line front end: generate | partition | train | eval | analyze.
// Exit codes: 0 ok, 1 unexpected error, 2 bad configuration, 3 activation
// budget exceeded, 4 file IO failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "segtrain/analysis.hpp"
#include "segtrain/config.hpp"
#include "segtrain/driver.hpp"
#include "segtrain/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace segtrain;

namespace {

void emit(const json& report, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << report.dump(2) << "\n";
        return;
    }
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write " + out_path);
    out << report.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + out_path);
    std::cerr << "wrote " << out_path << "\n";
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::size_t at = 0;
    while (at <= s.size()) {
        std::size_t to = s.find(',', at);
        if (to == std::string::npos) to = s.size();
        std::string tok = s.substr(at, to - at);
        if (tok.empty()) throw ConfigError("empty entry in list: " + s);
        std::size_t used = 0;
        double v = std::stod(tok, &used);
        if (used != tok.size()) throw ConfigError("bad number in list: " + tok);
        out.push_back(v);
        at = to + 1;
    }
    if (out.empty()) throw ConfigError("empty list");
    return out;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    for (double v : parse_double_list(s)) {
        int i = static_cast<int>(v);
        if (static_cast<double>(i) != v) throw ConfigError("expected integers in list: " + s);
        out.push_back(i);
    }
    return out;
}

// moves each split's segmented graphs out of the flat per-dataset vector
struct SplitSegments {
    std::vector<SegmentedGraph> train, val, test;
};

SplitSegments split_segments(std::vector<SegmentedGraph>&& segs, const Splits& sp) {
    std::unordered_map<int, std::size_t> at;
    for (std::size_t i = 0; i < segs.size(); ++i)
        at[segs[i].parent_id] = i;
    SplitSegments out;
    auto take = [&](const std::vector<int>& ids, std::vector<SegmentedGraph>& dst) {
        dst.reserve(ids.size());
        for (int id : ids) {
            auto it = at.find(id);
            if (it == at.end()) throw ConfigError("split references unknown graph " + std::to_string(id));
            dst.push_back(std::move(segs[it->second]));
        }
    };
    take(sp.train, out.train);
    take(sp.val, out.val);
    take(sp.test, out.test);
    return out;
}

std::vector<const SegmentedGraph*> as_ptrs(const std::vector<SegmentedGraph>& v) {
    std::vector<const SegmentedGraph*> p;
    p.reserve(v.size());
    for (const auto& sg : v) p.push_back(&sg);
    return p;
}

// segmentation honoring the variant (whole graphs for `full`) and the cache
std::vector<SegmentedGraph> segment_for_config(const ExperimentConfig& cfg, const Dataset& ds) {
    if (cfg.plan.variant == Variant::full) return whole_graph_segmentation(ds);
    SegmentCacheKey key{dataset_hash(ds), cfg.method, cfg.cap, cfg.plan.seed};
    if (!cfg.cache.empty() && fs::exists(cfg.cache)) {
        auto cached = load_segment_cache(cfg.cache, key);
        if (cached) {
            std::cerr << "segment cache hit: " << cfg.cache << "\n";
            return std::move(*cached);
        }
        std::cerr << "segment cache stale, repartitioning\n";
    }
    auto segs = partition_dataset(ds, cfg.method, cfg.cap, cfg.plan.seed);
    if (!cfg.cache.empty())
        save_segment_cache(segs, key.dataset_hash, cfg.method, cfg.cap, cfg.plan.seed, cfg.cache);
    return segs;
}

// one quiet end-to-end run; used by the ablation sweeps
struct SweepResult {
    double test_metric = 0.0;
    long long peak_retained = 0;
    double mean_segments = 0.0;
};

SweepResult run_for_sweep(const ExperimentConfig& cfg, const Dataset& ds, const Splits& sp) {
    ModelConfig mc = resolve_model(cfg, ds);
    auto parts = split_segments(segment_for_config(cfg, ds), sp);
    SweepResult r;
    double segsum = 0.0;
    for (const auto& sg : parts.train) segsum += sg.segment_count();
    r.mean_segments = parts.train.empty() ? 0.0 : segsum / static_cast<double>(parts.train.size());
    TrainOutput out = run_training(parts.train, parts.val, parts.test, cfg.plan, mc, ds.task);
    for (const auto& rec : out.records)
        r.peak_retained = std::max(r.peak_retained, rec.counters.peak_retained);
    r.test_metric = out.final_test.metric.value_or(0.0);
    return r;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v), s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// ----- generate -----

struct GenerateArgs {
    std::string family = "classification";
    std::string out_dir = ".";
    double train_frac = 0.6, val_frac = 0.2;
    std::uint64_t seed = 1;
    int graphs = 300, classes = 5;
    int base_graphs = 40, configs = 6;
    int min_nodes = 0, max_nodes = 0;  // 0 = family default
    int community = 0, feature_width = 0;
    double low = 0.1, high = 0.9, spread = 0.35, band_margin = 0.1, perturb = 0.5;
};

void add_generate(CLI::App& app) {
    auto a = std::make_shared<GenerateArgs>();
    auto* cmd = app.add_subcommand("generate", "write a synthetic benchmark dataset and splits");
    cmd->add_option("--family", a->family, "classification | ranking")
        ->check(CLI::IsMember({"classification", "ranking"}));
    cmd->add_option("--out", a->out_dir, "output directory (dataset.jsonl, splits.json)");
    cmd->add_option("--train-frac", a->train_frac, "train fraction");
    cmd->add_option("--val-frac", a->val_frac, "validation fraction");
    cmd->add_option("--seed", a->seed, "generator seed");
    cmd->add_option("--graphs", a->graphs, "classification: number of graphs");
    cmd->add_option("--classes", a->classes, "classification: number of classes");
    cmd->add_option("--base-graphs", a->base_graphs, "ranking: number of base graphs");
    cmd->add_option("--configs", a->configs, "ranking: configurations per base graph");
    cmd->add_option("--min-nodes", a->min_nodes, "smallest graph");
    cmd->add_option("--max-nodes", a->max_nodes, "largest graph");
    cmd->add_option("--community", a->community, "target community size");
    cmd->add_option("--feature-width", a->feature_width, "node feature width");
    cmd->add_option("--low", a->low, "classification: lowest class mark level");
    cmd->add_option("--high", a->high, "classification: highest class mark level");
    cmd->add_option("--spread", a->spread, "classification: per-community level spread");
    cmd->add_option("--band-margin", a->band_margin, "classification: clear share at band edges");
    cmd->add_option("--perturb", a->perturb, "ranking: per-config feature shift half-width");
    cmd->callback([a]() {
        Dataset ds;
        if (a->family == "classification") {
            ClassificationSpec spec;
            spec.num_graphs = a->graphs;
            spec.num_classes = a->classes;
            if (a->min_nodes) spec.min_nodes = a->min_nodes;
            if (a->max_nodes) spec.max_nodes = a->max_nodes;
            if (a->community) spec.community_target = a->community;
            if (a->feature_width) spec.feature_width = a->feature_width;
            spec.low_fraction = a->low;
            spec.high_fraction = a->high;
            spec.community_spread = a->spread;
            spec.band_margin = a->band_margin;
            spec.seed = a->seed;
            ds = generate_classification(spec);
        } else {
            RankingSpec spec;
            spec.num_base_graphs = a->base_graphs;
            spec.configs_per_graph = a->configs;
            if (a->min_nodes) spec.min_nodes = a->min_nodes;
            if (a->max_nodes) spec.max_nodes = a->max_nodes;
            if (a->community) spec.community_target = a->community;
            if (a->feature_width) spec.feature_width = a->feature_width;
            spec.perturb = a->perturb;
            spec.seed = a->seed;
            ds = generate_ranking(spec);
        }
        Splits sp = default_splits(ds, a->train_frac, a->val_frac, a->seed);
        fs::create_directories(a->out_dir);
        std::string dpath = a->out_dir + "/dataset.jsonl";
        std::string spath = a->out_dir + "/splits.json";
        save_dataset(ds, dpath);
        save_splits(sp, spath);
        json rep;
        rep["dataset"] = dpath;
        rep["splits"] = spath;
        rep["task"] = ds.task == Task::classification ? "classification" : "ranking";
        rep["graphs"] = ds.graphs.size();
        rep["train"] = sp.train.size();
        rep["val"] = sp.val.size();
        rep["test"] = sp.test.size();
        rep["dataset_hash"] = hex64(dataset_hash(ds));
        std::cout << rep.dump(2) << "\n";
    });
}

// ----- partition -----

struct PartitionArgs {
    std::string dataset, out;
    std::string method = "locality-edge-cut";
    int cap = 200;
    std::uint64_t seed = 1;
};

void add_partition(CLI::App& app) {
    auto a = std::make_shared<PartitionArgs>();
    auto* cmd = app.add_subcommand("partition", "segment every graph and report cut statistics");
    cmd->add_option("--dataset", a->dataset, "dataset JSONL")->required();
    cmd->add_option("--method", a->method,
                    "random-edge-cut | locality-edge-cut | random-vertex-cut | "
                    "degree-hash-vertex-cut");
    cmd->add_option("--cap", a->cap, "max nodes per segment");
    cmd->add_option("--seed", a->seed, "partitioning seed");
    cmd->add_option("--out", a->out, "segment cache to write (JSONL)");
    cmd->callback([a]() {
        Dataset ds = load_dataset(a->dataset);
        PartitionMethod method = partition_method_from(a->method);
        auto segs = partition_dataset(ds, method, a->cap, a->seed);
        if (!a->out.empty())
            save_segment_cache(segs, dataset_hash(ds), method, a->cap, a->seed, a->out);
        double cut_sum = 0.0, rep_sum = 0.0, seg_sum = 0.0;
        int max_nodes = 0, max_segments = 0;
        for (const auto& sg : segs) {
            PartitionStats st = partition_stats(sg);
            cut_sum += st.edge_cut_ratio;
            rep_sum += st.replication_factor;
            seg_sum += st.segment_count;
            max_segments = std::max(max_segments, st.segment_count);
            max_nodes = std::max(max_nodes, sg.max_segment_nodes());
        }
        double n = static_cast<double>(segs.size());
        json rep;
        rep["method"] = a->method;
        rep["cap"] = a->cap;
        rep["graphs"] = segs.size();
        rep["mean_segments"] = seg_sum / n;
        rep["max_segments"] = max_segments;
        rep["max_segment_nodes"] = max_nodes;
        rep["mean_edge_cut_ratio"] = cut_sum / n;
        rep["mean_replication_factor"] = rep_sum / n;
        if (!a->out.empty()) rep["cache"] = a->out;
        std::cout << rep.dump(2) << "\n";
    });
}

// ----- train -----

struct TrainArgs {
    std::string config_path, resume;
    std::string dataset, splits, cache, out_dir, variant, method;
    int S = 0, batch_size = 0, epochs = -1, finetune_epochs = -1, eval_every = 0, cap = 0;
    int checkpoint_every = -1, hidden = 0, mp_layers = -1;
    double p = -1.0, lr = 0.0, weight_decay = -1.0;
    std::uint64_t seed = 0;
    long long budget = -1;
    CLI::Option *o_dataset = nullptr, *o_splits = nullptr, *o_cache = nullptr, *o_out = nullptr,
                *o_variant = nullptr, *o_method = nullptr, *o_s = nullptr, *o_batch = nullptr,
                *o_epochs = nullptr, *o_ft = nullptr, *o_eval = nullptr, *o_cap = nullptr,
                *o_ckpt = nullptr, *o_p = nullptr, *o_lr = nullptr, *o_wd = nullptr,
                *o_seed = nullptr, *o_budget = nullptr, *o_hidden = nullptr, *o_mp = nullptr;
};

void apply_train_overrides(const TrainArgs& a, ExperimentConfig& cfg) {
    if (a.o_dataset->count()) cfg.dataset = a.dataset;
    if (a.o_splits->count()) cfg.splits = a.splits;
    if (a.o_cache->count()) cfg.cache = a.cache;
    if (a.o_out->count()) cfg.out_dir = a.out_dir;
    if (a.o_variant->count()) cfg.plan.variant = variant_from(a.variant);
    if (a.o_method->count()) cfg.method = partition_method_from(a.method);
    if (a.o_s->count()) cfg.plan.S = a.S;
    if (a.o_batch->count()) cfg.plan.batch_size = a.batch_size;
    if (a.o_epochs->count()) cfg.plan.epochs = a.epochs;
    if (a.o_ft->count()) cfg.plan.finetune_epochs = a.finetune_epochs;
    if (a.o_eval->count()) cfg.plan.eval_every = a.eval_every;
    if (a.o_cap->count()) cfg.cap = a.cap;
    if (a.o_ckpt->count()) cfg.checkpoint_every = a.checkpoint_every;
    if (a.o_p->count()) cfg.plan.p = a.p;
    if (a.o_lr->count()) cfg.plan.adam.lr = a.lr;
    if (a.o_wd->count()) cfg.plan.adam.weight_decay = a.weight_decay;
    if (a.o_seed->count()) cfg.plan.seed = a.seed;
    if (a.o_hidden->count()) cfg.model.hidden = a.hidden;
    if (a.o_mp->count()) cfg.model.mp_layers = a.mp_layers;
    if (a.o_budget->count()) {
        if (a.budget == 0)
            cfg.plan.budget_nodes.reset();
        else
            cfg.plan.budget_nodes = a.budget;
    }
}

void add_train(CLI::App& app) {
    auto a = std::make_shared<TrainArgs>();
    auto* cmd = app.add_subcommand("train", "train a model and write run outputs");
    cmd->add_option("--config", a->config_path, "experiment config JSON");
    a->o_dataset = cmd->add_option("--dataset", a->dataset, "dataset JSONL");
    a->o_splits = cmd->add_option("--splits", a->splits, "splits JSON");
    a->o_cache = cmd->add_option("--cache", a->cache, "segment cache path");
    a->o_out = cmd->add_option("--out", a->out_dir, "output directory");
    a->o_variant = cmd->add_option("--variant", a->variant,
                                   "full | gst-one | gst | gst-e | gst-efd");
    a->o_method = cmd->add_option("--partition-method", a->method, "partitioner");
    a->o_s = cmd->add_option("--S", a->S, "gradient segments per graph");
    a->o_p = cmd->add_option("--p", a->p, "keep probability for stale embeddings");
    a->o_batch = cmd->add_option("--batch-size", a->batch_size, "graphs per step");
    a->o_epochs = cmd->add_option("--epochs", a->epochs, "segment-training epochs");
    a->o_ft = cmd->add_option("--finetune-epochs", a->finetune_epochs, "head-only epochs");
    a->o_eval = cmd->add_option("--eval-every", a->eval_every, "validation cadence (epochs)");
    a->o_cap = cmd->add_option("--segments-cap", a->cap, "max nodes per segment");
    a->o_ckpt = cmd->add_option("--checkpoint-every", a->checkpoint_every,
                                "epochs between checkpoints (0 = final only)");
    a->o_lr = cmd->add_option("--lr", a->lr, "Adam learning rate");
    a->o_wd = cmd->add_option("--weight-decay", a->weight_decay, "decoupled weight decay");
    a->o_hidden = cmd->add_option("--hidden", a->hidden, "embedding width");
    a->o_mp = cmd->add_option("--mp-layers", a->mp_layers, "message-passing rounds");
    a->o_seed = cmd->add_option("--seed", a->seed, "master seed");
    a->o_budget = cmd->add_option("--budget-nodes", a->budget,
                                  "retained-activation cap per step (0 = unlimited)");
    cmd->add_option("--resume", a->resume, "checkpoint JSON to continue from");
    cmd->callback([a]() {
        ExperimentConfig cfg;
        if (!a->config_path.empty()) cfg = load_experiment_config(a->config_path);
        apply_train_overrides(*a, cfg);
        cfg.validate();
        if (cfg.dataset.empty()) throw ConfigError("train needs --dataset or a config with one");
        if (cfg.splits.empty()) throw ConfigError("train needs --splits or a config with one");

        Dataset ds = load_dataset(cfg.dataset);
        Splits sp = load_splits(cfg.splits, ds);
        ModelConfig mc = resolve_model(cfg, ds);
        auto parts = split_segments(segment_for_config(cfg, ds), sp);
        std::uint64_t chash = cfg.hash();

        std::optional<TrainState> start;
        if (!a->resume.empty()) {
            json cj = load_checkpoint_json(a->resume);
            if (cj.value("config_hash", "") != hex64(chash))
                throw ConfigError("checkpoint was written under a different config");
            start = checkpoint_from_json(cj);
            std::cerr << "resuming at epoch " << start->epoch << ", iteration "
                      << start->iteration << "\n";
        }

        fs::create_directories(cfg.out_dir);
        {
            std::ofstream cfg_out(cfg.out_dir + "/config.json");
            if (!cfg_out) throw IoError("cannot write " + cfg.out_dir + "/config.json");
            cfg_out << cfg.to_json().dump(2) << "\n";
        }
        std::ofstream runlog(cfg.out_dir + "/runlog.jsonl",
                             start ? std::ios::app : std::ios::trunc);
        if (!runlog) throw IoError("cannot write " + cfg.out_dir + "/runlog.jsonl");

        int total_epochs = cfg.plan.epochs + cfg.plan.finetune_epochs;
        RunHooks hooks;
        hooks.on_epoch = [&](const TrainState& st, const EpochRecord& rec) {
            runlog << rec.to_json(chash).dump() << "\n";
            runlog.flush();
            if (rec.stage == "finetune" && rec.epoch == cfg.plan.epochs)
                std::cerr << "finetuning head (epoch " << rec.epoch << ", backbone frozen)\n";
            std::cerr << "[" << rec.stage << " " << rec.epoch + 1 << "/" << total_epochs
                      << "] loss " << rec.loss << " metric " << rec.train_metric;
            if (rec.val_metric) std::cerr << " val " << *rec.val_metric;
            std::cerr << " (" << static_cast<long long>(rec.wall_ms) << " ms)\n";
            if (cfg.checkpoint_every > 0 && (rec.epoch + 1) % cfg.checkpoint_every == 0 &&
                rec.epoch + 1 < total_epochs) {
                std::string path = cfg.out_dir + "/checkpoint-epoch-" +
                                   std::to_string(rec.epoch + 1) + ".json";
                save_checkpoint(checkpoint_to_json(st, cfg.plan, mc, chash), path);
            }
        };

        TrainOutput out = run_training(parts.train, parts.val, parts.test, cfg.plan, mc, ds.task,
                                       std::move(start), hooks);

        save_checkpoint(checkpoint_to_json(out.state, cfg.plan, mc, chash),
                        cfg.out_dir + "/checkpoint.json");
        json summary = out.summary(chash);
        summary["variant"] = to_string(cfg.plan.variant);
        summary["dataset_hash"] = hex64(dataset_hash(ds));
        summary["out_dir"] = cfg.out_dir;
        {
            std::ofstream sout(cfg.out_dir + "/summary.json");
            if (!sout) throw IoError("cannot write " + cfg.out_dir + "/summary.json");
            sout << summary.dump(2) << "\n";
        }
        std::cout << summary.dump(2) << "\n";
    });
}

// ----- eval -----

struct EvalArgs {
    std::string checkpoint, dataset, splits, cache;
    std::string split = "test", mode = "fresh-segments";
    std::string method = "locality-edge-cut";
    int cap = 200;
    std::uint64_t seed = 1;
};

void add_eval(CLI::App& app) {
    auto a = std::make_shared<EvalArgs>();
    auto* cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    cmd->add_option("--checkpoint", a->checkpoint, "checkpoint JSON")->required();
    cmd->add_option("--dataset", a->dataset, "dataset JSONL")->required();
    cmd->add_option("--splits", a->splits, "splits JSON (omit to use every graph)");
    cmd->add_option("--split", a->split, "train | val | test | all")
        ->check(CLI::IsMember({"train", "val", "test", "all"}));
    cmd->add_option("--mode", a->mode, "fresh-segments (partitioned) | full-graph")
        ->check(CLI::IsMember({"fresh-segments", "full-graph"}));
    cmd->add_option("--partition-method", a->method, "partitioner for segments mode");
    cmd->add_option("--segments-cap", a->cap, "max nodes per segment");
    cmd->add_option("--seed", a->seed, "partitioning seed");
    cmd->add_option("--cache", a->cache, "segment cache path");
    cmd->callback([a]() {
        json cj = load_checkpoint_json(a->checkpoint);
        ModelConfig mc;
        TrainState state = checkpoint_from_json(cj, &mc);
        Dataset ds = load_dataset(a->dataset);
        if (mc.feature_width != ds.feature_width)
            throw ConfigError("checkpoint feature width does not match the dataset");

        std::vector<SegmentedGraph> segs;
        if (a->mode == "full-graph") {
            segs = whole_graph_segmentation(ds);
        } else {
            PartitionMethod method = partition_method_from(a->method);
            SegmentCacheKey key{dataset_hash(ds), method, a->cap, a->seed};
            std::optional<std::vector<SegmentedGraph>> cached;
            if (!a->cache.empty() && fs::exists(a->cache))
                cached = load_segment_cache(a->cache, key);
            segs = cached ? std::move(*cached)
                          : partition_dataset(ds, method, a->cap, a->seed);
        }

        std::vector<int> ids;
        if (a->split == "all" || a->splits.empty()) {
            for (const auto& g : ds.graphs) ids.push_back(g.id);
        } else {
            Splits sp = load_splits(a->splits, ds);
            ids = a->split == "train" ? sp.train : (a->split == "val" ? sp.val : sp.test);
        }
        std::unordered_map<int, const SegmentedGraph*> by_id;
        for (const auto& sg : segs) by_id[sg.parent_id] = &sg;
        std::vector<const SegmentedGraph*> chosen;
        for (int id : ids) chosen.push_back(by_id.at(id));

        EvalOutcome res = evaluate(state.model, chosen, ds.task);
        json rep;
        rep["split"] = a->splits.empty() ? "all" : a->split;
        rep["mode"] = a->mode;
        rep["count"] = res.count;
        rep["loss"] = res.loss;
        if (res.metric) rep["metric"] = *res.metric;
        std::cout << rep.dump(2) << "\n";
    });
}

// ----- analyze -----

struct AnalyzeArgs {
    std::string mode;
    std::string out;
    // bias
    int J = 6, S = 2, dim = 4;
    double p = 0.5;
    long long trials = 20000;
    std::uint64_t seed = 1;
    // staleness
    std::string dataset, splits, method = "locality-edge-cut", variant = "gst-e";
    int cap = 200, epochs = 5, batch_size = 4, segments_S = 1, hidden = 24;
    // sweeps
    std::string config_path, grid = "0,0.25,0.5,0.75,1", caps = "100,200,400";
    int runs = 3;
};

json rational_report(const SegmentCoeffs& c) {
    json j;
    j["mean_fresh"] = c.mean_fresh.str();
    j["mean_drift"] = c.mean_drift.str();
    j["sq_fresh"] = c.sq_fresh.str();
    j["sq_drift"] = c.sq_drift.str();
    j["sq_cross"] = c.sq_cross.str();
    return j;
}

json bias_report(const AnalyzeArgs& a) {
    PerturbationModel m = PerturbationModel::random(a.J, a.S, a.p, a.dim, a.seed);
    json rep;
    rep["mode"] = "bias";
    rep["J"] = a.J;
    rep["S"] = a.S;
    rep["p"] = a.p;
    rep["dim"] = a.dim;
    QuadraticHead head = QuadraticHead::random(a.dim, a.seed);
    for (Scheme scheme : {Scheme::plain_table, Scheme::stale_dropout}) {
        DeltaMoments mom = exact_delta_moments(m, scheme);
        json s;
        s["outcomes"] = mom.outcomes;
        s["exact"] = mom.exact;
        if (mom.exact) {
            s["segment0"] = rational_report(mom.coeffs[0]);
            Rational table_coeff = table_mean_drift_coeff(a.J, a.S);
            s["closed_mean_drift_plain"] = table_coeff.str();
            if (scheme == Scheme::stale_dropout) {
                Rational p_rat = *rational_from_double(a.p);
                s["closed_mean_drift"] = dropout_mean_drift_coeff(a.J, a.S, p_rat).str();
                s["mean_is_p_times_plain"] =
                    mom.coeffs[0].mean_drift == p_rat * table_coeff &&
                    mom.coeffs[0].mean_fresh.zero();
            } else {
                s["mean_matches_closed_form"] =
                    mom.coeffs[0].mean_drift == table_coeff && mom.coeffs[0].mean_fresh.zero();
            }
        }
        double exact_change = expected_quadratic_change(head, m, mom);
        MonteCarloEstimate mc =
            monte_carlo_bias(head, m, scheme, a.trials, a.seed + 7);
        s["quadratic_change_exact"] = exact_change;
        s["quadratic_change_mc"] = mc.mean;
        s["mc_stderr"] = mc.stderr_;
        s["mc_trials"] = mc.trials;
        s["z"] = mc.stderr_ > 0.0 ? (mc.mean - exact_change) / mc.stderr_ : 0.0;
        rep[to_string(scheme)] = std::move(s);
    }
    return rep;
}

json staleness_report(const AnalyzeArgs& a) {
    if (a.dataset.empty()) throw ConfigError("analyze --mode staleness needs --dataset");
    Dataset ds = load_dataset(a.dataset);
    std::vector<SegmentedGraph> segs =
        partition_dataset(ds, partition_method_from(a.method), a.cap, a.seed);
    std::vector<SegmentedGraph> train;
    if (!a.splits.empty()) {
        Splits sp = load_splits(a.splits, ds);
        auto parts = split_segments(std::move(segs), sp);
        train = std::move(parts.train);
    } else {
        train = std::move(segs);
    }
    TrainPlan plan;
    plan.variant = variant_from(a.variant);
    plan.S = a.segments_S;
    plan.batch_size = a.batch_size;
    plan.epochs = a.epochs;
    plan.finetune_epochs = 0;
    plan.seed = a.seed;
    ModelConfig mc;
    mc.feature_width = ds.feature_width;
    mc.hidden = a.hidden;
    mc.out_dim = ds.task == Task::classification ? ds.num_classes : 1;
    auto rows = staleness_trace(as_ptrs(train), plan, mc, ds.task);
    json rep;
    rep["mode"] = "staleness";
    rep["variant"] = a.variant;
    rep["epochs"] = a.epochs;
    rep["graphs"] = train.size();
    auto arr = json::array();
    for (const auto& r : rows) {
        json x;
        x["phase"] = r.phase;
        x["epoch"] = r.epoch;
        x["max_gap"] = r.max_gap;
        x["mean_gap"] = r.mean_gap;
        x["staleness_max"] = r.stale_max;
        x["staleness_mean"] = r.stale_mean;
        x["entries"] = r.entries;
        arr.push_back(std::move(x));
    }
    rep["trace"] = std::move(arr);
    return rep;
}

json ablate_p_report(const AnalyzeArgs& a) {
    if (a.config_path.empty()) throw ConfigError("analyze --mode ablate-p needs --config");
    ExperimentConfig base = load_experiment_config(a.config_path);
    if (base.dataset.empty() || base.splits.empty())
        throw ConfigError("the sweep config must name a dataset and splits");
    Dataset ds = load_dataset(base.dataset);
    Splits sp = load_splits(base.splits, ds);
    json rep;
    rep["mode"] = "ablate-p";
    rep["runs_per_point"] = a.runs;
    auto arr = json::array();
    for (double p : parse_double_list(a.grid)) {
        std::vector<double> metrics;
        for (int r = 0; r < a.runs; ++r) {
            ExperimentConfig cfg = base;
            cfg.plan.variant = Variant::gst_efd;
            cfg.plan.p = p;
            cfg.plan.seed = derive_seed(base.plan.seed, "ablate-p", static_cast<std::uint64_t>(r));
            metrics.push_back(run_for_sweep(cfg, ds, sp).test_metric);
            std::cerr << "p=" << p << " run " << r + 1 << "/" << a.runs << " metric "
                      << metrics.back() << "\n";
        }
        json row;
        row["p"] = p;
        row["metrics"] = metrics;
        row["mean"] = mean_of(metrics);
        row["sd"] = sd_of(metrics);
        arr.push_back(std::move(row));
    }
    rep["points"] = std::move(arr);
    return rep;
}

json ablate_cap_report(const AnalyzeArgs& a) {
    if (a.config_path.empty()) throw ConfigError("analyze --mode ablate-cap needs --config");
    ExperimentConfig base = load_experiment_config(a.config_path);
    if (base.dataset.empty() || base.splits.empty())
        throw ConfigError("the sweep config must name a dataset and splits");
    Dataset ds = load_dataset(base.dataset);
    Splits sp = load_splits(base.splits, ds);
    json rep;
    rep["mode"] = "ablate-cap";
    rep["runs_per_point"] = a.runs;
    auto arr = json::array();
    for (int cap : parse_int_list(a.caps)) {
        std::vector<double> metrics;
        long long peak = 0;
        double mean_segments = 0.0;
        for (int r = 0; r < a.runs; ++r) {
            ExperimentConfig cfg = base;
            cfg.cap = cap;
            cfg.cache.clear();
            cfg.plan.seed = derive_seed(base.plan.seed, "ablate-cap", static_cast<std::uint64_t>(r));
            SweepResult res = run_for_sweep(cfg, ds, sp);
            metrics.push_back(res.test_metric);
            peak = std::max(peak, res.peak_retained);
            mean_segments = res.mean_segments;
            std::cerr << "cap=" << cap << " run " << r + 1 << "/" << a.runs << " metric "
                      << metrics.back() << "\n";
        }
        json row;
        row["cap"] = cap;
        row["mean_segments"] = mean_segments;
        row["peak_retained"] = peak;
        row["metrics"] = metrics;
        row["mean"] = mean_of(metrics);
        row["sd"] = sd_of(metrics);
        arr.push_back(std::move(row));
    }
    rep["points"] = std::move(arr);
    return rep;
}

void add_analyze(CLI::App& app) {
    auto a = std::make_shared<AnalyzeArgs>();
    auto* cmd = app.add_subcommand("analyze", "read-error, staleness and sweep reports");
    cmd->add_option("--mode", a->mode, "bias | staleness | ablate-p | ablate-cap")
        ->required()
        ->check(CLI::IsMember({"bias", "staleness", "ablate-p", "ablate-cap"}));
    cmd->add_option("--report", a->out, "write the report here instead of stdout");
    cmd->add_option("--J", a->J, "bias: segments per graph");
    cmd->add_option("--S", a->S, "bias: refreshed segments");
    cmd->add_option("--p", a->p, "bias: keep probability");
    cmd->add_option("--dim", a->dim, "bias: embedding width");
    cmd->add_option("--trials", a->trials, "bias: Monte Carlo trials");
    cmd->add_option("--seed", a->seed, "seed");
    cmd->add_option("--dataset", a->dataset, "staleness: dataset JSONL");
    cmd->add_option("--splits", a->splits, "staleness: splits JSON (train split is traced)");
    cmd->add_option("--partition-method", a->method, "staleness: partitioner");
    cmd->add_option("--segments-cap", a->cap, "staleness: max nodes per segment");
    cmd->add_option("--variant", a->variant, "staleness: gst-e | gst-efd");
    cmd->add_option("--epochs", a->epochs, "staleness: epochs to trace");
    cmd->add_option("--batch-size", a->batch_size, "staleness: graphs per step");
    cmd->add_option("--train-S", a->segments_S, "staleness: gradient segments per graph");
    cmd->add_option("--hidden", a->hidden, "staleness: embedding width");
    cmd->add_option("--config", a->config_path, "sweeps: base experiment config");
    cmd->add_option("--grid", a->grid, "ablate-p: comma-separated keep probabilities");
    cmd->add_option("--caps", a->caps, "ablate-cap: comma-separated segment caps");
    cmd->add_option("--runs-per-point", a->runs, "sweeps: repetitions per grid point");
    cmd->callback([a]() {
        json rep;
        if (a->mode == "bias")
            rep = bias_report(*a);
        else if (a->mode == "staleness")
            rep = staleness_report(*a);
        else if (a->mode == "ablate-p")
            rep = ablate_p_report(*a);
        else
            rep = ablate_cap_report(*a);
        emit(rep, a->out);
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"segment training for whole-graph property prediction"};
    app.require_subcommand(1);
    add_generate(app);
    add_partition(app);
    add_train(app);
    add_eval(app);
    add_analyze(app);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const BudgetError& e) {
        std::cerr << "budget error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
