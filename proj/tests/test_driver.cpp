#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <numeric>

#include "segtrain/driver.hpp"

using namespace segtrain;

namespace {

Segment drv_seg(int segment_id, int n, int width, std::uint64_t seed) {
    Segment s;
    s.segment_id = segment_id;
    s.nodes.resize(static_cast<std::size_t>(n));
    std::iota(s.nodes.begin(), s.nodes.end(), 0);
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
    s.adj = build_csr(n, edges);
    s.features = Mat(n, width);
    Rng rng(seed);
    for (double& v : s.features.a) v = rng.normal();
    return s;
}

SegmentedGraph drv_graph(int parent_id, int J, int cls, std::uint64_t seed) {
    SegmentedGraph sg;
    sg.parent_id = parent_id;
    sg.group = parent_id;
    sg.label.class_index = cls;
    sg.parent_nodes = 5 * J;
    for (int j = 0; j < J; ++j)
        sg.segments.push_back(drv_seg(j, 5, 3, derive_seed(seed, "dseg", j)));
    return sg;
}

std::vector<SegmentedGraph> cls_graphs(int count, std::uint64_t seed) {
    std::vector<SegmentedGraph> v;
    for (int i = 0; i < count; ++i) v.push_back(drv_graph(i, 3, i % 2, derive_seed(seed, "dg", i)));
    return v;
}

TrainPlan drv_plan() {
    TrainPlan plan;
    plan.variant = Variant::gst_efd;
    plan.S = 1;
    plan.p = 0.5;
    plan.batch_size = 4;
    plan.epochs = 3;
    plan.finetune_epochs = 2;
    plan.eval_every = 2;
    plan.seed = 5;
    plan.adam.lr = 0.01;
    return plan;
}

ModelConfig drv_model() { return ModelConfig{3, 8, 1, 1, 2}; }

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("segtrain-drv-" + std::to_string(::getpid()) + "-" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("a full run produces the expected record structure", "[driver]") {
    auto train = cls_graphs(8, 31);
    auto val = cls_graphs(4, 37);
    auto test = cls_graphs(4, 41);

    TrainOutput out = run_training(train, val, test, drv_plan(), drv_model(),
                                   Task::classification);

    REQUIRE(out.records.size() == 5);
    for (int e = 0; e < 5; ++e) {
        const EpochRecord& r = out.records[static_cast<std::size_t>(e)];
        CHECK(r.epoch == e);
        CHECK(r.stage == (e < 3 ? "train" : "finetune"));
        CHECK(r.train_metric >= 0.0);
        CHECK(r.train_metric <= 1.0);
        if (e < 3) {
            CHECK(r.counters.grad_nodes == 8 * 5);  // one 5-node segment per graph
            CHECK(r.table_entries > 0);
        } else {
            CHECK(r.counters.grad_nodes == 0);  // head-only stage
        }
    }
    // validation cadence: every second epoch plus the final one
    CHECK_FALSE(out.records[0].val_metric.has_value());
    CHECK(out.records[1].val_metric.has_value());
    CHECK_FALSE(out.records[2].val_metric.has_value());
    CHECK(out.records[3].val_metric.has_value());
    CHECK(out.records[4].val_metric.has_value());

    CHECK(out.state.epoch == 5);
    CHECK(out.state.iteration == 10);  // two steps per epoch, both stages
    CHECK(out.step_losses.size() == 10);

    CHECK(out.pre_finetune_test_metric.has_value());
    CHECK(out.pre_finetune_train_metric.has_value());
    CHECK(*out.pre_finetune_train_metric == out.records[2].train_metric);

    REQUIRE(out.final_train.metric.has_value());
    CHECK(out.final_train.count == 8);
    CHECK(out.final_val.count == 4);
    CHECK(out.final_test.count == 4);

    // after the pre-finetune refresh the table is complete
    auto stats = out.state.table.staleness(out.state.iteration);
    CHECK(stats.entries == 8 * 3);

    nlohmann::json summary = out.summary(0xabcULL);
    CHECK(summary.at("epochs").get<int>() == 5);
    CHECK(summary.at("iterations").get<long long>() == 10);
    CHECK(summary.contains("final_test_metric"));
    CHECK(summary.contains("pre_finetune_test_metric"));
}

TEST_CASE("identical inputs give bitwise identical runs", "[driver]") {
    auto train = cls_graphs(6, 43);
    auto val = cls_graphs(2, 47);
    auto test = cls_graphs(2, 53);

    TrainOutput a = run_training(train, val, test, drv_plan(), drv_model(), Task::classification);
    TrainOutput b = run_training(train, val, test, drv_plan(), drv_model(), Task::classification);

    CHECK(a.step_losses == b.step_losses);
    CHECK(a.state.model.params.value_hash() == b.state.model.params.value_hash());
    CHECK(a.summary(1).dump() == b.summary(1).dump());
}

TEST_CASE("checkpoints runs resume bit-for-bit", "[driver]") {
    auto train = cls_graphs(6, 59);
    auto val = cls_graphs(2, 61);
    auto test = cls_graphs(2, 67);
    TrainPlan plan = drv_plan();
    ModelConfig mc = drv_model();

    // capture mid-train and mid-finetune checkpoints along the full run
    nlohmann::json cp_train, cp_finetune;
    RunHooks hooks;
    hooks.on_epoch = [&](const TrainState& st, const EpochRecord& rec) {
        if (rec.epoch == 1) cp_train = checkpoint_to_json(st, plan, mc, 9);
        if (rec.epoch == 3) cp_finetune = checkpoint_to_json(st, plan, mc, 9);
    };
    TrainOutput full =
        run_training(train, val, test, plan, mc, Task::classification, std::nullopt, hooks);
    REQUIRE_FALSE(cp_train.is_null());
    REQUIRE_FALSE(cp_finetune.is_null());

    // resume from epoch 2 (crosses the refresh boundary on its own)
    ModelConfig mc_back;
    TrainState rt = checkpoint_from_json(cp_train, &mc_back);
    CHECK(mc_back.hidden == mc.hidden);
    CHECK(rt.epoch == 2);
    TrainOutput r1 = run_training(train, val, test, plan, mc, Task::classification,
                                  std::move(rt));
    CHECK(r1.state.model.params.value_hash() == full.state.model.params.value_hash());
    CHECK(r1.final_test.loss == full.final_test.loss);
    REQUIRE(r1.step_losses.size() == 6);  // epochs 2..4, two steps each
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(r1.step_losses[i] == full.step_losses[4 + i]);

    // resume inside the finetune stage (no second refresh)
    TrainState ft = checkpoint_from_json(cp_finetune);
    CHECK(ft.epoch == 4);
    TrainOutput r2 =
        run_training(train, val, test, plan, mc, Task::classification, std::move(ft));
    CHECK(r2.state.model.params.value_hash() == full.state.model.params.value_hash());
    CHECK(r2.step_losses.size() == 2);
    CHECK(r2.step_losses[0] == full.step_losses[8]);
    CHECK(r2.step_losses[1] == full.step_losses[9]);
}

TEST_CASE("checkpoint files round trip through disk", "[driver]") {
    auto train = cls_graphs(4, 71);
    TrainPlan plan = drv_plan();
    plan.epochs = 1;
    plan.finetune_epochs = 0;
    ModelConfig mc = drv_model();
    TrainOutput out = run_training(train, {}, {}, plan, mc, Task::classification);

    TempDir dir;
    nlohmann::json cp = checkpoint_to_json(out.state, plan, mc, 0x1234ULL);
    save_checkpoint(cp, dir.file("ck.json"));
    nlohmann::json back = load_checkpoint_json(dir.file("ck.json"));
    CHECK(back.at("config_hash").get<std::string>() == hex64(0x1234ULL));

    TrainState st = checkpoint_from_json(back);
    CHECK(st.iteration == out.state.iteration);
    CHECK(st.epoch == out.state.epoch);
    CHECK(st.model.params.value_hash() == out.state.model.params.value_hash());
    CHECK(st.table.size() == out.state.table.size());
    for (const auto& e : out.state.model.params.entries) {
        const auto& r = st.model.params.by_name(e.name);
        CHECK(r.m.a == e.m.a);  // optimizer moments survive exactly
        CHECK(r.v.a == e.v.a);
        CHECK(r.step == e.step);
    }

    CHECK_THROWS_AS(load_checkpoint_json(dir.file("absent.json")), IoError);
}

TEST_CASE("the driver rejects impossible setups and propagates the budget", "[driver]") {
    auto train = cls_graphs(4, 73);

    CHECK_THROWS_AS(
        run_training({}, {}, {}, drv_plan(), drv_model(), Task::classification), ConfigError);

    TrainPlan bad = drv_plan();
    bad.S = 0;
    CHECK_THROWS_AS(run_training(train, {}, {}, bad, drv_model(), Task::classification),
                    ConfigError);

    // the cap covers one whole optimizer step: batch_size * S selected
    // segments of 5 nodes each share the tape
    TrainPlan tight = drv_plan();
    tight.budget_nodes = 19;
    CHECK_THROWS_AS(run_training(train, {}, {}, tight, drv_model(), Task::classification),
                    BudgetError);

    TrainPlan fits = drv_plan();
    fits.budget_nodes = 20;
    TrainOutput ok = run_training(train, {}, {}, fits, drv_model(), Task::classification);
    for (const auto& r : ok.records)
        if (r.stage == "train") CHECK(r.counters.peak_retained == 20);
}

TEST_CASE("ranking epochs batch comparable configurations together", "[driver]") {
    // four groups of three configurations; with group-contiguous ordering and
    // batch size 3 every batch holds a full group, so the first epoch already
    // sees ranking pairs and a positive hinge loss
    std::vector<SegmentedGraph> train;
    for (int b = 0; b < 4; ++b)
        for (int c = 0; c < 3; ++c) {
            SegmentedGraph sg = drv_graph(b * 3 + c, 2, 0, derive_seed(79, "rk", b * 3 + c));
            sg.group = b;
            sg.label.target = static_cast<double>(c);
            train.push_back(std::move(sg));
        }

    TrainPlan plan = drv_plan();
    plan.batch_size = 3;
    plan.epochs = 2;
    plan.finetune_epochs = 1;
    ModelConfig mc{3, 8, 1, 1, 1};

    TrainOutput out = run_training(train, {}, {}, plan, mc, Task::regression_ranking);
    REQUIRE(out.records.size() == 3);
    CHECK(out.records[0].loss > 0.3);  // near-equal initial scores violate the margin
    CHECK(out.final_train.metric.has_value());

    TrainOutput again = run_training(train, {}, {}, plan, mc, Task::regression_ranking);
    CHECK(out.step_losses == again.step_losses);
}
