#include <catch2/catch_amalgamated.hpp>

#include <numeric>
#include <stdexcept>

#include "segtrain/engine.hpp"

using namespace segtrain;

namespace {

Segment make_seg(int segment_id, int first_node, int n, int width, std::uint64_t seed) {
    Segment s;
    s.segment_id = segment_id;
    s.nodes.resize(static_cast<std::size_t>(n));
    std::iota(s.nodes.begin(), s.nodes.end(), first_node);
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
    s.adj = build_csr(n, edges);
    s.features = Mat(n, width);
    Rng rng(seed);
    for (double& v : s.features.a) v = rng.normal();
    return s;
}

// parent graph with J equal path segments and a class label
SegmentedGraph make_sg(int parent_id, int J, int seg_nodes, int width, int cls,
                       std::uint64_t seed) {
    SegmentedGraph sg;
    sg.parent_id = parent_id;
    sg.label.class_index = cls;
    sg.parent_nodes = J * seg_nodes;
    sg.parent_edges = J * (seg_nodes - 1);
    for (int j = 0; j < J; ++j)
        sg.segments.push_back(
            make_seg(j, j * seg_nodes, seg_nodes, width, derive_seed(seed, "seg", j)));
    return sg;
}

TrainPlan base_plan(Variant v) {
    TrainPlan plan;
    plan.variant = v;
    plan.S = 1;
    plan.p = 0.5;
    plan.batch_size = 4;
    plan.seed = 11;
    plan.adam.lr = 0.01;
    return plan;
}

ModelConfig small_model() { return ModelConfig{3, 8, 1, 1, 2}; }

}  // namespace

TEST_CASE("variant names round trip and unknown names are rejected", "[engine]") {
    for (Variant v : {Variant::full, Variant::gst_one, Variant::gst, Variant::gst_e,
                      Variant::gst_efd})
        CHECK(variant_from(to_string(v)) == v);
    CHECK_THROWS_AS(variant_from("gst-x"), ConfigError);
    CHECK(variant_uses_table(Variant::gst_e));
    CHECK(variant_uses_table(Variant::gst_efd));
    CHECK_FALSE(variant_uses_table(Variant::full));
    CHECK_FALSE(variant_uses_table(Variant::gst_one));
    CHECK_FALSE(variant_uses_table(Variant::gst));
}

TEST_CASE("segment sampling is uniform, sorted, and distinct", "[engine]") {
    Rng rng(5);
    CHECK(sample_segments(1, 1, rng) == std::vector<int>{0});
    CHECK(sample_segments(4, 4, rng) == std::vector<int>{0, 1, 2, 3});
    CHECK(sample_segments(4, 9, rng) == std::vector<int>{0, 1, 2, 3});
    CHECK_THROWS_AS(sample_segments(0, 1, rng), ConfigError);

    // sorted distinct subsets
    for (int trial = 0; trial < 200; ++trial) {
        auto ids = sample_segments(6, 3, rng);
        REQUIRE(ids.size() == 3);
        CHECK(ids[0] < ids[1]);
        CHECK(ids[1] < ids[2]);
        CHECK(ids[2] < 6);
        CHECK(ids[0] >= 0);
    }

    // single draws from J=5 hit each id a fifth of the time
    std::vector<int> hits(5, 0);
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) ++hits[static_cast<std::size_t>(sample_segments(5, 1, rng)[0])];
    for (int h : hits)
        CHECK(static_cast<double>(h) / trials == Catch::Approx(0.2).margin(0.02));
}

TEST_CASE("stale-dropout weights follow the keep probability", "[engine]") {
    Rng rng(7);
    std::vector<int> sel{0, 2};

    // p = 1: everything kept at weight 1 (selected scale collapses to 1)
    auto w1 = sed_weights(4, 2, sel, 1.0, rng);
    CHECK(w1 == std::vector<double>{1.0, 1.0, 1.0, 1.0});

    // p = 0: selected get J/S, the rest drop
    auto w0 = sed_weights(4, 2, sel, 0.0, rng);
    CHECK(w0 == std::vector<double>{2.0, 0.0, 2.0, 0.0});

    // selected weight is exactly p + (1-p) * J/S
    auto wh = sed_weights(4, 2, sel, 0.5, rng);
    CHECK(wh[0] == 0.5 + 0.5 * 2.0);
    CHECK(wh[2] == 0.5 + 0.5 * 2.0);
    for (std::size_t j : {std::size_t(1), std::size_t(3)})
        CHECK((wh[j] == 0.0 || wh[j] == 1.0));

    // non-selected keep rate converges to p
    double kept = 0.0;
    const int trials = 20000;
    for (int t = 0; t < trials; ++t) {
        auto w = sed_weights(3, 1, {0}, 0.3, rng);
        kept += (w[1] != 0.0) + (w[2] != 0.0);
    }
    CHECK(kept / (2 * trials) == Catch::Approx(0.3).margin(0.01));

    CHECK_THROWS_AS(sed_weights(3, 1, {0}, 1.5, rng), ConfigError);
}

TEST_CASE("aggregation means for classification and sums for ranking", "[engine]") {
    Mat a(1, 2, {2.0, 4.0});
    Mat b(1, 2, {0.0, 8.0});

    Mat cls = aggregate({a, b}, {1.0, 1.0}, Task::classification, 2);
    CHECK(cls.a == std::vector<double>{1.0, 6.0});
    Mat rnk = aggregate({a, b}, {1.0, 1.0}, Task::regression_ranking, 2);
    CHECK(rnk.a == std::vector<double>{2.0, 12.0});

    // zero-weight entries are skipped; J counts the graph's segments, not the
    // embeddings that survived the drop
    Mat one = aggregate({a}, {2.5}, Task::classification, 2);
    CHECK(one.a == std::vector<double>{2.5, 5.0});
    Mat ones = aggregate({a}, {2.5}, Task::regression_ranking, 2);
    CHECK(ones.a == std::vector<double>{5.0, 10.0});

    CHECK_THROWS_AS(aggregate({}, {}, Task::classification, 1), ConfigError);
    CHECK_THROWS_AS(aggregate({a}, {1.0, 2.0}, Task::classification, 2), ConfigError);
    CHECK_THROWS_AS(aggregate({a, b}, {1.0, 1.0}, Task::classification, 1), ConfigError);
}

TEST_CASE("dropped stale embeddings are never even looked up", "[engine]") {
    // p = 0 drops every non-selected segment, so an empty table must stay
    // empty: no lookups, no lazy warm-ups, only skips.
    SegmentedGraph sg = make_sg(0, 4, 5, 3, 1, 21);
    TrainPlan plan = base_plan(Variant::gst_efd);
    plan.p = 0.0;

    TrainState st;
    st.model = Model::build(small_model(), plan.seed);
    auto gp = resolve_graph_step(plan, sg, 0);
    Tape tape;
    BatchBuild b = build_batch(tape, st.model, &st.table, {&sg}, {gp}, plan, Task::classification, 0);

    CHECK(b.counters.table_skips == 3);
    CHECK(b.counters.table_lookups == 0);
    CHECK(b.counters.warmups == 0);
    CHECK(b.counters.nograd_nodes == 0);
    CHECK(b.counters.grad_nodes == 5);
    CHECK(st.table.size() == 0);
}

TEST_CASE("missing keys warm up lazily and are found next time", "[engine]") {
    SegmentedGraph sg = make_sg(0, 4, 5, 3, 0, 23);
    TrainPlan plan = base_plan(Variant::gst_e);

    TrainState st;
    st.model = Model::build(small_model(), plan.seed);
    auto gp = resolve_graph_step(plan, sg, 0);
    Tape t1;
    BatchBuild b1 =
        build_batch(t1, st.model, &st.table, {&sg}, {gp}, plan, Task::classification, 0);
    CHECK(b1.counters.warmups == 3);
    CHECK(b1.counters.table_lookups == 0);
    CHECK(b1.counters.nograd_nodes == 15);  // three warmed segments of five nodes
    CHECK(st.table.size() == 3);            // the selected segment's write is still pending

    // same iteration again: every non-selected key now hits, at age zero
    Tape t2;
    BatchBuild b2 =
        build_batch(t2, st.model, &st.table, {&sg}, {gp}, plan, Task::classification, 0);
    CHECK(b2.counters.warmups == 0);
    CHECK(b2.counters.table_lookups == 3);
    CHECK(b2.counters.staleness_max == 0);
    CHECK(b2.counters.staleness_count == 3);
}

TEST_CASE("with a single segment every variant is the same computation", "[engine]") {
    SegmentedGraph sg = make_sg(0, 1, 12, 3, 1, 29);

    std::vector<double> losses;
    std::vector<std::uint64_t> hashes;
    for (Variant v : {Variant::full, Variant::gst_one, Variant::gst, Variant::gst_e,
                      Variant::gst_efd}) {
        TrainPlan plan = base_plan(v);
        TrainState st;
        st.model = Model::build(small_model(), plan.seed);
        StepResult r = train_step(st, plan, Task::classification, {&sg});
        losses.push_back(r.loss);
        hashes.push_back(st.model.params.value_hash());
        CHECK(r.counters.grad_nodes == 12);
        CHECK(r.counters.nograd_nodes == 0);
        CHECK(r.counters.table_lookups == 0);
    }
    for (std::size_t i = 1; i < losses.size(); ++i) {
        CHECK(losses[i] == losses[0]);  // bitwise: identical kernel sequence
        CHECK(hashes[i] == hashes[0]);
    }
}

TEST_CASE("selecting every segment erases the table variants' differences", "[engine]") {
    SegmentedGraph sg = make_sg(3, 3, 4, 3, 1, 31);

    std::vector<double> losses;
    std::vector<std::uint64_t> hashes;
    for (Variant v : {Variant::gst, Variant::gst_e, Variant::gst_efd}) {
        TrainPlan plan = base_plan(v);
        plan.S = 3;  // = J: no stale reads remain
        TrainState st;
        st.model = Model::build(small_model(), plan.seed);
        StepResult r = train_step(st, plan, Task::classification, {&sg});
        losses.push_back(r.loss);
        hashes.push_back(st.model.params.value_hash());
        CHECK(r.counters.grad_nodes == 12);
    }
    CHECK(losses[1] == losses[0]);
    CHECK(losses[2] == losses[0]);
    CHECK(hashes[1] == hashes[0]);
    CHECK(hashes[2] == hashes[0]);
}

TEST_CASE("a segmented disconnected graph matches its whole-graph loss", "[engine]") {
    // two 4-node components; as one 8-node segment vs two 4-node segments,
    // the readout mean decomposes into the mean of equal-sized segment means
    const int width = 3;
    SegmentedGraph split = make_sg(0, 2, 4, width, 1, 37);

    SegmentedGraph whole;
    whole.parent_id = 0;
    whole.label.class_index = 1;
    whole.parent_nodes = 8;
    Segment all;
    all.segment_id = 0;
    all.nodes.resize(8);
    std::iota(all.nodes.begin(), all.nodes.end(), 0);
    std::vector<std::pair<int, int>> edges;
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 3; ++i) edges.emplace_back(4 * c + i, 4 * c + i + 1);
    all.adj = build_csr(8, edges);
    all.features = Mat(8, width);
    for (int j = 0; j < 2; ++j)
        for (int r = 0; r < 4; ++r)
            for (int f = 0; f < width; ++f)
                all.features.at(4 * j + r, f) = split.segments[static_cast<std::size_t>(j)]
                                                    .features.at(r, f);
    whole.segments.push_back(std::move(all));

    TrainPlan plan_whole = base_plan(Variant::full);
    TrainState st_whole;
    st_whole.model = Model::build(small_model(), 11);
    StepResult r_whole = train_step(st_whole, plan_whole, Task::classification, {&whole});

    TrainPlan plan_split = base_plan(Variant::gst);
    plan_split.S = 2;
    TrainState st_split;
    st_split.model = Model::build(small_model(), 11);
    StepResult r_split = train_step(st_split, plan_split, Task::classification, {&split});

    CHECK(r_split.loss == Catch::Approx(r_whole.loss).margin(1e-12));
}

TEST_CASE("the activation budget stops whole-graph training but not segments", "[engine]") {
    SegmentedGraph sg = make_sg(0, 4, 10, 3, 0, 41);  // 40 nodes total

    SegmentedGraph whole;
    whole.parent_id = 0;
    whole.label.class_index = 0;
    whole.parent_nodes = 40;
    Segment all = make_seg(0, 0, 40, 3, 43);
    whole.segments.push_back(std::move(all));

    TrainPlan plan = base_plan(Variant::full);
    plan.budget_nodes = 12;
    TrainState st;
    st.model = Model::build(small_model(), plan.seed);
    CHECK_THROWS_AS(train_step(st, plan, Task::classification, {&whole}), BudgetError);

    TrainPlan seg_plan = base_plan(Variant::gst_efd);
    seg_plan.budget_nodes = 12;
    TrainState st2;
    st2.model = Model::build(small_model(), seg_plan.seed);
    StepResult r = train_step(st2, seg_plan, Task::classification, {&sg});
    CHECK(r.counters.peak_retained <= 12);
    CHECK(r.counters.peak_retained == 10);  // exactly one selected segment
}

TEST_CASE("training steps are reproducible", "[engine]") {
    SegmentedGraph g0 = make_sg(0, 3, 4, 3, 0, 47);
    SegmentedGraph g1 = make_sg(1, 3, 4, 3, 1, 53);

    auto run = [&] {
        TrainPlan plan = base_plan(Variant::gst_efd);
        TrainState st;
        st.model = Model::build(small_model(), plan.seed);
        std::vector<double> losses;
        for (int step = 0; step < 5; ++step)
            losses.push_back(train_step(st, plan, Task::classification, {&g0, &g1}).loss);
        return std::make_pair(losses, st.model.params.value_hash());
    };
    auto a = run();
    auto b = run();
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
}

TEST_CASE("refreshing the table rewrites every entry with fresh values", "[engine]") {
    SegmentedGraph g0 = make_sg(0, 3, 4, 3, 0, 59);
    SegmentedGraph g1 = make_sg(1, 2, 4, 3, 1, 61);
    std::vector<const SegmentedGraph*> graphs{&g0, &g1};

    TrainPlan plan = base_plan(Variant::gst_e);
    TrainState st;
    st.model = Model::build(small_model(), plan.seed);
    for (int step = 0; step < 4; ++step) train_step(st, plan, Task::classification, graphs);
    CHECK(st.table.staleness(st.iteration).max > 0);

    StepCounters c = refresh_all(st, graphs);
    CHECK(c.nograd_nodes == 5 * 4);
    auto stats = st.table.staleness(st.iteration);
    CHECK(stats.entries == 5);
    CHECK(stats.max == 0);

    for (const auto* sgp : graphs)
        for (const auto& seg : sgp->segments) {
            Mat fresh = forward_segment_nograd(st.model, seg);
            const auto* e = st.table.find(sgp->parent_id, seg.segment_id);
            REQUIRE(e != nullptr);
            CHECK(e->embedding.a == fresh.a);
        }
}

TEST_CASE("head finetuning never touches the backbone", "[engine]") {
    SegmentedGraph g0 = make_sg(0, 2, 4, 3, 0, 67);
    SegmentedGraph g1 = make_sg(1, 2, 4, 3, 1, 71);
    std::vector<const SegmentedGraph*> graphs{&g0, &g1};

    TrainPlan plan = base_plan(Variant::gst_e);
    TrainState st;
    st.model = Model::build(small_model(), plan.seed);
    train_step(st, plan, Task::classification, graphs);

    // the stage requires a complete table
    TrainState missing = st;
    missing.table.clear();
    CHECK_THROWS_AS(finetune_step(missing, plan, Task::classification, graphs), std::logic_error);

    refresh_all(st, graphs);
    std::uint64_t backbone = st.model.params.value_hash("bb.");
    std::uint64_t head = st.model.params.value_hash("head.");
    long long iter = st.iteration;

    finetune_head(st, plan, Task::classification, graphs, 3);
    CHECK(st.model.params.value_hash("bb.") == backbone);
    CHECK(st.model.params.value_hash("head.") != head);
    CHECK(st.iteration > iter);

    // zero epochs is a full no-op
    std::uint64_t all = st.model.params.value_hash();
    long long iter2 = st.iteration;
    finetune_head(st, plan, Task::classification, graphs, 0);
    CHECK(st.model.params.value_hash() == all);
    CHECK(st.iteration == iter2);
}

TEST_CASE("finetuning fits a separable head completely", "[engine]") {
    // features directly encode the class, so the aggregated embeddings form
    // two points and the head must reach perfect training accuracy
    std::vector<SegmentedGraph> owned;
    std::vector<const SegmentedGraph*> graphs;
    for (int i = 0; i < 8; ++i) {
        int cls = i % 2;
        SegmentedGraph sg = make_sg(i, 2, 3, 3, cls, 73);
        for (auto& seg : sg.segments)
            for (double& v : seg.features.a) v = cls ? 1.0 : -1.0;
        owned.push_back(std::move(sg));
    }
    for (const auto& sg : owned) graphs.push_back(&sg);

    TrainPlan plan = base_plan(Variant::gst_e);
    plan.adam.lr = 0.05;
    TrainState st;
    st.model = Model::build(small_model(), plan.seed);
    refresh_all(st, graphs);
    finetune_head(st, plan, Task::classification, graphs, 40);

    EvalOutcome out = evaluate(st.model, graphs, Task::classification);
    REQUIRE(out.metric.has_value());
    CHECK(*out.metric == 1.0);
}

TEST_CASE("evaluation is deterministic and consistent with the refreshed table", "[engine]") {
    std::vector<SegmentedGraph> owned;
    std::vector<const SegmentedGraph*> graphs;
    for (int i = 0; i < 6; ++i)
        owned.push_back(make_sg(i, 3, 4, 3, i % 2, derive_seed(79, "g", i)));
    for (const auto& sg : owned) graphs.push_back(&sg);

    TrainPlan plan = base_plan(Variant::gst_efd);
    TrainState st;
    st.model = Model::build(small_model(), plan.seed);
    for (int step = 0; step < 3; ++step) train_step(st, plan, Task::classification, graphs);

    EvalOutcome a = evaluate(st.model, graphs, Task::classification);
    EvalOutcome b = evaluate(st.model, graphs, Task::classification);
    CHECK(a.loss == b.loss);
    CHECK(a.metric == b.metric);
    CHECK(a.count == 6);

    // after a refresh, head-on-table equals head-on-fresh for every graph
    refresh_all(st, graphs);
    for (const auto* sgp : graphs) {
        int J = sgp->segment_count();
        std::vector<Mat> table_embs, fresh_embs;
        for (int j = 0; j < J; ++j) {
            table_embs.push_back(st.table.find(sgp->parent_id, j)->embedding);
            fresh_embs.push_back(
                forward_segment_nograd(st.model, sgp->segments[static_cast<std::size_t>(j)]));
        }
        std::vector<double> w(static_cast<std::size_t>(J), 1.0);
        Mat from_table = head_forward_nograd(
            st.model, aggregate(table_embs, w, Task::classification, J));
        Mat from_fresh = head_forward_nograd(
            st.model, aggregate(fresh_embs, w, Task::classification, J));
        CHECK(from_table.a == from_fresh.a);
    }

    EvalOutcome empty = evaluate(st.model, {}, Task::classification);
    CHECK(empty.count == 0);
    CHECK_FALSE(empty.metric.has_value());
}

TEST_CASE("single-segment evaluation equals a hand-built forward", "[engine]") {
    SegmentedGraph sg = make_sg(0, 1, 9, 3, 1, 83);
    Model m = Model::build(small_model(), 5);

    Mat emb = forward_segment_nograd(m, sg.segments[0]);
    Mat pred = head_forward_nograd(m, emb);  // J = 1: mean over one segment
    double want_loss = cross_entropy(pred, 1);

    EvalOutcome out = evaluate(m, {&sg}, Task::classification);
    CHECK(out.loss == want_loss);
    REQUIRE(out.metric.has_value());
    CHECK(*out.metric == (argmax_row(pred) == 1 ? 1.0 : 0.0));
}

TEST_CASE("ranking steps score with sums and group-restricted pairs", "[engine]") {
    // two graphs in one group with opposite targets: the hinge sees one pair
    SegmentedGraph g0 = make_sg(0, 2, 4, 3, 0, 89);
    SegmentedGraph g1 = make_sg(1, 2, 4, 3, 0, 97);
    g0.group = 4;
    g1.group = 4;
    g0.label.target = 2.0;
    g1.label.target = 1.0;

    TrainPlan plan = base_plan(Variant::gst_efd);
    TrainState st;
    st.model = Model::build(ModelConfig{3, 8, 1, 1, 1}, plan.seed);
    StepResult r = train_step(st, plan, Task::regression_ranking, {&g0, &g1});
    REQUIRE(r.scores.size() == 2);
    CHECK(r.targets == std::vector<double>{2.0, 1.0});
    CHECK(r.groups == std::vector<int>{4, 4});
    double margin = 1.0 - (r.scores[0] - r.scores[1]);
    double want = (margin > 0.0 ? margin : 0.0) / 2.0;  // batch-mean of the hinge sum
    CHECK(r.loss == Catch::Approx(want).margin(1e-12));
}
