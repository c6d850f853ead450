#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "segtrain/partition.hpp"
#include "segtrain/synth.hpp"

using namespace segtrain;

namespace {

ClassificationSpec small_cls_spec() {
    ClassificationSpec spec;
    spec.num_graphs = 40;
    spec.num_classes = 5;
    spec.min_nodes = 200;
    spec.max_nodes = 400;
    spec.community_target = 100;
    spec.seed = 9;
    return spec;
}

}  // namespace

TEST_CASE("generator specs reject malformed requests", "[synth]") {
    ClassificationSpec c;
    c.num_classes = 1;
    CHECK_THROWS_AS(generate_classification(c), ConfigError);
    c = ClassificationSpec{};
    c.max_nodes = c.min_nodes - 1;
    CHECK_THROWS_AS(generate_classification(c), ConfigError);
    c = ClassificationSpec{};
    c.low_fraction = 0.8;
    c.high_fraction = 0.2;
    CHECK_THROWS_AS(generate_classification(c), ConfigError);
    c = ClassificationSpec{};
    c.band_margin = 0.5;
    CHECK_THROWS_AS(generate_classification(c), ConfigError);
    c = ClassificationSpec{};
    c.feature_width = 2;
    CHECK_THROWS_AS(generate_classification(c), ConfigError);

    RankingSpec r;
    r.configs_per_graph = 1;
    CHECK_THROWS_AS(generate_ranking(r), ConfigError);
    r = RankingSpec{};
    r.feature_width = 2;
    CHECK_THROWS_AS(generate_ranking(r), ConfigError);
}

TEST_CASE("generation is a pure function of its spec", "[synth]") {
    ClassificationSpec spec = small_cls_spec();
    Dataset a = generate_classification(spec);
    Dataset b = generate_classification(spec);
    CHECK(dataset_hash(a) == dataset_hash(b));

    spec.seed = 10;
    Dataset c = generate_classification(spec);
    CHECK(dataset_hash(a) != dataset_hash(c));
}

TEST_CASE("band membership of the marked fraction", "[synth]") {
    ClassificationSpec spec;  // defaults: [0.1, 0.9], five bands of 0.16
    CHECK(fraction_class(0.11, spec) == 0);
    CHECK(fraction_class(0.25, spec) == 0);
    CHECK(fraction_class(0.27, spec) == 1);
    CHECK(fraction_class(0.50, spec) == 2);
    CHECK(fraction_class(0.80, spec) == 4);
    // clamped outside the covered range
    CHECK(fraction_class(0.0, spec) == 0);
    CHECK(fraction_class(1.0, spec) == 4);

    CHECK(spec.band_width() == Catch::Approx(0.16));
    CHECK(spec.class_fraction(0) == Catch::Approx(0.18));
    CHECK(spec.class_fraction(4) == Catch::Approx(0.82));
}

TEST_CASE("labels equal the whole-graph counting rule and stay in band", "[synth]") {
    ClassificationSpec spec = small_cls_spec();
    Dataset ds = generate_classification(spec);
    REQUIRE(ds.graphs.size() == 40);
    CHECK(ds.task == Task::classification);
    CHECK(ds.num_classes == 5);

    std::vector<int> per_class(5, 0);
    double W = spec.band_width();
    for (const auto& g : ds.graphs) {
        int cls = g.label.class_index;
        ++per_class[static_cast<std::size_t>(cls)];

        double f = marked_fraction(g.features);
        CHECK(fraction_class(f, spec) == cls);

        // the sampled target respects the edge margin; pinning the integer
        // count can move the realized fraction by at most one node
        double slack = 1.0 / g.features.rows + 1e-9;
        CHECK(f >= spec.low_fraction + (cls + spec.band_margin) * W - slack);
        CHECK(f <= spec.low_fraction + (cls + 1 - spec.band_margin) * W + slack);
    }
    // round-robin assignment balances classes exactly here (40 = 5 * 8)
    for (int k = 0; k < 5; ++k) CHECK(per_class[static_cast<std::size_t>(k)] == 8);
}

TEST_CASE("feature channels encode the mark only through their interaction", "[synth]") {
    ClassificationSpec spec = small_cls_spec();
    spec.num_graphs = 5;
    Dataset ds = generate_classification(spec);

    long long marked_pos = 0, marked_n = 0, plain_pos = 0, plain_n = 0;
    for (const auto& g : ds.graphs) {
        for (int v = 0; v < g.features.rows; ++v) {
            const double* x = g.features.row(v);
            // both interaction channels keep magnitude in [0.5, 1.5] and the
            // mark is exactly the sign agreement
            CHECK(std::abs(x[0]) >= 0.5);
            CHECK(std::abs(x[0]) <= 1.5);
            CHECK(std::abs(x[1]) >= 0.5);
            CHECK(std::abs(x[1]) <= 1.5);
            CHECK(node_marked(x) == (x[0] * x[1] > 0.0));
            // constant bias channel
            CHECK(x[spec.feature_width - 1] == 1.0);
            if (node_marked(x)) {
                ++marked_n;
                if (x[0] > 0.0) ++marked_pos;
            } else {
                ++plain_n;
                if (x[0] > 0.0) ++plain_pos;
            }
        }
    }
    // a single channel's sign carries only the weak starter lean: marked
    // nodes go positive at 0.65, unmarked at 0.5
    REQUIRE(marked_n > 300);
    REQUIRE(plain_n > 300);
    CHECK(static_cast<double>(marked_pos) / marked_n == Catch::Approx(0.65).margin(0.05));
    CHECK(static_cast<double>(plain_pos) / plain_n == Catch::Approx(0.50).margin(0.05));
}

TEST_CASE("one segment is not enough to classify the graph", "[synth]") {
    // per-community fractions scatter around the graph target, so judging by
    // a single segment misclassifies often; the whole-graph count never does
    ClassificationSpec spec = small_cls_spec();
    Dataset ds = generate_classification(spec);
    auto segs = partition_dataset(ds, PartitionMethod::locality_edge_cut, 120, 1);

    int graphs = 0, segment_wrong = 0, whole_wrong = 0;
    for (std::size_t i = 0; i < segs.size(); ++i) {
        const auto& sg = segs[i];
        if (sg.segment_count() < 2) continue;
        ++graphs;
        if (fraction_class(marked_fraction(sg.segments[0].features), spec) !=
            ds.graphs[i].label.class_index)
            ++segment_wrong;
        if (fraction_class(marked_fraction(ds.graphs[i].features), spec) !=
            ds.graphs[i].label.class_index)
            ++whole_wrong;
    }
    REQUIRE(graphs >= 30);
    CHECK(whole_wrong == 0);
    CHECK(static_cast<double>(segment_wrong) / graphs > 0.2);
}

TEST_CASE("ranking targets are the whole-graph cost sum", "[synth]") {
    RankingSpec spec;
    spec.num_base_graphs = 6;
    spec.configs_per_graph = 4;
    spec.min_nodes = 80;
    spec.max_nodes = 200;
    spec.seed = 13;
    Dataset ds = generate_ranking(spec);
    REQUIRE(ds.graphs.size() == 24);
    CHECK(ds.task == Task::regression_ranking);

    for (const auto& g : ds.graphs) {
        // independent re-count of the per-node cost
        double want = 0.0;
        for (int v = 0; v < g.features.rows; ++v) {
            const double* x = g.features.row(v);
            double lin = x[0] - 0.4 * x[1] + 0.1;
            want += (lin > 0.0 ? lin : 0.0) + 0.3 * x[2];
        }
        CHECK(g.label.target == Catch::Approx(want).margin(1e-9));
        CHECK(g.label.kind == Task::regression_ranking);
    }
}

TEST_CASE("configurations of a base graph share structure but not targets", "[synth]") {
    RankingSpec spec;
    spec.num_base_graphs = 3;
    spec.configs_per_graph = 5;
    spec.min_nodes = 60;
    spec.max_nodes = 120;
    spec.seed = 17;
    Dataset ds = generate_ranking(spec);

    for (int b = 0; b < 3; ++b) {
        std::set<double> targets;
        const Graph& first = ds.graphs[static_cast<std::size_t>(b * 5)];
        for (int c = 0; c < 5; ++c) {
            const Graph& g = ds.graphs[static_cast<std::size_t>(b * 5 + c)];
            CHECK(g.group == b);
            CHECK(g.id == b * 5 + c);
            targets.insert(g.label.target);
            // identical adjacency within the group
            REQUIRE(g.adj.node_count == first.adj.node_count);
            CHECK(g.adj.edge_count() == first.adj.edge_count());
            // feature shifts stay inside the perturbation half-width
            for (int v = 0; v < g.features.rows; ++v)
                for (int f = 0; f + 1 < spec.feature_width; ++f)
                    CHECK(std::abs(g.features.at(v, f) - first.features.at(v, f)) <=
                          2 * spec.perturb + 1e-12);
            // the constant channel is never perturbed
            for (int v = 0; v < g.features.rows; ++v)
                CHECK(g.features.at(v, spec.feature_width - 1) == 1.0);
        }
        CHECK(targets.size() == 5);  // ties would make the ranking ill-posed
    }

    Dataset again = generate_ranking(spec);
    for (std::size_t i = 0; i < ds.graphs.size(); ++i)
        CHECK(ds.graphs[i].label.target == again.graphs[i].label.target);
}

TEST_CASE("default splits partition ids and respect task structure", "[synth]") {
    ClassificationSpec cspec = small_cls_spec();
    Dataset cds = generate_classification(cspec);
    Splits cs = default_splits(cds, 0.5, 0.25, 3);

    std::set<int> seen;
    for (const auto* part : {&cs.train, &cs.val, &cs.test})
        for (int id : *part) {
            CHECK(seen.insert(id).second);  // no id lands in two splits
        }
    CHECK(seen.size() == cds.graphs.size());
    // stratified: 8 graphs per class split 4/2/2
    CHECK(cs.train.size() == 20);
    CHECK(cs.val.size() == 10);
    CHECK(cs.test.size() == 10);

    RankingSpec rspec;
    rspec.num_base_graphs = 8;
    rspec.configs_per_graph = 3;
    rspec.min_nodes = 40;
    rspec.max_nodes = 80;
    rspec.seed = 23;
    Dataset rds = generate_ranking(rspec);
    Splits rs = default_splits(rds, 0.5, 0.25, 3);

    // whole groups stay in one split
    auto group_of = [&](int id) { return rds.graphs[static_cast<std::size_t>(id)].group; };
    std::set<int> train_groups, val_groups, test_groups;
    for (int id : rs.train) train_groups.insert(group_of(id));
    for (int id : rs.val) val_groups.insert(group_of(id));
    for (int id : rs.test) test_groups.insert(group_of(id));
    CHECK(rs.train.size() == train_groups.size() * 3);
    CHECK(rs.val.size() == val_groups.size() * 3);
    CHECK(rs.test.size() == test_groups.size() * 3);
    for (int g : train_groups) {
        CHECK_FALSE(val_groups.count(g));
        CHECK_FALSE(test_groups.count(g));
    }
    for (int g : val_groups) CHECK_FALSE(test_groups.count(g));

    CHECK_THROWS_AS(default_splits(cds, 0.0, 0.2, 1), ConfigError);
    CHECK_THROWS_AS(default_splits(cds, 0.8, 0.2, 1), ConfigError);
    CHECK_THROWS_AS(default_splits(cds, 0.5, -0.1, 1), ConfigError);
}
