#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <numeric>

#include "segtrain/model.hpp"
#include "segtrain/partition.hpp"

using namespace segtrain;

namespace {

Segment make_segment(int n, int width, std::uint64_t seed,
                     std::vector<std::pair<int, int>> edges) {
    Segment s;
    s.segment_id = 0;
    s.nodes.resize(static_cast<std::size_t>(n));
    std::iota(s.nodes.begin(), s.nodes.end(), 0);
    s.adj = build_csr(n, std::move(edges));
    s.features = Mat(n, width);
    Rng rng(seed);
    for (double& v : s.features.a) v = rng.normal();
    return s;
}

void zero_params(Model& m) {
    for (auto& e : m.params.entries)
        for (double& v : e.value.a) v = 0.0;
}

}  // namespace

TEST_CASE("build lays out the declared parameter stack", "[model]") {
    ModelConfig cfg{3, 8, 2, 1, 5};
    Model m = Model::build(cfg, 1);
    CHECK(m.params.by_name("bb.pre.w").value.rows == 3);
    CHECK(m.params.by_name("bb.pre.w").value.cols == 8);
    CHECK(m.params.by_name("bb.mp0.w").value.rows == 16);  // [self || neighbor-mean]
    CHECK(m.params.by_name("bb.mp1.w").value.cols == 8);
    CHECK(m.params.by_name("bb.post.w").value.rows == 8);
    CHECK(m.params.by_name("head.h0.w").value.cols == 8);
    CHECK(m.params.by_name("head.out.w").value.cols == 5);

    // rectified backbone units start slightly active; the head starts neutral
    for (double v : m.params.by_name("bb.pre.b").value.a) CHECK(v == 0.1);
    for (double v : m.params.by_name("head.out.b").value.a) CHECK(v == 0.0);

    // same seed rebuilds the same weights, different seeds differ
    Model m2 = Model::build(cfg, 1);
    CHECK(m.params.value_hash() == m2.params.value_hash());
    Model m3 = Model::build(cfg, 2);
    CHECK(m.params.value_hash() != m3.params.value_hash());
}

TEST_CASE("all-zero parameters embed everything to zero", "[model]") {
    ModelConfig cfg{2, 4, 1, 0, 2};
    Model m = Model::build(cfg, 3);
    zero_params(m);
    Segment s = make_segment(1, 2, 9, {});
    s.features.at(0, 0) = 0.0;
    s.features.at(0, 1) = 0.0;
    Mat emb = forward_segment_nograd(m, s);
    for (double v : emb.a) CHECK(v == 0.0);
    // and the head keeps zero at zero
    Mat logits = head_forward_nograd(m, emb);
    for (double v : logits.a) CHECK(v == 0.0);
}

TEST_CASE("isomorphic segments embed identically", "[model]") {
    ModelConfig cfg{3, 6, 2, 1, 2};
    Model m = Model::build(cfg, 5);
    Segment a = make_segment(7, 3, 11, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 6}, {0, 6}});

    // relabel through the permutation v -> (v*3) mod 7
    std::vector<int> perm(7);
    for (int v = 0; v < 7; ++v) perm[static_cast<std::size_t>(v)] = (v * 3) % 7;
    Segment b;
    b.segment_id = 0;
    b.nodes = a.nodes;
    std::vector<std::pair<int, int>> edges;
    for (int u = 0; u < 7; ++u)
        for (int v : a.adj.neighbors(u))
            if (u < v)
                edges.emplace_back(perm[static_cast<std::size_t>(u)],
                                   perm[static_cast<std::size_t>(v)]);
    b.adj = build_csr(7, edges);
    b.features = Mat(7, 3);
    for (int v = 0; v < 7; ++v)
        for (int f = 0; f < 3; ++f)
            b.features.at(perm[static_cast<std::size_t>(v)], f) = a.features.at(v, f);

    Mat ea = forward_segment_nograd(m, a);
    Mat eb = forward_segment_nograd(m, b);
    REQUIRE(ea.same_shape(eb));
    for (std::size_t i = 0; i < ea.a.size(); ++i)
        CHECK(ea.a[i] == Catch::Approx(eb.a[i]).margin(1e-12));
}

TEST_CASE("grad-enabled and grad-disabled forwards agree bit for bit", "[model]") {
    ModelConfig cfg{3, 6, 2, 1, 2};
    Model m = Model::build(cfg, 7);
    Segment s = make_segment(12, 3, 13, {{0, 1}, {2, 3}, {4, 5}, {1, 6}, {7, 8}, {9, 10}});

    Tape t;
    Tape::Id id = forward_segment(t, m, s);
    Mat with_grad = t.value(id);
    Mat without = forward_segment_nograd(m, s);
    REQUIRE(with_grad.same_shape(without));
    for (std::size_t i = 0; i < with_grad.a.size(); ++i) CHECK(with_grad.a[i] == without.a[i]);

    // the taped forward retained exactly the segment's nodes; nograd kept none
    CHECK(t.peak_retained() == 12);
}

TEST_CASE("an identity head passes the embedding through", "[model]") {
    ModelConfig cfg{2, 3, 0, 0, 3};  // head is the single out layer
    Model m = Model::build(cfg, 9);
    auto& w = m.params.by_name("head.out.w").value;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) w.at(i, j) = i == j ? 1.0 : 0.0;
    for (double& v : m.params.by_name("head.out.b").value.a) v = 0.0;

    Mat emb(1, 3, {0.3, -1.2, 2.5});
    Mat out = head_forward_nograd(m, emb);
    REQUIRE(out.cols == 3);
    for (int j = 0; j < 3; ++j) CHECK(out.at(0, j) == emb.at(0, j));
}

TEST_CASE("head prediction matches straight-line matrix arithmetic", "[model]") {
    ModelConfig cfg{2, 4, 0, 1, 3};
    Model m = Model::build(cfg, 21);
    Rng rng(33);
    Mat emb(1, 4);
    for (double& v : emb.a) v = rng.normal();

    Mat oracle = relu(add_row(matmul(emb, m.params.by_name("head.h0.w").value),
                              m.params.by_name("head.h0.b").value));
    oracle = add_row(matmul(oracle, m.params.by_name("head.out.w").value),
                     m.params.by_name("head.out.b").value);
    Mat got = head_forward_nograd(m, emb);
    REQUIRE(got.same_shape(oracle));
    for (std::size_t i = 0; i < got.a.size(); ++i) CHECK(got.a[i] == oracle.a[i]);
}

TEST_CASE("adam leaves parameters alone when gradients vanish", "[model]") {
    ModelConfig cfg{2, 4, 1, 1, 2};
    Model m = Model::build(cfg, 11);
    std::uint64_t before = m.params.value_hash();
    m.params.zero_grads();
    AdamConfig ac;
    ac.weight_decay = 0.0;
    adam_step(m.params, ac);
    CHECK(m.params.value_hash() == before);
}

TEST_CASE("the first adaptive step moves by about the learning rate", "[model]") {
    ParamStore ps;
    auto& e = ps.add("w", 1, 1);
    e.value.a[0] = 2.0;
    e.grad.a[0] = 1.0;
    AdamConfig ac;
    ac.lr = 0.01;
    ac.weight_decay = 0.0;
    adam_step(ps, ac);
    // bias-corrected m_hat = g, v_hat = g^2, so the step is lr·g/(|g|+eps)
    CHECK(e.value.a[0] == Catch::Approx(2.0 - 0.01).margin(1e-6));
}

TEST_CASE("optimizer updates are reproducible", "[model]") {
    auto run = [] {
        ModelConfig cfg{2, 4, 1, 1, 2};
        Model m = Model::build(cfg, 17);
        Rng rng(19);
        AdamConfig ac;
        for (int step = 0; step < 2; ++step) {
            for (auto& e : m.params.entries)
                for (double& g : e.grad.a) g = rng.normal();
            adam_step(m.params, ac);
        }
        return m.params.value_hash();
    };
    CHECK(run() == run());
}

TEST_CASE("a prefixed step touches only matching parameters", "[model]") {
    ModelConfig cfg{2, 4, 1, 1, 2};
    Model m = Model::build(cfg, 23);
    for (auto& e : m.params.entries)
        for (double& g : e.grad.a) g = 0.5;
    std::uint64_t backbone_before = m.params.value_hash("bb.");
    std::uint64_t head_before = m.params.value_hash("head.");
    AdamConfig ac;
    adam_step(m.params, ac, "head.");
    CHECK(m.params.value_hash("bb.") == backbone_before);
    CHECK(m.params.value_hash("head.") != head_before);
}

TEST_CASE("non-finite gradients abort the update", "[model]") {
    ParamStore ps;
    auto& e = ps.add("w", 1, 1);
    e.grad.a[0] = std::numeric_limits<double>::quiet_NaN();
    AdamConfig ac;
    CHECK_THROWS(adam_step(ps, ac));
}
