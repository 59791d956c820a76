#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "patchwork/attention.hpp"

#include "oracles.hpp"

using namespace patchwork;

TEST_CASE("action space sizes match the (M,N) grid rule") {
    CHECK(ActionSpace(2, 1).num_actions() == 4);
    CHECK(ActionSpace(4, 2).num_actions() == 9);
    CHECK(ActionSpace(4, 1).num_actions() == 16);
    CHECK(ActionSpace(1, 1).num_actions() == 1);
    CHECK_THROWS_AS(ActionSpace(2, 3), std::invalid_argument);
}

TEST_CASE("enumerate_actions lists windows in row-major corner order") {
    SECTION("(2,1): four half-frame windows") {
        const auto w = enumerate_actions(ActionSpace(2, 1));
        REQUIRE(w.size() == 4);
        for (const auto& win : w) {
            CHECK(win.h == Frac(1, 2));
            CHECK(win.w == Frac(1, 2));
        }
        CHECK(w[0].a == Frac(0, 1));
        CHECK(w[0].b == Frac(0, 1));
        CHECK(w[1].a == Frac(0, 1));
        CHECK(w[1].b == Frac(1, 2));
        CHECK(w[2].a == Frac(1, 2));
        CHECK(w[2].b == Frac(0, 1));
        CHECK(w[3].a == Frac(1, 2));
        CHECK(w[3].b == Frac(1, 2));
    }
    SECTION("(4,2): nine half-frame windows with quarter-step corners") {
        const auto w = enumerate_actions(ActionSpace(4, 2));
        REQUIRE(w.size() == 9);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                const auto& win = w[static_cast<std::size_t>(i * 3 + j)];
                CHECK(win.a == Frac(i, 4));
                CHECK(win.b == Frac(j, 4));
                CHECK(win.h == Frac(1, 2));
            }
    }
    SECTION("(1,1): single full-frame window") {
        const auto w = enumerate_actions(ActionSpace(1, 1));
        REQUIRE(w.size() == 1);
        CHECK(w[0].h == Frac(1, 1));
        CHECK(w[0].a == Frac(0, 1));
    }
}

TEST_CASE("action history decays, clamps and stays in [0,1]") {
    ActionHistory h(4, 0.5f);

    SECTION("onehot from zero") {
        const auto h1 = update_history(h, 0);
        CHECK(h1.f[0] == 1.0f);
        CHECK(h1.f[1] == 0.0f);
    }
    SECTION("repeating an action pins its entry at exactly 1") {
        auto cur = h;
        for (int i = 0; i < 10; ++i) {
            cur = update_history(cur, 2);
            CHECK(cur.f[2] == 1.0f);
        }
    }
    SECTION("two-step closed form") {
        auto cur = update_history(h, 0);
        cur = update_history(cur, 1);
        CHECK(cur.f[0] == Catch::Approx(0.5));
        CHECK(cur.f[1] == Catch::Approx(1.0));
        CHECK(cur.f[2] == 0.0f);
    }
    SECTION("bounded after any random sequence, and matches a scalar recurrence") {
        Rng rng(3);
        ActionHistory cur(4, 0.7f);
        std::vector<double> ref(4, 0.0);
        for (int step = 0; step < 200; ++step) {
            const int a = rng.uniform_int(4);
            cur = update_history(cur, a);
            for (auto& v : ref) v = std::min(v * 0.7, 1.0);
            ref[static_cast<std::size_t>(a)] = std::min(ref[static_cast<std::size_t>(a)] + 1.0, 1.0);
            for (int i = 0; i < 4; ++i) {
                REQUIRE(cur.f[static_cast<std::size_t>(i)] >= 0.0f);
                REQUIRE(cur.f[static_cast<std::size_t>(i)] <= 1.0f);
                REQUIRE(std::abs(cur.f[static_cast<std::size_t>(i)] -
                                 ref[static_cast<std::size_t>(i)]) < 1e-5);
            }
        }
    }
    SECTION("out-of-range action rejected") {
        CHECK_THROWS_AS(update_history(h, 4), std::invalid_argument);
        CHECK_THROWS_AS(update_history(h, -1), std::invalid_argument);
    }
}

namespace {

// Naive double-precision re-derivation of the Q forward pass.
std::vector<double> naive_q(const Tensor& mem, const ActionHistory& hist, const QNet& net) {
    const Tensor h1 = oracle::conv_same(mem, net.conv1, 2);
    Tensor a1 = h1;
    for (auto& v : a1.data) v = std::max(v, 0.0f);
    const Tensor h2 = oracle::conv_same(a1, net.conv2, 2);
    Tensor a2 = h2;
    for (auto& v : a2.data) v = std::max(v, 0.0f);

    std::vector<double> flat;
    for (const float v : a2.data) flat.push_back(v);
    for (const float v : hist.f) flat.push_back(v);

    std::vector<double> q(static_cast<std::size_t>(net.num_actions));
    for (int a = 0; a < net.num_actions; ++a) {
        double acc = net.dense_b[static_cast<std::size_t>(a)];
        for (std::size_t j = 0; j < flat.size(); ++j)
            acc += static_cast<double>(net.dense_w[static_cast<std::size_t>(a) * flat.size() + j]) *
                   flat[j];
        q[static_cast<std::size_t>(a)] = acc;
    }
    return q;
}

}  // namespace

TEST_CASE("q_values shape, zero case and agreement with the naive oracle") {
    Rng rng(1001);
    QNet net = make_qnet(8, 8, 6, 9, rng);

    SECTION("zero memory, zero history, zero weights give a zero vector") {
        QNet zero = net;
        std::fill(zero.conv1.values.begin(), zero.conv1.values.end(), 0.0f);
        std::fill(zero.conv2.values.begin(), zero.conv2.values.end(), 0.0f);
        std::fill(zero.dense_w.begin(), zero.dense_w.end(), 0.0f);
        const Tensor mem(8, 8, 6);
        const ActionHistory hist(9, 0.7f);
        for (const float v : q_values(mem, hist, zero)) CHECK(v == 0.0f);
    }
    SECTION("output length equals the action count") {
        const Tensor mem(8, 8, 6);
        const ActionHistory hist(9, 0.7f);
        CHECK(q_values(mem, hist, net).size() == 9);
    }
    SECTION("seeded fixture matches the independent forward pass") {
        Rng data_rng(2002);
        const Tensor mem = Tensor::random(8, 8, 6, data_rng);
        ActionHistory hist(9, 0.7f);
        hist = update_history(hist, 3);
        hist = update_history(hist, 5);
        const auto got = q_values(mem, hist, net);
        const auto ref = naive_q(mem, hist, net);
        for (int a = 0; a < 9; ++a)
            CHECK(std::abs(got[static_cast<std::size_t>(a)] - ref[static_cast<std::size_t>(a)]) <
                  1e-5);
    }
    SECTION("shape mismatch rejected") {
        const Tensor mem(4, 4, 6);
        const ActionHistory hist(9, 0.7f);
        CHECK_THROWS_AS(q_values(mem, hist, net), std::invalid_argument);
    }
}

TEST_CASE("scanning policy cycles the action space in order") {
    Rng rng(1);
    for (int t = 0; t < 8; ++t) {
        CHECK(select_action(Policy::scanning, nullptr, t, 4, rng) == t % 4);
    }
    // every action exactly once per cycle
    std::vector<int> counts(9, 0);
    for (int t = 0; t < 9; ++t)
        counts[static_cast<std::size_t>(select_action(Policy::scanning, nullptr, t, 9, rng))]++;
    for (const int c : counts) CHECK(c == 1);
}

TEST_CASE("greedy takes the argmax with lowest-index tie-break") {
    Rng rng(1);
    const std::vector<float> q = {0.1f, 0.9f, 0.9f};
    CHECK(select_action(Policy::greedy, &q, 0, 3, rng) == 1);
    CHECK_THROWS_AS(select_action(Policy::greedy, nullptr, 0, 3, rng), std::invalid_argument);
}

TEST_CASE("greedy selection is invariant to positive affine transforms of q") {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> q(6);
        for (auto& v : q) v = static_cast<float>(rng.uniform(-2.0, 2.0));
        const float a = static_cast<float>(rng.uniform(0.1, 5.0));
        const float b = static_cast<float>(rng.uniform(-3.0, 3.0));
        std::vector<float> q2 = q;
        for (auto& v : q2) v = a * v + b;
        CHECK(select_action(Policy::greedy, &q, 0, 6, rng) ==
              select_action(Policy::greedy, &q2, 0, 6, rng));
    }
}

TEST_CASE("epsilon 0 equals greedy; epsilon 1 is uniform by chi-square") {
    const std::vector<float> q = {0.0f, 2.0f, 1.0f, -1.0f};

    Rng rng_a(5);
    for (int t = 0; t < 100; ++t)
        CHECK(select_action(Policy::epsilon_greedy, &q, t, 4, rng_a, 0.0) == 1);

    Rng rng_b(6);
    std::vector<int> counts(4, 0);
    const int draws = 10000;
    for (int t = 0; t < draws; ++t)
        counts[static_cast<std::size_t>(
            select_action(Policy::epsilon_greedy, &q, t, 4, rng_b, 1.0))]++;
    const double expected = draws / 4.0;
    double chi2 = 0.0;
    for (const int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // 3 degrees of freedom, p = 0.001 cut-off
    CHECK(chi2 < 16.27);
}
