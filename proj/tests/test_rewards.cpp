#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "patchwork/rewards.hpp"
#include "patchwork/rng.hpp"

#include "oracles.hpp"

using namespace patchwork;

namespace {

Box box(float ymin, float xmin, float ymax, float xmax, float score = 1.0f) {
    return Box{ymin, xmin, ymax, xmax, score};
}

Box random_box(Rng& rng, float score) {
    const float y0 = static_cast<float>(rng.uniform(0.0, 0.8));
    const float x0 = static_cast<float>(rng.uniform(0.0, 0.8));
    const float h = static_cast<float>(rng.uniform(0.05, 0.2));
    const float w = static_cast<float>(rng.uniform(0.05, 0.2));
    return box(y0, x0, std::min(1.0f, y0 + h), std::min(1.0f, x0 + w), score);
}

}  // namespace

TEST_CASE("iou basics") {
    const Box a = box(0, 0, 1, 0.5f);
    const Box b = box(0, 0, 1, 1);
    CHECK(iou(a, a) == Catch::Approx(1.0));
    CHECK(iou(a, b) == Catch::Approx(0.5));
    CHECK(iou(box(0, 0, 0.4f, 0.4f), box(0.5f, 0.5f, 1, 1)) == 0.0);
}

TEST_CASE("box overlap metric: score filter, matching, empty conventions") {
    const Box gt = box(0.2f, 0.2f, 0.6f, 0.6f);

    SECTION("identical prediction above threshold scores 1") {
        CHECK(box_overlap_metric({gt}, {box(0.2f, 0.2f, 0.6f, 0.6f, 0.9f)}) == Catch::Approx(1.0));
    }
    SECTION("low-score prediction is filtered out") {
        CHECK(box_overlap_metric({gt}, {box(0.2f, 0.2f, 0.6f, 0.6f, 0.4f)}) == 0.0);
    }
    SECTION("unmatched ground truth dilutes the average") {
        const Box gt2 = box(0.7f, 0.7f, 0.9f, 0.9f);
        // prediction overlapping gt at IoU 0.5
        const Box p = box(0.2f, 0.2f, 0.6f, 0.4f, 0.9f);
        const double expect = iou(gt, p) / 2.0;
        CHECK(box_overlap_metric({gt, gt2}, {p}) == Catch::Approx(expect));
        CHECK(oracle::greedy_overlap({gt, gt2}, {p}) == Catch::Approx(expect));
    }
    SECTION("no ground truth: quiet predictions score 1, noisy ones 0") {
        CHECK(box_overlap_metric({}, {}) == 1.0);
        CHECK(box_overlap_metric({}, {box(0, 0, 1, 1, 0.2f)}) == 1.0);
        CHECK(box_overlap_metric({}, {box(0, 0, 1, 1, 0.9f)}) == 0.0);
    }
}

TEST_CASE("box overlap metric equals the exhaustive greedy oracle on 1000 random cases") {
    Rng rng(4242);
    int nontrivial = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<Box> gt, preds;
        const int ng = rng.uniform_int(4);   // 0..3
        const int np = rng.uniform_int(4);
        for (int i = 0; i < ng; ++i) gt.push_back(random_box(rng, 1.0f));
        for (int i = 0; i < np; ++i)
            preds.push_back(random_box(rng, static_cast<float>(rng.uniform(0.0, 1.0))));

        const double got = box_overlap_metric(gt, preds);
        const double ref = oracle::greedy_overlap(gt, preds);
        REQUIRE(got == Catch::Approx(ref).margin(1e-12));
        REQUIRE(got >= 0.0);
        REQUIRE(got <= 1.0);

        // greedy is within a factor two of the optimal assignment
        const double opt = oracle::optimal_overlap(gt, preds);
        REQUIRE(got >= 0.5 * opt - 1e-12);
        if (got > 0.0 && got < 1.0) ++nontrivial;
    }
    CHECK(nontrivial > 100);
}

TEST_CASE("metric is invariant to input order") {
    Rng rng(99);
    std::vector<Box> gt, preds;
    for (int i = 0; i < 3; ++i) gt.push_back(random_box(rng, 1.0f));
    for (int i = 0; i < 3; ++i) preds.push_back(random_box(rng, 0.9f));
    const double base = box_overlap_metric(gt, preds);

    std::reverse(gt.begin(), gt.end());
    CHECK(box_overlap_metric(gt, preds) == Catch::Approx(base));
    std::reverse(preds.begin(), preds.end());
    CHECK(box_overlap_metric(gt, preds) == Catch::Approx(base));
}

TEST_CASE("mask mIoU matches set arithmetic") {
    Mask a(4, 4), b(4, 4);

    SECTION("identical masks") {
        a.at(1, 1) = b.at(1, 1) = 1;
        CHECK(mask_miou(a, b) == 1.0);
    }
    SECTION("disjoint nonempty masks") {
        a.at(0, 0) = 1;
        b.at(3, 3) = 1;
        CHECK(mask_miou(a, b) == 0.0);
    }
    SECTION("half-overlapping equal-area squares give 1/3") {
        // 2x2 squares offset by half their width: intersection 2, union 6
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c) {
                a.at(r, c) = 1;
                b.at(r, c + 1) = 1;
            }
        CHECK(mask_miou(a, b) == Catch::Approx(1.0 / 3.0));
    }
    SECTION("empty union counts as a perfect match") {
        CHECK(mask_miou(a, b) == 1.0);
    }
    SECTION("dim mismatch rejected") {
        Mask c(3, 4);
        CHECK_THROWS_AS(mask_miou(a, c), std::invalid_argument);
    }
    SECTION("random masks agree with a direct popcount oracle") {
        Rng rng(7);
        for (int trial = 0; trial < 20; ++trial) {
            Mask x(6, 6), y(6, 6);
            for (auto& v : x.data) v = rng.bernoulli(0.4) ? 1 : 0;
            for (auto& v : y.data) v = rng.bernoulli(0.4) ? 1 : 0;
            std::size_t inter = 0, uni = 0;
            for (std::size_t i = 0; i < x.data.size(); ++i) {
                inter += (x.data[i] && y.data[i]) ? 1u : 0u;
                uni += (x.data[i] || y.data[i]) ? 1u : 0u;
            }
            const double expect = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
            CHECK(mask_miou(x, y) == Catch::Approx(expect));
        }
    }
}

TEST_CASE("boundary F measure") {
    SECTION("identical masks score 1") {
        Mask a(8, 8);
        for (int r = 2; r < 6; ++r)
            for (int c = 2; c < 6; ++c) a.at(r, c) = 1;
        CHECK(boundary_f_measure(a, a, 1) == 1.0);
    }
    SECTION("empty prediction against nonempty truth scores 0") {
        Mask a(8, 8), b(8, 8);
        a.at(4, 4) = 1;
        CHECK(boundary_f_measure(a, b, 1) == 0.0);
    }
    SECTION("one-pixel shift is forgiven at tolerance 1") {
        Mask a(8, 8), b(8, 8);
        for (int r = 2; r < 5; ++r)
            for (int c = 2; c < 5; ++c) {
                a.at(r, c) = 1;
                b.at(r, c + 1) = 1;
            }
        CHECK(boundary_f_measure(a, b, 1) == 1.0);
        CHECK(boundary_f_measure(a, b, 0) < 1.0);
    }
}

TEST_CASE("td0 reward clamps to the non-negative improvement") {
    CHECK(td0_reward(0.8, 0.6) == Catch::Approx(0.2));
    CHECK(td0_reward(0.6, 0.8) == 0.0);
    for (double x : {0.0, 0.3, 1.0}) CHECK(td0_reward(x, x) == 0.0);
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        const double r = td0_reward(rng.uniform(), rng.uniform());
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
    }
}
