#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "patchwork/config.hpp"
#include "patchwork/latency.hpp"

using namespace patchwork;

TEST_CASE("conv FLOPs closed form") {
    // a single 1x1 conv on a 4x4x8 input producing 16 channels
    CHECK(conv_flops(4 * 4 * 16, 8) == 4096.0);
}

TEST_CASE("doubling every channel count multiplies conv cost by four") {
    ModelConfig a;
    ModelConfig b = a;
    for (auto& block : b.blocks) block.out_channels *= 2;
    b.pyr1_channels *= 2;
    b.pyr2_channels *= 2;
    Rng ra(1), rb(1);
    const StreamModel ma = build_model(a, ra);
    const StreamModel mb = build_model(b, rb);
    const double ca = count_model_flops(ma, false).conv_mflops;
    const double cb = count_model_flops(mb, false).conv_mflops;
    // the first layer's input channels are pinned to the image, so the ratio
    // approaches 4 from below
    CHECK(cb / ca > 3.4);
    CHECK(cb / ca < 4.0);
}

TEST_CASE("counted FLOPs match a hand-computed layer walk") {
    ModelConfig cfg;
    cfg.blocks = {{1, 8, 1, 2}};
    cfg.hires_hidden = 0;
    cfg.seg_hidden = 4;
    cfg.pyr1_channels = 8;
    cfg.pyr2_channels = 8;
    Rng rng(1);
    const StreamModel model = build_model(cfg, rng);
    // backbone: dw 3x3 s2 on 64x64x3 -> 32x32x3, project 3->8 at 32x32
    const double dw = 2.0 * (32 * 32 * 3) * 9;
    const double proj = 2.0 * (32 * 32 * 8) * 3;
    // pyramid on the 32x32x8 map
    const double p1 = 2.0 * (16 * 16 * 8) * 9 + 2.0 * (16 * 16 * 8) * 8;
    const double p2 = 2.0 * (8 * 8 * 8) * 9 + 2.0 * (8 * 8 * 8) * 8;
    const double conv = (dw + proj + p1 + p2) / 1e6;
    CHECK(count_model_flops(model, false).conv_mflops == Catch::Approx(conv));
}

TEST_CASE("patchwork per-frame cost lands in the quarter-area band") {
    for (const ActionSpace space : {ActionSpace(2, 1), ActionSpace(4, 2)}) {
        ModelConfig cfg;
        cfg.space = space;
        Rng rng(1);
        const StreamModel model = build_model(cfg, rng);
        Rng qrng(2);
        const QNet qnet = make_attention_net(model, qrng);
        const double crop = count_model_flops(model, true, &qnet).total();
        const double full = count_model_flops(model, false, nullptr).total();
        INFO("M=" << space.m << " N=" << space.n << " ratio " << crop / full);
        CHECK(crop / full >= 0.25);
        CHECK(crop / full <= 0.35);
    }
}

TEST_CASE("latency algebra reproduces the published max/avg pairs") {
    CostBreakdown base;
    base.conv_mflops = 2047.0;

    SECTION("interval 4, no delay") {
        VariantSpec v;
        v.interval = 4;
        const LatencyProfile p = latency_profile(base, v);
        CHECK(std::round(p.max_mflops) == 2047.0);
        CHECK(std::round(p.avg_mflops) == 512.0);
    }
    SECTION("interval 4, delay 3") {
        VariantSpec v;
        v.interval = 4;
        v.delay = 3;
        const LatencyProfile p = latency_profile(base, v);
        CHECK(std::round(p.max_mflops) == 512.0);
        CHECK(std::round(p.avg_mflops) == 128.0);
    }
    SECTION("interval 16, delay 15") {
        VariantSpec v;
        v.interval = 16;
        v.delay = 15;
        const LatencyProfile p = latency_profile(base, v);
        CHECK(std::round(p.max_mflops) == 128.0);
        CHECK(std::round(p.avg_mflops) == 8.0);
    }
}

TEST_CASE("variant modifiers: flip doubles, resolution and depth scale quadratically") {
    CostBreakdown base;
    base.conv_mflops = 1000.0;
    base.fixed_mflops = 100.0;

    VariantSpec flip;
    flip.flip = true;
    CHECK(latency_profile(base, flip).max_mflops == Catch::Approx(2200.0));

    VariantSpec quarter;
    quarter.resolution_scale = 0.5;
    CHECK(latency_profile(base, quarter).max_mflops == Catch::Approx(275.0));

    VariantSpec depth;
    depth.depth_multiplier = 2.0;
    // only the conv share scales with depth
    CHECK(latency_profile(base, depth).max_mflops == Catch::Approx(4100.0));
}

TEST_CASE("profile invariants: max >= avg, burst conservation, sequence totals") {
    CostBreakdown base;
    base.conv_mflops = 640.0;
    Rng rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        VariantSpec v;
        v.interval = 1 + rng.uniform_int(16);
        v.delay = v.interval > 1 ? rng.uniform_int(v.interval) : 0;
        v.flip = rng.bernoulli(0.3);
        v.resolution_scale = rng.uniform(0.25, 1.0);
        const int burst = std::min(v.delay + 1, v.interval);
        const int period = v.interval * burst;
        const LatencyProfile p = latency_profile(base, v, period * 3);

        CHECK(p.max_mflops >= p.avg_mflops);
        if (v.interval == 1 && v.delay == 0) CHECK(p.max_mflops == p.avg_mflops);

        double total = 0.0, peak = 0.0;
        for (const double c : p.per_frame) {
            total += c;
            peak = std::max(peak, c);
        }
        // three periods carry three keyframe costs exactly
        CHECK(total == Catch::Approx(3.0 * p.max_mflops * burst));
        CHECK(peak == Catch::Approx(p.max_mflops));
        CHECK(total / static_cast<double>(p.per_frame.size()) == Catch::Approx(p.avg_mflops));
    }
}

TEST_CASE("delay at or beyond the interval is rejected") {
    VariantSpec v;
    v.interval = 4;
    v.delay = 4;
    CHECK_THROWS_AS(v.validate(), std::invalid_argument);
}

TEST_CASE("frontier flags exactly the non-dominated rows") {
    SECTION("a single point is Pareto") {
        const auto rows = frontier({{"a", "m", 100, 100, 50, false}});
        REQUIRE(rows.size() == 1);
        CHECK(rows[0].pareto);
    }
    SECTION("dominated points are not flagged") {
        const auto rows = frontier({
            {"cheap_good", "m", 100, 100, 50, false},
            {"pricey_bad", "m", 200, 200, 40, false},   // dominated
            {"pricey_best", "m", 200, 200, 60, false},  // better metric: kept
        });
        REQUIRE(rows.size() == 3);
        CHECK(rows[0].id == "cheap_good");
        CHECK(rows[0].pareto);
        for (const auto& r : rows) {
            if (r.id == "pricey_bad") CHECK_FALSE(r.pareto);
            if (r.id == "pricey_best") CHECK(r.pareto);
        }
    }
    SECTION("rows come back sorted by max latency") {
        const auto rows = frontier({
            {"b", "m", 300, 10, 1, false},
            {"a", "m", 100, 10, 2, false},
            {"c", "m", 200, 10, 3, false},
        });
        CHECK(rows[0].id == "a");
        CHECK(rows[1].id == "c");
        CHECK(rows[2].id == "b");
    }
}

TEST_CASE("variant parsing accepts the documented grammar and rejects junk") {
    const VariantSpec v =
        parse_variant("id=sf_k4d3 method=single-frame base=2047 interval=4 delay=3");
    CHECK(v.id == "sf_k4d3");
    CHECK(v.interval == 4);
    CHECK(v.delay == 3);
    REQUIRE(v.base_mflops.has_value());
    CHECK(*v.base_mflops == 2047.0);

    const VariantSpec w = parse_variant("id=pw method=patchwork attention=2,1");
    REQUIRE(w.attention.has_value());
    CHECK(w.attention->m == 2);

    CHECK_THROWS_AS(parse_variant("id=x bogus=1"), ConfigError);
    CHECK_THROWS_AS(parse_variant("id=x interval=4 delay=7"), ConfigError);
}
