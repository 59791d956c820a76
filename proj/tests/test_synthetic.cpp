#include <catch2/catch_amalgamated.hpp>

#include "patchwork/synthetic.hpp"

using namespace patchwork;

namespace {

// Tight bounding box of a mask in relative coordinates.
Box mask_bbox(const Mask& m) {
    int ymin = m.rows, ymax = -1, xmin = m.cols, xmax = -1;
    for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < m.cols; ++c)
            if (m.at(r, c)) {
                ymin = std::min(ymin, r);
                ymax = std::max(ymax, r);
                xmin = std::min(xmin, c);
                xmax = std::max(xmax, c);
            }
    if (ymax < 0) return Box{};
    return Box{static_cast<float>(ymin) / m.rows, static_cast<float>(xmin) / m.cols,
               static_cast<float>(ymax + 1) / m.rows, static_cast<float>(xmax + 1) / m.cols, 1.0f};
}

}  // namespace

TEST_CASE("moving shapes: frames, boxes and masks are aligned and exact") {
    const Episode ep = moving_shapes_scene(7, 12, 2, 64, 64, Scenario::multi);
    REQUIRE(ep.frames.size() == 12);
    REQUIRE(ep.gt_boxes.size() == 12);
    REQUIRE(ep.gt_masks.size() == 12);

    for (int t = 0; t < 12; ++t) {
        REQUIRE(ep.gt_boxes[static_cast<std::size_t>(t)].size() == 2);
        const Mask& mask = ep.gt_masks[static_cast<std::size_t>(t)];
        // the union of gt boxes must exactly cover the mask's bounding box
        const Box mb = mask_bbox(mask);
        REQUIRE(mb.valid());
        float ymin = 1, xmin = 1, ymax = 0, xmax = 0;
        for (const Box& b : ep.gt_boxes[static_cast<std::size_t>(t)]) {
            REQUIRE(b.valid());
            ymin = std::min(ymin, b.ymin);
            xmin = std::min(xmin, b.xmin);
            ymax = std::max(ymax, b.ymax);
            xmax = std::max(xmax, b.xmax);
        }
        CHECK(std::abs(ymin - mb.ymin) <= 1.0f / 64 + 1e-6f);
        CHECK(std::abs(xmin - mb.xmin) <= 1.0f / 64 + 1e-6f);
        CHECK(std::abs(ymax - mb.ymax) <= 1.0f / 64 + 1e-6f);
        CHECK(std::abs(xmax - mb.xmax) <= 1.0f / 64 + 1e-6f);

        // every mask pixel lies inside some gt box
        for (int r = 0; r < 64; ++r)
            for (int c = 0; c < 64; ++c) {
                if (!mask.at(r, c)) continue;
                const float y = (r + 0.5f) / 64, x = (c + 0.5f) / 64;
                bool inside = false;
                for (const Box& b : ep.gt_boxes[static_cast<std::size_t>(t)])
                    inside |= y >= b.ymin && y <= b.ymax && x >= b.xmin && x <= b.xmax;
                REQUIRE(inside);
            }
    }
}

TEST_CASE("rectangle objects: rendering the gt box reproduces the mask exactly") {
    // single rectangle scenes: the tight bbox of the mask IS the gt box
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
        const Episode ep = moving_shapes_scene(seed, 6, 1, 64, 64, Scenario::stay);
        for (std::size_t t = 0; t < ep.frames.size(); ++t) {
            if (ep.gt_boxes[t].empty()) continue;
            const Box b = ep.gt_boxes[t][0];
            const Box mb = mask_bbox(ep.gt_masks[t]);
            CHECK(std::abs(b.ymin - mb.ymin) < 1e-6f);
            CHECK(std::abs(b.xmax - mb.xmax) < 1e-6f);
        }
    }
}

TEST_CASE("zero objects give empty ground truth every frame") {
    const Episode ep = moving_shapes_scene(3, 5, 0, 32, 32, Scenario::multi);
    for (const auto& boxes : ep.gt_boxes) CHECK(boxes.empty());
    for (const auto& mask : ep.gt_masks)
        for (const auto v : mask.data) CHECK(v == 0);
}

TEST_CASE("stay scenario keeps the object within one window's travel") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const Episode ep = moving_shapes_scene(seed, 24, 1, 64, 64, Scenario::stay);
        REQUIRE(!ep.gt_boxes.front().empty());
        const Box first = ep.gt_boxes.front()[0];
        const double cy0 = (first.ymin + first.ymax) / 2.0, cx0 = (first.xmin + first.xmax) / 2.0;
        for (const auto& boxes : ep.gt_boxes) {
            REQUIRE(!boxes.empty());
            const double cy = (boxes[0].ymin + boxes[0].ymax) / 2.0;
            const double cx = (boxes[0].xmin + boxes[0].xmax) / 2.0;
            CHECK(std::abs(cy - cy0) < 0.5);
            CHECK(std::abs(cx - cx0) < 0.5);
        }
    }
}

TEST_CASE("multi scenario spreads objects over distinct quadrants") {
    const Episode ep = moving_shapes_scene(11, 8, 2, 64, 64, Scenario::multi);
    const auto& boxes = ep.gt_boxes.front();
    REQUIRE(boxes.size() == 2);
    auto quadrant = [](const Box& b) {
        const double cy = (b.ymin + b.ymax) / 2.0, cx = (b.xmin + b.xmax) / 2.0;
        return (cy >= 0.5 ? 2 : 0) + (cx >= 0.5 ? 1 : 0);
    };
    CHECK(quadrant(boxes[0]) != quadrant(boxes[1]));
}

TEST_CASE("episodes are reproducible from seed and config alone") {
    const Episode a = moving_shapes_scene(99, 10, 2, 64, 64, Scenario::multi);
    const Episode b = moving_shapes_scene(99, 10, 2, 64, 64, Scenario::multi);
    REQUIRE(a.frames.size() == b.frames.size());
    for (std::size_t t = 0; t < a.frames.size(); ++t) {
        CHECK(max_abs_diff(a.frames[t], b.frames[t]) == 0.0);
        CHECK(a.gt_masks[t].data == b.gt_masks[t].data);
        REQUIRE(a.gt_boxes[t].size() == b.gt_boxes[t].size());
        for (std::size_t i = 0; i < a.gt_boxes[t].size(); ++i)
            CHECK(a.gt_boxes[t][i].ymin == b.gt_boxes[t][i].ymin);
    }
    const Episode c = moving_shapes_scene(100, 10, 2, 64, 64, Scenario::multi);
    CHECK(max_abs_diff(a.frames[0], c.frames[0]) > 0.0);
}

TEST_CASE("pan-scan: zero sigma with coincident boxes gives identical frames") {
    const Episode base = moving_shapes_scene(5, 1, 2, 96, 96, Scenario::multi);
    const Tensor& image = base.frames[0];
    const auto& gt = base.gt_boxes[0];
    const Mask& mask = base.gt_masks[0];

    // find a seed whose two sampled views coincide is not practical; instead
    // verify the static property through a single-frame episode and the
    // deterministic path itself
    const Episode ep1 = pan_scan_video(image, gt, mask, 8, 0.0, 42, 64, 64);
    const Episode ep2 = pan_scan_video(image, gt, mask, 8, 0.0, 42, 64, 64);
    REQUIRE(ep1.frames.size() == 8);
    for (std::size_t t = 0; t < 8; ++t) {
        CHECK(max_abs_diff(ep1.frames[t], ep2.frames[t]) == 0.0);
        REQUIRE(ep1.gt_boxes[t].size() == ep2.gt_boxes[t].size());
    }
}

TEST_CASE("pan-scan: ground truth boxes transform with the view") {
    // an image with one centered object; views must keep the transformed box
    // consistent with the object's rendered position in the frame
    const Episode base = moving_shapes_scene(21, 1, 1, 96, 96, Scenario::large);
    const Tensor& image = base.frames[0];
    const auto& gt = base.gt_boxes[0];
    REQUIRE(gt.size() == 1);

    const Episode ep = pan_scan_video(image, gt, base.gt_masks[0], 6, 0.5, 7, 64, 64);
    for (std::size_t t = 0; t < ep.frames.size(); ++t) {
        REQUIRE(!ep.gt_boxes[t].empty());
        const Box& b = ep.gt_boxes[t][0];
        // transformed mask bbox and transformed box must agree closely
        const Box mb = mask_bbox(ep.gt_masks[t]);
        if (!mb.valid()) continue;
        CHECK(iou(b, mb) > 0.8);
    }
}

TEST_CASE("pan-scan rejects images that are too small") {
    Tensor tiny(4, 4, 3);
    Mask m(4, 4);
    CHECK_THROWS_AS(pan_scan_video(tiny, {}, m, 4, 0.1, 1, 64, 64), std::invalid_argument);
}
