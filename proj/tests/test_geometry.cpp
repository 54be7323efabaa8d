#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "figver/geometry.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace figver;
using oracle::brute_merge;
using oracle::naive_iou;
using oracle::random_boxes;
using oracle::tb;

TEST_CASE("centroid examples") {
    CHECK(centroid({0, 0, 10, 10}) == Point{5, 5});
    CHECK(centroid({0, 0, 1, 1}) == Point{0.5, 0.5});
    CHECK(centroid({2, 4, 8, 10}) == Point{5, 7});
}

TEST_CASE("pixel_distance examples and metric axioms") {
    CHECK(pixel_distance({0, 0}, {0, 0}) == 0.0);
    CHECK(pixel_distance({0, 0}, {3, 4}) == 5.0);
    CHECK(pixel_distance({1, 2}, {4, 6}) == 5.0);

    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-500, 500);
    for (int i = 0; i < 2000; ++i) {
        const Point a{u(rng), u(rng)}, b{u(rng), u(rng)}, c{u(rng), u(rng)};
        CHECK(pixel_distance(a, b) == pixel_distance(b, a));
        CHECK(pixel_distance(a, a) == 0.0);
        if (!(a == b)) CHECK(pixel_distance(a, b) > 0.0);
        CHECK(pixel_distance(a, c) <= pixel_distance(a, b) + pixel_distance(b, c) + 1e-9);
    }
}

TEST_CASE("bounding box validity") {
    CHECK_THROWS_AS(BoundingBox::checked(3, 0, 3, 5), GeometryError);
    CHECK_THROWS_AS(BoundingBox::checked(0, 5, 2, 1), GeometryError);
    CHECK(BoundingBox::checked(0, 0, 2, 3).area() == 6);
}

TEST_CASE("box_iou examples") {
    CHECK(box_iou({0, 0, 4, 4}, {0, 0, 4, 4}) == 1.0);
    CHECK(box_iou({0, 0, 2, 2}, {5, 5, 7, 7}) == 0.0);
    CHECK(box_iou({0, 0, 2, 2}, {1, 0, 3, 2}) == doctest::Approx(2.0 / 6.0));
    // touching edges share no pixel under the half-open convention
    CHECK(box_iou({0, 0, 2, 2}, {2, 0, 4, 2}) == 0.0);
}

TEST_CASE("mask_iou examples") {
    const std::vector<std::uint8_t> a{1, 1, 0, 1, 1, 0}, b{0, 1, 1, 0, 1, 1};
    const auto ma = BinaryMask::encode(3, 2, a), mb = BinaryMask::encode(3, 2, b);
    CHECK(mask_iou(ma, mb) == doctest::Approx(2.0 / 6.0));
    CHECK(mask_iou(ma, ma) == 1.0);
    const auto left = BinaryMask::from_box(4, 4, {0, 0, 2, 4}), right = BinaryMask::from_box(4, 4, {2, 0, 4, 4});
    CHECK(mask_iou(left, right) == 0.0);
    CHECK(mask_iou(BinaryMask::empty(4, 4), BinaryMask::empty(4, 4)) == 1.0);
    CHECK(mask_iou(BinaryMask::empty(4, 4), left) == 0.0);
    CHECK_THROWS_AS(mask_iou(BinaryMask::empty(4, 4), BinaryMask::empty(4, 5)), GeometryError);
}

TEST_CASE("mask_iou properties against the per-pixel oracle") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 300; ++i) {
        const int w = 1 + static_cast<int>(rng() % 128), h = 1 + static_cast<int>(rng() % 128);
        const auto a = testing::random_grid(rng, w, h), b = testing::random_grid(rng, w, h);
        const double v = mask_iou(a.mask(), b.mask());
        CHECK(std::abs(v - naive_iou(a, b)) <= 1e-12);
        CHECK(v == mask_iou(b.mask(), a.mask()));
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        if (!a.mask().is_empty()) CHECK(mask_iou(a.mask(), a.mask()) == 1.0);
    }
}

TEST_CASE("mask codec examples") {
    CHECK(BinaryMask::encode(2, 2, std::vector<std::uint8_t>{0, 0, 0, 0}).runs() == std::vector<std::uint32_t>{4});
    CHECK(BinaryMask::encode(2, 2, std::vector<std::uint8_t>{1, 1, 1, 1}).runs() ==
          std::vector<std::uint32_t>{0, 4});
    CHECK(BinaryMask::encode(2, 2, std::vector<std::uint8_t>{1, 0, 0, 1}).runs() ==
          std::vector<std::uint32_t>{0, 1, 2, 1});
}

TEST_CASE("mask codec rejects non-canonical runs") {
    CHECK_THROWS_AS(BinaryMask::from_runs(2, 2, {3}), GeometryError);
    CHECK_THROWS_AS(BinaryMask::from_runs(2, 2, {1, 0, 3}), GeometryError);
    CHECK_THROWS_AS(BinaryMask::from_runs(2, 2, {0, 0, 4}), GeometryError);
    CHECK_THROWS_AS(BinaryMask::from_runs(0, 2, {}), GeometryError);
    CHECK_NOTHROW(BinaryMask::from_runs(2, 2, {0, 4}));
    CHECK_NOTHROW(BinaryMask::from_runs(2, 2, {2, 2}));
}

TEST_CASE("mask codec roundtrip and canonical form on random grids") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 400; ++i) {
        const int w = 1 + static_cast<int>(rng() % 128), h = 1 + static_cast<int>(rng() % 128);
        const auto g = testing::random_grid(rng, w, h);
        const auto m = g.mask();
        REQUIRE(m.decode() == g.px);
        const auto &runs = m.runs();
        CHECK(std::accumulate(runs.begin(), runs.end(), std::uint64_t{0}) == static_cast<std::uint64_t>(w) * h);
        for (std::size_t k = 1; k < runs.size(); ++k) CHECK(runs[k] > 0);
        CHECK(BinaryMask::from_runs(w, h, runs) == m);
        nlohmann::json j = m;
        CHECK(j.get<BinaryMask>() == m);
        CHECK(m.foreground() == static_cast<std::uint64_t>(std::count(g.px.begin(), g.px.end(), 1)));
    }
}

TEST_CASE("mask JSON form") {
    const auto m = BinaryMask::encode(2, 2, std::vector<std::uint8_t>{1, 0, 0, 1});
    CHECK(nlohmann::json(m).dump() == R"({"h":2,"runs":[0,1,2,1],"w":2})");
    CHECK(nlohmann::json(BoundingBox{1, 2, 3, 4}).dump() == "[1,2,3,4]");
}

TEST_CASE("from_box clips to the grid") {
    const auto m = BinaryMask::from_box(4, 4, {-2, 2, 10, 3});
    CHECK(m.foreground() == 4);
    CHECK(m.at(0, 2));
    CHECK_FALSE(m.at(0, 1));
    CHECK(BinaryMask::from_box(4, 4, {5, 5, 8, 8}).is_empty());
}

TEST_CASE("merge_text_boxes examples") {
    SUBCASE("far apart stay separate") {
        const std::vector<TextBox> in{tb("a", "Enc", {0, 0, 10, 10}), tb("b", "Dec", {100, 0, 110, 10})};
        const auto out = merge_text_boxes(in, 50);
        REQUIRE(out.size() == 2);
        CHECK(out[0].text == "Enc");
        CHECK(out[1].text == "Dec");
        CHECK(out[0].box == in[0].box);
    }
    SUBCASE("distance 30 merges, reading order") {
        const std::vector<TextBox> in{tb("b", "Layer", {0, 30, 10, 40}, 0.7), tb("a", "Attention", {0, 0, 10, 10}, 0.9)};
        const auto out = merge_text_boxes(in, 50);
        REQUIRE(out.size() == 1);
        CHECK(out[0].text == "Attention Layer");
        CHECK(out[0].box == BoundingBox{0, 0, 10, 40});
        CHECK(out[0].confidence == 0.7);
        CHECK(out[0].members == std::vector<std::string>{"a", "b"});
    }
    SUBCASE("transitive chain") {
        const std::vector<TextBox> in{tb("a", "A", {0, 0, 10, 10}), tb("c", "C", {80, 0, 90, 10}),
                                      tb("b", "B", {40, 0, 50, 10})};
        const auto out = merge_text_boxes(in, 50);
        REQUIRE(out.size() == 1);
        CHECK(out[0].text == "A B C");
    }
    SUBCASE("distance exactly min_pixel does not merge") {
        const std::vector<TextBox> in{tb("a", "A", {0, 0, 10, 10}), tb("b", "B", {50, 0, 60, 10})};
        CHECK(merge_text_boxes(in, 50).size() == 2);
    }
    SUBCASE("empty input") { CHECK(merge_text_boxes(std::vector<TextBox>{}, 50).empty()); }
    CHECK_THROWS_AS(merge_text_boxes(std::vector<TextBox>{}, 0), GeometryError);
}

TEST_CASE("merge_text_boxes equals brute-force closure and ignores input order") {
    std::mt19937_64 rng(19);
    for (int trial = 0; trial < 250; ++trial) {
        auto boxes = random_boxes(rng, 1 + rng() % 14);
        const auto expected = brute_merge(boxes, 50);
        const auto got = merge_text_boxes(boxes, 50);
        REQUIRE(got.size() == expected.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].text == expected[i].text);
            CHECK(got[i].box == expected[i].box);
            CHECK(got[i].confidence == expected[i].confidence);
            CHECK(got[i].members == expected[i].members);
        }
        std::shuffle(boxes.begin(), boxes.end(), rng);
        CHECK(merge_text_boxes(boxes, 50) == got);
    }
}

TEST_CASE("mask_vote examples") {
    const auto m = [](std::vector<std::uint8_t> px) { return BinaryMask::encode(3, 1, px); };
    const std::vector<BinaryMask> three{m({1, 1, 0}), m({0, 1, 1}), m({0, 1, 0})};
    CHECK(mask_vote(three) == m({0, 1, 0}));
    const std::vector<BinaryMask> same{m({1, 0, 1}), m({1, 0, 1}), m({1, 0, 1})};
    CHECK(mask_vote(same) == m({1, 0, 1}));
    const std::vector<BinaryMask> one{m({0, 1, 1})};
    CHECK(mask_vote(one) == m({0, 1, 1}));
    const std::vector<BinaryMask> two{m({1, 1, 0}), m({0, 1, 1})};
    CHECK(mask_vote(two) == m({0, 1, 0}));
    CHECK_THROWS_AS(mask_vote(std::vector<BinaryMask>{}), GeometryError);
    const std::vector<BinaryMask> mixed{m({1, 1, 0}), BinaryMask::empty(1, 3)};
    CHECK_THROWS_AS(mask_vote(mixed), GeometryError);
}

TEST_CASE("mask_vote permutation invariance and monotonicity") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 200; ++trial) {
        const int w = 1 + static_cast<int>(rng() % 40), h = 1 + static_cast<int>(rng() % 40);
        const std::size_t k = 1 + rng() % 5;
        std::vector<testing::Grid> grids;
        std::vector<BinaryMask> masks;
        for (std::size_t i = 0; i < k; ++i) {
            grids.push_back(testing::random_grid(rng, w, h));
            masks.push_back(grids.back().mask());
        }
        const auto base = mask_vote(masks);
        auto shuffled = masks;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        CHECK(mask_vote(shuffled) == base);

        std::vector<BinaryMask> grown;
        for (auto g : grids) {
            for (auto &v : g.px)
                if (rng() % 5 == 0) v = 1;
            grown.push_back(g.mask());
        }
        const auto before = base.decode(), after = mask_vote(grown).decode();
        for (std::size_t i = 0; i < before.size(); ++i)
            if (before[i]) CHECK(after[i]);
    }
}

TEST_CASE("box_of_mask examples") {
    CHECK_FALSE(box_of_mask(BinaryMask::empty(4, 4)).has_value());
    CHECK(box_of_mask(BinaryMask::from_box(5, 3, {0, 0, 5, 3})) == BoundingBox{0, 0, 5, 3});
    std::vector<std::uint8_t> px(16, 0);
    px[1 * 4 + 1] = 1;
    px[2 * 4 + 2] = 1;
    CHECK(box_of_mask(BinaryMask::encode(4, 4, px)) == BoundingBox{1, 1, 3, 3});
}
