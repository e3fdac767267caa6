#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "focc/common.hpp"
#include "focc/metrics.hpp"

using namespace focc;

namespace {

std::vector<uint8_t> random_grid(int n, int num_classes, Rng &rng) {
    std::vector<uint8_t> g(n);
    for (auto &v : g) v = static_cast<uint8_t>(rng.uniform_int(0, num_classes - 1));
    return g;
}

}  // namespace

TEST_CASE("binary iou on hand-built masks") {
    // 8-voxel grid, gt occupied at {0,1,2,3}
    std::vector<uint8_t> gt = {1, 1, 2, 2, 0, 0, 0, 0};

    CHECK(iou_binary(gt, gt) == 1.0);

    // disjoint occupancy
    std::vector<uint8_t> disjoint = {0, 0, 0, 0, 1, 1, 2, 2};
    CHECK(iou_binary(disjoint, gt) == 0.0);

    // pred covers gt plus the same volume again: |inter| = 4, |union| = 8
    std::vector<uint8_t> superset = {1, 1, 2, 2, 1, 1, 2, 2};
    CHECK(iou_binary(superset, gt) == 0.5);

    // both all free: empty union scores perfect
    std::vector<uint8_t> empty(8, 0);
    CHECK(iou_binary(empty, empty) == 1.0);

    CHECK_THROWS_AS(iou_binary(std::vector<uint8_t>(7, 0), gt), ContractError);
}

TEST_CASE("binary iou ignores which semantic class occupies a voxel") {
    std::vector<uint8_t> gt = {1, 2, 3, 0, 0, 0};
    std::vector<uint8_t> relabeled = {3, 1, 2, 0, 0, 0};
    CHECK(iou_binary(relabeled, gt) == 1.0);
}

TEST_CASE("miou over semantic classes") {
    int C = 3;
    std::vector<uint8_t> gt = {1, 1, 2, 2, 0, 0, 0, 0};

    CHECK(miou(gt, gt, C) == 1.0);

    // class 1 perfect, class 2 disjoint: mean of {1, 0}
    std::vector<uint8_t> half = {1, 1, 0, 0, 2, 2, 0, 0};
    CHECK(miou(half, gt, C) == 0.5);

    // a class absent from both grids is excluded, not counted as zero
    std::vector<uint8_t> only1 = {1, 1, 0, 0, 0, 0, 0, 0};
    CHECK(miou(only1, only1, 4) == 1.0);

    // free-only grids are vacuously perfect
    std::vector<uint8_t> empty(8, 0);
    CHECK(miou(empty, empty, C) == 1.0);

    // free-space agreement does not inflate the mean: class 1 half right
    std::vector<uint8_t> gt1 = {1, 1, 0, 0, 0, 0, 0, 0};
    std::vector<uint8_t> pred1 = {1, 0, 0, 0, 0, 0, 0, 0};
    CHECK(miou(pred1, gt1, C) == 0.5);

    CHECK_THROWS_AS(miou(gt, gt, 1), ContractError);
}

TEST_CASE("per-class iou marks absent classes") {
    std::vector<uint8_t> gt = {1, 1, 0, 0};
    std::vector<uint8_t> pred = {1, 0, 1, 0};
    std::vector<double> per = class_iou(pred, gt, 4);
    REQUIRE(per.size() == 3);
    CHECK(per[0] == doctest::Approx(1.0 / 3.0));  // inter 1, union 3
    CHECK(std::isnan(per[1]));
    CHECK(std::isnan(per[2]));
}

TEST_CASE("metrics are symmetric and invariant under relabeling") {
    Rng rng(11);
    int C = 5;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<uint8_t> a = random_grid(64, C, rng);
        std::vector<uint8_t> b = random_grid(64, C, rng);

        CHECK(iou_binary(a, b) == iou_binary(b, a));
        CHECK(miou(a, b, C) == doctest::Approx(miou(b, a, C)).epsilon(1e-14));

        // permute the semantic ids consistently on both grids
        std::vector<uint8_t> perm = {0, 3, 1, 4, 2};
        std::vector<uint8_t> pa(a.size()), pb(b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            pa[i] = perm[a[i]];
            pb[i] = perm[b[i]];
        }
        CHECK(iou_binary(pa, pb) == iou_binary(a, b));
        CHECK(miou(pa, pb, C) == doctest::Approx(miou(a, b, C)).epsilon(1e-14));
    }
}

TEST_CASE("horizon report on a hand-computed scene") {
    // 8-voxel grids, C = 3; gt puts class 1 at {0,1} and class 2 at {2,3}
    std::vector<uint8_t> gt = {1, 1, 2, 2, 0, 0, 0, 0};
    std::vector<uint8_t> perfect = gt;
    std::vector<uint8_t> shifted = {1, 1, 0, 0, 2, 2, 0, 0};  // class 2 moved
    std::vector<uint8_t> empty(8, 0);

    SceneForecast sc;
    sc.scene = "scene_7";
    sc.horizons_s = {3, 1, 2};  // deliberately unsorted
    sc.preds = {empty, perfect, shifted};
    sc.gts = {gt, gt, gt};

    HorizonReport rep = horizon_report({sc}, 3);

    REQUIRE(rep.horizons_s == std::vector<int>{1, 2, 3});
    REQUIRE(rep.rows.size() == 3);
    CHECK(rep.rows[0].horizon_s == 1);
    CHECK(rep.rows[0].iou == 100.0);
    CHECK(rep.rows[0].miou == 100.0);
    // shifted: binary inter {0,1} over union {0..5}; classes score {1, 0}
    CHECK(rep.rows[1].iou == doctest::Approx(100.0 / 3.0));
    CHECK(rep.rows[1].miou == 50.0);
    CHECK(rep.rows[2].iou == 0.0);
    CHECK(rep.rows[2].miou == 0.0);

    // averages are the arithmetic means of the horizon columns
    CHECK(rep.avg_miou == doctest::Approx((100.0 + 50.0 + 0.0) / 3.0));
    CHECK(rep.avg_iou == doctest::Approx((100.0 + 100.0 / 3.0 + 0.0) / 3.0));

    std::string table = rep.to_table();
    CHECK(table.find("1s") != std::string::npos);
    CHECK(table.find("Avg.") != std::string::npos);
    CHECK(table.find("50.00") != std::string::npos);   // mIoU avg and 2s column
    CHECK(table.find("33.33") != std::string::npos);   // IoU 2s column
    CHECK(table.find("44.44") != std::string::npos);   // IoU avg
}

TEST_CASE("identical predictions score perfect everywhere") {
    Rng rng(4);
    std::vector<SceneForecast> scenes;
    for (int s = 0; s < 3; ++s) {
        SceneForecast sc;
        sc.scene = "s" + std::to_string(s);
        sc.horizons_s = {1, 2, 3};
        for (int h = 0; h < 3; ++h) {
            std::vector<uint8_t> g = random_grid(32, 4, rng);
            sc.preds.push_back(g);
            sc.gts.push_back(g);
        }
        scenes.push_back(std::move(sc));
    }
    HorizonReport rep = horizon_report(scenes, 4);
    for (const auto &row : rep.rows) {
        CHECK(row.iou == 100.0);
        CHECK(row.miou == 100.0);
    }
    CHECK(rep.avg_iou == 100.0);
    CHECK(rep.avg_miou == 100.0);
    for (double v : rep.mean_iou) CHECK(v == 100.0);
}

TEST_CASE("report aggregates scenes and serializes to csv") {
    std::vector<uint8_t> gt = {1, 1, 2, 2, 0, 0, 0, 0};
    std::vector<uint8_t> empty(8, 0);

    SceneForecast good;
    good.scene = "a";
    good.horizons_s = {1};
    good.preds = {gt};
    good.gts = {gt};
    SceneForecast bad;
    bad.scene = "b";
    bad.horizons_s = {1};
    bad.preds = {empty};
    bad.gts = {gt};

    HorizonReport rep = horizon_report({good, bad}, 3);
    REQUIRE(rep.mean_iou.size() == 1);
    CHECK(rep.mean_iou[0] == 50.0);   // mean of 100 and 0
    CHECK(rep.mean_miou[0] == 50.0);
    CHECK(rep.avg_iou == 50.0);

    std::string csv = rep.to_csv();
    std::istringstream lines(csv);
    std::string header, row_a, row_b;
    std::getline(lines, header);
    std::getline(lines, row_a);
    std::getline(lines, row_b);
    CHECK(header == "scene,horizon_s,iou,miou,iou_1,iou_2");
    CHECK(row_a == "a,1,100.000000,100.000000,100.000000,100.000000");
    CHECK(row_b == "b,1,0.000000,0.000000,0.000000,0.000000");

    // serialization is a pure function of the report
    CHECK(rep.to_csv() == csv);
    CHECK_THROWS_AS(horizon_report({good, SceneForecast{"c", {1, 2}, {}, {}}}, 3),
                    ContractError);
}

TEST_CASE("absent classes leave empty csv cells") {
    std::vector<uint8_t> only1 = {1, 1, 0, 0};
    SceneForecast sc;
    sc.scene = "a";
    sc.horizons_s = {1};
    sc.preds = {only1};
    sc.gts = {only1};
    HorizonReport rep = horizon_report({sc}, 4);
    std::string csv = rep.to_csv();
    std::istringstream lines(csv);
    std::string header, row;
    std::getline(lines, header);
    std::getline(lines, row);
    CHECK(row == "a,1,100.000000,100.000000,100.000000,,");
}
