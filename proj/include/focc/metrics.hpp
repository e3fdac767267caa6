#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace focc {

// Binary occupied-vs-free overlap between two label grids; class 0 is free
// space, everything else counts as occupied. Returns |pred ∩ gt| / |pred ∪ gt|
// as a fraction in [0,1]; an empty union (both grids all free) scores 1.
double iou_binary(const std::vector<uint8_t> &pred, const std::vector<uint8_t> &gt);

// Mean per-class IoU over the semantic classes 1..num_classes-1. A class
// absent from both grids is left out of the mean entirely rather than counted
// as zero; with no class present anywhere the prediction is vacuously perfect
// and the result is 1.
double miou(const std::vector<uint8_t> &pred, const std::vector<uint8_t> &gt, int num_classes);

// Per-class IoU for ids 1..num_classes-1 (index 0 of the result is class 1).
// NaN marks a class absent from both grids.
std::vector<double> class_iou(const std::vector<uint8_t> &pred, const std::vector<uint8_t> &gt,
                              int num_classes);

// One evaluated scene: a predicted and a ground-truth grid per horizon.
struct SceneForecast {
    std::string scene;
    std::vector<int> horizons_s;
    std::vector<std::vector<uint8_t>> preds;
    std::vector<std::vector<uint8_t>> gts;
};

// One (scene, horizon) result row; metric values are percentages.
struct HorizonRow {
    std::string scene;
    int horizon_s = 0;
    double iou = 0.0;
    double miou = 0.0;
    std::vector<double> class_iou;  // class 1..C-1, percent, NaN when absent
};

struct HorizonReport {
    int num_classes = 0;
    std::vector<int> horizons_s;    // ascending
    std::vector<HorizonRow> rows;   // scene-major, horizons ascending
    std::vector<double> mean_iou;   // per horizon, averaged over scenes
    std::vector<double> mean_miou;
    double avg_iou = 0.0;           // arithmetic mean of the per-horizon means
    double avg_miou = 0.0;

    // columns: scene, horizon_s, iou, miou, iou_1..iou_<C-1>; one row per
    // (scene, horizon); absent classes leave their cell empty
    std::string to_csv() const;
    // aligned "1s | 2s | 3s | Avg." table with an mIoU and an IoU row,
    // values printed to two decimals
    std::string to_table() const;
};

HorizonReport horizon_report(const std::vector<SceneForecast> &scenes, int num_classes);

}  // namespace focc
