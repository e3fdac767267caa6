#include "focc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "focc/common.hpp"

namespace focc {

namespace {

void check_same_extent(const std::vector<uint8_t> &pred, const std::vector<uint8_t> &gt) {
    if (pred.size() != gt.size())
        throw ContractError("metrics: grids disagree in extent (" + std::to_string(pred.size()) +
                            " vs " + std::to_string(gt.size()) + " voxels)");
}

std::string format2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

}  // namespace

double iou_binary(const std::vector<uint8_t> &pred, const std::vector<uint8_t> &gt) {
    check_same_extent(pred, gt);
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        bool p = pred[i] != 0, g = gt[i] != 0;
        inter += (p && g);
        uni += (p || g);
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<double> class_iou(const std::vector<uint8_t> &pred, const std::vector<uint8_t> &gt,
                              int num_classes) {
    check_same_extent(pred, gt);
    if (num_classes < 2)
        throw ContractError("metrics: need at least a free and one semantic class, got " +
                            std::to_string(num_classes));
    std::vector<int64_t> inter(num_classes, 0), uni(num_classes, 0);
    for (size_t i = 0; i < pred.size(); ++i) {
        int p = pred[i], g = gt[i];
        if (p == g) {
            if (p != 0 && p < num_classes) {
                ++inter[p];
                ++uni[p];
            }
        } else {
            if (p != 0 && p < num_classes) ++uni[p];
            if (g != 0 && g < num_classes) ++uni[g];
        }
    }
    std::vector<double> out(num_classes - 1);
    for (int c = 1; c < num_classes; ++c)
        out[c - 1] = uni[c] == 0 ? std::numeric_limits<double>::quiet_NaN()
                                 : static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    return out;
}

double miou(const std::vector<uint8_t> &pred, const std::vector<uint8_t> &gt, int num_classes) {
    std::vector<double> per_class = class_iou(pred, gt, num_classes);
    double sum = 0.0;
    int present = 0;
    for (double v : per_class) {
        if (std::isnan(v)) continue;
        sum += v;
        ++present;
    }
    if (present == 0) return 1.0;
    return sum / present;
}

HorizonReport horizon_report(const std::vector<SceneForecast> &scenes, int num_classes) {
    HorizonReport report;
    report.num_classes = num_classes;
    if (scenes.empty()) return report;

    // every scene must carry the same horizon set; rows and columns follow
    // the horizons sorted ascending
    std::vector<int> horizons = scenes.front().horizons_s;
    std::vector<size_t> order(horizons.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return horizons[a] < horizons[b]; });
    for (size_t idx : order) report.horizons_s.push_back(horizons[idx]);

    for (const auto &sc : scenes) {
        if (sc.horizons_s != horizons)
            throw ContractError("horizon_report: scene '" + sc.scene +
                                "' has a different horizon set");
        if (sc.preds.size() != sc.horizons_s.size() || sc.gts.size() != sc.horizons_s.size())
            throw ContractError("horizon_report: scene '" + sc.scene +
                                "' has mismatched grid and horizon counts");
        for (size_t idx : order) {
            HorizonRow row;
            row.scene = sc.scene;
            row.horizon_s = sc.horizons_s[idx];
            row.iou = 100.0 * iou_binary(sc.preds[idx], sc.gts[idx]);
            row.miou = 100.0 * miou(sc.preds[idx], sc.gts[idx], num_classes);
            row.class_iou = class_iou(sc.preds[idx], sc.gts[idx], num_classes);
            for (double &v : row.class_iou) v *= 100.0;
            report.rows.push_back(std::move(row));
        }
    }

    size_t n_h = report.horizons_s.size();
    report.mean_iou.assign(n_h, 0.0);
    report.mean_miou.assign(n_h, 0.0);
    for (size_t s = 0; s < scenes.size(); ++s) {
        for (size_t h = 0; h < n_h; ++h) {
            report.mean_iou[h] += report.rows[s * n_h + h].iou;
            report.mean_miou[h] += report.rows[s * n_h + h].miou;
        }
    }
    for (size_t h = 0; h < n_h; ++h) {
        report.mean_iou[h] /= static_cast<double>(scenes.size());
        report.mean_miou[h] /= static_cast<double>(scenes.size());
    }
    report.avg_iou =
        std::accumulate(report.mean_iou.begin(), report.mean_iou.end(), 0.0) / n_h;
    report.avg_miou =
        std::accumulate(report.mean_miou.begin(), report.mean_miou.end(), 0.0) / n_h;
    return report;
}

std::string HorizonReport::to_csv() const {
    std::string out = "scene,horizon_s,iou,miou";
    for (int c = 1; c < num_classes; ++c) out += ",iou_" + std::to_string(c);
    out += "\n";
    char buf[64];
    for (const auto &row : rows) {
        out += row.scene + "," + std::to_string(row.horizon_s);
        std::snprintf(buf, sizeof(buf), ",%.6f,%.6f", row.iou, row.miou);
        out += buf;
        for (double v : row.class_iou) {
            if (std::isnan(v)) {
                out += ",";
            } else {
                std::snprintf(buf, sizeof(buf), ",%.6f", v);
                out += buf;
            }
        }
        out += "\n";
    }
    return out;
}

std::string HorizonReport::to_table() const {
    std::vector<std::string> header = {"Metric"};
    for (int h : horizons_s) header.push_back(std::to_string(h) + "s");
    header.push_back("Avg.");

    std::vector<std::string> miou_row = {"mIoU (%)"}, iou_row = {"IoU (%)"};
    for (double v : mean_miou) miou_row.push_back(format2(v));
    miou_row.push_back(format2(avg_miou));
    for (double v : mean_iou) iou_row.push_back(format2(v));
    iou_row.push_back(format2(avg_iou));

    std::vector<size_t> width(header.size());
    for (size_t i = 0; i < header.size(); ++i)
        width[i] = std::max({header[i].size(), miou_row[i].size(), iou_row[i].size()});

    auto emit = [&](const std::vector<std::string> &cells) {
        std::string line;
        for (size_t i = 0; i < cells.size(); ++i) {
            if (i) line += " | ";
            // pad left for numeric columns, right for the label column
            std::string pad(width[i] - cells[i].size(), ' ');
            line += i == 0 ? cells[i] + pad : pad + cells[i];
        }
        return line + "\n";
    };
    return emit(header) + emit(miou_row) + emit(iou_row);
}

}  // namespace focc
