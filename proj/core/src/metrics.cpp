#include "flowssc/metrics.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "flowssc/error.hpp"

namespace flowssc::metrics {

ConfusionStats::ConfusionStats(int k)
    : num_classes(k),
      tp(static_cast<std::size_t>(k), 0),
      fp(static_cast<std::size_t>(k), 0),
      fn(static_cast<std::size_t>(k), 0) {}

ConfusionStats& ConfusionStats::operator+=(const ConfusionStats& other) {
    if (other.num_classes != num_classes) {
        throw DataError("cannot merge confusion stats with different class counts");
    }
    for (std::size_t c = 0; c < tp.size(); ++c) {
        tp[c] += other.tp[c];
        fp[c] += other.fp[c];
        fn[c] += other.fn[c];
    }
    geo_tp += other.geo_tp;
    geo_fp += other.geo_fp;
    geo_fn += other.geo_fn;
    geo_tn += other.geo_tn;
    return *this;
}

void accumulate(const VoxelGrid& pred, const VoxelGrid& gt, ConfusionStats& stats) {
    if (pred.dims() != gt.dims()) {
        throw DataError("prediction and ground truth grids differ in dimensions");
    }
    if (pred.num_classes() != gt.num_classes()) {
        throw DataError("prediction and ground truth grids differ in class count");
    }
    if (stats.num_classes == 0) {
        stats = ConfusionStats(gt.num_classes());
    } else if (stats.num_classes != gt.num_classes()) {
        throw DataError("confusion stats class count " + std::to_string(stats.num_classes) +
                        " does not match grids with " + std::to_string(gt.num_classes()));
    }
    const auto p = pred.labels();
    const auto g = gt.labels();
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto pc = p[i], gc = g[i];
        if (pc == gc) {
            ++stats.tp[gc];
        } else {
            ++stats.fp[pc];
            ++stats.fn[gc];
        }
        const bool po = pc != 0, go = gc != 0;
        if (po && go) {
            ++stats.geo_tp;
        } else if (po) {
            ++stats.geo_fp;
        } else if (go) {
            ++stats.geo_fn;
        } else {
            ++stats.geo_tn;
        }
    }
}

ConfusionStats confusion(const VoxelGrid& pred, const VoxelGrid& gt) {
    ConfusionStats s(gt.num_classes());
    accumulate(pred, gt, s);
    return s;
}

double iou(const ConfusionStats& stats) {
    const auto uni = stats.geo_tp + stats.geo_fp + stats.geo_fn;
    if (uni == 0) {
        return 1.0;
    }
    return static_cast<double>(stats.geo_tp) / static_cast<double>(uni);
}

double class_iou(const ConfusionStats& stats, int c) {
    const auto k = static_cast<std::size_t>(c);
    const auto uni = stats.tp[k] + stats.fp[k] + stats.fn[k];
    if (uni == 0) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return static_cast<double>(stats.tp[k]) / static_cast<double>(uni);
}

std::vector<double> per_class_iou(const ConfusionStats& stats) {
    std::vector<double> out;
    for (int c = 0; c < stats.num_classes; ++c) {
        out.push_back(class_iou(stats, c));
    }
    return out;
}

double miou(const ConfusionStats& stats) {
    double sum = 0.0;
    int present = 0;
    for (int c = 1; c < stats.num_classes; ++c) {
        const double v = class_iou(stats, c);
        if (!std::isnan(v)) {
            sum += v;
            ++present;
        }
    }
    return present == 0 ? 1.0 : sum / present;
}

}  // namespace flowssc::metrics
