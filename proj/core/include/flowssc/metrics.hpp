#pragma once

#include <cstdint>
#include <vector>

#include "flowssc/voxel_grid.hpp"

namespace flowssc::metrics {

// Per-class and geometric (occupied vs empty) confusion counts. Mergeable by
// addition, so accumulation order never matters.
struct ConfusionStats {
    int num_classes = 0;
    std::vector<std::uint64_t> tp, fp, fn;
    std::uint64_t geo_tp = 0, geo_fp = 0, geo_fn = 0, geo_tn = 0;

    ConfusionStats() = default;
    explicit ConfusionStats(int k);

    std::uint64_t total() const { return geo_tp + geo_fp + geo_fn + geo_tn; }
    ConfusionStats& operator+=(const ConfusionStats& other);
    bool operator==(const ConfusionStats&) const = default;
};

// Throws DataError on dims or class-count mismatch.
void accumulate(const VoxelGrid& pred, const VoxelGrid& gt, ConfusionStats& stats);
ConfusionStats confusion(const VoxelGrid& pred, const VoxelGrid& gt);

// Geometric IoU over occupied voxels; 1 when both sides are entirely empty.
double iou(const ConfusionStats& stats);
// IoU of class c, or NaN when c is absent from both pred and gt.
double class_iou(const ConfusionStats& stats, int c);
std::vector<double> per_class_iou(const ConfusionStats& stats);
// Mean IoU over non-empty classes (c >= 1) present in gt or pred. Classes
// absent from both are excluded; 1 when no non-empty class is present at all.
double miou(const ConfusionStats& stats);

}  // namespace flowssc::metrics
