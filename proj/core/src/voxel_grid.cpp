#include "flowssc/voxel_grid.hpp"

#include <string>

#include "flowssc/error.hpp"

namespace flowssc {

VoxelGrid::VoxelGrid(GridDims dims, int num_classes)
    : VoxelGrid(dims, num_classes, std::vector<std::uint8_t>(dims.total(), 0)) {}

VoxelGrid::VoxelGrid(GridDims dims, int num_classes, std::vector<std::uint8_t> labels)
    : dims_(dims), num_classes_(num_classes), labels_(std::move(labels)) {
    if (dims.x == 0 || dims.y == 0 || dims.z == 0) {
        throw DataError("voxel grid dimensions must be positive");
    }
    if (num_classes < 1 || num_classes > 256) {
        throw DataError("class count must be in [1, 256], got " + std::to_string(num_classes));
    }
    if (labels_.size() != dims.total()) {
        throw DataError("label buffer has " + std::to_string(labels_.size()) + " entries, expected " +
                        std::to_string(dims.total()));
    }
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        if (labels_[i] >= num_classes) {
            throw DataError("label " + std::to_string(labels_[i]) + " at voxel " + std::to_string(i) +
                            " exceeds class count " + std::to_string(num_classes));
        }
    }
}

void VoxelGrid::set(std::size_t x, std::size_t y, std::size_t z, int label) { set(index(x, y, z), label); }

void VoxelGrid::set(std::size_t flat, int label) {
    if (label < 0 || label >= num_classes_) {
        throw DataError("label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes_) + ")");
    }
    labels_.at(flat) = static_cast<std::uint8_t>(label);
}

std::size_t VoxelGrid::occupied_count() const {
    std::size_t n = 0;
    for (auto v : labels_) {
        n += v != 0;
    }
    return n;
}

std::vector<std::size_t> VoxelGrid::class_histogram() const {
    std::vector<std::size_t> hist(static_cast<std::size_t>(num_classes_), 0);
    for (auto v : labels_) {
        ++hist[v];
    }
    return hist;
}

}  // namespace flowssc
