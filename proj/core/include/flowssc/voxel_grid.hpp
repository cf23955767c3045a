#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace flowssc {

struct GridDims {
    std::size_t x = 32;
    std::size_t y = 32;
    std::size_t z = 8;

    std::size_t total() const { return x * y * z; }
    bool operator==(const GridDims&) const = default;
};

// Dense semantic label grid. Class 0 is empty. Storage is x-major
// ((x * Y + y) * Z + z), matching channels-last [X x Y x Z x C] tensors.
class VoxelGrid {
public:
    VoxelGrid() = default;
    VoxelGrid(GridDims dims, int num_classes);
    VoxelGrid(GridDims dims, int num_classes, std::vector<std::uint8_t> labels);

    const GridDims& dims() const { return dims_; }
    int num_classes() const { return num_classes_; }
    std::size_t size() const { return labels_.size(); }

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return (x * dims_.y + y) * dims_.z + z; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t z) const { return labels_[index(x, y, z)]; }
    std::uint8_t at(std::size_t flat) const { return labels_[flat]; }
    // Throws DataError when label >= num_classes.
    void set(std::size_t x, std::size_t y, std::size_t z, int label);
    void set(std::size_t flat, int label);

    std::span<const std::uint8_t> labels() const { return labels_; }
    std::size_t occupied_count() const;
    std::vector<std::size_t> class_histogram() const;

    bool operator==(const VoxelGrid&) const = default;

private:
    GridDims dims_{};
    int num_classes_ = 0;
    std::vector<std::uint8_t> labels_;
};

}  // namespace flowssc
