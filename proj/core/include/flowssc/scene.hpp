#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowssc/voxel_grid.hpp"

namespace flowssc::scene {

enum Label : std::uint8_t {
    kEmpty = 0,
    kGround = 1,
    kBuilding = 2,
    kVehicle = 3,
    kVegetation = 4,
};
inline constexpr int kNumClasses = 5;
const char* label_name(int label);

struct IntRange {
    int lo = 0;
    int hi = 0;  // inclusive
};

struct SceneSpec {
    GridDims dims{32, 32, 8};
    int num_classes = kNumClasses;
    IntRange buildings{1, 2};
    IntRange vehicles{2, 5};
    IntRange vegetation{1, 4};
    IntRange raised_ground{0, 2};
    // Probability that a vegetation blob gets a building wall placed behind it
    // (farther from the virtual camera).
    double wall_behind_blob = 0.7;
};

// Deterministic per seed. z = 0 is always ground; objects stand on it.
VoxelGrid generate_scene(const SceneSpec& spec, std::uint64_t seed);

struct Point3 {
    double x = 0, y = 0, z = 0;
};

// Virtual camera at mid-height just outside the x = 0 face.
Point3 default_camera(const GridDims& dims);

// 6-connected DDA from the camera to `point` (which must lie inside voxel
// (x, y, z)). True when every voxel crossed before that one is empty.
bool line_of_sight(const VoxelGrid& grid, const Point3& camera, std::size_t x, std::size_t y, std::size_t z,
                   const Point3& point);

// Probe points of a voxel: its center and six points inset from the face centers.
inline constexpr double kSightInset = 0.45;
std::array<Point3, 7> sight_points(std::size_t x, std::size_t y, std::size_t z);

// A voxel is visible when at least one of its probe points has line of sight.
bool voxel_visible(const VoxelGrid& grid, const Point3& camera, std::size_t x, std::size_t y, std::size_t z);
std::vector<bool> visibility(const VoxelGrid& grid, const Point3& camera);

struct DegradeSpec {
    bool use_default_camera = true;
    Point3 camera{};
    // Occluded non-empty voxels: emptied with occluded_drop, otherwise relabeled
    // to another non-empty class with occluded_mislabel.
    double occluded_drop = 0.4;
    double occluded_mislabel = 0.1;
    // Visible non-empty voxels: relabeled to another non-empty class.
    double visible_noise = 0.02;
};

// Stand-in for a feed-forward coarse predictor: occlusion-driven degradation of gt.
VoxelGrid degrade(const VoxelGrid& gt, const DegradeSpec& spec, std::uint64_t seed);

// The 8 dihedral symmetries of the square x/y footprint: element = 2 * r + f
// applies a horizontal flip (y -> Y-1-y) when f = 1, then r quarter turns
// about the z axis.
VoxelGrid dihedral(const VoxelGrid& grid, int element);
std::array<VoxelGrid, 8> augment_8x(const VoxelGrid& grid);
// Index of the element equal to applying `b` after `a`.
int dihedral_compose(int a, int b);

struct Record {
    VoxelGrid gt;
    VoxelGrid coarse;
    bool operator==(const Record&) const = default;
};

// n (gt, coarse) pairs; scene i draws from the (seed, "scene.gt", i) and
// (seed, "scene.degrade", i) streams, so prefixes of larger sets agree.
std::vector<Record> generate_records(const SceneSpec& spec, const DegradeSpec& degrade_spec, std::size_t n,
                                     std::uint64_t seed);

inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 18;
std::size_t dataset_file_size(const GridDims& dims, std::size_t records);

std::vector<std::uint8_t> encode_dataset(const std::vector<Record>& records);
// Throws ParseError (with byte offset) on bad magic, version or truncation.
std::vector<Record> decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const std::filesystem::path& path, const std::vector<Record>& records);
std::vector<Record> read_dataset(const std::filesystem::path& path);

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

// Deterministic disjoint cover of [0, n). Ratios must sum to 1.
Split split_dataset(std::size_t n, std::array<double, 3> ratios, std::uint64_t seed);

}  // namespace flowssc::scene
