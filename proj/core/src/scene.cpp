#include "flowssc/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>

#include "byte_io.hpp"
#include "flowssc/error.hpp"
#include "flowssc/rng.hpp"

namespace flowssc::scene {

const char* label_name(int label) {
    switch (label) {
        case kEmpty: return "empty";
        case kGround: return "ground";
        case kBuilding: return "building";
        case kVehicle: return "vehicle";
        case kVegetation: return "vegetation";
        default: return "unknown";
    }
}

namespace {

int draw(Rng& rng, IntRange r) { return std::uniform_int_distribution<int>(r.lo, std::max(r.lo, r.hi))(rng); }

double draw_real(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Fills the half-open box [x0, x1) x [y0, y1) x [z0, z1), clipped to the grid.
void fill_box(VoxelGrid& g, long x0, long x1, long y0, long y1, long z0, long z1, int label) {
    const auto& d = g.dims();
    const long X = static_cast<long>(d.x), Y = static_cast<long>(d.y), Z = static_cast<long>(d.z);
    for (long x = std::max(0L, x0); x < std::min(X, x1); ++x) {
        for (long y = std::max(0L, y0); y < std::min(Y, y1); ++y) {
            for (long z = std::max(0L, z0); z < std::min(Z, z1); ++z) {
                g.set(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z), label);
            }
        }
    }
}

struct Blob {
    double cx, cy, cz, rx, ry, rz;
};

void fill_blob(VoxelGrid& g, const Blob& b, int label) {
    const auto& d = g.dims();
    for (std::size_t x = 0; x < d.x; ++x) {
        for (std::size_t y = 0; y < d.y; ++y) {
            for (std::size_t z = 1; z < d.z; ++z) {
                const double dx = (x + 0.5 - b.cx) / b.rx;
                const double dy = (y + 0.5 - b.cy) / b.ry;
                const double dz = (z + 0.5 - b.cz) / b.rz;
                if (dx * dx + dy * dy + dz * dz <= 1.0) {
                    g.set(x, y, z, label);
                }
            }
        }
    }
}

}  // namespace

VoxelGrid generate_scene(const SceneSpec& spec, std::uint64_t seed) {
    if (spec.num_classes != kNumClasses) {
        throw ConfigError("scene generator needs exactly " + std::to_string(kNumClasses) + " classes");
    }
    if (spec.dims.z < 3) {
        throw ConfigError("scene generator needs at least 3 vertical layers");
    }
    Rng rng = make_stream(seed, "scene");
    VoxelGrid g(spec.dims, spec.num_classes);
    const long X = static_cast<long>(spec.dims.x), Y = static_cast<long>(spec.dims.y);
    const long Z = static_cast<long>(spec.dims.z);
    auto pos = [&](long extent, long size) {
        return std::uniform_int_distribution<long>(-size / 2, std::max(0L, extent - size / 2 - 1))(rng);
    };

    fill_box(g, 0, X, 0, Y, 0, 1, kGround);
    const int raised = draw(rng, spec.raised_ground);
    for (int i = 0; i < raised; ++i) {
        const long sx = std::uniform_int_distribution<long>(3, std::max(3L, X / 3))(rng);
        const long sy = std::uniform_int_distribution<long>(3, std::max(3L, Y / 3))(rng);
        const long x0 = pos(X, sx), y0 = pos(Y, sy);
        fill_box(g, x0, x0 + sx, y0, y0 + sy, 1, 2, kGround);
    }

    const int buildings = draw(rng, spec.buildings);
    for (int i = 0; i < buildings; ++i) {
        const long sx = std::uniform_int_distribution<long>(3, 8)(rng);
        const long sy = std::uniform_int_distribution<long>(3, 10)(rng);
        const long h = std::uniform_int_distribution<long>(3, Z - 1)(rng);
        const long x0 = pos(X, sx), y0 = pos(Y, sy);
        fill_box(g, x0, x0 + sx, y0, y0 + sy, 1, 1 + h, kBuilding);
    }

    const int blobs = draw(rng, spec.vegetation);
    std::vector<Blob> veg;
    for (int i = 0; i < blobs; ++i) {
        Blob b{};
        b.cx = draw_real(rng, 2.0, X - 4.0);
        b.cy = draw_real(rng, 0.0, static_cast<double>(Y));
        b.rx = draw_real(rng, 1.8, 3.2);
        b.ry = draw_real(rng, 1.8, 3.5);
        b.rz = draw_real(rng, 1.2, 2.2);
        b.cz = draw_real(rng, 1.0 + 0.5 * b.rz, std::min(Z - 1.0, 1.0 + 1.5 * b.rz));
        veg.push_back(b);
        if (uniform01(rng) < spec.wall_behind_blob) {
            // Wall on the far side of the blob as seen from the x = 0 face.
            const long gap = std::uniform_int_distribution<long>(1, 2)(rng);
            const long wx0 = static_cast<long>(std::floor(b.cx + b.rx)) + gap;
            const long len = std::uniform_int_distribution<long>(8, 14)(rng);
            const long wy0 = static_cast<long>(std::floor(b.cy)) - len / 2;
            const long h = std::uniform_int_distribution<long>(4, Z - 1)(rng);
            fill_box(g, wx0, wx0 + 2, wy0, wy0 + len, 1, 1 + h, kBuilding);
        }
    }

    const int vehicles = draw(rng, spec.vehicles);
    for (int i = 0; i < vehicles; ++i) {
        const bool along_x = uniform01(rng) < 0.5;
        const long sx = along_x ? 5 : 3, sy = along_x ? 3 : 5;
        const long x0 = std::uniform_int_distribution<long>(0, X - sx)(rng);
        const long y0 = std::uniform_int_distribution<long>(0, Y - sy)(rng);
        fill_box(g, x0, x0 + sx, y0, y0 + sy, 1, 3, kVehicle);
    }

    for (const auto& b : veg) {
        fill_blob(g, b, kVegetation);
    }
    return g;
}

Point3 default_camera(const GridDims& dims) {
    return Point3{-1.0, 0.5 * static_cast<double>(dims.y), 0.5 * static_cast<double>(dims.z)};
}

bool line_of_sight(const VoxelGrid& g, const Point3& cam, std::size_t tx, std::size_t ty, std::size_t tz,
                   const Point3& point) {
    const auto& d = g.dims();
    const double origin[3] = {cam.x, cam.y, cam.z};
    const double dir[3] = {point.x - cam.x, point.y - cam.y, point.z - cam.z};
    const double extent[3] = {static_cast<double>(d.x), static_cast<double>(d.y), static_cast<double>(d.z)};
    const long target[3] = {static_cast<long>(tx), static_cast<long>(ty), static_cast<long>(tz)};

    double t_enter = 0.0;
    for (int a = 0; a < 3; ++a) {
        if (dir[a] == 0.0) {
            if (origin[a] < 0.0 || origin[a] > extent[a]) {
                return false;
            }
            continue;
        }
        const double ta = (0.0 - origin[a]) / dir[a];
        const double tb = (extent[a] - origin[a]) / dir[a];
        t_enter = std::max(t_enter, std::min(ta, tb));
    }
    long v[3];
    int step[3];
    double t_max[3], t_delta[3];
    for (int a = 0; a < 3; ++a) {
        const double p = origin[a] + dir[a] * t_enter;
        v[a] = std::clamp(static_cast<long>(std::floor(p)), 0L, static_cast<long>(extent[a]) - 1);
        if (dir[a] > 0.0) {
            step[a] = 1;
            t_max[a] = (v[a] + 1.0 - origin[a]) / dir[a];
            t_delta[a] = 1.0 / dir[a];
        } else if (dir[a] < 0.0) {
            step[a] = -1;
            t_max[a] = (v[a] - origin[a]) / dir[a];
            t_delta[a] = -1.0 / dir[a];
        } else {
            step[a] = 0;
            t_max[a] = t_delta[a] = std::numeric_limits<double>::infinity();
        }
    }
    const std::size_t max_steps = d.x + d.y + d.z + 3;
    for (std::size_t s = 0; s < max_steps; ++s) {
        if (v[0] == target[0] && v[1] == target[1] && v[2] == target[2]) {
            return true;
        }
        if (g.at(static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]), static_cast<std::size_t>(v[2])) != 0) {
            return false;
        }
        int a = 0;
        if (t_max[1] < t_max[a]) a = 1;
        if (t_max[2] < t_max[a]) a = 2;
        v[a] += step[a];
        t_max[a] += t_delta[a];
        if (v[a] < 0 || v[a] >= static_cast<long>(extent[a])) {
            return false;
        }
    }
    return false;
}

std::array<Point3, 7> sight_points(std::size_t x, std::size_t y, std::size_t z) {
    const double cx = x + 0.5, cy = y + 0.5, cz = z + 0.5, o = kSightInset;
    return {Point3{cx, cy, cz},     Point3{cx - o, cy, cz}, Point3{cx + o, cy, cz}, Point3{cx, cy - o, cz},
            Point3{cx, cy + o, cz}, Point3{cx, cy, cz - o}, Point3{cx, cy, cz + o}};
}

bool voxel_visible(const VoxelGrid& grid, const Point3& camera, std::size_t x, std::size_t y, std::size_t z) {
    for (const auto& p : sight_points(x, y, z)) {
        if (line_of_sight(grid, camera, x, y, z, p)) {
            return true;
        }
    }
    return false;
}

std::vector<bool> visibility(const VoxelGrid& grid, const Point3& camera) {
    const auto& d = grid.dims();
    std::vector<bool> visible(d.total(), false);
    for (std::size_t x = 0; x < d.x; ++x) {
        for (std::size_t y = 0; y < d.y; ++y) {
            for (std::size_t z = 0; z < d.z; ++z) {
                visible[grid.index(x, y, z)] = voxel_visible(grid, camera, x, y, z);
            }
        }
    }
    return visible;
}

VoxelGrid degrade(const VoxelGrid& gt, const DegradeSpec& spec, std::uint64_t seed) {
    auto check_rate = [](double r, const char* name) {
        if (!(r >= 0.0 && r <= 1.0)) {
            throw ConfigError(std::string(name) + " must lie in [0, 1]");
        }
    };
    check_rate(spec.occluded_drop, "occluded_drop");
    check_rate(spec.occluded_mislabel, "occluded_mislabel");
    check_rate(spec.visible_noise, "visible_noise");
    if (spec.occluded_drop + spec.occluded_mislabel > 1.0) {
        throw ConfigError("occluded_drop + occluded_mislabel must not exceed 1");
    }
    const Point3 cam = spec.use_default_camera ? default_camera(gt.dims()) : spec.camera;
    const auto visible = visibility(gt, cam);
    const int k = gt.num_classes();
    Rng rng = make_stream(seed, "degrade");
    auto relabel = [&](int label) {
        if (k <= 2) {
            return label;
        }
        // Uniform over the other non-empty classes.
        int other = 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(k - 2)));
        return other >= label ? other + 1 : other;
    };

    VoxelGrid out = gt;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const int label = gt.at(i);
        // One draw per voxel keeps the stream aligned regardless of rates.
        const double u = uniform01(rng);
        if (label == kEmpty) {
            continue;
        }
        if (visible[i]) {
            if (u < spec.visible_noise) {
                out.set(i, relabel(label));
            }
        } else if (u < spec.occluded_drop) {
            out.set(i, kEmpty);
        } else if (u < spec.occluded_drop + spec.occluded_mislabel) {
            out.set(i, relabel(label));
        }
    }
    return out;
}

VoxelGrid dihedral(const VoxelGrid& grid, int element) {
    const auto& d = grid.dims();
    if (d.x != d.y) {
        throw DataError("dihedral augmentation needs a square footprint, got " + std::to_string(d.x) + "x" +
                        std::to_string(d.y));
    }
    if (element < 0 || element >= 8) {
        throw DataError("dihedral element must be in [0, 8)");
    }
    const int r = element / 2;
    const bool flip = element % 2 == 1;
    const std::size_t n = d.x;
    VoxelGrid out(d, grid.num_classes());
    for (std::size_t x = 0; x < n; ++x) {
        for (std::size_t y = 0; y < n; ++y) {
            std::size_t px = x, py = flip ? n - 1 - y : y;
            for (int q = 0; q < r; ++q) {
                const std::size_t nx = n - 1 - py;
                py = px;
                px = nx;
            }
            for (std::size_t z = 0; z < d.z; ++z) {
                out.set(px, py, z, grid.at(x, y, z));
            }
        }
    }
    return out;
}

std::array<VoxelGrid, 8> augment_8x(const VoxelGrid& grid) {
    std::array<VoxelGrid, 8> out;
    for (int e = 0; e < 8; ++e) {
        out[static_cast<std::size_t>(e)] = dihedral(grid, e);
    }
    return out;
}

int dihedral_compose(int a, int b) {
    // Elements are R^r F^f; F R = R^-1 F.
    const int ra = a / 2, fa = a % 2, rb = b / 2, fb = b % 2;
    const int r = ((rb + (fb ? -ra : ra)) % 4 + 4) % 4;
    return 2 * r + (fa ^ fb);
}

std::vector<Record> generate_records(const SceneSpec& spec, const DegradeSpec& degrade_spec, std::size_t n,
                                     std::uint64_t seed) {
    std::vector<Record> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        VoxelGrid gt = generate_scene(spec, stream_seed(seed, "scene.gt", i));
        VoxelGrid coarse = degrade(gt, degrade_spec, stream_seed(seed, "scene.degrade", i));
        out.push_back(Record{std::move(gt), std::move(coarse)});
    }
    return out;
}

std::size_t dataset_file_size(const GridDims& dims, std::size_t records) {
    return kDatasetHeaderBytes + records * 2 * dims.total();
}


std::vector<std::uint8_t> encode_dataset(const std::vector<Record>& records) {
    if (records.empty()) {
        throw DataError("cannot write an empty dataset");
    }
    const GridDims dims = records.front().gt.dims();
    const int k = records.front().gt.num_classes();
    if (dims.x > 0xffff || dims.y > 0xffff || dims.z > 0xffff) {
        throw DataError("grid dimensions exceed the 16-bit header fields");
    }
    std::vector<std::uint8_t> out;
    out.reserve(dataset_file_size(dims, records.size()));
    for (char c : std::string_view("VOXD")) {
        out.push_back(static_cast<std::uint8_t>(c));
    }
    detail::put_le<std::uint16_t>(out, kDatasetVersion);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(k));
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(dims.x));
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(dims.y));
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(dims.z));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
    for (std::size_t r = 0; r < records.size(); ++r) {
        for (const VoxelGrid* g : {&records[r].gt, &records[r].coarse}) {
            if (g->dims() != dims || g->num_classes() != k) {
                throw DataError("record " + std::to_string(r) + " does not match the dataset grid layout");
            }
            out.insert(out.end(), g->labels().begin(), g->labels().end());
        }
    }
    return out;
}

std::vector<Record> decode_dataset(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kDatasetHeaderBytes) {
        throw ParseError("dataset header truncated", bytes.size());
    }
    if (!std::equal(bytes.begin(), bytes.begin() + 4, "VOXD")) {
        throw ParseError("bad dataset magic", 0);
    }
    const std::uint16_t version = detail::get_le<std::uint16_t>(bytes, 4);
    if (version != kDatasetVersion) {
        throw ParseError("unsupported dataset version " + std::to_string(version), 4);
    }
    const int k = detail::get_le<std::uint16_t>(bytes, 6);
    if (k < 1 || k > 256) {
        throw ParseError("invalid class count " + std::to_string(k), 6);
    }
    const GridDims dims{detail::get_le<std::uint16_t>(bytes, 8), detail::get_le<std::uint16_t>(bytes, 10),
                        detail::get_le<std::uint16_t>(bytes, 12)};
    if (dims.total() == 0) {
        throw ParseError("zero grid dimension", 8);
    }
    const std::size_t count = detail::get_le<std::uint32_t>(bytes, 14);
    const std::size_t grid_bytes = dims.total();
    std::vector<Record> records;
    records.reserve(count);
    std::size_t off = kDatasetHeaderBytes;
    for (std::size_t r = 0; r < count; ++r) {
        if (bytes.size() - off < 2 * grid_bytes) {
            throw ParseError("dataset truncated in record " + std::to_string(r) + " of " + std::to_string(count),
                             bytes.size());
        }
        VoxelGrid grids[2];
        for (int which = 0; which < 2; ++which) {
            for (std::size_t i = 0; i < grid_bytes; ++i) {
                if (bytes[off + i] >= k) {
                    throw ParseError("label out of range in record " + std::to_string(r), off + i);
                }
            }
            grids[which] = VoxelGrid(dims, k,
                                     std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                                                               bytes.begin() + static_cast<std::ptrdiff_t>(off + grid_bytes)));
            off += grid_bytes;
        }
        records.push_back(Record{std::move(grids[0]), std::move(grids[1])});
    }
    if (off != bytes.size()) {
        throw ParseError("trailing bytes after " + std::to_string(count) + " records", off);
    }
    return records;
}

void write_dataset(const std::filesystem::path& path, const std::vector<Record>& records) {
    const auto bytes = encode_dataset(records);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open " + path.string() + " for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("failed writing " + path.string());
    }
}

std::vector<Record> read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open dataset " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_dataset(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

Split split_dataset(std::size_t n, std::array<double, 3> ratios, std::uint64_t seed) {
    double total = 0.0;
    for (double r : ratios) {
        if (r < 0.0) {
            throw ConfigError("split ratios must be non-negative");
        }
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("split ratios must sum to 1");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_stream(seed, "split");
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[uniform_index(rng, i)]);
    }
    const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n))));
    const auto n_val =
        std::min(n - n_train, static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n))));
    Split s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return s;
}

}  // namespace flowssc::scene
