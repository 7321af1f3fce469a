#pragma once

// Dense 3-D containers. Data is stored x-fastest (index = (z*ny + y)*nx + x),
// matching NIfTI payload order; the shard axis used by the fabric is z, so a
// shard is a contiguous slab. Warp fields interleave the three displacement
// components per voxel. All displacements and affine parameters live in
// normalized coordinates (voxel centers span [-1,1] per axis, align-corners).

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "voxreg/geometry.hpp"
#include "voxreg/memory.hpp"

namespace voxreg {

template <typename T = double>
struct Volume3 {
    Dims3 dims;
    Vec3 spacing{1, 1, 1};
    Vec3 origin{0, 0, 0};
    tracked_vector<T> data;

    Volume3() = default;

    static Volume3 zeros(Dims3 d) {
        if (!d.positive()) throw std::invalid_argument("Volume3: dims must be positive");
        Volume3 v;
        v.dims = d;
        v.data.assign(static_cast<std::size_t>(d.voxels()), T(0));
        return v;
    }

    static Volume3 constant(Dims3 d, T value) {
        Volume3 v = zeros(d);
        for (auto& x : v.data) x = value;
        return v;
    }

    std::int64_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return (z * dims.ny + y) * dims.nx + x;
    }
    T& at(std::int64_t x, std::int64_t y, std::int64_t z) {
        return data[static_cast<std::size_t>(index(x, y, z))];
    }
    T at(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return data[static_cast<std::size_t>(index(x, y, z))];
    }

    bool same_lattice(const Volume3& o) const { return dims == o.dims; }
};

template <typename T = double>
struct WarpField {
    Dims3 dims;
    tracked_vector<T> data; // 3 components per voxel, interleaved

    WarpField() = default;

    static WarpField zeros(Dims3 d) {
        if (!d.positive()) throw std::invalid_argument("WarpField: dims must be positive");
        WarpField w;
        w.dims = d;
        w.data.assign(static_cast<std::size_t>(3 * d.voxels()), T(0));
        return w;
    }

    std::int64_t index(std::int64_t x, std::int64_t y, std::int64_t z, int c) const {
        return ((z * dims.ny + y) * dims.nx + x) * 3 + c;
    }
    T& at(std::int64_t x, std::int64_t y, std::int64_t z, int c) {
        return data[static_cast<std::size_t>(index(x, y, z, c))];
    }
    T at(std::int64_t x, std::int64_t y, std::int64_t z, int c) const {
        return data[static_cast<std::size_t>(index(x, y, z, c))];
    }

    bool finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

struct LabelVolume {
    Dims3 dims;
    Vec3 spacing{1, 1, 1};
    tracked_vector<std::uint16_t> data; // 0 = background

    static LabelVolume zeros(Dims3 d) {
        if (!d.positive()) throw std::invalid_argument("LabelVolume: dims must be positive");
        LabelVolume v;
        v.dims = d;
        v.data.assign(static_cast<std::size_t>(d.voxels()), 0);
        return v;
    }

    std::int64_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return (z * dims.ny + y) * dims.nx + x;
    }
    std::uint16_t& at(std::int64_t x, std::int64_t y, std::int64_t z) {
        return data[static_cast<std::size_t>(index(x, y, z))];
    }
    std::uint16_t at(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return data[static_cast<std::size_t>(index(x, y, z))];
    }
};

} // namespace voxreg
