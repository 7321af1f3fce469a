#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace voxreg {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
    return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 operator-(const Vec3& a, const Vec3& b) {
    return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 operator*(double s, const Vec3& v) {
    return {s * v[0], s * v[1], s * v[2]};
}

// Row-major 3x3 matrix.
struct Mat3 {
    std::array<double, 9> m{};

    static Mat3 identity() {
        Mat3 r;
        r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return r;
    }
    static Mat3 diagonal(const Vec3& d) {
        Mat3 r;
        r.m = {d[0], 0, 0, 0, d[1], 0, 0, 0, d[2]};
        return r;
    }

    double& operator()(int r, int c) { return m[static_cast<std::size_t>(r) * 3 + c]; }
    double operator()(int r, int c) const { return m[static_cast<std::size_t>(r) * 3 + c]; }

    Vec3 apply(const Vec3& v) const {
        return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
                m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
                m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
    }

    Mat3 mul(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }

    bool finite() const {
        for (double v : m)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Affine transform in normalized coordinates: x -> matrix*x + translation.
struct AffineMap {
    Mat3 matrix = Mat3::identity();
    Vec3 translation{0, 0, 0};

    static AffineMap identity() { return AffineMap{}; }

    Vec3 apply(const Vec3& x) const { return matrix.apply(x) + translation; }
};

// Normalized coordinates of the first and last voxel centers of a lattice.
// The full (unsharded) domain is [-1,1] per axis, align-corners: the first
// voxel center sits exactly at -1 and the last at +1.
struct DomainBounds {
    Vec3 x_min{-1, -1, -1};
    Vec3 x_max{1, 1, 1};

    static DomainBounds full() { return DomainBounds{}; }

    bool valid() const {
        for (int c = 0; c < 3; ++c)
            if (!(x_min[c] < x_max[c])) return false;
        return true;
    }
};

struct Dims3 {
    std::int64_t nx = 0, ny = 0, nz = 0;

    std::int64_t voxels() const { return nx * ny * nz; }
    std::int64_t operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
    bool operator==(const Dims3&) const = default;
    bool positive() const { return nx > 0 && ny > 0 && nz > 0; }
};

// Coordinate of voxel i on a lattice of n centers spanning [lo, hi].
// Single formula used everywhere so sharded and unsharded paths agree.
inline double lattice_coord(double lo, double hi, std::int64_t i, std::int64_t n) {
    if (n <= 1) return lo;
    return lo + (hi - lo) * (static_cast<double>(i) / static_cast<double>(n - 1));
}

// Coordinate of voxel i on the global normalized axis of n centers.
inline double axis_coord(std::int64_t i, std::int64_t n) {
    return lattice_coord(-1.0, 1.0, i, n);
}

} // namespace voxreg
