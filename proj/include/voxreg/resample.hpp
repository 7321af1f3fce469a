#pragma once

// Trilinear resampling across resolution scales (align-corners), with a
// half-band Gaussian anti-alias filter before downsampling.

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "voxreg/smoothing.hpp"
#include "voxreg/volume.hpp"

namespace voxreg {

namespace detail {

struct AxisSample {
    std::int64_t i0;
    double frac;
};

// Fractional indices this close to a voxel face resolve onto the face, so the
// floor-based cell choice (and with it the one-sided derivative) does not flip
// between algebraically equivalent coordinate chains that round differently
// (e.g. the sharded rescale path versus the unsharded one).
inline constexpr double kFaceSnap = 1e-9;

// Floor-based cell assignment, uniformly: a coordinate on a face (including
// the upper lattice boundary, where the face voxel carries weight one) always
// uses the cell to its right, so the one-sided derivative choice of a shard's
// partial interpolant sums to the unsharded choice across a shard split.
inline AxisSample cell_assign(double f, std::int64_t n) {
    (void)n;
    double fl = std::floor(f);
    double a = f - fl;
    if (a < kFaceSnap) {
        a = 0.0;
    } else if (1.0 - a < kFaceSnap) {
        fl += 1.0;
        a = 0.0;
    }
    return {static_cast<std::int64_t>(fl), a};
}

} // namespace detail

template <typename T>
Volume3<T> resample_scale(const Volume3<T>& v, double factor) {
    if (!std::isfinite(factor) || factor <= 0)
        throw std::invalid_argument("resample_scale: factor must be finite and > 0");
    if (factor == 1.0) return v;

    Dims3 nd{static_cast<std::int64_t>(std::ceil(static_cast<double>(v.dims.nx) * factor)),
             static_cast<std::int64_t>(std::ceil(static_cast<double>(v.dims.ny) * factor)),
             static_cast<std::int64_t>(std::ceil(static_cast<double>(v.dims.nz) * factor))};
    if (nd.nx < 2 || nd.ny < 2 || nd.nz < 2)
        throw std::invalid_argument("resample_scale: resulting dim < 2");

    const Volume3<T>* src = &v;
    Volume3<T> smoothed;
    if (factor < 1.0) {
        smoothed = gaussian_smooth(v, 0.5 / factor);
        src = &smoothed;
    }

    Volume3<T> out = Volume3<T>::zeros(nd);
    for (int c = 0; c < 3; ++c) {
        // Physical extent between first and last voxel centers is preserved.
        const double ratio = static_cast<double>(v.dims[c] - 1) / static_cast<double>(nd[c] - 1);
        out.spacing[c] = v.dims[c] > 1 ? v.spacing[c] * ratio : v.spacing[c];
    }
    out.origin = v.origin;

    const Dims3 od = src->dims;
    for (std::int64_t z = 0; z < nd.nz; ++z) {
        const double fz = static_cast<double>(z) * static_cast<double>(od.nz - 1) / static_cast<double>(nd.nz - 1);
        const auto sz = detail::cell_assign(fz, od.nz);
        for (std::int64_t y = 0; y < nd.ny; ++y) {
            const double fy = static_cast<double>(y) * static_cast<double>(od.ny - 1) / static_cast<double>(nd.ny - 1);
            const auto sy = detail::cell_assign(fy, od.ny);
            for (std::int64_t x = 0; x < nd.nx; ++x) {
                const double fx = static_cast<double>(x) * static_cast<double>(od.nx - 1) / static_cast<double>(nd.nx - 1);
                const auto sx = detail::cell_assign(fx, od.nx);
                double acc = 0;
                for (int bz = 0; bz < 2; ++bz)
                    for (int by = 0; by < 2; ++by)
                        for (int bx = 0; bx < 2; ++bx) {
                            const double w = (bx ? sx.frac : 1 - sx.frac) *
                                             (by ? sy.frac : 1 - sy.frac) *
                                             (bz ? sz.frac : 1 - sz.frac);
                            // the upper corner can sit one past the lattice
                            // end with weight zero; clamp the index
                            const std::int64_t ix = std::min(sx.i0 + bx, od.nx - 1);
                            const std::int64_t iy = std::min(sy.i0 + by, od.ny - 1);
                            const std::int64_t iz = std::min(sz.i0 + bz, od.nz - 1);
                            acc += w * static_cast<double>(src->at(ix, iy, iz));
                        }
                out.at(x, y, z) = static_cast<T>(acc);
            }
        }
    }
    return out;
}

// Trilinear upsampling of a warp field onto a new lattice. Displacements are
// stored in normalized units, so values carry over unchanged across scales.
template <typename T>
WarpField<T> resample_warp(const WarpField<T>& w, Dims3 nd) {
    if (!nd.positive()) throw std::invalid_argument("resample_warp: dims must be positive");
    WarpField<T> out = WarpField<T>::zeros(nd);
    const Dims3 od = w.dims;
    for (std::int64_t z = 0; z < nd.nz; ++z) {
        const double fz = nd.nz > 1 ? static_cast<double>(z) * static_cast<double>(od.nz - 1) /
                                          static_cast<double>(nd.nz - 1)
                                    : 0.0;
        const auto sz = detail::cell_assign(fz, od.nz);
        for (std::int64_t y = 0; y < nd.ny; ++y) {
            const double fy = nd.ny > 1 ? static_cast<double>(y) * static_cast<double>(od.ny - 1) /
                                              static_cast<double>(nd.ny - 1)
                                        : 0.0;
            const auto sy = detail::cell_assign(fy, od.ny);
            for (std::int64_t x = 0; x < nd.nx; ++x) {
                const double fx = nd.nx > 1 ? static_cast<double>(x) * static_cast<double>(od.nx - 1) /
                                                  static_cast<double>(nd.nx - 1)
                                            : 0.0;
                const auto sx = detail::cell_assign(fx, od.nx);
                for (int c = 0; c < 3; ++c) {
                    double acc = 0;
                    for (int bz = 0; bz < 2; ++bz)
                        for (int by = 0; by < 2; ++by)
                            for (int bx = 0; bx < 2; ++bx) {
                                const double wgt = (bx ? sx.frac : 1 - sx.frac) *
                                                   (by ? sy.frac : 1 - sy.frac) *
                                                   (bz ? sz.frac : 1 - sz.frac);
                                const std::int64_t ix = std::min(sx.i0 + bx, od.nx - 1);
                                const std::int64_t iy = std::min(sy.i0 + by, od.ny - 1);
                                const std::int64_t iz = std::min(sz.i0 + bz, od.nz - 1);
                                acc += wgt * static_cast<double>(w.at(ix, iy, iz, c));
                            }
                    out.at(x, y, z, c) = static_cast<T>(acc);
                }
            }
        }
    }
    return out;
}

} // namespace voxreg
