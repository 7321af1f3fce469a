#pragma once

// Separable 1-D convolutions along volume axes and Gaussian smoothing.
//
// Two edge modes:
//   zero_pad:    out-of-bounds taps contribute zero (LNCC window semantics).
//   renormalize: clipped windows are divided by the sum of their in-bounds
//                 taps, so constants are preserved everywhere.
//
// The per-axis routine takes the block's position on the global axis
// (lo_global, n_global). A halo-padded shard passes its padded origin, which
// makes the sharded convolution bit-identical to the unsharded one: every
// kept voxel sees the same tap sequence and the same renormalization divisor.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "voxreg/volume.hpp"

namespace voxreg {

// Truncated at radius ceil(3*sigma), normalized to sum 1.
inline std::vector<double> gaussian_taps(double sigma) {
    if (!std::isfinite(sigma) || sigma < 0)
        throw std::invalid_argument("gaussian_taps: sigma must be finite and >= 0");
    if (sigma == 0) return {1.0};
    const auto radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0;
    for (std::int64_t k = -radius; k <= radius; ++k) {
        double w = std::exp(-0.5 * (static_cast<double>(k) / sigma) * (static_cast<double>(k) / sigma));
        taps[static_cast<std::size_t>(k + radius)] = w;
        sum += w;
    }
    for (auto& w : taps) w /= sum;
    return taps;
}

// Uniform averaging window of odd width, normalized to sum 1.
inline std::vector<double> box_taps(int window) {
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("box_taps: window must be odd and >= 1");
    return std::vector<double>(static_cast<std::size_t>(window), 1.0 / window);
}

enum class EdgeMode { zero_pad, renormalize };

// 1-D convolution along `axis` of a channel-interleaved block.
template <typename T>
void convolve_axis(const T* in, T* out, Dims3 dims, int channels, int axis,
                   const std::vector<double>& taps, EdgeMode mode,
                   std::int64_t lo_global, std::int64_t n_global) {
    const std::int64_t r = static_cast<std::int64_t>(taps.size() / 2);
    const std::int64_t n_axis = dims[axis];
    const std::int64_t sx = channels;
    const std::int64_t sy = dims.nx * channels;
    const std::int64_t sz = dims.nx * dims.ny * channels;
    const std::int64_t stride = axis == 0 ? sx : axis == 1 ? sy : sz;

    double full_sum = 0;
    for (double w : taps) full_sum += w;

    for (std::int64_t z = 0; z < dims.nz; ++z)
        for (std::int64_t y = 0; y < dims.ny; ++y)
            for (std::int64_t x = 0; x < dims.nx; ++x) {
                const std::int64_t p = axis == 0 ? x : axis == 1 ? y : z;
                const std::int64_t g = lo_global + p;
                const bool full_window = (g - r >= 0) && (g + r < n_global) &&
                                         (p - r >= 0) && (p + r < n_axis);
                const std::int64_t base = z * sz + y * sy + x * sx;
                for (int c = 0; c < channels; ++c) {
                    double acc = 0;
                    if (full_window) {
                        for (std::int64_t k = -r; k <= r; ++k)
                            acc += taps[static_cast<std::size_t>(k + r)] *
                                   static_cast<double>(in[base + c + k * stride]);
                        if (mode == EdgeMode::renormalize) acc /= full_sum;
                    } else {
                        double wsum = 0;
                        for (std::int64_t k = -r; k <= r; ++k) {
                            if (g + k < 0 || g + k >= n_global) continue;
                            if (p + k < 0 || p + k >= n_axis) continue;
                            const double w = taps[static_cast<std::size_t>(k + r)];
                            acc += w * static_cast<double>(in[base + c + k * stride]);
                            wsum += w;
                        }
                        if (mode == EdgeMode::renormalize && wsum > 0) acc /= wsum;
                    }
                    out[base + c] = static_cast<T>(acc);
                }
            }
}

// In-place separable convolution over all three axes using one scratch buffer.
template <typename T>
void separable_convolve(tracked_vector<T>& data, Dims3 dims, int channels,
                        const std::vector<double>& taps, EdgeMode mode) {
    tracked_vector<T> scratch(data.size());
    convolve_axis(data.data(), scratch.data(), dims, channels, 0, taps, mode, 0, dims.nx);
    convolve_axis(scratch.data(), data.data(), dims, channels, 1, taps, mode, 0, dims.ny);
    convolve_axis(data.data(), scratch.data(), dims, channels, 2, taps, mode, 0, dims.nz);
    data = std::move(scratch);
}

template <typename T>
Volume3<T> gaussian_smooth(const Volume3<T>& v, double sigma) {
    if (!std::isfinite(sigma) || sigma < 0)
        throw std::invalid_argument("gaussian_smooth: sigma must be finite and >= 0");
    Volume3<T> out = v;
    if (sigma == 0) return out;
    separable_convolve(out.data, out.dims, 1, gaussian_taps(sigma), EdgeMode::renormalize);
    return out;
}

template <typename T>
WarpField<T> gaussian_smooth(const WarpField<T>& w, double sigma) {
    if (!std::isfinite(sigma) || sigma < 0)
        throw std::invalid_argument("gaussian_smooth: sigma must be finite and >= 0");
    WarpField<T> out = w;
    if (sigma == 0) return out;
    separable_convolve(out.data, out.dims, 3, gaussian_taps(sigma), EdgeMode::renormalize);
    return out;
}

} // namespace voxreg
