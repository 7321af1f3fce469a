#pragma once

// Synthetic labeled test pairs with a known ground-truth warp: random
// ellipsoidal labels, per-label Gaussian intensity painting, a 0.75-voxel
// blur, and a smooth random displacement capped in normalized units. The
// moving image and its label map are the fixed pair pushed through the
// ground-truth warp (labels nearest-neighbor).

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "voxreg/rng.hpp"
#include "voxreg/sampler.hpp"
#include "voxreg/smoothing.hpp"
#include "voxreg/volume.hpp"

namespace voxreg {

struct LabelStats {
    std::vector<double> mu, sigma; // index 0 = background, unused
};

struct SynthPair {
    Volume3<double> fixed, moving;
    Volume3<double> pre_blur_fixed;
    LabelVolume labels_fixed, labels_moving;
    WarpField<double> true_warp;
    LabelStats stats;
};

inline LabelVolume rasterize_ellipsoids(Rng& rng, Dims3 dims, int k) {
    LabelVolume lv = LabelVolume::zeros(dims);
    for (int label = 1; label <= k; ++label) {
        Vec3 center, radius;
        for (int c = 0; c < 3; ++c) {
            const double n = static_cast<double>(dims[c]);
            center[c] = rng.uniform(0.22, 0.78) * (n - 1);
            radius[c] = rng.uniform(0.10, 0.24) * n;
        }
        for (std::int64_t z = 0; z < dims.nz; ++z)
            for (std::int64_t y = 0; y < dims.ny; ++y)
                for (std::int64_t x = 0; x < dims.nx; ++x) {
                    const double dx = (static_cast<double>(x) - center[0]) / radius[0];
                    const double dy = (static_cast<double>(y) - center[1]) / radius[1];
                    const double dz = (static_cast<double>(z) - center[2]) / radius[2];
                    if (dx * dx + dy * dy + dz * dz <= 1.0)
                        lv.at(x, y, z) = static_cast<std::uint16_t>(label); // later labels win
                }
    }
    return lv;
}

inline LabelStats draw_label_stats(Rng& rng, int k) {
    LabelStats s;
    s.mu.resize(static_cast<std::size_t>(k) + 1, 0.0);
    s.sigma.resize(static_cast<std::size_t>(k) + 1, 0.0);
    for (int label = 1; label <= k; ++label) {
        s.mu[static_cast<std::size_t>(label)] = rng.uniform(0.3, 1.0);
        s.sigma[static_cast<std::size_t>(label)] = rng.uniform(0.02, 0.06);
    }
    return s;
}

inline Volume3<double> paint_labels(const LabelVolume& labels, const LabelStats& stats,
                                    Rng& rng) {
    auto img = Volume3<double>::zeros(labels.dims);
    for (std::size_t i = 0; i < labels.data.size(); ++i) {
        const std::uint16_t l = labels.data[i];
        if (l == 0) continue; // background stays zero
        img.data[i] = stats.mu[l] + stats.sigma[l] * rng.normal();
    }
    return img;
}

// White noise per component, smoothed, rescaled so the RMS displacement norm
// is a fixed fraction of the cap, then norm-clipped at the cap. Scaling by
// the RMS (rather than the peak) keeps typical displacements meaningful
// instead of leaving most of the field far below the cap.
inline WarpField<double> random_smooth_warp(Rng& rng, Dims3 dims, double max_norm,
                                            double sigma_voxels, double rms_fraction = 0.7) {
    auto w = WarpField<double>::zeros(dims);
    for (auto& v : w.data) v = rng.normal();
    w = gaussian_smooth(w, sigma_voxels);
    double sq_sum = 0;
    for (std::int64_t i = 0; i < dims.voxels(); ++i) {
        double s = 0;
        for (int c = 0; c < 3; ++c) {
            const double v = w.data[static_cast<std::size_t>(3 * i + c)];
            s += v * v;
        }
        sq_sum += s;
    }
    const double rms = std::sqrt(sq_sum / static_cast<double>(dims.voxels()));
    if (rms > 0 && max_norm > 0) {
        const double scale = rms_fraction * max_norm / rms;
        for (auto& v : w.data) v *= scale;
        for (std::int64_t i = 0; i < dims.voxels(); ++i) {
            double s = 0;
            for (int c = 0; c < 3; ++c) {
                const double v = w.data[static_cast<std::size_t>(3 * i + c)];
                s += v * v;
            }
            const double norm = std::sqrt(s);
            if (norm > max_norm) {
                const double clip = max_norm / norm;
                for (int c = 0; c < 3; ++c) w.data[static_cast<std::size_t>(3 * i + c)] *= clip;
            }
        }
    } else if (max_norm == 0) {
        for (auto& v : w.data) v = 0;
    }
    return w;
}

inline SynthPair synth_pair(std::uint64_t seed, Dims3 dims, int k, double max_disp = 0.12) {
    if (dims.nx < 16 || dims.ny < 16 || dims.nz < 16)
        throw std::invalid_argument("synth_pair: dims must be >= 16 per axis");
    if (k < 1 || k > 16) throw std::invalid_argument("synth_pair: 1 <= K <= 16");
    if (!(max_disp >= 0) || max_disp > 0.15)
        throw std::invalid_argument("synth_pair: max displacement capped at 0.15");

    Rng rng(seed);
    SynthPair out;
    out.labels_fixed = rasterize_ellipsoids(rng, dims, k);
    out.stats = draw_label_stats(rng, k);
    out.pre_blur_fixed = paint_labels(out.labels_fixed, out.stats, rng);
    out.fixed = gaussian_smooth(out.pre_blur_fixed, 0.75);
    out.true_warp = random_smooth_warp(rng, dims, max_disp,
                                       static_cast<double>(dims.nx) / 8.0);
    out.moving = fused_sample(out.fixed, &out.true_warp, SamplerArgs{});
    out.labels_moving = warp_labels_nn(out.labels_fixed, out.true_warp);
    out.labels_moving.spacing = out.labels_fixed.spacing;
    return out;
}

} // namespace voxreg
