#pragma once

// Label-overlap and surface-distance metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "voxreg/volume.hpp"

namespace voxreg {

struct DiceResult {
    std::map<std::uint16_t, double> per_label;
    double mean = 0;
};

namespace detail {

struct LabelCounts {
    std::int64_t a = 0, b = 0, both = 0;
};

inline std::map<std::uint16_t, LabelCounts> overlap_counts(const LabelVolume& a,
                                                           const LabelVolume& b) {
    if (!(a.dims == b.dims)) throw std::invalid_argument("metrics: lattices differ");
    std::map<std::uint16_t, LabelCounts> counts;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const std::uint16_t la = a.data[i], lb = b.data[i];
        if (la != 0) counts[la].a++;
        if (lb != 0) counts[lb].b++;
        if (la != 0 && la == lb) counts[la].both++;
    }
    return counts;
}

} // namespace detail

// Per-label 2|A∩B| / (|A|+|B|), averaged over labels present in either map.
inline DiceResult dice(const LabelVolume& a, const LabelVolume& b) {
    DiceResult r;
    const auto counts = detail::overlap_counts(a, b);
    double sum = 0;
    for (const auto& [label, c] : counts) {
        const double d = c.a + c.b > 0
                             ? 2.0 * static_cast<double>(c.both) / static_cast<double>(c.a + c.b)
                             : 0.0;
        r.per_label[label] = d;
        sum += d;
    }
    r.mean = counts.empty() ? 0.0 : sum / static_cast<double>(counts.size());
    return r;
}

enum class InvDiceWeighting {
    fixed_volume, // weights 1 / |label volume in the first map|
    union_volume  // weights 1 / |label volume in either map| (swap-symmetric)
};

inline double inv_dice(const LabelVolume& a, const LabelVolume& b,
                       InvDiceWeighting weighting = InvDiceWeighting::fixed_volume) {
    const auto counts = detail::overlap_counts(a, b);
    double num = 0, den = 0;
    for (const auto& [label, c] : counts) {
        const std::int64_t vol =
            weighting == InvDiceWeighting::fixed_volume ? c.a : c.a + c.b - c.both;
        if (vol <= 0) continue;
        const double w = 1.0 / static_cast<double>(vol);
        const double d = c.a + c.b > 0
                             ? 2.0 * static_cast<double>(c.both) / static_cast<double>(c.a + c.b)
                             : 0.0;
        num += w * d;
        den += w;
    }
    if (den == 0) throw std::invalid_argument("inv_dice: no weighted labels");
    return num / den;
}

namespace detail {

struct SurfaceVoxel {
    std::int64_t x, y, z;
};

// Surface: voxels of the label with a 6-neighbor of a different label
// (outside the volume counts as background).
inline std::vector<SurfaceVoxel> label_surface(const LabelVolume& v, std::uint16_t label) {
    std::vector<SurfaceVoxel> surf;
    static constexpr int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                      {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (std::int64_t z = 0; z < v.dims.nz; ++z)
        for (std::int64_t y = 0; y < v.dims.ny; ++y)
            for (std::int64_t x = 0; x < v.dims.nx; ++x) {
                if (v.at(x, y, z) != label) continue;
                bool boundary = false;
                for (const auto& o : off) {
                    const std::int64_t xx = x + o[0], yy = y + o[1], zz = z + o[2];
                    if (xx < 0 || xx >= v.dims.nx || yy < 0 || yy >= v.dims.ny || zz < 0 ||
                        zz >= v.dims.nz || v.at(xx, yy, zz) != label) {
                        boundary = true;
                        break;
                    }
                }
                if (boundary) surf.push_back({x, y, z});
            }
    return surf;
}

// Mean of the smallest k = floor(0.9 N) distances (at least one) from each
// voxel of `from` to the nearest voxel of `to`, in physical units.
inline double cumulative_hd90_directed(const std::vector<SurfaceVoxel>& from,
                                       const std::vector<SurfaceVoxel>& to,
                                       const Vec3& spacing) {
    std::vector<double> dists;
    dists.reserve(from.size());
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
            const double dx = static_cast<double>(p.x - q.x) * spacing[0];
            const double dy = static_cast<double>(p.y - q.y) * spacing[1];
            const double dz = static_cast<double>(p.z - q.z) * spacing[2];
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        dists.push_back(std::sqrt(best));
    }
    std::sort(dists.begin(), dists.end());
    const auto k = std::max<std::size_t>(
        1, static_cast<std::size_t>(0.9 * static_cast<double>(dists.size())));
    double sum = 0;
    for (std::size_t i = 0; i < k; ++i) sum += dists[i];
    return sum / static_cast<double>(k);
}

} // namespace detail

// Fraction of interior voxels where the transform x + u(x) has positive
// Jacobian determinant (central differences on the displacement). Reported
// alongside registration results; folding is not prevented.
template <typename T>
double jacobian_positive_fraction(const WarpField<T>& u) {
    const Dims3 d = u.dims;
    if (d.nx < 3 || d.ny < 3 || d.nz < 3)
        throw std::invalid_argument("jacobian_positive_fraction: lattice too small");
    const double step[3] = {2.0 / static_cast<double>(d.nx - 1),
                            2.0 / static_cast<double>(d.ny - 1),
                            2.0 / static_cast<double>(d.nz - 1)};
    std::int64_t positive = 0, total = 0;
    for (std::int64_t z = 1; z + 1 < d.nz; ++z)
        for (std::int64_t y = 1; y + 1 < d.ny; ++y)
            for (std::int64_t x = 1; x + 1 < d.nx; ++x) {
                double j[3][3];
                for (int c = 0; c < 3; ++c) {
                    j[c][0] = (static_cast<double>(u.at(x + 1, y, z, c)) -
                               static_cast<double>(u.at(x - 1, y, z, c))) /
                              (2 * step[0]);
                    j[c][1] = (static_cast<double>(u.at(x, y + 1, z, c)) -
                               static_cast<double>(u.at(x, y - 1, z, c))) /
                              (2 * step[1]);
                    j[c][2] = (static_cast<double>(u.at(x, y, z + 1, c)) -
                               static_cast<double>(u.at(x, y, z - 1, c))) /
                              (2 * step[2]);
                    j[c][c] += 1.0;
                }
                const double det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                                   j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                                   j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                positive += det > 0 ? 1 : 0;
                ++total;
            }
    return static_cast<double>(positive) / static_cast<double>(total);
}

// Max over both directions of the cumulative 90th-percentile surface
// distance, averaged over the labels present in the maps.
inline double hd90_cumulative(const LabelVolume& a, const LabelVolume& b, const Vec3& spacing) {
    if (!(a.dims == b.dims)) throw std::invalid_argument("hd90: lattices differ");
    std::set<std::uint16_t> labels;
    for (auto v : a.data)
        if (v != 0) labels.insert(v);
    for (auto v : b.data)
        if (v != 0) labels.insert(v);
    if (labels.empty()) throw std::invalid_argument("hd90: both masks are empty");

    double sum = 0;
    for (std::uint16_t label : labels) {
        const auto sa = detail::label_surface(a, label);
        const auto sb = detail::label_surface(b, label);
        if (sa.empty() || sb.empty())
            throw std::invalid_argument("hd90: label " + std::to_string(label) +
                                        " missing in one mask");
        const double ab = detail::cumulative_hd90_directed(sa, sb, spacing);
        const double ba = detail::cumulative_hd90_directed(sb, sa, spacing);
        sum += std::max(ab, ba);
    }
    return sum / static_cast<double>(labels.size());
}

} // namespace voxreg
