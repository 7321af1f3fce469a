#pragma once

// Composite implicit grid sampler: evaluates I(A*x + t + S*u(x)) per output
// voxel with trilinear interpolation and zero padding, never materializing
// the identity, affine, or rescaled displacement grids. The identity grid is
// implied by the output lattice bounds. The backward pass analytically
// accumulates gradients for the image, the warp, the affine matrix, and the
// translation in one deterministic sweep.
//
// The sampled image is always addressed in its own normalized frame: its
// first and last voxel centers sit at -1 and +1 per axis. Coordinates outside
// [-1,1] read as zero.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>

#include "voxreg/geometry.hpp"
#include "voxreg/resample.hpp"
#include "voxreg/volume.hpp"

namespace voxreg {

struct SamplerArgs {
    Mat3 A = Mat3::identity();
    Vec3 t{0, 0, 0};
    Vec3 S{1, 1, 1}; // diagonal rescale applied to the displacement
    DomainBounds bounds = DomainBounds::full(); // bounds of the implicit output grid

    void validate() const {
        if (!A.finite()) throw std::invalid_argument("SamplerArgs: non-finite affine");
        for (int c = 0; c < 3; ++c)
            if (!(S[c] > 0)) throw std::invalid_argument("SamplerArgs: S must be positive");
        if (!bounds.valid()) throw std::invalid_argument("SamplerArgs: invalid bounds");
    }
};

struct SamplerGradWant {
    bool image = false;
    bool warp = false;
    bool affine = false;
    bool translation = false;
};

template <typename T>
struct SamplerGrads {
    std::optional<Volume3<T>> image;
    std::optional<WarpField<T>> warp;
    std::optional<Mat3> affine;
    std::optional<Vec3> translation;
};

namespace detail {

// Strided scalar view, so warp-field channels can be sampled in place.
template <typename T>
struct ConstView3 {
    const T* base;
    Dims3 dims;
    std::int64_t stride; // elements between consecutive x neighbors

    std::int64_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return ((z * dims.ny + y) * dims.nx + x) * stride;
    }
};

template <typename T>
struct View3 {
    T* base;
    Dims3 dims;
    std::int64_t stride;

    std::int64_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return ((z * dims.ny + y) * dims.nx + x) * stride;
    }
};

template <typename T>
ConstView3<T> volume_view(const Volume3<T>& v) {
    return {v.data.data(), v.dims, 1};
}
template <typename T>
ConstView3<T> warp_channel_view(const WarpField<T>& w, int c) {
    return {w.data.data() + c, w.dims, 3};
}
template <typename T>
View3<T> warp_channel_view_mut(WarpField<T>& w, int c) {
    return {w.data.data() + c, w.dims, 3};
}

struct CellWeights {
    AxisSample ax[3];
    bool in[3][2];       // corner index validity per axis/side
    std::int64_t idx[3][2];
};

// Map a normalized source coordinate onto the image lattice and resolve the
// interpolation cell per axis.
inline CellWeights resolve_cell(const Vec3& xsrc, const Dims3& dims) {
    CellWeights c;
    for (int a = 0; a < 3; ++a) {
        const std::int64_t n = dims[a];
        const double f = (xsrc[a] + 1.0) * 0.5 * static_cast<double>(n - 1);
        c.ax[a] = cell_assign(f, n);
        for (int side = 0; side < 2; ++side) {
            const std::int64_t i = c.ax[a].i0 + side;
            c.in[a][side] = i >= 0 && i < n;
            c.idx[a][side] = i;
        }
    }
    return c;
}

template <typename T>
double sample_cell(const ConstView3<T>& img, const CellWeights& c) {
    double acc = 0;
    for (int bz = 0; bz < 2; ++bz) {
        if (!c.in[2][bz]) continue;
        const double wz = bz ? c.ax[2].frac : 1 - c.ax[2].frac;
        for (int by = 0; by < 2; ++by) {
            if (!c.in[1][by]) continue;
            const double wy = by ? c.ax[1].frac : 1 - c.ax[1].frac;
            for (int bx = 0; bx < 2; ++bx) {
                if (!c.in[0][bx]) continue;
                const double wx = bx ? c.ax[0].frac : 1 - c.ax[0].frac;
                acc += wz * wy * wx *
                       static_cast<double>(
                           img.base[img.index(c.idx[0][bx], c.idx[1][by], c.idx[2][bz])]);
            }
        }
    }
    return acc;
}

// Derivative of the interpolated value w.r.t. the fractional index per axis.
template <typename T>
Vec3 sample_cell_dfrac(const ConstView3<T>& img, const CellWeights& c) {
    Vec3 d{0, 0, 0};
    for (int bz = 0; bz < 2; ++bz) {
        if (!c.in[2][bz]) continue;
        const double wz = bz ? c.ax[2].frac : 1 - c.ax[2].frac;
        const double dz = bz ? 1.0 : -1.0;
        for (int by = 0; by < 2; ++by) {
            if (!c.in[1][by]) continue;
            const double wy = by ? c.ax[1].frac : 1 - c.ax[1].frac;
            const double dy = by ? 1.0 : -1.0;
            for (int bx = 0; bx < 2; ++bx) {
                if (!c.in[0][bx]) continue;
                const double wx = bx ? c.ax[0].frac : 1 - c.ax[0].frac;
                const double dx = bx ? 1.0 : -1.0;
                const double v = static_cast<double>(
                    img.base[img.index(c.idx[0][bx], c.idx[1][by], c.idx[2][bz])]);
                d[0] += dx * wy * wz * v;
                d[1] += wx * dy * wz * v;
                d[2] += wx * wy * dz * v;
            }
        }
    }
    return d;
}

// Shared forward/backward sweep. `out` (accumulated into) drives the forward
// path; any of the gradient targets may be null.
template <typename T>
void composite_sample_core(const ConstView3<T>& img, const WarpField<T>* u,
                           const SamplerArgs& args, Dims3 out_dims,
                           View3<T>* out,
                           const ConstView3<T>* upstream, // g on the output lattice
                           View3<T>* g_img, WarpField<T>* g_warp, Mat3* g_affine,
                           Vec3* g_translation, double* abs_accum = nullptr) {
    args.validate();
    if (u && !(u->dims == out_dims))
        throw std::invalid_argument("sampler: warp lattice mismatch");

    const Mat3& A = args.A;
    const DomainBounds& b = args.bounds;
    const double half_nm1[3] = {0.5 * static_cast<double>(img.dims.nx - 1),
                                0.5 * static_cast<double>(img.dims.ny - 1),
                                0.5 * static_cast<double>(img.dims.nz - 1)};

    for (std::int64_t z = 0; z < out_dims.nz; ++z) {
        const double Xz = lattice_coord(b.x_min[2], b.x_max[2], z, out_dims.nz);
        for (std::int64_t y = 0; y < out_dims.ny; ++y) {
            const double Xy = lattice_coord(b.x_min[1], b.x_max[1], y, out_dims.ny);
            for (std::int64_t x = 0; x < out_dims.nx; ++x) {
                const Vec3 X{lattice_coord(b.x_min[0], b.x_max[0], x, out_dims.nx), Xy, Xz};
                Vec3 xsrc = A.apply(X) + args.t;
                if (u) {
                    for (int c = 0; c < 3; ++c)
                        xsrc[c] += args.S[c] * static_cast<double>(u->at(x, y, z, c));
                }
                const CellWeights cell = resolve_cell(xsrc, img.dims);

                if (out) {
                    const double v = sample_cell(img, cell);
                    out->base[out->index(x, y, z)] += static_cast<T>(v);
                    if (abs_accum) *abs_accum += std::abs(v);
                }
                if (!upstream) continue;

                const double g = static_cast<double>(
                    upstream->base[upstream->index(x, y, z)]);
                if (g_img) {
                    for (int bz2 = 0; bz2 < 2; ++bz2) {
                        if (!cell.in[2][bz2]) continue;
                        const double wz = bz2 ? cell.ax[2].frac : 1 - cell.ax[2].frac;
                        for (int by2 = 0; by2 < 2; ++by2) {
                            if (!cell.in[1][by2]) continue;
                            const double wy = by2 ? cell.ax[1].frac : 1 - cell.ax[1].frac;
                            for (int bx2 = 0; bx2 < 2; ++bx2) {
                                if (!cell.in[0][bx2]) continue;
                                const double wx = bx2 ? cell.ax[0].frac : 1 - cell.ax[0].frac;
                                g_img->base[g_img->index(cell.idx[0][bx2], cell.idx[1][by2],
                                                         cell.idx[2][bz2])] +=
                                    static_cast<T>(wx * wy * wz * g);
                            }
                        }
                    }
                }
                if (g_warp || g_affine || g_translation) {
                    const Vec3 dfrac = sample_cell_dfrac(img, cell);
                    // d(value)/d(xsrc): fractional index is (x+1)/2*(n-1)
                    const Vec3 dxsrc{dfrac[0] * half_nm1[0], dfrac[1] * half_nm1[1],
                                     dfrac[2] * half_nm1[2]};
                    if (g_warp) {
                        for (int c = 0; c < 3; ++c)
                            g_warp->at(x, y, z, c) +=
                                static_cast<T>(args.S[c] * dxsrc[c] * g);
                    }
                    if (g_affine) {
                        for (int r = 0; r < 3; ++r)
                            for (int c = 0; c < 3; ++c)
                                (*g_affine)(r, c) += dxsrc[r] * g * X[c];
                    }
                    if (g_translation) {
                        for (int r = 0; r < 3; ++r) (*g_translation)[r] += dxsrc[r] * g;
                    }
                }
            }
        }
    }
}

} // namespace detail

// Output lattice is u's when a warp is given, otherwise I's.
template <typename T>
Dims3 sampler_output_dims(const Volume3<T>& img, const WarpField<T>* u) {
    return u ? u->dims : img.dims;
}

template <typename T>
Volume3<T> fused_sample(const Volume3<T>& img, const WarpField<T>* u, const SamplerArgs& args) {
    const Dims3 od = sampler_output_dims(img, u);
    Volume3<T> out = Volume3<T>::zeros(od);
    out.spacing = img.spacing;
    out.origin = img.origin;
    auto view = detail::View3<T>{out.data.data(), od, 1};
    detail::composite_sample_core<T>(detail::volume_view(img), u, args, od, &view, nullptr,
                                     nullptr, nullptr, nullptr, nullptr);
    return out;
}

// Accumulates the sampled image into an existing output block (ring sampler
// partial sums). Optionally reports the L1 mass of this call's contribution.
template <typename T>
void fused_sample_accumulate(const Volume3<T>& img, const WarpField<T>* u,
                             const SamplerArgs& args, Volume3<T>& out,
                             double* abs_contribution = nullptr) {
    const Dims3 od = sampler_output_dims(img, u);
    if (!(out.dims == od)) throw std::invalid_argument("fused_sample_accumulate: output lattice mismatch");
    auto view = detail::View3<T>{out.data.data(), od, 1};
    detail::composite_sample_core<T>(detail::volume_view(img), u, args, od, &view, nullptr,
                                     nullptr, nullptr, nullptr, nullptr, abs_contribution);
}

template <typename T>
SamplerGrads<T> fused_sample_backward(const Volume3<T>& upstream, const Volume3<T>& img,
                                      const WarpField<T>* u, const SamplerArgs& args,
                                      const SamplerGradWant& want) {
    const Dims3 od = sampler_output_dims(img, u);
    if (!(upstream.dims == od))
        throw std::invalid_argument("fused_sample_backward: upstream lattice mismatch");

    SamplerGrads<T> grads;
    if (want.image) grads.image = Volume3<T>::zeros(img.dims);
    if (want.warp) grads.warp = WarpField<T>::zeros(od);
    if (want.affine) grads.affine = Mat3{};
    if (want.translation) grads.translation = Vec3{0, 0, 0};

    auto g_view = detail::volume_view(upstream);
    detail::View3<T> img_view{want.image ? grads.image->data.data() : nullptr, img.dims, 1};
    detail::composite_sample_core<T>(
        detail::volume_view(img), u, args, od, nullptr, &g_view,
        want.image ? &img_view : nullptr, want.warp ? &*grads.warp : nullptr,
        want.affine ? &*grads.affine : nullptr,
        want.translation ? &*grads.translation : nullptr);
    return grads;
}

// result(x) = u_inner(x) + u_outer(x + u_inner(x)); u_outer is sampled per
// component with zero padding.
template <typename T>
WarpField<T> compose(const WarpField<T>& u_outer, const WarpField<T>& u_inner) {
    if (!(u_outer.dims == u_inner.dims))
        throw std::invalid_argument("compose: lattice mismatch");
    WarpField<T> result = WarpField<T>::zeros(u_inner.dims);
    SamplerArgs args;
    for (int c = 0; c < 3; ++c) {
        auto in_view = detail::warp_channel_view(u_outer, c);
        auto out_view = detail::warp_channel_view_mut(result, c);
        detail::composite_sample_core<T>(in_view, &u_inner, args, u_inner.dims, &out_view,
                                         nullptr, nullptr, nullptr, nullptr, nullptr);
    }
    for (std::size_t i = 0; i < result.data.size(); ++i) result.data[i] += u_inner.data[i];
    return result;
}

// Integrates a stationary velocity field: halve `steps` times, then square.
template <typename T>
WarpField<T> scaling_and_squaring(const WarpField<T>& v, int steps = 7) {
    if (steps < 1) throw std::invalid_argument("scaling_and_squaring: steps must be >= 1");
    WarpField<T> u = v;
    const double scale = std::ldexp(1.0, -steps);
    for (auto& x : u.data) x = static_cast<T>(static_cast<double>(x) * scale);
    for (int s = 0; s < steps; ++s) u = compose(u, u);
    return u;
}

// Nearest-neighbor label warping with the same composite transform.
template <typename T>
LabelVolume warp_labels_nn(const LabelVolume& labels, const WarpField<T>& u,
                           const SamplerArgs& args = {}) {
    args.validate();
    LabelVolume out = LabelVolume::zeros(u.dims);
    out.spacing = labels.spacing;
    const DomainBounds& b = args.bounds;
    for (std::int64_t z = 0; z < u.dims.nz; ++z)
        for (std::int64_t y = 0; y < u.dims.ny; ++y)
            for (std::int64_t x = 0; x < u.dims.nx; ++x) {
                const Vec3 X{lattice_coord(b.x_min[0], b.x_max[0], x, u.dims.nx),
                             lattice_coord(b.x_min[1], b.x_max[1], y, u.dims.ny),
                             lattice_coord(b.x_min[2], b.x_max[2], z, u.dims.nz)};
                Vec3 xsrc = args.A.apply(X) + args.t;
                for (int c = 0; c < 3; ++c)
                    xsrc[c] += args.S[c] * static_cast<double>(u.at(x, y, z, c));
                std::int64_t idx[3];
                bool inside = true;
                for (int a = 0; a < 3; ++a) {
                    const std::int64_t n = labels.dims[a];
                    const double f = (xsrc[a] + 1.0) * 0.5 * static_cast<double>(n - 1);
                    const auto i = static_cast<std::int64_t>(std::llround(f));
                    if (i < 0 || i >= n) {
                        inside = false;
                        break;
                    }
                    idx[a] = i;
                }
                out.at(x, y, z) = inside ? labels.at(idx[0], idx[1], idx[2]) : 0;
            }
    return out;
}

} // namespace voxreg
