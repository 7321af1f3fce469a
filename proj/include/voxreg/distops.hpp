#pragma once

// Sharded operators over the worker fabric.
//
// gp_convolve: separable convolution where the shard axis borrows halo planes
// from ring neighbors, so the result equals the corresponding slab of the
// unsharded convolution exactly. `sync=false` reproduces plain per-shard
// sharding (no boundary exchange) for ablations.
//
// ring_sample: distributed composite interpolation. Image shards circulate
// the ring; each rank rescales the transform into the visiting shard's local
// frame and accumulates its zero-padded partial interpolation, which sums to
// the global interpolation. Per-rank auxiliary storage stays at one visiting
// block.
//
// dist_mse / dist_lncc / dist_mi: distributed losses. LNCC window statistics
// cross shard boundaries through gp_convolve; MI reduces the raw histograms
// weighted by shard size (payload: B^2 + 2B numbers per rank).

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "voxreg/fabric.hpp"
#include "voxreg/lncc.hpp"
#include "voxreg/mi.hpp"
#include "voxreg/sampler.hpp"
#include "voxreg/smoothing.hpp"

namespace voxreg {

// Per-axis map taking global coordinates of a shard's extent onto the full
// frame: S*x_min_shard + t == x_min_global, S*x_max_shard + t == x_max_global.
struct ShardRescale {
    Vec3 S{1, 1, 1};
    Vec3 t{0, 0, 0};
};

inline ShardRescale compute_shard_rescale(const DomainBounds& shard,
                                          const DomainBounds& global = DomainBounds::full()) {
    ShardRescale r;
    for (int c = 0; c < 3; ++c) {
        r.S[c] = (global.x_max[c] - global.x_min[c]) / (shard.x_max[c] - shard.x_min[c]);
        r.t[c] = global.x_min[c] - r.S[c] * shard.x_min[c];
    }
    return r;
}

namespace detail {

template <typename T>
void gp_convolve_buffer(WorkerContext& ctx, tracked_vector<T>& data, Dims3 dims, int channels,
                        const ShardSpec& spec, const std::vector<double>& taps, EdgeMode mode,
                        bool sync) {
    const auto pad = static_cast<std::int64_t>(taps.size() / 2);
    tracked_vector<T> scratch(data.size());
    convolve_axis(data.data(), scratch.data(), dims, channels, 0, taps, mode, 0, dims.nx);
    convolve_axis(scratch.data(), data.data(), dims, channels, 1, taps, mode, 0, dims.ny);

    if (!sync || spec.world == 1 || pad == 0) {
        // shard treated as a standalone volume along z (ablation / H==1)
        convolve_axis(data.data(), scratch.data(), dims, channels, 2, taps, mode, 0, dims.nz);
        data = std::move(scratch);
        return;
    }

    auto halo = halo_exchange(ctx, data.data(), dims, channels, spec, pad);
    tracked_vector<T> padded_out(halo.data.size());
    convolve_axis(halo.data.data(), padded_out.data(), halo.dims, channels, 2, taps, mode,
                  spec.lo - halo.halo_lo, spec.global_dims.nz);
    const std::size_t plane = static_cast<std::size_t>(dims.nx) *
                              static_cast<std::size_t>(dims.ny) *
                              static_cast<std::size_t>(channels);
    std::copy(padded_out.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(halo.halo_lo)),
              padded_out.begin() + static_cast<std::ptrdiff_t>(plane * static_cast<std::size_t>(halo.halo_lo + dims.nz)),
              data.begin());
}

} // namespace detail

template <typename T>
Volume3<T> gp_convolve(WorkerContext& ctx, const Volume3<T>& slab,
                       const std::vector<double>& taps, const ShardSpec& spec,
                       EdgeMode mode = EdgeMode::zero_pad, bool sync = true) {
    if (taps.size() % 2 == 0) throw std::invalid_argument("gp_convolve: kernel must be odd");
    Volume3<T> out = slab;
    detail::gp_convolve_buffer(ctx, out.data, out.dims, 1, spec, taps, mode, sync);
    return out;
}

template <typename T>
WarpField<T> gp_convolve(WorkerContext& ctx, const WarpField<T>& slab,
                         const std::vector<double>& taps, const ShardSpec& spec,
                         EdgeMode mode = EdgeMode::zero_pad, bool sync = true) {
    if (taps.size() % 2 == 0) throw std::invalid_argument("gp_convolve: kernel must be odd");
    WarpField<T> out = slab;
    detail::gp_convolve_buffer(ctx, out.data, out.dims, 3, spec, taps, mode, sync);
    return out;
}

namespace detail {

template <typename T>
ChannelPayload pack_volume(const Volume3<T>& v) {
    ChannelPayload p(v.data.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(v.data[i]);
    return p;
}

template <typename T>
Volume3<T> unpack_volume(const ChannelPayload& p, Dims3 dims) {
    Volume3<T> v = Volume3<T>::zeros(dims);
    if (p.size() != v.data.size()) throw std::runtime_error("fabric: shard payload size mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) v.data[i] = static_cast<T>(p[i]);
    return v;
}

// Transform arguments for sampling the shard owned by `src` in its own frame.
template <typename T>
SamplerArgs ring_step_args(const ShardSpec& src_spec, const ShardSpec& out_spec,
                           const Mat3& A, const Vec3& t) {
    const ShardRescale rs = compute_shard_rescale(src_spec.bounds);
    SamplerArgs args;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) args.A(r, c) = rs.S[r] * A(r, c);
        args.t[r] = rs.S[r] * t[r] + rs.t[r];
        args.S[r] = rs.S[r];
    }
    args.bounds = out_spec.bounds;
    return args;
}

} // namespace detail

struct RingSampleStats {
    std::vector<double> step_contribution; // L1 mass added per ring step
};

// u_shard lives on the rank's output slab (out_spec); m_shard is the rank's
// slab of the moving image (sharded over m_global_dims).
template <typename T>
Volume3<T> ring_sample(WorkerContext& ctx, const Volume3<T>& m_shard,
                       const WarpField<T>& u_shard, const Mat3& A, const Vec3& t,
                       Dims3 m_global_dims, const ShardSpec& out_spec,
                       RingSampleStats* stats = nullptr) {
    const int w = ctx.world_size();
    Volume3<T> out = Volume3<T>::zeros(u_shard.dims);
    out.spacing = m_shard.spacing;
    out.origin = m_shard.origin;
    if (stats) stats->step_contribution.assign(static_cast<std::size_t>(w), 0.0);

    for (int h = 0; h < w; ++h) {
        const int src = ((ctx.rank() - h) % w + w) % w;
        const ShardSpec src_spec = make_shard_spec(m_global_dims, w, src);
        const SamplerArgs args = detail::ring_step_args<T>(src_spec, out_spec, A, t);
        double* contrib = stats ? &stats->step_contribution[static_cast<std::size_t>(h)] : nullptr;
        if (h == 0) {
            fused_sample_accumulate(m_shard, &u_shard, args, out, contrib);
        } else {
            const auto payload = ctx.ring_send_recv(detail::pack_volume(m_shard), h);
            const auto visiting = detail::unpack_volume<T>(payload, src_spec.local_dims());
            fused_sample_accumulate(visiting, &u_shard, args, out, contrib);
        }
    }
    return out;
}

template <typename T>
struct RingSampleGrads {
    std::optional<WarpField<T>> warp;
    std::optional<Volume3<T>> image; // gradient w.r.t. the rank's own m shard
    std::optional<Mat3> affine;     // reduced across ranks
    std::optional<Vec3> translation;
};

template <typename T>
RingSampleGrads<T> ring_sample_backward(WorkerContext& ctx, const Volume3<T>& upstream,
                                        const Volume3<T>& m_shard, const WarpField<T>& u_shard,
                                        const Mat3& A, const Vec3& t, Dims3 m_global_dims,
                                        const ShardSpec& out_spec, const SamplerGradWant& want) {
    if (!(upstream.dims == u_shard.dims))
        throw std::invalid_argument("ring_sample_backward: upstream lattice mismatch");
    const int w = ctx.world_size();

    RingSampleGrads<T> grads;
    if (want.warp) grads.warp = WarpField<T>::zeros(u_shard.dims);
    if (want.image) grads.image = Volume3<T>::zeros(m_shard.dims);
    Mat3 g_affine{};
    Vec3 g_translation{0, 0, 0};

    auto up_view = detail::volume_view(upstream);
    for (int h = 0; h < w; ++h) {
        const int src = ((ctx.rank() - h) % w + w) % w;
        const ShardSpec src_spec = make_shard_spec(m_global_dims, w, src);
        const SamplerArgs args = detail::ring_step_args<T>(src_spec, out_spec, A, t);

        Mat3 step_affine{};
        Vec3 step_translation{0, 0, 0};
        std::optional<Volume3<T>> g_visiting;
        if (want.image) g_visiting = Volume3<T>::zeros(src_spec.local_dims());

        auto run_backward = [&](const Volume3<T>& visiting) {
            detail::View3<T> img_view{want.image ? g_visiting->data.data() : nullptr,
                                      visiting.dims, 1};
            detail::composite_sample_core<T>(
                detail::volume_view(visiting), &u_shard, args, u_shard.dims, nullptr, &up_view,
                want.image ? &img_view : nullptr, want.warp ? &*grads.warp : nullptr,
                (want.affine || want.translation) ? &step_affine : nullptr,
                (want.affine || want.translation) ? &step_translation : nullptr);
        };
        if (h == 0) {
            run_backward(m_shard);
        } else {
            const auto payload = ctx.ring_send_recv(detail::pack_volume(m_shard), h);
            const auto visiting = detail::unpack_volume<T>(payload, src_spec.local_dims());
            run_backward(visiting);
        }

        // chain through the step rescale: A_h = S∘A rows, t_h = S∘t + t0
        const ShardRescale rs = compute_shard_rescale(src_spec.bounds);
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) g_affine(r, c) += rs.S[r] * step_affine(r, c);
            g_translation[r] += rs.S[r] * step_translation[r];
        }

        if (want.image) {
            // route the visiting shard's image gradient back to its owner
            const auto returned = ctx.ring_send_recv(detail::pack_volume(*g_visiting), -h);
            const auto own = detail::unpack_volume<T>(returned, m_shard.dims);
            for (std::size_t i = 0; i < grads.image->data.size(); ++i)
                grads.image->data[i] += own.data[i];
        }
    }

    if (want.affine || want.translation) {
        std::vector<double> packed(12);
        for (int i = 0; i < 9; ++i) packed[static_cast<std::size_t>(i)] = g_affine.m[static_cast<std::size_t>(i)];
        for (int i = 0; i < 3; ++i) packed[static_cast<std::size_t>(9 + i)] = g_translation[i];
        ctx.allreduce_sum(packed);
        for (int i = 0; i < 9; ++i) g_affine.m[static_cast<std::size_t>(i)] = packed[static_cast<std::size_t>(i)];
        for (int i = 0; i < 3; ++i) g_translation[i] = packed[static_cast<std::size_t>(9 + i)];
        if (want.affine) grads.affine = g_affine;
        if (want.translation) grads.translation = g_translation;
    }
    return grads;
}

// --- distributed losses ------------------------------------------------------

template <typename T>
struct DistLoss {
    double loss = 0;
    Volume3<T> grad_fixed, grad_moved; // gradients of the loss w.r.t. the shards
    std::size_t mi_payload_elements = 0;
};

template <typename T>
DistLoss<T> dist_mse(WorkerContext& ctx, const Volume3<T>& f_shard, const Volume3<T>& moved_shard,
                     std::int64_t n_total) {
    if (!(f_shard.dims == moved_shard.dims))
        throw std::invalid_argument("dist_mse: shard misalignment");
    DistLoss<T> out;
    double local = 0;
    for (std::size_t i = 0; i < f_shard.data.size(); ++i) {
        const double d = static_cast<double>(moved_shard.data[i]) -
                         static_cast<double>(f_shard.data[i]);
        local += d * d;
    }
    out.loss = ctx.allreduce_scalar(local) / static_cast<double>(n_total);
    out.grad_moved = Volume3<T>::zeros(f_shard.dims);
    out.grad_fixed = Volume3<T>::zeros(f_shard.dims);
    const double scale = 2.0 / static_cast<double>(n_total);
    for (std::size_t i = 0; i < f_shard.data.size(); ++i) {
        const double d = static_cast<double>(moved_shard.data[i]) -
                         static_cast<double>(f_shard.data[i]);
        out.grad_moved.data[i] = static_cast<T>(scale * d);
        out.grad_fixed.data[i] = static_cast<T>(-scale * d);
    }
    return out;
}

template <typename T>
DistLoss<T> dist_lncc(WorkerContext& ctx, const ShardSpec& spec, const Volume3<T>& f_shard,
                      const Volume3<T>& moved_shard, int window, double eps, bool ants_approx,
                      bool gp_sync, std::int64_t n_total) {
    if (!(f_shard.dims == moved_shard.dims))
        throw std::invalid_argument("dist_lncc: shard misalignment");
    detail::check_lncc_args(f_shard.dims, moved_shard.dims, window);
    const auto taps = box_taps(window);
    const std::int64_t n_local = f_shard.dims.voxels();

    Volume3<T> chan[5];
    for (auto& c : chan) c = Volume3<T>::zeros(f_shard.dims);
    for (std::int64_t i = 0; i < n_local; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const T fv = f_shard.data[k], mv = moved_shard.data[k];
        chan[0].data[k] = fv;
        chan[1].data[k] = mv;
        chan[2].data[k] = fv * fv;
        chan[3].data[k] = mv * mv;
        chan[4].data[k] = fv * mv;
    }
    for (auto& c : chan)
        detail::gp_convolve_buffer(ctx, c.data, c.dims, 1, spec, taps, EdgeMode::zero_pad,
                                   gp_sync);

    double local_sum = 0;
    for (std::int64_t i = 0; i < n_local; ++i) {
        const auto k = static_cast<std::size_t>(i);
        local_sum += detail::lncc_ncc(
            static_cast<double>(chan[0].data[k]), static_cast<double>(chan[1].data[k]),
            static_cast<double>(chan[2].data[k]), static_cast<double>(chan[3].data[k]),
            static_cast<double>(chan[4].data[k]), eps);
    }
    DistLoss<T> out;
    out.loss = 1.0 - ctx.allreduce_scalar(local_sum) / static_cast<double>(n_total);

    const double gi = -1.0 / static_cast<double>(n_total);
    for (std::int64_t i = 0; i < n_local; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const auto g = detail::lncc_gamma(
            static_cast<double>(chan[0].data[k]), static_cast<double>(chan[1].data[k]),
            static_cast<double>(chan[2].data[k]), static_cast<double>(chan[3].data[k]),
            static_cast<double>(chan[4].data[k]), eps, gi);
        chan[0].data[k] = static_cast<T>(g.gamma);
        chan[1].data[k] = static_cast<T>(g.gamma_ab);
        chan[2].data[k] = static_cast<T>(g.gamma_ac);
        chan[3].data[k] = static_cast<T>(g.gamma_fm);
        chan[4].data[k] = static_cast<T>(g.gamma_mf);
    }
    if (!ants_approx) {
        for (auto& c : chan)
            detail::gp_convolve_buffer(ctx, c.data, c.dims, 1, spec, taps, EdgeMode::zero_pad,
                                       gp_sync);
    }
    out.grad_fixed = Volume3<T>::zeros(f_shard.dims);
    out.grad_moved = Volume3<T>::zeros(f_shard.dims);
    for (std::int64_t i = 0; i < n_local; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const double fv = static_cast<double>(f_shard.data[k]);
        const double mv = static_cast<double>(moved_shard.data[k]);
        out.grad_fixed.data[k] = static_cast<T>(
            mv * static_cast<double>(chan[0].data[k]) - fv * static_cast<double>(chan[1].data[k]) +
            static_cast<double>(chan[3].data[k]));
        out.grad_moved.data[k] = static_cast<T>(
            fv * static_cast<double>(chan[0].data[k]) - mv * static_cast<double>(chan[2].data[k]) +
            static_cast<double>(chan[4].data[k]));
    }
    return out;
}

template <typename T>
DistLoss<T> dist_mi(WorkerContext& ctx, const Volume3<T>& f_shard, const Volume3<T>& moved_shard,
                    int bins, const ParzenKernel& kernel, bool approx_forward,
                    std::int64_t n_total) {
    if (!(f_shard.dims == moved_shard.dims))
        throw std::invalid_argument("dist_mi: shard misalignment");
    MiResult local = approx_forward ? mi_forward_approx(f_shard, moved_shard, bins, kernel)
                                    : mi_forward_exact(f_shard, moved_shard, bins, kernel);

    // Weighted reduction of the raw histograms: each rank contributes
    // (N_h/N) * (raw_h / N_h) = raw_h / N, payload B^2 + 2B numbers.
    const auto b2 = static_cast<std::size_t>(bins) * static_cast<std::size_t>(bins);
    std::vector<double> payload(b2 + 2 * static_cast<std::size_t>(bins));
    const double inv_n = 1.0 / static_cast<double>(n_total);
    for (std::size_t i = 0; i < b2; ++i) payload[i] = local.hist.raw_joint[i] * inv_n;
    for (std::size_t i = 0; i < static_cast<std::size_t>(bins); ++i) {
        payload[b2 + i] = local.hist.raw_marg_i[i] * inv_n;
        payload[b2 + static_cast<std::size_t>(bins) + i] = local.hist.raw_marg_j[i] * inv_n;
    }
    ctx.allreduce_sum(payload);

    JointHistogram global;
    global.bins = bins;
    global.samples = n_total;
    global.raw_joint.assign(b2, 0.0);
    global.raw_marg_i.assign(static_cast<std::size_t>(bins), 0.0);
    global.raw_marg_j.assign(static_cast<std::size_t>(bins), 0.0);
    const double n_scale = static_cast<double>(n_total);
    for (std::size_t i = 0; i < b2; ++i) global.raw_joint[i] = payload[i] * n_scale;
    for (std::size_t i = 0; i < static_cast<std::size_t>(bins); ++i) {
        global.raw_marg_i[i] = payload[b2 + i] * n_scale;
        global.raw_marg_j[i] = payload[b2 + static_cast<std::size_t>(bins) + i] * n_scale;
    }
    detail::finalize_histogram(global);

    DistLoss<T> out;
    out.mi_payload_elements = ctx.last_allreduce_payload();
    out.loss = -detail::histogram_mi(global);
    auto [gi, gj] = detail::mi_backward_impl(-1.0, f_shard, moved_shard, global, kernel);
    out.grad_fixed = std::move(gi);
    out.grad_moved = std::move(gj);
    return out;
}

} // namespace voxreg
