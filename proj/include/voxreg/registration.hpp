#pragma once

// Multi-scale registration driver: an affine stage (Adam on the 12 transform
// parameters) followed by a greedy deformable stage (Adam on the displacement
// grid with Sobolev-style smoothing of the gradient and of the warp each
// iteration). The deformable stage runs over the worker fabric for any shard
// count H >= 1; losses and interpolation go through the distributed ops, so
// results are invariant to H up to reduction order.
//
// All optimization happens on intensity-normalized copies; callers sample
// their original volumes with the returned transform.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxreg/adam.hpp"
#include "voxreg/distops.hpp"
#include "voxreg/fabric.hpp"
#include "voxreg/lncc.hpp"
#include "voxreg/metrics.hpp"
#include "voxreg/mi.hpp"
#include "voxreg/resample.hpp"
#include "voxreg/sampler.hpp"
#include "voxreg/smoothing.hpp"

namespace voxreg {

enum class LossKind { mse, lncc, mi };

struct LossParams {
    LossKind kind = LossKind::lncc;
    int window = 7;        // lncc
    double epsilon = 1e-5; // lncc
    bool ants_approx = true;
    bool lncc_naive_backend = false; // materialized reference path (ablation)
    int bins = 32;                   // mi
    bool mi_bspline_kernel = false;
    bool mi_approx_forward = false;

    ParzenKernel make_kernel() const {
        return mi_bspline_kernel ? ParzenKernel::bspline3(bins) : ParzenKernel::gaussian(bins);
    }
};

struct ScaleStep {
    double downsample = 1; // 4 means quarter resolution
    int iterations = 0;
};

struct ScaleSchedule {
    std::vector<ScaleStep> steps;
    double lr = 0.5;
    double sigma_grad = 1.0; // voxels at the current level
    double sigma_warp = 0.5;
    LossParams loss;

    void validate() const {
        if (steps.empty()) throw std::invalid_argument("schedule: no scale steps");
        for (std::size_t i = 0; i < steps.size(); ++i) {
            if (!(steps[i].downsample >= 1))
                throw std::invalid_argument("schedule: downsample factors must be >= 1");
            if (steps[i].iterations < 0)
                throw std::invalid_argument("schedule: iterations must be >= 0");
            if (i > 0 && steps[i].downsample > steps[i - 1].downsample)
                throw std::invalid_argument("schedule: factors must be non-increasing toward 1");
        }
        if (!(lr > 0) || !(sigma_grad >= 0) || !(sigma_warp >= 0))
            throw std::invalid_argument("schedule: bad lr/sigma");
    }
};

struct TraceEntry {
    int scale_index = 0;
    int iteration = 0;
    double loss = 0;
};

struct NumericalError : std::runtime_error {
    std::vector<TraceEntry> trace;
    NumericalError(const std::string& what, std::vector<TraceEntry> t)
        : std::runtime_error(what), trace(std::move(t)) {}
};

struct RegistrationResult {
    AffineMap affine;
    WarpField<double> warp;
    std::vector<TraceEntry> trace; // affine scales first, then deformable scales
    double seconds = 0;
    std::int64_t peak_alloc_bytes = 0;
    double jacobian_positive_fraction = 1.0; // reported, not enforced
};

namespace detail {

// Min-max normalization to [0,1] (constant volumes map to zero).
template <typename T>
Volume3<T> normalize_intensities(const Volume3<T>& v) {
    T lo = v.data[0], hi = v.data[0];
    for (T x : v.data) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    Volume3<T> out = v;
    const double range = static_cast<double>(hi) - static_cast<double>(lo);
    if (range <= 0) {
        for (auto& x : out.data) x = T(0);
        return out;
    }
    for (auto& x : out.data)
        x = static_cast<T>((static_cast<double>(x) - static_cast<double>(lo)) / range);
    return out;
}

template <typename T>
struct SingleLoss {
    double loss = 0;
    Volume3<T> grad_moved;
};

template <typename T>
SingleLoss<T> loss_and_grad(const Volume3<T>& fixed, const Volume3<T>& moved,
                            const LossParams& params) {
    SingleLoss<T> out;
    switch (params.kind) {
    case LossKind::mse: {
        const auto n = static_cast<double>(fixed.dims.voxels());
        double sum = 0;
        out.grad_moved = Volume3<T>::zeros(fixed.dims);
        for (std::size_t i = 0; i < fixed.data.size(); ++i) {
            const double d = static_cast<double>(moved.data[i]) -
                             static_cast<double>(fixed.data[i]);
            sum += d * d;
            out.grad_moved.data[i] = static_cast<T>(2.0 * d / n);
        }
        out.loss = sum / n;
        return out;
    }
    case LossKind::lncc: {
        LnccState<T> state;
        if (params.lncc_naive_backend) {
            auto graph = lncc_forward_naive(fixed, moved, params.window, params.epsilon);
            out.loss = graph.loss;
            state = lncc_state_from_naive(std::move(graph), params.window, params.epsilon);
        } else {
            auto [res, fused_state] =
                lncc_forward_fused(fixed, moved, params.window, params.epsilon);
            out.loss = res.loss;
            state = std::move(fused_state);
        }
        auto [gf, gm] = lncc_backward_fused(1.0, state, fixed, moved, params.ants_approx);
        out.grad_moved = std::move(gm);
        return out;
    }
    case LossKind::mi: {
        const auto kernel = params.make_kernel();
        MiResult res = params.mi_approx_forward
                           ? mi_forward_approx(fixed, moved, params.bins, kernel)
                           : mi_forward_exact(fixed, moved, params.bins, kernel);
        out.loss = -res.mi;
        auto [gf, gm] = detail::mi_backward_impl(-1.0, fixed, moved, res.hist, kernel);
        out.grad_moved = std::move(gm);
        return out;
    }
    }
    throw std::logic_error("unreachable loss kind");
}

} // namespace detail

// Gradient descent on (A, t) with Adam; inputs are expected intensity-
// normalized. Returns the affine in normalized coordinates (scale-free).
template <typename T>
AffineMap affine_stage(const Volume3<T>& fixed, const Volume3<T>& moving,
                       const ScaleSchedule& schedule, std::vector<TraceEntry>* trace = nullptr,
                       int scale_index_base = 0) {
    schedule.validate();
    AffineMap map = AffineMap::identity();
    AdamState<double> state = AdamState<double>::zeros(12);

    for (std::size_t s = 0; s < schedule.steps.size(); ++s) {
        const auto& step = schedule.steps[s];
        const double factor = 1.0 / step.downsample;
        const Volume3<T> f_s = factor == 1.0 ? fixed : resample_scale(fixed, factor);
        const Volume3<T> m_s = factor == 1.0 ? moving : resample_scale(moving, factor);
        const auto zero_warp = WarpField<T>::zeros(f_s.dims); // outputs on F's lattice

        for (int it = 0; it < step.iterations; ++it) {
            SamplerArgs args;
            args.A = map.matrix;
            args.t = map.translation;
            const auto moved = fused_sample(m_s, &zero_warp, args);
            auto lg = detail::loss_and_grad(f_s, moved, schedule.loss);
            if (!std::isfinite(lg.loss))
                throw NumericalError("affine stage diverged (non-finite loss)",
                                     trace ? *trace : std::vector<TraceEntry>{});
            if (trace)
                trace->push_back({scale_index_base + static_cast<int>(s), it, lg.loss});

            auto grads = fused_sample_backward(lg.grad_moved, m_s, &zero_warp, args,
                                               SamplerGradWant{false, false, true, true});
            tracked_vector<double> params(12), grad(12);
            for (int i = 0; i < 9; ++i) {
                params[static_cast<std::size_t>(i)] = map.matrix.m[static_cast<std::size_t>(i)];
                grad[static_cast<std::size_t>(i)] = grads.affine->m[static_cast<std::size_t>(i)];
            }
            for (int i = 0; i < 3; ++i) {
                params[static_cast<std::size_t>(9 + i)] = map.translation[i];
                grad[static_cast<std::size_t>(9 + i)] = (*grads.translation)[i];
            }
            adam_step<double>(params, grad, state, schedule.lr);
            for (int i = 0; i < 9; ++i) map.matrix.m[static_cast<std::size_t>(i)] = params[static_cast<std::size_t>(i)];
            for (int i = 0; i < 3; ++i) map.translation[i] = params[static_cast<std::size_t>(9 + i)];
        }
    }
    return map;
}

struct DeformableOptions {
    int shards = 1;
    bool gp_sync = true;
};

// Greedy multi-scale optimization of the displacement grid on top of a fixed
// affine initialization. Tensors and losses shard across the fabric when
// shards > 1.
template <typename T>
WarpField<T> deformable_stage(const Volume3<T>& fixed, const Volume3<T>& moving,
                              const AffineMap& affine, const ScaleSchedule& schedule,
                              const DeformableOptions& opts = {},
                              std::vector<TraceEntry>* trace = nullptr,
                              int scale_index_base = 0,
                              std::vector<std::int64_t>* worker_peak_bytes = nullptr) {
    schedule.validate();
    if (opts.shards < 1) throw std::invalid_argument("deformable_stage: shards must be >= 1");
    if (schedule.loss.lncc_naive_backend && opts.shards > 1)
        throw std::invalid_argument("deformable_stage: the naive LNCC backend is single-worker");
    const int world = opts.shards;

    WarpField<T> warp; // created at the first scale
    bool have_warp = false;

    for (std::size_t s = 0; s < schedule.steps.size(); ++s) {
        const auto& step = schedule.steps[s];
        const double factor = 1.0 / step.downsample;
        const Volume3<T> f_s = factor == 1.0 ? fixed : resample_scale(fixed, factor);
        const Volume3<T> m_s = factor == 1.0 ? moving : resample_scale(moving, factor);
        warp = have_warp ? resample_warp(warp, f_s.dims) : WarpField<T>::zeros(f_s.dims);
        have_warp = true;

        std::vector<WarpField<T>> out_slabs(static_cast<std::size_t>(world));
        std::vector<TraceEntry> scale_trace(static_cast<std::size_t>(step.iterations));
        std::vector<std::int64_t> peaks(static_cast<std::size_t>(world), 0);

        // The learning rate is expressed in voxels of the current level;
        // displacements live in normalized units, so convert by the mean
        // voxel pitch of the level.
        const double voxel_pitch = (2.0 / static_cast<double>(f_s.dims.nx - 1) +
                                    2.0 / static_cast<double>(f_s.dims.ny - 1) +
                                    2.0 / static_cast<double>(f_s.dims.nz - 1)) /
                                   3.0;
        const double lr_norm = schedule.lr * voxel_pitch;

        WorkerGroup group(world);
        group.run([&](WorkerContext& ctx) {
            const auto spec = make_shard_spec(f_s.dims, world, ctx.rank());
            auto f_slab = extract_slab(f_s, spec);
            auto m_slab = extract_slab(m_s, spec);
            auto u_slab = extract_slab(warp, spec);
            auto adam = AdamState<T>::zeros(u_slab.data.size());
            const auto taps_grad = gaussian_taps(schedule.sigma_grad);
            const auto taps_warp = gaussian_taps(schedule.sigma_warp);
            const std::int64_t n_total = f_s.dims.voxels();

            for (int it = 0; it < step.iterations; ++it) {
                auto moved = ring_sample(ctx, m_slab, u_slab, affine.matrix, affine.translation,
                                         m_s.dims, spec);
                DistLoss<T> loss;
                switch (schedule.loss.kind) {
                case LossKind::mse:
                    loss = dist_mse(ctx, f_slab, moved, n_total);
                    break;
                case LossKind::lncc:
                    if (schedule.loss.lncc_naive_backend) {
                        // single worker: the slab is the whole volume
                        auto lg = detail::loss_and_grad(f_slab, moved, schedule.loss);
                        loss.loss = lg.loss;
                        loss.grad_moved = std::move(lg.grad_moved);
                    } else {
                        loss = dist_lncc(ctx, spec, f_slab, moved, schedule.loss.window,
                                         schedule.loss.epsilon, schedule.loss.ants_approx,
                                         opts.gp_sync, n_total);
                    }
                    break;
                case LossKind::mi:
                    loss = dist_mi(ctx, f_slab, moved, schedule.loss.bins,
                                   schedule.loss.make_kernel(), schedule.loss.mi_approx_forward,
                                   n_total);
                    break;
                }
                if (!std::isfinite(loss.loss))
                    throw NumericalError("deformable stage diverged (non-finite loss)",
                                         trace ? *trace : std::vector<TraceEntry>{});
                if (ctx.rank() == 0)
                    scale_trace[static_cast<std::size_t>(it)] = {
                        scale_index_base + static_cast<int>(s), it, loss.loss};

                auto grads = ring_sample_backward(ctx, loss.grad_moved, m_slab, u_slab,
                                                  affine.matrix, affine.translation, m_s.dims,
                                                  spec, SamplerGradWant{false, true, false, false});
                auto g_u = gp_convolve(ctx, *grads.warp, taps_grad, spec,
                                       EdgeMode::renormalize, opts.gp_sync);
                adam_step<T>(u_slab.data, g_u.data, adam, lr_norm);
                u_slab = gp_convolve(ctx, u_slab, taps_warp, spec, EdgeMode::renormalize,
                                     opts.gp_sync);
            }
            peaks[static_cast<std::size_t>(ctx.rank())] = AllocLedger::instance().peak_bytes();
            out_slabs[static_cast<std::size_t>(ctx.rank())] = std::move(u_slab);
        });

        warp = gather_warp(out_slabs, f_s.dims);
        if (trace) trace->insert(trace->end(), scale_trace.begin(), scale_trace.end());
        if (worker_peak_bytes)
            worker_peak_bytes->insert(worker_peak_bytes->end(), peaks.begin(), peaks.end());
    }

    if (!(warp.dims == fixed.dims)) warp = resample_warp(warp, fixed.dims);
    return warp;
}

struct RegistrationConfig {
    ScaleSchedule affine;   // affine.loss typically MI
    ScaleSchedule deformable;
    DeformableOptions deformable_opts;
    bool skip_affine = false;
};

// End-to-end pipeline on intensity-normalized copies. The returned transform
// applies to the original volumes: moved(x) = M(A x + t + u(x)).
template <typename T>
RegistrationResult register_volumes(const Volume3<T>& fixed, const Volume3<T>& moving,
                                    const RegistrationConfig& config) {
    const auto t0 = std::chrono::steady_clock::now();
    RegistrationResult result;
    const auto f_norm = detail::normalize_intensities(fixed);
    const auto m_norm = detail::normalize_intensities(moving);

    int scale_base = 0;
    if (!config.skip_affine) {
        result.affine = affine_stage(f_norm, m_norm, config.affine, &result.trace, 0);
        scale_base = static_cast<int>(config.affine.steps.size());
    }

    std::vector<std::int64_t> peaks;
    auto warp = deformable_stage(f_norm, m_norm, result.affine, config.deformable,
                                 config.deformable_opts, &result.trace, scale_base, &peaks);
    result.warp = WarpField<double>::zeros(warp.dims);
    for (std::size_t i = 0; i < warp.data.size(); ++i)
        result.warp.data[i] = static_cast<double>(warp.data[i]);
    result.jacobian_positive_fraction = jacobian_positive_fraction(result.warp);

    result.peak_alloc_bytes = AllocLedger::instance().peak_bytes();
    for (auto p : peaks) result.peak_alloc_bytes = std::max(result.peak_alloc_bytes, p);
    result.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

} // namespace voxreg
