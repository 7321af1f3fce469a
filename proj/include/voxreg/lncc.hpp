#pragma once

// Local normalized cross-correlation loss over a separable averaging window.
//
//   n_i = A_i^2 / (B_i C_i + eps)  with  A = mean(FM) - mean(F)mean(M),
//   B = mean(F^2) - mean(F)^2,  C = mean(M^2) - mean(M)^2,
//   loss = 1 - mean(n_i).
//
// Two forward paths: a naive reference that materializes every node of the
// computational graph, and a fused path that keeps only the five convolved
// channels (w*F, w*M, w*F^2, w*M^2, w*FM). The fused backward transforms the
// saved channels in place into the gamma family; exact mode convolves them
// with the window before the final elementwise combination, the ANTs
// approximation skips those convolutions.
//
// Window convolutions use plain zero padding (no edge renormalization); with
// clipped windows the variance identities still hold with B,C >= 0.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>

#include "voxreg/smoothing.hpp"
#include "voxreg/volume.hpp"

namespace voxreg {

template <typename T = double>
struct LnccState {
    Volume3<T> mean_f, mean_m, mean_ff, mean_mm, mean_fm;
    int window = 7;
    double epsilon = 1e-5;
    std::int64_t voxels = 0;
};

template <typename T = double>
struct LnccResult {
    double loss = 0;
    Volume3<T> ncc_map; // per-voxel n_i, filled only when requested
    bool has_map = false;
};

// Every intermediate tensor of the reference graph, kept alive so the
// instrumented allocator sees them.
template <typename T = double>
struct LnccNaiveGraph {
    Volume3<T> f2, m2, fm;
    Volume3<T> mu_f, mu_m, mu_f2, mu_m2, mu_fm;
    Volume3<T> var_f, var_m, cov;
    Volume3<T> cov_sq, denom, ncc;
    double loss = 0;
};

namespace detail {

inline void check_lncc_args(Dims3 a, Dims3 b, int window) {
    if (!(a == b)) throw std::invalid_argument("lncc: lattices differ");
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("lncc: window must be odd and >= 1");
}

inline double lncc_ncc(double muf, double mum, double muff, double mumm, double mufm,
                       double eps) {
    const double a = mufm - muf * mum;
    const double b = muff - muf * muf;
    const double c = mumm - mum * mum;
    return a * a / (b * c + eps);
}

struct LnccGammaFamily {
    double gamma, gamma_ab, gamma_ac, gamma_fm, gamma_mf;
};

// gi = dL/dn_i. The epsilon-regularized gradient keeps every denominator
// bounded below by eps, so degenerate windows stay finite.
inline LnccGammaFamily lncc_gamma(double muf, double mum, double muff, double mumm,
                                  double mufm, double eps, double gi) {
    const double a = mufm - muf * mum;
    const double b = muff - muf * muf;
    const double c = mumm - mum * mum;
    const double denom = b * c + eps;
    LnccGammaFamily g;
    g.gamma = 2.0 * gi * a / denom;
    g.gamma_ab = g.gamma * (a * c / denom);
    g.gamma_ac = g.gamma * (a * b / denom);
    g.gamma_fm = g.gamma * (muf * (a * c / denom) - mum);
    g.gamma_mf = g.gamma * (mum * (a * b / denom) - muf);
    return g;
}

} // namespace detail

template <typename T>
LnccNaiveGraph<T> lncc_forward_naive(const Volume3<T>& f, const Volume3<T>& m, int window,
                                     double eps) {
    detail::check_lncc_args(f.dims, m.dims, window);
    const auto taps = box_taps(window);
    const std::int64_t n = f.dims.voxels();

    LnccNaiveGraph<T> g;
    g.f2 = Volume3<T>::zeros(f.dims);
    g.m2 = Volume3<T>::zeros(f.dims);
    g.fm = Volume3<T>::zeros(f.dims);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        g.f2.data[k] = f.data[k] * f.data[k];
        g.m2.data[k] = m.data[k] * m.data[k];
        g.fm.data[k] = f.data[k] * m.data[k];
    }
    auto convolved = [&](const Volume3<T>& v) {
        Volume3<T> out = v;
        separable_convolve(out.data, out.dims, 1, taps, EdgeMode::zero_pad);
        return out;
    };
    g.mu_f = convolved(f);
    g.mu_m = convolved(m);
    g.mu_f2 = convolved(g.f2);
    g.mu_m2 = convolved(g.m2);
    g.mu_fm = convolved(g.fm);

    g.var_f = Volume3<T>::zeros(f.dims);
    g.var_m = Volume3<T>::zeros(f.dims);
    g.cov = Volume3<T>::zeros(f.dims);
    g.cov_sq = Volume3<T>::zeros(f.dims);
    g.denom = Volume3<T>::zeros(f.dims);
    g.ncc = Volume3<T>::zeros(f.dims);
    double sum = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        g.var_f.data[k] = g.mu_f2.data[k] - g.mu_f.data[k] * g.mu_f.data[k];
        g.var_m.data[k] = g.mu_m2.data[k] - g.mu_m.data[k] * g.mu_m.data[k];
        g.cov.data[k] = g.mu_fm.data[k] - g.mu_f.data[k] * g.mu_m.data[k];
        g.cov_sq.data[k] = g.cov.data[k] * g.cov.data[k];
        g.denom.data[k] = static_cast<T>(g.var_f.data[k] * g.var_m.data[k] + eps);
        g.ncc.data[k] = g.cov_sq.data[k] / g.denom.data[k];
        sum += static_cast<double>(g.ncc.data[k]);
    }
    g.loss = 1.0 - sum / static_cast<double>(n);
    return g;
}

template <typename T>
std::pair<LnccResult<T>, LnccState<T>> lncc_forward_fused(const Volume3<T>& f,
                                                          const Volume3<T>& m, int window,
                                                          double eps,
                                                          bool want_map = false) {
    detail::check_lncc_args(f.dims, m.dims, window);
    const auto taps = box_taps(window);
    const std::int64_t n = f.dims.voxels();

    LnccState<T> state;
    state.window = window;
    state.epsilon = eps;
    state.voxels = n;
    state.mean_f = Volume3<T>::zeros(f.dims);
    state.mean_m = Volume3<T>::zeros(f.dims);
    state.mean_ff = Volume3<T>::zeros(f.dims);
    state.mean_mm = Volume3<T>::zeros(f.dims);
    state.mean_fm = Volume3<T>::zeros(f.dims);

    // one pass over F, M fills all five channels
    for (std::int64_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const T fv = f.data[k], mv = m.data[k];
        state.mean_f.data[k] = fv;
        state.mean_m.data[k] = mv;
        state.mean_ff.data[k] = fv * fv;
        state.mean_mm.data[k] = mv * mv;
        state.mean_fm.data[k] = fv * mv;
    }
    {
        // one scratch buffer shared by all five channel convolutions
        tracked_vector<T> scratch(static_cast<std::size_t>(n));
        Volume3<T>* chans[5] = {&state.mean_f, &state.mean_m, &state.mean_ff,
                                &state.mean_mm, &state.mean_fm};
        for (auto* ch : chans) {
            convolve_axis(ch->data.data(), scratch.data(), f.dims, 1, 0, taps,
                          EdgeMode::zero_pad, 0, f.dims.nx);
            convolve_axis(scratch.data(), ch->data.data(), f.dims, 1, 1, taps,
                          EdgeMode::zero_pad, 0, f.dims.ny);
            convolve_axis(ch->data.data(), scratch.data(), f.dims, 1, 2, taps,
                          EdgeMode::zero_pad, 0, f.dims.nz);
            ch->data.swap(scratch);
        }
    }

    LnccResult<T> res;
    if (want_map) {
        res.ncc_map = Volume3<T>::zeros(f.dims);
        res.has_map = true;
    }
    double sum = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const double ni = detail::lncc_ncc(
            static_cast<double>(state.mean_f.data[k]), static_cast<double>(state.mean_m.data[k]),
            static_cast<double>(state.mean_ff.data[k]), static_cast<double>(state.mean_mm.data[k]),
            static_cast<double>(state.mean_fm.data[k]), eps);
        if (want_map) res.ncc_map.data[k] = static_cast<T>(ni);
        sum += ni;
    }
    res.loss = 1.0 - sum / static_cast<double>(n);
    return {std::move(res), std::move(state)};
}

// Adopts the convolved channels of a naive forward as backward state, so the
// materialized reference path can serve as a drop-in backend.
template <typename T>
LnccState<T> lncc_state_from_naive(LnccNaiveGraph<T>&& g, int window, double eps) {
    LnccState<T> s;
    s.window = window;
    s.epsilon = eps;
    s.voxels = g.mu_f.dims.voxels();
    s.mean_f = std::move(g.mu_f);
    s.mean_m = std::move(g.mu_m);
    s.mean_ff = std::move(g.mu_f2);
    s.mean_mm = std::move(g.mu_m2);
    s.mean_fm = std::move(g.mu_fm);
    return s;
}

// `upstream` is dL_total/dloss. The state is consumed: its five channels are
// rewritten in place as gamma, gamma_AB, gamma_AC, gamma_FM, gamma_MF.
template <typename T>
std::pair<Volume3<T>, Volume3<T>> lncc_backward_fused(double upstream, LnccState<T>& state,
                                                      const Volume3<T>& f,
                                                      const Volume3<T>& m,
                                                      bool ants_approx) {
    if (!(state.mean_f.dims == f.dims) || !(f.dims == m.dims))
        throw std::invalid_argument("lncc_backward_fused: lattice mismatch");
    const std::int64_t n = state.voxels;
    const double eps = state.epsilon;
    const double gi = -upstream / static_cast<double>(n); // through loss = 1 - mean(n)

    for (std::int64_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const auto g = detail::lncc_gamma(
            static_cast<double>(state.mean_f.data[k]), static_cast<double>(state.mean_m.data[k]),
            static_cast<double>(state.mean_ff.data[k]), static_cast<double>(state.mean_mm.data[k]),
            static_cast<double>(state.mean_fm.data[k]), eps, gi);
        state.mean_f.data[k] = static_cast<T>(g.gamma);
        state.mean_m.data[k] = static_cast<T>(g.gamma_ab);
        state.mean_ff.data[k] = static_cast<T>(g.gamma_ac);
        state.mean_mm.data[k] = static_cast<T>(g.gamma_fm);
        state.mean_fm.data[k] = static_cast<T>(g.gamma_mf);
    }

    if (!ants_approx) {
        const auto taps = box_taps(state.window);
        tracked_vector<T> scratch(static_cast<std::size_t>(n));
        Volume3<T>* chans[5] = {&state.mean_f, &state.mean_m, &state.mean_ff,
                                &state.mean_mm, &state.mean_fm};
        for (auto* ch : chans) {
            convolve_axis(ch->data.data(), scratch.data(), f.dims, 1, 0, taps,
                          EdgeMode::zero_pad, 0, f.dims.nx);
            convolve_axis(scratch.data(), ch->data.data(), f.dims, 1, 1, taps,
                          EdgeMode::zero_pad, 0, f.dims.ny);
            convolve_axis(ch->data.data(), scratch.data(), f.dims, 1, 2, taps,
                          EdgeMode::zero_pad, 0, f.dims.nz);
            ch->data.swap(scratch);
        }
    }

    auto grad_f = Volume3<T>::zeros(f.dims);
    auto grad_m = Volume3<T>::zeros(f.dims);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const double gamma = static_cast<double>(state.mean_f.data[k]);
        const double gamma_ab = static_cast<double>(state.mean_m.data[k]);
        const double gamma_ac = static_cast<double>(state.mean_ff.data[k]);
        const double gamma_fm = static_cast<double>(state.mean_mm.data[k]);
        const double gamma_mf = static_cast<double>(state.mean_fm.data[k]);
        const double fv = static_cast<double>(f.data[k]);
        const double mv = static_cast<double>(m.data[k]);
        grad_f.data[k] = static_cast<T>(mv * gamma - fv * gamma_ab + gamma_fm);
        grad_m.data[k] = static_cast<T>(fv * gamma - mv * gamma_ac + gamma_mf);
    }
    return {std::move(grad_f), std::move(grad_m)};
}

} // namespace voxreg
