#pragma once

// Mattes mutual information with pluggable Parzen kernels.
//
//   p_IJ(m,n) ∝ Σ_k κ(b_m - I_k) κ(b_n - J_k),   b_j = (j + 0.5) / B
//
// The exact forward accumulates the joint histogram per voxel without ever
// materializing the B×N Parzen block. The approximate forward hard-bins each
// voxel (3 histogram writes per voxel) and convolves the count histograms
// with the discretized kernel afterwards.
//
// The stored marginals are the marginals of the normalized joint, so the
// three PMFs stay mutually consistent under kernel truncation and intensity
// clipping at the [0,1] ends; the directly accumulated marginals are kept as
// raw payload for the distributed reduction. MI uses 0·log 0 := 0, and the
// optimization loss is -MI.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "voxreg/volume.hpp"

namespace voxreg {

class ParzenKernel {
public:
    enum class Kind { gaussian, bspline3, delta };

    // Truncated at 3 sigma and normalized so B * integral(kappa) == 1.
    static ParzenKernel gaussian(int bins, double sigma_bins = 0.5) {
        ParzenKernel k;
        k.kind_ = Kind::gaussian;
        k.bins_ = bins;
        k.sigma_ = sigma_bins / bins;
        k.radius_ = 3.0 * k.sigma_;
        const double erf_mass = std::erf(3.0 / std::sqrt(2.0));
        k.norm_ = 1.0 / (bins * k.sigma_ * std::sqrt(2.0 * 3.14159265358979323846) * erf_mass);
        k.check_normalization();
        return k;
    }

    // Cubic B-spline in bin units; exact partition of unity on the bin lattice.
    static ParzenKernel bspline3(int bins) {
        ParzenKernel k;
        k.kind_ = Kind::bspline3;
        k.bins_ = bins;
        k.radius_ = 2.0 / bins;
        k.check_normalization();
        return k;
    }

    // Indicator of the sample's own bin; turns the exact path into hard binning.
    static ParzenKernel delta(int bins) {
        ParzenKernel k;
        k.kind_ = Kind::delta;
        k.bins_ = bins;
        k.radius_ = 0.5 / bins;
        k.check_normalization();
        return k;
    }

    double kappa(double x) const {
        switch (kind_) {
        case Kind::gaussian: {
            if (std::abs(x) > radius_) return 0.0;
            const double z = x / sigma_;
            return norm_ * std::exp(-0.5 * z * z);
        }
        case Kind::bspline3:
            return bspline3_value(x * bins_);
        case Kind::delta:
            return std::abs(x) < radius_ ? 1.0 : 0.0;
        }
        return 0.0;
    }

    // omega(d) = d/dI kappa(b - I) evaluated at d = b - I.
    double omega(double x) const {
        switch (kind_) {
        case Kind::gaussian: {
            if (std::abs(x) > radius_) return 0.0;
            return x / (sigma_ * sigma_) * kappa(x);
        }
        case Kind::bspline3:
            return -static_cast<double>(bins_) * bspline3_deriv(x * bins_);
        case Kind::delta:
            return 0.0;
        }
        return 0.0;
    }

    double support() const { return radius_; }
    double support_bins() const { return radius_ * bins_; }
    int bins() const { return bins_; }

private:
    static double bspline3_value(double t) {
        const double a = std::abs(t);
        if (a < 1.0) return (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0;
        if (a < 2.0) {
            const double q = 2.0 - a;
            return q * q * q / 6.0;
        }
        return 0.0;
    }
    static double bspline3_deriv(double t) {
        const double a = std::abs(t);
        const double s = t < 0 ? -1.0 : 1.0;
        if (a < 1.0) return s * (-2.0 * a + 1.5 * a * a);
        if (a < 2.0) {
            const double q = 2.0 - a;
            return s * (-0.5 * q * q);
        }
        return 0.0;
    }

    void check_normalization() const {
        // Discrete integral over the support, scaled by the bin count.
        const int steps = 20000;
        const double h = 2.0 * radius_ / steps;
        double integral = 0;
        for (int i = 0; i <= steps; ++i) {
            const double x = -radius_ + i * h;
            const double w = (i == 0 || i == steps) ? 0.5 : 1.0;
            integral += w * kappa(x);
        }
        integral *= h * bins_;
        if (std::abs(integral - 1.0) > 1e-3)
            throw std::logic_error("ParzenKernel: discrete integral deviates from 1");
    }

    Kind kind_ = Kind::gaussian;
    int bins_ = 32;
    double sigma_ = 0;
    double radius_ = 0;
    double norm_ = 1.0;
};

inline double bin_center(int j, int bins) {
    return (static_cast<double>(j) + 0.5) / static_cast<double>(bins);
}

struct JointHistogram {
    int bins = 0;
    std::int64_t samples = 0;
    double raw_joint_sum = 0;                // normalizer of the joint
    std::vector<double> p_i, p_j;            // marginals of p_ij
    std::vector<double> p_ij;                // row-major [m * bins + n]
    std::vector<double> raw_joint;           // pre-normalization accumulations
    std::vector<double> raw_marg_i, raw_marg_j;
};

struct MiStats {
    std::uint64_t hist_writes = 0;
    std::uint64_t kernel_evals = 0;
};

struct MiResult {
    double mi = 0;
    JointHistogram hist;
    MiStats stats;
};

namespace detail {

template <typename T>
void check_mi_inputs(const Volume3<T>& a, const Volume3<T>& b, int bins) {
    if (!(a.dims == b.dims)) throw std::invalid_argument("mi: lattices differ");
    if (bins < 2) throw std::invalid_argument("mi: bins must be >= 2");
    for (T v : a.data)
        if (!(v >= T(0) && v <= T(1)))
            throw std::invalid_argument("mi: intensities must lie in [0,1]");
    for (T v : b.data)
        if (!(v >= T(0) && v <= T(1)))
            throw std::invalid_argument("mi: intensities must lie in [0,1]");
}

inline void finalize_histogram(JointHistogram& h) {
    const int b = h.bins;
    double z = 0;
    for (double v : h.raw_joint) z += v;
    h.raw_joint_sum = z;
    h.p_ij.assign(static_cast<std::size_t>(b) * b, 0.0);
    for (std::size_t i = 0; i < h.p_ij.size(); ++i) h.p_ij[i] = h.raw_joint[i] / z;
    h.p_i.assign(static_cast<std::size_t>(b), 0.0);
    h.p_j.assign(static_cast<std::size_t>(b), 0.0);
    for (int m = 0; m < b; ++m)
        for (int n = 0; n < b; ++n) {
            const double v = h.p_ij[static_cast<std::size_t>(m) * b + n];
            h.p_i[static_cast<std::size_t>(m)] += v;
            h.p_j[static_cast<std::size_t>(n)] += v;
        }
}

inline double histogram_mi(const JointHistogram& h) {
    const int b = h.bins;
    double mi = 0;
    for (int m = 0; m < b; ++m)
        for (int n = 0; n < b; ++n) {
            const double p = h.p_ij[static_cast<std::size_t>(m) * b + n];
            if (p <= 0) continue;
            mi += p * std::log(p / (h.p_i[static_cast<std::size_t>(m)] *
                                    h.p_j[static_cast<std::size_t>(n)]));
        }
    return mi;
}

} // namespace detail

// Materializes the full B×N Parzen block (reference formulation; memory
// bottleneck by construction). Row-major: psi[j*N + k] = kappa(b_j - I_k).
template <typename T>
std::vector<double> parzen_block_naive(const Volume3<T>& img, int bins,
                                       const ParzenKernel& kernel) {
    if (bins < 1) throw std::invalid_argument("parzen_block_naive: bins must be >= 1");
    const std::int64_t n = img.dims.voxels();
    for (T v : img.data)
        if (!(v >= T(0) && v <= T(1)))
            throw std::invalid_argument("parzen_block_naive: intensities must lie in [0,1]");
    std::vector<double> psi(static_cast<std::size_t>(bins) * static_cast<std::size_t>(n));
    for (int j = 0; j < bins; ++j) {
        const double bj = bin_center(j, bins);
        for (std::int64_t k = 0; k < n; ++k)
            psi[static_cast<std::size_t>(j) * static_cast<std::size_t>(n) +
                static_cast<std::size_t>(k)] =
                kernel.kappa(bj - static_cast<double>(img.data[static_cast<std::size_t>(k)]));
    }
    return psi;
}

template <typename T>
MiResult mi_forward_exact(const Volume3<T>& img_i, const Volume3<T>& img_j, int bins,
                          const ParzenKernel& kernel) {
    detail::check_mi_inputs(img_i, img_j, bins);
    const std::int64_t n = img_i.dims.voxels();
    MiResult res;
    res.hist.bins = bins;
    res.hist.samples = n;
    res.hist.raw_joint.assign(static_cast<std::size_t>(bins) * bins, 0.0);
    res.hist.raw_marg_i.assign(static_cast<std::size_t>(bins), 0.0);
    res.hist.raw_marg_j.assign(static_cast<std::size_t>(bins), 0.0);

    std::vector<double> row_i(static_cast<std::size_t>(bins));
    std::vector<double> row_j(static_cast<std::size_t>(bins));
    for (std::int64_t k = 0; k < n; ++k) {
        const double iv = static_cast<double>(img_i.data[static_cast<std::size_t>(k)]);
        const double jv = static_cast<double>(img_j.data[static_cast<std::size_t>(k)]);
        for (int m = 0; m < bins; ++m) {
            row_i[static_cast<std::size_t>(m)] = kernel.kappa(bin_center(m, bins) - iv);
            row_j[static_cast<std::size_t>(m)] = kernel.kappa(bin_center(m, bins) - jv);
        }
        res.stats.kernel_evals += 2ull * static_cast<std::uint64_t>(bins);
        for (int m = 0; m < bins; ++m) {
            res.hist.raw_marg_i[static_cast<std::size_t>(m)] += row_i[static_cast<std::size_t>(m)];
            res.hist.raw_marg_j[static_cast<std::size_t>(m)] += row_j[static_cast<std::size_t>(m)];
        }
        for (int m = 0; m < bins; ++m) {
            const double wi = row_i[static_cast<std::size_t>(m)];
            double* joint_row = res.hist.raw_joint.data() + static_cast<std::size_t>(m) * bins;
            for (int nn = 0; nn < bins; ++nn) joint_row[nn] += wi * row_j[static_cast<std::size_t>(nn)];
        }
        res.stats.hist_writes +=
            static_cast<std::uint64_t>(bins) * static_cast<std::uint64_t>(bins) +
            2ull * static_cast<std::uint64_t>(bins);
    }
    detail::finalize_histogram(res.hist);
    res.mi = detail::histogram_mi(res.hist);
    return res;
}

// Discretized kernel taps at whole-bin offsets.
inline std::vector<double> kernel_bin_taps(const ParzenKernel& kernel, int bins) {
    const int radius = static_cast<int>(std::ceil(kernel.support_bins()));
    std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
    for (int d = -radius; d <= radius; ++d)
        taps[static_cast<std::size_t>(d + radius)] =
            kernel.kappa(static_cast<double>(d) / bins);
    return taps;
}

template <typename T>
MiResult mi_forward_approx(const Volume3<T>& img_i, const Volume3<T>& img_j, int bins,
                           const ParzenKernel& kernel) {
    detail::check_mi_inputs(img_i, img_j, bins);
    const std::int64_t n = img_i.dims.voxels();
    MiResult res;
    res.hist.bins = bins;
    res.hist.samples = n;

    std::vector<double> c_ij(static_cast<std::size_t>(bins) * bins, 0.0);
    std::vector<double> c_i(static_cast<std::size_t>(bins), 0.0);
    std::vector<double> c_j(static_cast<std::size_t>(bins), 0.0);
    for (std::int64_t k = 0; k < n; ++k) {
        const double iv = static_cast<double>(img_i.data[static_cast<std::size_t>(k)]);
        const double jv = static_cast<double>(img_j.data[static_cast<std::size_t>(k)]);
        const int mi_bin = std::min(static_cast<int>(iv * bins), bins - 1);
        const int nj_bin = std::min(static_cast<int>(jv * bins), bins - 1);
        c_ij[static_cast<std::size_t>(mi_bin) * bins + nj_bin] += 1.0;
        c_i[static_cast<std::size_t>(mi_bin)] += 1.0;
        c_j[static_cast<std::size_t>(nj_bin)] += 1.0;
        res.stats.hist_writes += 3;
    }

    const auto taps = kernel_bin_taps(kernel, bins);
    const int radius = static_cast<int>(taps.size() / 2);
    auto conv_1d = [&](const std::vector<double>& src) {
        std::vector<double> out(static_cast<std::size_t>(bins), 0.0);
        for (int m = 0; m < bins; ++m) {
            double acc = 0;
            for (int d = -radius; d <= radius; ++d) {
                const int s = m - d;
                if (s < 0 || s >= bins) continue;
                acc += taps[static_cast<std::size_t>(d + radius)] * src[static_cast<std::size_t>(s)];
            }
            out[static_cast<std::size_t>(m)] = acc;
        }
        return out;
    };
    res.hist.raw_marg_i = conv_1d(c_i);
    res.hist.raw_marg_j = conv_1d(c_j);

    // separable 2-D convolution of the count joint
    std::vector<double> tmp(static_cast<std::size_t>(bins) * bins, 0.0);
    for (int m = 0; m < bins; ++m)
        for (int nn = 0; nn < bins; ++nn) {
            double acc = 0;
            for (int d = -radius; d <= radius; ++d) {
                const int s = m - d;
                if (s < 0 || s >= bins) continue;
                acc += taps[static_cast<std::size_t>(d + radius)] *
                       c_ij[static_cast<std::size_t>(s) * bins + nn];
            }
            tmp[static_cast<std::size_t>(m) * bins + nn] = acc;
        }
    res.hist.raw_joint.assign(static_cast<std::size_t>(bins) * bins, 0.0);
    for (int m = 0; m < bins; ++m)
        for (int nn = 0; nn < bins; ++nn) {
            double acc = 0;
            for (int d = -radius; d <= radius; ++d) {
                const int s = nn - d;
                if (s < 0 || s >= bins) continue;
                acc += taps[static_cast<std::size_t>(d + radius)] *
                       tmp[static_cast<std::size_t>(m) * bins + s];
            }
            res.hist.raw_joint[static_cast<std::size_t>(m) * bins + nn] = acc;
        }

    detail::finalize_histogram(res.hist);
    res.mi = detail::histogram_mi(res.hist);
    return res;
}

namespace detail {

// Gradient core; the histogram may cover more samples than the local block
// (distributed use: global histogram against a local shard).
template <typename T>
std::pair<Volume3<T>, Volume3<T>> mi_backward_impl(double upstream, const Volume3<T>& img_i,
                                                   const Volume3<T>& img_j,
                                                   const JointHistogram& hist,
                                                   const ParzenKernel& kernel) {
    if (!(img_i.dims == img_j.dims)) throw std::invalid_argument("mi_backward: lattices differ");
    const int b = hist.bins;

    // dMI/dp_ij through the entropy terms, then through the normalization.
    std::vector<double> ghat(static_cast<std::size_t>(b) * b, 0.0);
    double dot = 0;
    for (int m = 0; m < b; ++m)
        for (int nn = 0; nn < b; ++nn) {
            const double p = hist.p_ij[static_cast<std::size_t>(m) * b + nn];
            if (p <= 0) continue;
            const double g = std::log(p / (hist.p_i[static_cast<std::size_t>(m)] *
                                           hist.p_j[static_cast<std::size_t>(nn)])) -
                             1.0;
            ghat[static_cast<std::size_t>(m) * b + nn] = g;
            dot += g * p;
        }
    const double z = hist.raw_joint_sum;
    for (int m = 0; m < b; ++m)
        for (int nn = 0; nn < b; ++nn) {
            auto& v = ghat[static_cast<std::size_t>(m) * b + nn];
            if (hist.p_ij[static_cast<std::size_t>(m) * b + nn] <= 0) {
                v = 0;
                continue;
            }
            v = upstream * (v - dot) / z;
        }

    auto grad_i = Volume3<T>::zeros(img_i.dims);
    auto grad_j = Volume3<T>::zeros(img_j.dims);
    const std::int64_t n = img_i.dims.voxels();
    std::vector<double> ki(static_cast<std::size_t>(b)), wi(static_cast<std::size_t>(b));
    std::vector<double> kj(static_cast<std::size_t>(b)), wj(static_cast<std::size_t>(b));
    for (std::int64_t k = 0; k < n; ++k) {
        const double iv = static_cast<double>(img_i.data[static_cast<std::size_t>(k)]);
        const double jv = static_cast<double>(img_j.data[static_cast<std::size_t>(k)]);
        for (int m = 0; m < b; ++m) {
            const double d_i = bin_center(m, b) - iv;
            const double d_j = bin_center(m, b) - jv;
            ki[static_cast<std::size_t>(m)] = kernel.kappa(d_i);
            wi[static_cast<std::size_t>(m)] = kernel.omega(d_i);
            kj[static_cast<std::size_t>(m)] = kernel.kappa(d_j);
            wj[static_cast<std::size_t>(m)] = kernel.omega(d_j);
        }
        double gi = 0, gj = 0;
        for (int m = 0; m < b; ++m) {
            const double* row = ghat.data() + static_cast<std::size_t>(m) * b;
            double acc_i = 0, acc_j = 0;
            for (int nn = 0; nn < b; ++nn) {
                acc_i += row[nn] * kj[static_cast<std::size_t>(nn)];
                acc_j += row[nn] * wj[static_cast<std::size_t>(nn)];
            }
            gi += wi[static_cast<std::size_t>(m)] * acc_i;
            gj += ki[static_cast<std::size_t>(m)] * acc_j;
        }
        grad_i.data[static_cast<std::size_t>(k)] = static_cast<T>(gi);
        grad_j.data[static_cast<std::size_t>(k)] = static_cast<T>(gj);
    }
    return {std::move(grad_i), std::move(grad_j)};
}

} // namespace detail

// Gradients of L w.r.t. both images given upstream = dL/dMI. Exact-forward
// path only.
template <typename T>
std::pair<Volume3<T>, Volume3<T>> mi_backward(double upstream, const Volume3<T>& img_i,
                                              const Volume3<T>& img_j,
                                              const JointHistogram& hist,
                                              const ParzenKernel& kernel) {
    if (static_cast<std::int64_t>(img_i.dims.voxels()) != hist.samples)
        throw std::invalid_argument("mi_backward: histogram sample count mismatch");
    return detail::mi_backward_impl(upstream, img_i, img_j, hist, kernel);
}

} // namespace voxreg
