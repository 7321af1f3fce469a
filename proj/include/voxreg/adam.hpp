#pragma once

// Bias-corrected Adam over flat parameter buffers.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>

#include "voxreg/memory.hpp"

namespace voxreg {

template <typename T = double>
struct AdamState {
    tracked_vector<T> m1, m2;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState zeros(std::size_t n) {
        AdamState s;
        s.m1.assign(n, T(0));
        s.m2.assign(n, T(0));
        return s;
    }
};

template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState<T>& state, double lr) {
    if (param.size() != grad.size() || param.size() != state.m1.size() ||
        param.size() != state.m2.size())
        throw std::invalid_argument("adam_step: shape mismatch");
    state.step += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        const double m = b1 * static_cast<double>(state.m1[i]) + (1.0 - b1) * g;
        const double v = b2 * static_cast<double>(state.m2[i]) + (1.0 - b2) * g * g;
        state.m1[i] = static_cast<T>(m);
        state.m2[i] = static_cast<T>(v);
        const double mhat = m / c1;
        const double vhat = v / c2;
        param[i] = static_cast<T>(static_cast<double>(param[i]) -
                                  lr * mhat / (std::sqrt(vhat) + state.eps));
    }
}

} // namespace voxreg
