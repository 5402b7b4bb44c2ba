#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace corrtime {

// Raised when a loss or gradient stops being finite during training.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamSettings {
    double learning_rate = 1e-3;
    double decay_steps = 1000.0;
    double decay_rate = 0.9;
    double clip_norm = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    explicit AdamState(std::size_t n, AdamSettings s = {})
        : settings(s), first_moment(n, 0.0), second_moment(n, 0.0) {}

    AdamSettings settings;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::uint64_t step = 0;

    // Exponentially decayed rate for the next step: lr * rate^(step / decay_steps).
    double current_learning_rate() const;
};

// Global L2 norm of a gradient vector.
double global_norm(std::span<const double> grads);

// Clips `grads` to the state's clip norm, then applies one bias-corrected Adam
// update. Throws DivergenceError (leaving params and state untouched) if any
// gradient is non-finite. Returns the pre-clipping gradient norm.
double adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

// Loss evaluated at `point`; writes the analytic gradient into `grad` unless it is empty.
using LossWithGradient = std::function<double(std::span<const double> point, std::span<double> grad)>;

// Central finite-difference check of an analytic gradient. Returns the max over
// coordinates of |analytic - numeric| / max(1, |analytic| + |numeric|).
// `coordinates` optionally restricts the check to a subset of indices.
double grad_check(const LossWithGradient& loss, std::span<const double> point, double h = 1e-5,
                  std::span<const std::size_t> coordinates = {});

}  // namespace corrtime
