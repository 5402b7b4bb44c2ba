#include "corrtime/optim.hpp"

#include <algorithm>
#include <cmath>

namespace corrtime {

double AdamState::current_learning_rate() const {
    return settings.learning_rate *
           std::pow(settings.decay_rate, static_cast<double>(step) / settings.decay_steps);
}

double global_norm(std::span<const double> grads) {
    double sum = 0.0;
    for (double g : grads) sum += g * g;
    return std::sqrt(sum);
}

double adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size())
        throw std::invalid_argument("adam_step: parameter/gradient/state size mismatch");
    const double norm = global_norm(grads);
    if (!std::isfinite(norm))
        throw DivergenceError("adam_step: non-finite gradient at step " + std::to_string(state.step));

    const auto& s = state.settings;
    const double scale = (s.clip_norm > 0.0 && norm > s.clip_norm) ? s.clip_norm / norm : 1.0;
    const double lr = state.current_learning_rate();
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(s.beta1, t);
    const double bc2 = 1.0 - std::pow(s.beta2, t);

    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] * scale;
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = s.beta1 * m + (1.0 - s.beta1) * g;
        v = s.beta2 * v + (1.0 - s.beta2) * g * g;
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + s.epsilon);
    }
    ++state.step;
    return norm;
}

double grad_check(const LossWithGradient& loss, std::span<const double> point, double h,
                  std::span<const std::size_t> coordinates) {
    std::vector<double> x(point.begin(), point.end());
    std::vector<double> analytic(x.size(), 0.0);
    const double f0 = loss(x, analytic);
    if (!std::isfinite(f0)) throw DivergenceError("grad_check: non-finite loss at point");

    std::vector<std::size_t> all;
    if (coordinates.empty()) {
        all.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) all[i] = i;
        coordinates = all;
    }

    double worst = 0.0;
    for (std::size_t i : coordinates) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = loss(x, {});
        x[i] = orig - h;
        const double fm = loss(x, {});
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw DivergenceError("grad_check: non-finite loss at coordinate " + std::to_string(i));
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) /
                           std::max(1.0, std::abs(analytic[i]) + std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace corrtime
