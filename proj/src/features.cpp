#include "corrtime/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace corrtime {

std::string_view feature_name(std::size_t column) {
    static constexpr std::string_view names[kFeatureCount] = {
        "expect_align_vel", "expect_align_pos", "directness", "velocity_consistency",
        "legibility",       "distance_to_goal", "optimality_ratio"};
    if (column >= kFeatureCount) throw std::out_of_range("feature_name: column out of range");
    return names[column];
}

double cosine(const Vec3& a, const Vec3& b, double eps) {
    const double na = norm(a);
    const double nb = norm(b);
    if (na < eps || nb < eps) return 0.0;
    return std::clamp(dot(a, b) / std::max(na * nb, eps), -1.0, 1.0);
}

namespace {

// Softmax probability of goal index `which` given scores; uniform if degenerate.
double normalized_probability(const std::vector<double>& scores, std::size_t which) {
    const double mx = *std::max_element(scores.begin(), scores.end());
    if (!std::isfinite(mx)) return 1.0 / static_cast<double>(scores.size());
    double z = 0.0;
    for (double s : scores) z += std::exp(s - mx);
    if (!(z > 0.0) || !std::isfinite(z)) return 1.0 / static_cast<double>(scores.size());
    return std::exp(scores[which] - mx) / z;
}

std::size_t index_in_set(const Vec3& candidate, std::span<const Vec3> goal_set) {
    for (std::size_t i = 0; i < goal_set.size(); ++i)
        if (goal_set[i] == candidate) return i;
    throw std::invalid_argument("candidate goal is not a member of the goal set");
}

// Scores -(L(prefix) + |x_t - g|) + |S - g| for each goal.
void prefix_scores(const Vec3& start, const Vec3& x_t, double prefix_len,
                   std::span<const Vec3> goal_set, std::vector<double>& out) {
    out.resize(goal_set.size());
    for (std::size_t i = 0; i < goal_set.size(); ++i)
        out[i] = -(prefix_len + distance(x_t, goal_set[i])) + distance(start, goal_set[i]);
}

}  // namespace

double prefix_goal_probability(const Trajectory& traj, Step t, const Vec3& candidate,
                               std::span<const Vec3> goal_set) {
    if (goal_set.empty()) throw std::invalid_argument("prefix_goal_probability: empty goal set");
    if (t < 1 || t > traj.length()) throw std::out_of_range("prefix_goal_probability: step out of range");
    const std::size_t which = index_in_set(candidate, goal_set);
    std::vector<double> scores;
    prefix_scores(traj.at(1), traj.at(t), path_length(traj, 1, t), goal_set, scores);
    return normalized_probability(scores, which);
}

double discounted_legibility(std::span<const double> p, std::size_t total_steps) {
    if (p.empty()) throw std::invalid_argument("discounted_legibility: no probabilities");
    if (p.size() > total_steps) throw std::invalid_argument("discounted_legibility: prefix longer than trajectory");
    const double total = static_cast<double>(total_steps);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double gamma = total - static_cast<double>(i + 1);
        num += p[i] * gamma;
        den += gamma;
    }
    return den > 0.0 ? num / den : p.back();
}

double legibility(const Trajectory& traj, Step t, const Vec3& candidate,
                  std::span<const Vec3> goal_set) {
    if (t < 1 || t > traj.length()) throw std::out_of_range("legibility: step out of range");
    std::vector<double> p(t);
    for (Step tau = 1; tau <= t; ++tau) p[tau - 1] = prefix_goal_probability(traj, tau, candidate, goal_set);
    return discounted_legibility(p, traj.length());
}

double optimality_ratio(const Trajectory& traj, Step t, const Vec3& goal) {
    if (t < 1 || t > traj.length()) throw std::out_of_range("optimality_ratio: step out of range");
    if (t == 1) return 1.0;
    const Vec3& prev = traj.at(t - 1);
    const Vec3& cur = traj.at(t);
    // Executed prefix lengths differ by exactly the last segment.
    return std::exp(-distance(cur, prev) - distance(cur, goal) + distance(prev, goal));
}

std::vector<Vec3> legibility_goal_set(const Vec3& hypothesis, std::span<const Vec3> layout) {
    std::vector<Vec3> set{hypothesis};
    if (layout.empty()) return set;
    std::size_t nearest = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const double d = distance(layout[i], hypothesis);
        if (d < best) {
            best = d;
            nearest = i;
        }
    }
    for (std::size_t i = 0; i < layout.size(); ++i)
        if (i != nearest) set.push_back(layout[i]);
    return set;
}

Matrix featurize(const Trajectory& traj, const Vec3& goal, std::span<const Vec3> layout,
                 const FeatureSettings& settings) {
    traj.validate();
    if (layout.empty()) throw std::invalid_argument("featurize: layout has no goals");
    const std::size_t n = traj.length();
    PidSettings pid = settings.pid;
    pid.dt = traj.dt;

    const std::vector<Vec3> vel = velocities(traj);
    const std::vector<Vec3> goal_set = legibility_goal_set(goal, layout);
    const Vec3& start = traj.positions.front();

    Matrix f(n, kFeatureCount);
    std::vector<double> scores;
    double prefix_len = 0.0;
    double leg_num = 0.0, leg_den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3& x = traj.positions[i];
        const Vec3& v = vel[i];
        if (i > 0) prefix_len += distance(x, traj.positions[i - 1]);

        const ReferenceState ref = pid_reference(x, v, goal, pid);
        f(i, kExpectVelocity) = cosine(v, ref.v_opt);
        f(i, kExpectPosition) = distance(x, ref.x_opt);
        f(i, kDirectness) = cosine(v, goal - x);
        f(i, kVelocityConsistency) = cosine(v, i > 0 ? vel[i - 1] : v);

        prefix_scores(start, x, prefix_len, goal_set, scores);
        const double gamma = static_cast<double>(n) - static_cast<double>(i + 1);
        leg_num += normalized_probability(scores, 0) * gamma;
        leg_den += gamma;
        f(i, kLegibility) = leg_den > 0.0 ? leg_num / leg_den : normalized_probability(scores, 0);

        f(i, kDistanceToGoal) = distance(x, goal);
        f(i, kOptimalityRatio) =
            i == 0 ? 1.0
                   : std::exp(-distance(x, traj.positions[i - 1]) - distance(x, goal) +
                              distance(traj.positions[i - 1], goal));
    }
    return f;
}

void write_features_csv_header(std::ostream& os) {
    os << "trajectory_id,t";
    for (std::size_t k = 0; k < kFeatureCount; ++k) os << ',' << feature_name(k);
    os << '\n';
}

void write_features_csv(std::ostream& os, std::string_view trajectory_id, const Matrix& features) {
    const auto old_precision = os.precision(17);
    for (std::size_t r = 0; r < features.rows(); ++r) {
        os << trajectory_id << ',' << (r + 1);
        for (std::size_t c = 0; c < features.cols(); ++c) os << ',' << features(r, c);
        os << '\n';
    }
    os.precision(old_precision);
}

}  // namespace corrtime
