#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "corrtime/matrix.hpp"
#include "corrtime/trajectory.hpp"

namespace corrtime {

// Column order of a feature matrix (T rows x 7 columns).
enum FeatureColumn : std::size_t {
    kExpectVelocity = 0,   // F1 cos(v_t, v_opt)
    kExpectPosition = 1,   // F2 |x_t - x_opt|
    kDirectness = 2,       // F3 cos(v_t, g - x_t)
    kVelocityConsistency = 3,  // F4 cos(v_t, v_{t-1})
    kLegibility = 4,       // F5
    kDistanceToGoal = 5,   // F6 |x_t - g|
    kOptimalityRatio = 6,  // F7
};
inline constexpr std::size_t kFeatureCount = 7;

std::string_view feature_name(std::size_t column);

// a.b / (|a||b|); 0 when either norm is below eps.
double cosine(const Vec3& a, const Vec3& b, double eps = 1e-9);

// Probability that the prefix x_1..x_t heads to `candidate` among `goal_set`
// (uniform prior, path-length cost, straight-line optimal completions).
// `candidate` must be a member of `goal_set`.
double prefix_goal_probability(const Trajectory& traj, Step t, const Vec3& candidate,
                               std::span<const Vec3> goal_set);

// sum_tau p[tau] * (T - tau) / sum_tau (T - tau) over tau = 1..p.size(); falls back
// to the last probability when every weight is zero.
double discounted_legibility(std::span<const double> prefix_probabilities, std::size_t total_steps);

// Discounted average of prefix_goal_probability over steps 1..t with weights T - tau.
double legibility(const Trajectory& traj, Step t, const Vec3& candidate,
                  std::span<const Vec3> goal_set);

// exp(-(L_t + d_t)) / exp(-(L_{t-1} + d_{t-1})) with L the executed path length and
// d the straight-line distance to `goal`. Equals 1 at t = 1.
double optimality_ratio(const Trajectory& traj, Step t, const Vec3& goal);

// Goal set used for legibility under a hypothesis: the hypothesis replaces the
// layout goal nearest to it.
std::vector<Vec3> legibility_goal_set(const Vec3& hypothesis, std::span<const Vec3> layout);

struct FeatureSettings {
    PidSettings pid;
};

// T x 7 feature matrix of `traj` with respect to `goal_hypothesis`.
Matrix featurize(const Trajectory& traj, const Vec3& goal_hypothesis, std::span<const Vec3> layout,
                 const FeatureSettings& settings = {});

// Long CSV dump: trajectory_id,t,F1..F7.
void write_features_csv_header(std::ostream& os);
void write_features_csv(std::ostream& os, std::string_view trajectory_id, const Matrix& features);

}  // namespace corrtime
