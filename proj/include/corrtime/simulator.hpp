#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corrtime/features.hpp"
#include "corrtime/geometry.hpp"
#include "corrtime/inference.hpp"
#include "corrtime/rng.hpp"
#include "corrtime/trajectory.hpp"

namespace corrtime {

// Four shapes (rows) by four colored targets (columns) on the z = 0 plane.
struct BoardLayout {
    std::vector<Goal> goals;
    Vec3 origin;

    static BoardLayout standard();

    std::vector<Vec3> positions() const;
    const Goal& goal(int id) const;
    const Goal& find(Shape shape, std::string_view color) const;
    // Pairwise separation >= 8 cm and every target inside `grid`.
    void validate(const GridSpec& grid) const;
};

// One squashed hazard input: weight * tanh((F[feature] - center) / scale).
struct HazardTerm {
    std::size_t feature = 0;
    double weight = 0.0;
    double center = 0.0;
    double scale = 1.0;
};

// Simulated intervener. Per-step hazard
//   h_t = sigmoid((sum_k term_k(F_t) + bias) / temperature)
// over features computed against the intended goal.
struct IntervenerProfile {
    std::vector<HazardTerm> terms;
    double bias = 0.0;
    double temperature = 1.0;
    double reaction_delay_mean = 0.4;  // seconds
    double reaction_delay_std = 0.1;
    double grasp_angle_noise_deg = 15.0;  // angular noise on c_p'
    double grasp_speed_gain = 1.0;        // |c_p'| = gain * distance to goal (1/s)
    double grasp_speed_noise = 0.2;       // relative
    double release_noise_std = 0.015;     // isotropic release scatter around the intended goal (m)
    double correction_duration = 1.5;     // seconds until T_c

    void validate() const;
    double hazard(std::span<const double> feature_row) const;
};

struct SimulationSettings {
    std::size_t min_length = 60;
    std::size_t max_length = 140;
    double dt = 0.1;
    double wrong_goal_rate = 0.2;   // aims at another color of the same shape
    double offset_goal_rate = 0.2;  // aims 3-6 cm off the intended target
    double offset_min = 0.03;
    double offset_max = 0.06;
    std::array<double, 3> bulge_by_legibility{0.0, 0.04, 0.08};
    Vec3 start_mean{0.35, 0.0, 0.25};
    Vec3 start_spread{0.03, 0.15, 0.03};  // half-widths of uniform start jitter
    double tracking_kp = 400.0;
    double tracking_kd = 40.0;

    void validate() const;
};

// Planar release scatter around a target, per shape.
struct PlanarComponent {
    double weight = 1.0;
    double dx = 0.0, dy = 0.0;         // offset from the target (m)
    double sxx = 0.0, sxy = 0.0, syy = 0.0;  // covariance (m^2)
};

struct GroundTruthGoalDistribution {
    Shape shape = Shape::circle;
    int target_id = 0;
    Vec3 center;
    std::vector<PlanarComponent> components;

    double density(double x, double y) const;
    // Release sample on the target plane.
    Vec3 sample(Rng& rng) const;
    // Cell masses normalized over the grid.
    std::vector<double> discretize(const GoalGrid& grid) const;
};

// Fixed per-shape mixture constants (circle tightest, rectangle elongated along y).
std::vector<PlanarComponent> shape_release_components(Shape shape);

GroundTruthGoalDistribution ground_truth_distribution(Shape shape, int target_id, const BoardLayout& layout);

struct SimulatedEpisode {
    Episode episode;
    Vec3 nominal_goal;
    bool wrong_goal = false;
    bool offset_goal = false;
};

SimulatedEpisode gen_episode(const BoardLayout& layout, const IntervenerProfile& profile,
                             const SimulationSettings& settings, std::uint64_t seed,
                             const std::string& id = "ep0");

// Completion fraction t_c / T of a corrected episode.
std::optional<double> completion_fraction(const Episode& e);

inline constexpr std::array<double, 4> kPercentileSets{0.7, 0.8, 0.9, 1.0};

// True for corrected episodes whose completion fraction is at most `percentile`.
bool in_percentile_set(const Episode& e, double percentile);

struct Dataset {
    BoardLayout layout;
    IntervenerProfile profile;
    SimulationSettings settings;
    std::uint64_t seed = 0;
    std::vector<Episode> episodes;
    std::size_t corrected_count() const;
};

// Requires n >= 50 and at least 10 corrected episodes.
Dataset gen_dataset(const BoardLayout& layout, const IntervenerProfile& profile,
                    const SimulationSettings& settings, std::size_t n, std::uint64_t seed,
                    std::size_t workers = 1);

struct SplitFractions {
    double train = 0.6;
    double val = 0.1;
};

// Indices into Dataset::episodes. Corrected episodes of the percentile set are
// split 60/10/30; each part receives as many uncorrected episodes as corrected
// ones (while they last).
struct DatasetSplit {
    std::vector<std::size_t> train, val, test;
};

DatasetSplit split_dataset(const Dataset& dataset, double percentile, std::uint64_t split_seed,
                           const SplitFractions& fractions = {});

}  // namespace corrtime
