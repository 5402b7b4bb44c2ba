#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "corrtime/geometry.hpp"

namespace corrtime {

// Timesteps are 1-based throughout the public API: a trajectory of length T
// has steps 1..T, and step t refers to positions[t - 1].
using Step = std::size_t;

enum class Shape { circle, square, triangle, rectangle };

std::string_view to_string(Shape s);
Shape shape_from_string(std::string_view s);

struct Goal {
    int id = 0;
    Vec3 position;
    Shape shape = Shape::circle;
    std::string color;
};

struct Trajectory {
    std::string id;
    double dt = 0.1;
    std::vector<Vec3> positions;
    int goal_id = -1;  // nominal goal the robot executes toward
    int legibility_level = 0;
    bool corrected = false;

    std::size_t length() const noexcept { return positions.size(); }
    const Vec3& at(Step t) const;  // 1-based, throws std::out_of_range

    // Throws std::invalid_argument when T < 2, dt <= 0 or a position is non-finite.
    void validate() const;
};

struct CorrectionEvent {
    Step t_c = 1;        // onset step
    Vec3 c_p;            // grasp position, equals x_{t_c}
    Vec3 c_p_prime;      // onset velocity applied by the human (m/s)
    Vec3 c_l;            // release position
    Step t_end = 1;      // step at which the correction ends (T_c)

    // Checks 1 <= t_c <= t_end <= T and c_p == x_{t_c}.
    void validate(const Trajectory& traj) const;
};

struct ReferenceState {
    Vec3 x_opt;
    Vec3 v_opt;
};

// Finite-difference velocity (x_t - x_{t-1}) / dt for t in [2, T]; step 1 copies step 2.
Vec3 velocity(const Trajectory& traj, Step t);
std::vector<Vec3> velocities(const Trajectory& traj);

// Sum of segment lengths between steps t_start and t_end (inclusive). Empty range -> 0.
double path_length(const Trajectory& traj, Step t_start, Step t_end);

struct PidGains {
    double kp = 4.0;
    double ki = 0.0;
    double kd = 2.0;
};

struct PidSettings {
    PidGains gains;
    double lookahead = 0.25;  // seconds
    double dt = 0.1;          // trajectory sampling period
    int substeps = 4;         // integration substeps per dt
};

// Integrates the PID-driven double integrator a = kp*e + ki*int(e) - kd*v from
// state (x, v) toward `goal` with RK4 substeps of dt/substeps and returns the
// state linearly interpolated `lookahead` seconds ahead.
// Throws std::domain_error for non-Hurwitz gains or a diverging integration.
ReferenceState pid_reference(const Vec3& x, const Vec3& v, const Vec3& goal,
                             const PidSettings& settings = {});

// Episode record: a pre-planned trajectory, the first correction (if any) and
// the goal the intervener actually wanted.
struct Episode {
    Trajectory trajectory;
    std::optional<CorrectionEvent> correction;
    int intended_goal_id = -1;
};

// JSONL trajectory files: one header line, then one record per line.
inline constexpr std::string_view kTrajectoryFormat = "corrtime.trajectories";
inline constexpr int kTrajectoryFormatVersion = 1;

std::string episode_to_json_line(const Episode& e);
Episode episode_from_json_line(std::string_view line);
void write_episodes_jsonl(std::ostream& os, const std::vector<Episode>& episodes);
std::vector<Episode> read_episodes_jsonl(std::istream& is);

}  // namespace corrtime
