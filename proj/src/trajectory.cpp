#include "corrtime/trajectory.hpp"

#include <array>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace corrtime {

using nlohmann::json;

std::string_view to_string(Shape s) {
    switch (s) {
        case Shape::circle: return "circle";
        case Shape::square: return "square";
        case Shape::triangle: return "triangle";
        case Shape::rectangle: return "rectangle";
    }
    return "circle";
}

Shape shape_from_string(std::string_view s) {
    if (s == "circle") return Shape::circle;
    if (s == "square") return Shape::square;
    if (s == "triangle") return Shape::triangle;
    if (s == "rectangle") return Shape::rectangle;
    throw std::invalid_argument("unknown shape '" + std::string(s) + "'");
}

const Vec3& Trajectory::at(Step t) const {
    if (t < 1 || t > positions.size())
        throw std::out_of_range("trajectory step " + std::to_string(t) + " outside [1, " +
                                std::to_string(positions.size()) + "]");
    return positions[t - 1];
}

void Trajectory::validate() const {
    if (positions.size() < 2)
        throw std::invalid_argument("trajectory '" + id + "' needs at least 2 positions");
    if (!(dt > 0.0) || !std::isfinite(dt))
        throw std::invalid_argument("trajectory '" + id + "' has non-positive dt");
    for (const auto& p : positions)
        if (!is_finite(p)) throw std::invalid_argument("trajectory '" + id + "' has non-finite position");
}

void CorrectionEvent::validate(const Trajectory& traj) const {
    if (t_c < 1 || t_c > t_end || t_end > traj.length())
        throw std::invalid_argument("correction steps violate 1 <= t_c <= T_c <= T");
    if (!(c_p == traj.at(t_c)))
        throw std::invalid_argument("correction grasp position differs from x_{t_c}");
}

Vec3 velocity(const Trajectory& traj, Step t) {
    const std::size_t n = traj.length();
    if (n < 2) throw std::out_of_range("velocity: trajectory shorter than 2 steps");
    if (t < 1 || t > n) throw std::out_of_range("velocity: step " + std::to_string(t) + " out of range");
    if (t == 1) t = 2;
    return (traj.positions[t - 1] - traj.positions[t - 2]) / traj.dt;
}

std::vector<Vec3> velocities(const Trajectory& traj) {
    std::vector<Vec3> v(traj.length());
    for (Step t = 1; t <= traj.length(); ++t) v[t - 1] = velocity(traj, t);
    return v;
}

double path_length(const Trajectory& traj, Step t_start, Step t_end) {
    if (t_end <= t_start) return 0.0;
    if (t_start < 1 || t_end > traj.length())
        throw std::out_of_range("path_length: range outside trajectory");
    double total = 0.0;
    for (Step t = t_start; t < t_end; ++t) total += distance(traj.positions[t], traj.positions[t - 1]);
    return total;
}

namespace {

bool hurwitz(const PidGains& g) {
    // Closed loop per axis: s^3 + kd s^2 + kp s + ki (or s^2 + kd s + kp without integral).
    if (g.ki == 0.0) return g.kp > 0.0 && g.kd > 0.0;
    return g.kp > 0.0 && g.kd > 0.0 && g.ki > 0.0 && g.kd * g.kp > g.ki;
}

struct AxisState {
    double x, v, integral;
};

AxisState derivative(const AxisState& s, double goal, const PidGains& g) {
    const double e = goal - s.x;
    return {s.v, g.kp * e + g.ki * s.integral - g.kd * s.v, e};
}

AxisState rk4(const AxisState& s, double goal, const PidGains& g, double h) {
    auto add = [](const AxisState& a, const AxisState& d, double k) {
        return AxisState{a.x + k * d.x, a.v + k * d.v, a.integral + k * d.integral};
    };
    const AxisState k1 = derivative(s, goal, g);
    const AxisState k2 = derivative(add(s, k1, h / 2), goal, g);
    const AxisState k3 = derivative(add(s, k2, h / 2), goal, g);
    const AxisState k4 = derivative(add(s, k3, h), goal, g);
    return {s.x + h / 6 * (k1.x + 2 * k2.x + 2 * k3.x + k4.x),
            s.v + h / 6 * (k1.v + 2 * k2.v + 2 * k3.v + k4.v),
            s.integral + h / 6 * (k1.integral + 2 * k2.integral + 2 * k3.integral + k4.integral)};
}

}  // namespace

ReferenceState pid_reference(const Vec3& x, const Vec3& v, const Vec3& goal, const PidSettings& s) {
    if (!hurwitz(s.gains)) throw std::domain_error("pid_reference: gains give an unstable closed loop");
    if (!(s.dt > 0.0) || s.substeps < 1 || !(s.lookahead >= 0.0))
        throw std::invalid_argument("pid_reference: invalid timing settings");

    const double h = s.dt / s.substeps;
    const double steps_exact = s.lookahead / h;
    auto full = static_cast<long>(std::floor(steps_exact + 1e-9));
    double frac = steps_exact - static_cast<double>(full);
    if (frac < 1e-9) frac = 0.0;

    const double scale = distance(x, goal) + norm(v) * (s.lookahead + 1.0) + 1.0;
    ReferenceState out;
    for (int axis = 0; axis < 3; ++axis) {
        AxisState st{x[axis], v[axis], 0.0};
        for (long k = 0; k < full; ++k) {
            st = rk4(st, goal[axis], s.gains, h);
            if (!std::isfinite(st.x) || std::abs(st.x - goal[axis]) > 1e6 * scale)
                throw std::domain_error("pid_reference: integration diverged");
        }
        if (frac > 0.0) {
            const AxisState nx = rk4(st, goal[axis], s.gains, h);
            st = {st.x + frac * (nx.x - st.x), st.v + frac * (nx.v - st.v), 0.0};
        }
        out.x_opt[axis] = st.x;
        out.v_opt[axis] = st.v;
    }
    return out;
}

namespace {

json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

Vec3 vec_from_json(const json& j) {
    if (!j.is_array() || j.size() != 3) throw std::invalid_argument("expected a 3-vector");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

std::string episode_to_json_line(const Episode& e) {
    const auto& tr = e.trajectory;
    json positions = json::array();
    for (const auto& p : tr.positions) positions.push_back(vec_json(p));
    json j = {{"id", tr.id},
              {"dt", tr.dt},
              {"positions", std::move(positions)},
              {"goal_id", tr.goal_id},
              {"legibility_level", tr.legibility_level},
              {"intended_goal_id", e.intended_goal_id}};
    if (e.correction) {
        const auto& c = *e.correction;
        j["correction"] = {{"t_c", c.t_c},
                           {"c_p", vec_json(c.c_p)},
                           {"c_p_prime", vec_json(c.c_p_prime)},
                           {"c_l", vec_json(c.c_l)},
                           {"T_c", c.t_end}};
    } else {
        j["correction"] = nullptr;
    }
    return j.dump();
}

Episode episode_from_json_line(std::string_view line) {
    const json j = json::parse(line);
    Episode e;
    auto& tr = e.trajectory;
    tr.id = j.at("id").get<std::string>();
    tr.dt = j.at("dt").get<double>();
    for (const auto& p : j.at("positions")) tr.positions.push_back(vec_from_json(p));
    tr.goal_id = j.at("goal_id").get<int>();
    tr.legibility_level = j.at("legibility_level").get<int>();
    e.intended_goal_id = j.value("intended_goal_id", tr.goal_id);
    const auto& c = j.at("correction");
    if (!c.is_null()) {
        CorrectionEvent ev;
        ev.t_c = c.at("t_c").get<Step>();
        ev.c_p = vec_from_json(c.at("c_p"));
        ev.c_p_prime = vec_from_json(c.at("c_p_prime"));
        ev.c_l = vec_from_json(c.at("c_l"));
        ev.t_end = c.at("T_c").get<Step>();
        e.correction = ev;
    }
    tr.corrected = e.correction.has_value();
    tr.validate();
    if (e.correction) e.correction->validate(tr);
    return e;
}

void write_episodes_jsonl(std::ostream& os, const std::vector<Episode>& episodes) {
    os << json{{"format", kTrajectoryFormat}, {"version", kTrajectoryFormatVersion},
               {"count", episodes.size()}}
              .dump()
       << '\n';
    for (const auto& e : episodes) os << episode_to_json_line(e) << '\n';
}

std::vector<Episode> read_episodes_jsonl(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("trajectory file is empty");
    const json header = json::parse(line);
    if (header.value("format", "") != kTrajectoryFormat)
        throw std::runtime_error("not a corrtime trajectory file");
    if (header.value("version", 0) != kTrajectoryFormatVersion)
        throw std::runtime_error("unsupported trajectory file version");
    std::vector<Episode> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.push_back(episode_from_json_line(line));
    }
    return out;
}

}  // namespace corrtime
