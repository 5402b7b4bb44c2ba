#include <cmath>
#include <numbers>
#include <sstream>

#include "corrtime/rng.hpp"
#include "corrtime/trajectory.hpp"
#include "doctest.h"

using namespace corrtime;

namespace {

Trajectory make_traj(std::vector<Vec3> pts, double dt = 0.1) {
    Trajectory t;
    t.id = "t";
    t.dt = dt;
    t.positions = std::move(pts);
    return t;
}

Vec3 random_vec(Rng& rng, double scale = 1.0) {
    return {rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale)};
}

// Rodrigues rotation about a unit axis.
Vec3 rotate(const Vec3& p, const Vec3& axis, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    return p * c + cross(axis, p) * s + axis * (dot(axis, p) * (1.0 - c));
}

// Closed form for e'' = -k^2 e - 2k e' (critically damped PD loop).
double critical_position(double e0, double v0, double k, double t) {
    return (e0 + (v0 + k * e0) * t) * std::exp(-k * t);
}

double critical_velocity(double e0, double v0, double k, double t) {
    const double b = v0 + k * e0;
    return (b - k * (e0 + b * t)) * std::exp(-k * t);
}

}  // namespace

TEST_CASE("trajectory validation and 1-based access") {
    auto t = make_traj({{0, 0, 0}, {1, 0, 0}});
    CHECK_NOTHROW(t.validate());
    CHECK(t.at(2).x == 1.0);
    CHECK_THROWS_AS(t.at(0), std::out_of_range);
    CHECK_THROWS_AS(t.at(3), std::out_of_range);
    CHECK_THROWS_AS(make_traj({{0, 0, 0}}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(make_traj({{0, 0, 0}, {1, 0, 0}}, 0.0).validate(), std::invalid_argument);
    CHECK_THROWS_AS(make_traj({{0, 0, 0}, {NAN, 0, 0}}).validate(), std::invalid_argument);
}

TEST_CASE("shape names round-trip") {
    for (auto s : {Shape::circle, Shape::square, Shape::triangle, Shape::rectangle})
        CHECK(shape_from_string(to_string(s)) == s);
    CHECK_THROWS(shape_from_string("hexagon"));
}

TEST_CASE("correction event invariants") {
    const auto t = make_traj({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}});
    CorrectionEvent c;
    c.t_c = 2;
    c.c_p = {1, 0, 0};
    c.t_end = 3;
    CHECK_NOTHROW(c.validate(t));
    c.c_p = {1, 0, 1e-9};
    CHECK_THROWS_AS(c.validate(t), std::invalid_argument);
    c.c_p = {1, 0, 0};
    c.t_end = 4;
    CHECK_THROWS_AS(c.validate(t), std::invalid_argument);
    c.t_end = 1;
    CHECK_THROWS_AS(c.validate(t), std::invalid_argument);
}

TEST_CASE("velocity of static and uniform motion") {
    const auto still = make_traj(std::vector<Vec3>(5, Vec3{0.2, 0.1, 0.3}));
    for (Step s = 1; s <= 5; ++s) CHECK(velocity(still, s) == Vec3{});

    std::vector<Vec3> pts;
    for (int i = 0; i < 6; ++i) pts.push_back({0.01 * i, 0, 0});
    const auto line = make_traj(pts);
    for (Step s = 1; s <= 6; ++s) {
        CHECK(velocity(line, s).x == doctest::Approx(0.1).epsilon(1e-12));
        CHECK(velocity(line, s).y == 0.0);
    }
    CHECK(velocity(line, 1) == velocity(line, 2));
    CHECK(velocities(line).size() == 6);
    CHECK_THROWS_AS(velocity(line, 7), std::out_of_range);
}

TEST_CASE("velocity tracks the analytic derivative of a sine path") {
    const double dt = 0.01;
    std::vector<Vec3> pts;
    for (int i = 0; i < 200; ++i) pts.push_back({std::sin(i * dt), 0.5 * i * dt, 0});
    const auto t = make_traj(pts, dt);
    for (Step s = 2; s <= 200; ++s) {
        // Backward difference approximates the derivative at the interval midpoint.
        const double mid = (static_cast<double>(s) - 1.5) * dt;
        CHECK(std::abs(velocity(t, s).x - std::cos(mid)) < dt * dt);
        CHECK(std::abs(velocity(t, s).x - std::cos((s - 1.0) * dt)) < dt);
        CHECK(velocity(t, s).y == doctest::Approx(0.5));
    }
}

TEST_CASE("reversed trajectory has negated reflected velocity") {
    Rng rng(2);
    std::vector<Vec3> pts;
    for (int i = 0; i < 12; ++i) pts.push_back(random_vec(rng));
    const auto fwd = make_traj(pts);
    const auto rev = make_traj(std::vector<Vec3>(pts.rbegin(), pts.rend()));
    const Step T = 12;
    for (Step s = 2; s <= T; ++s) {
        const Vec3 a = velocity(fwd, s);
        const Vec3 b = velocity(rev, T - s + 2);
        CHECK(a.x == doctest::Approx(-b.x).epsilon(1e-12));
        CHECK(a.y == doctest::Approx(-b.y).epsilon(1e-12));
        CHECK(a.z == doctest::Approx(-b.z).epsilon(1e-12));
    }
}

TEST_CASE("path length of simple shapes") {
    CHECK(path_length(make_traj({{1, 2, 3}, {4, 5, 6}}), 1, 1) == 0.0);
    std::vector<Vec3> pts;
    for (int i = 0; i < 10; ++i) pts.push_back({0.01 * i, 0, 0});
    CHECK(path_length(make_traj(pts), 1, 10) == doctest::Approx(0.09).epsilon(1e-12));
    CHECK(path_length(make_traj(pts), 5, 3) == 0.0);

    // Quarter circle of radius 0.3 sampled at 100 points.
    std::vector<Vec3> arc;
    for (int i = 0; i < 100; ++i) {
        const double th = 0.5 * std::numbers::pi * i / 99.0;
        arc.push_back({0.3 * std::cos(th), 0.3 * std::sin(th), 0});
    }
    const double exact = 0.5 * std::numbers::pi * 0.3;
    CHECK(std::abs(path_length(make_traj(arc), 1, 100) - exact) / exact < 0.01);
}

TEST_CASE("path length is additive and rotation invariant") {
    Rng rng(4);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t n = 2 + rng.below(30);
        std::vector<Vec3> pts;
        for (std::size_t i = 0; i < n; ++i) pts.push_back(random_vec(rng));
        const auto t = make_traj(pts);
        const Step mid = 1 + rng.below(n);
        CHECK(path_length(t, 1, mid) + path_length(t, mid, n) == doctest::Approx(path_length(t, 1, n)).epsilon(1e-12));

        Vec3 axis = random_vec(rng);
        axis = axis / norm(axis);
        const double angle = rng.uniform(0.0, 6.28);
        std::vector<Vec3> rot;
        for (const auto& p : pts) rot.push_back(rotate(p, axis, angle));
        CHECK(path_length(make_traj(rot), 1, n) == doctest::Approx(path_length(t, 1, n)).epsilon(1e-12));
    }
}

TEST_CASE("pid reference stays at equilibrium") {
    const Vec3 g{0.1, -0.2, 0.05};
    const auto r = pid_reference(g, {}, g);
    CHECK(r.x_opt == g);
    CHECK(r.v_opt == Vec3{});
}

TEST_CASE("pid reference matches the critically damped closed form") {
    PidSettings s;
    const double k = 3.0;
    s.gains = {k * k, 0.0, 2.0 * k};
    const Vec3 g{0.4, -0.1, 0.0};
    const Vec3 x{0.1, 0.2, 0.3}, v{0.5, -0.2, 0.0};
    for (double look : {0.25, 0.1, 0.33}) {
        s.lookahead = look;
        const auto r = pid_reference(x, v, g, s);
        for (int a = 0; a < 3; ++a) {
            const double e0 = x[a] - g[a];
            CHECK(std::abs(r.x_opt[a] - (g[a] + critical_position(e0, v[a], k, look))) < 1e-4);
            CHECK(std::abs(r.v_opt[a] - critical_velocity(e0, v[a], k, look)) < 1e-3);
        }
    }
}

TEST_CASE("pid reference is translation equivariant and mirror symmetric") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const Vec3 x = random_vec(rng, 0.5), v = random_vec(rng, 0.3), g = random_vec(rng, 0.5);
        const Vec3 shift = random_vec(rng, 2.0);
        const auto a = pid_reference(x, v, g);
        const auto b = pid_reference(x + shift, v, g + shift);
        for (int i = 0; i < 3; ++i) {
            CHECK(b.x_opt[i] - shift[i] == doctest::Approx(a.x_opt[i]).epsilon(1e-9));
            CHECK(b.v_opt[i] == doctest::Approx(a.v_opt[i]).epsilon(1e-9));
        }
        // Mirror the start about the goal.
        const auto m = pid_reference(g * 2.0 - x, -v, g);
        for (int i = 0; i < 3; ++i) {
            CHECK(m.x_opt[i] - g[i] == doctest::Approx(g[i] - a.x_opt[i]).epsilon(1e-9));
            CHECK(m.v_opt[i] == doctest::Approx(-a.v_opt[i]).epsilon(1e-9));
        }
    }
}

TEST_CASE("pid reference rejects unstable gains") {
    PidSettings s;
    s.gains = {4.0, 0.0, 0.0};
    CHECK_THROWS_AS(pid_reference({0, 0, 0}, {}, {1, 0, 0}, s), std::domain_error);
    s.gains = {-1.0, 0.0, 2.0};
    CHECK_THROWS_AS(pid_reference({0, 0, 0}, {}, {1, 0, 0}, s), std::domain_error);
    s.gains = {1.0, 5.0, 1.0};
    CHECK_THROWS_AS(pid_reference({0, 0, 0}, {}, {1, 0, 0}, s), std::domain_error);
}

TEST_CASE("episodes round-trip through JSONL exactly") {
    Rng rng(8);
    std::vector<Episode> eps(3);
    for (std::size_t i = 0; i < eps.size(); ++i) {
        auto& e = eps[i];
        e.trajectory.id = "ep" + std::to_string(i);
        for (int k = 0; k < 5; ++k) e.trajectory.positions.push_back(random_vec(rng));
        e.trajectory.goal_id = static_cast<int>(i);
        e.trajectory.legibility_level = static_cast<int>(i % 3);
        e.intended_goal_id = 7;
        if (i != 1) {
            CorrectionEvent c;
            c.t_c = 2;
            c.c_p = e.trajectory.positions[1];
            c.c_p_prime = random_vec(rng);
            c.c_l = random_vec(rng);
            c.t_end = 4;
            e.correction = c;
            e.trajectory.corrected = true;
        }
    }
    std::stringstream ss;
    write_episodes_jsonl(ss, eps);
    const auto back = read_episodes_jsonl(ss);
    REQUIRE(back.size() == eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        CHECK(back[i].trajectory.positions == eps[i].trajectory.positions);
        CHECK(back[i].trajectory.id == eps[i].trajectory.id);
        CHECK(back[i].intended_goal_id == 7);
        CHECK(back[i].correction.has_value() == eps[i].correction.has_value());
        if (eps[i].correction) {
            CHECK(back[i].correction->c_l == eps[i].correction->c_l);
            CHECK(back[i].correction->t_end == 4);
        }
        CHECK(episode_to_json_line(back[i]) == episode_to_json_line(eps[i]));
    }
}

TEST_CASE("jsonl reader rejects a wrong header") {
    std::stringstream ss("{\"format\":\"other\",\"version\":1,\"count\":0}\n");
    CHECK_THROWS(read_episodes_jsonl(ss));
}
