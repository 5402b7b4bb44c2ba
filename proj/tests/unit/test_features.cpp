#include <cmath>
#include <sstream>

#include "corrtime/features.hpp"
#include "corrtime/rng.hpp"
#include "doctest.h"

using namespace corrtime;

namespace {

Trajectory make_traj(std::vector<Vec3> pts) {
    Trajectory t;
    t.id = "f";
    t.positions = std::move(pts);
    return t;
}

Trajectory line(const Vec3& from, const Vec3& to, std::size_t n) {
    std::vector<Vec3> pts;
    for (std::size_t i = 0; i < n; ++i) pts.push_back(from + (to - from) * (static_cast<double>(i) / (n - 1)));
    return make_traj(pts);
}

Trajectory random_walk(Rng& rng, std::size_t n) {
    std::vector<Vec3> pts{{0.35, 0.0, 0.25}};
    for (std::size_t i = 1; i < n; ++i)
        pts.push_back(pts.back() + Vec3{rng.uniform(-0.03, 0.01), rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.005)});
    return make_traj(pts);
}

// Prefix goal probability from scratch: exp(-C(S->Q) - C*(Q->G)) / exp(-C*(S->G)), normalized.
double prefix_oracle(const std::vector<Vec3>& pts, std::size_t t, std::size_t which, const std::vector<Vec3>& goals) {
    double prefix = 0.0;
    for (std::size_t i = 1; i < t; ++i) prefix += norm(pts[i] - pts[i - 1]);
    std::vector<double> w;
    for (const auto& g : goals) w.push_back(std::exp(-prefix - norm(g - pts[t - 1]) + norm(g - pts[0])));
    double z = 0.0;
    for (double x : w) z += x;
    return w[which] / z;
}

double legibility_oracle(const std::vector<Vec3>& pts, std::size_t t, const std::vector<Vec3>& goals) {
    const double T = static_cast<double>(pts.size());
    double num = 0.0, den = 0.0;
    for (std::size_t tau = 1; tau <= t; ++tau) {
        num += prefix_oracle(pts, tau, 0, goals) * (T - tau);
        den += T - tau;
    }
    return den > 0.0 ? num / den : prefix_oracle(pts, t, 0, goals);
}

const std::vector<Vec3> kLayout{{-0.12, -0.18, 0}, {-0.04, 0.06, 0}, {0.04, -0.06, 0}, {0.12, 0.18, 0}};

}  // namespace

TEST_CASE("cosine conventions") {
    const Vec3 v{0.3, -0.2, 0.1};
    CHECK(cosine(v, v) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine(v, -v) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(cosine({}, v) == 0.0);
    CHECK(cosine(v, {1e-12, 0, 0}) == 0.0);
    CHECK(cosine({1, 0, 0}, {0, 1, 0}) == 0.0);
}

TEST_CASE("feature names cover every column") {
    CHECK(feature_name(kLegibility) == "legibility");
    CHECK(feature_name(kOptimalityRatio) == "optimality_ratio");
    CHECK_THROWS_AS(feature_name(kFeatureCount), std::out_of_range);
}

TEST_CASE("prefix goal probability: forced, symmetric and hand-evaluated cases") {
    const auto tr = line({0, 0, 0}, {1, 0, 0}, 11);
    const std::vector<Vec3> single{{1, 0, 0}};
    for (Step t = 1; t <= 11; ++t) CHECK(prefix_goal_probability(tr, t, single[0], single) == 1.0);

    const std::vector<Vec3> mirror{{1.2, 0.3, 0}, {1.2, -0.3, 0}};
    for (Step t = 1; t <= 11; ++t) CHECK(prefix_goal_probability(tr, t, mirror[0], mirror) == doctest::Approx(0.5).epsilon(1e-12));

    const std::vector<Vec3> ab{{1, 0, 0}, {0.5, 0.5, 0}};
    double prev = 0.0;
    for (Step t = 1; t <= 11; ++t) {
        const double p = prefix_goal_probability(tr, t, ab[0], ab);
        if (t > 1) CHECK(p > prev);
        prev = p;
    }
    for (Step t : {2u, 5u, 10u})
        CHECK(prefix_goal_probability(tr, t, ab[0], ab) == doctest::Approx(prefix_oracle(tr.positions, t, 0, ab)).epsilon(1e-12));
    CHECK_THROWS_AS(prefix_goal_probability(tr, 1, {9, 9, 9}, ab), std::invalid_argument);
}

TEST_CASE("legibility: single goal, symmetric pair and the three-step example") {
    const auto tr = line({0, 0, 0}, {1, 0, 0}, 15);
    const std::vector<Vec3> single{{1, 0, 0}};
    const std::vector<Vec3> mirror{{1.2, 0.3, 0}, {1.2, -0.3, 0}};
    for (Step t = 1; t <= 15; ++t) {
        CHECK(legibility(tr, t, single[0], single) == 1.0);
        CHECK(std::abs(legibility(tr, t, mirror[0], mirror) - 0.5) < 1e-6);
    }
    const std::vector<double> p{0.5, 0.6, 0.8};
    CHECK(std::abs(discounted_legibility(p, 4) - (0.5 * 3 + 0.6 * 2 + 0.8 * 1) / 6.0) < 1e-9);
    CHECK(std::abs(discounted_legibility(p, 4) - 0.58333333333333333) < 1e-9);
    CHECK(discounted_legibility(std::vector<double>{0.7}, 1) == 0.7);
    CHECK_THROWS(discounted_legibility(p, 2));
}

TEST_CASE("legibility matches a from-scratch discounted average") {
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const auto tr = random_walk(rng, 12);
        const auto set = legibility_goal_set(kLayout[1], kLayout);
        for (Step t = 1; t <= 12; ++t)
            CHECK(legibility(tr, t, set[0], set) == doctest::Approx(legibility_oracle(tr.positions, t, set)).epsilon(1e-12));
    }
}

TEST_CASE("legibility goal set swaps the hypothesis for its nearest layout goal") {
    const auto set = legibility_goal_set({0.05, -0.05, 0}, kLayout);
    REQUIRE(set.size() == kLayout.size());
    CHECK(set[0] == Vec3{0.05, -0.05, 0});
    for (std::size_t i = 1; i < set.size(); ++i) CHECK_FALSE(set[i] == kLayout[2]);
}

TEST_CASE("optimality ratio cases") {
    const Vec3 g{1, 0, 0};
    const auto tr = line({0, 0, 0}, {0.8, 0, 0}, 9);
    for (Step t = 1; t <= 9; ++t) CHECK(optimality_ratio(tr, t, g) == doctest::Approx(1.0).epsilon(1e-14));

    const double d = 0.01;
    const auto side = make_traj({{0, 0, 0}, {0, d, 0}});
    const Vec3 far{1000, 0, 0};
    CHECK(optimality_ratio(side, 2, far) == doctest::Approx(std::exp(-d)).epsilon(1e-6));

    const auto still = make_traj({{0.1, 0.2, 0}, {0.1, 0.2, 0}});
    CHECK(optimality_ratio(still, 2, g) == 1.0);
}

TEST_CASE("straight constant-speed approach gives unit directness and ratio") {
    const Vec3 g{0.0, 0.1, 0.0};
    const Vec3 s0{0.3, 0.1, 0.2};
    const auto tr = line(s0, s0 + (g - s0) * 0.9, 20);
    const auto f = featurize(tr, g, kLayout);
    CHECK(f.rows() == 20);
    CHECK(f.cols() == kFeatureCount);
    for (std::size_t r = 0; r < 20; ++r) {
        CHECK(f(r, kDirectness) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(f(r, kOptimalityRatio) == doctest::Approx(1.0).epsilon(1e-12));
        if (r > 0) CHECK(f(r, kDistanceToGoal) < f(r - 1, kDistanceToGoal));
    }
}

TEST_CASE("feature matrix is T x 7 for any length") {
    Rng rng(23);
    for (std::size_t n : {2u, 3u, 17u, 60u}) {
        const auto f = featurize(random_walk(rng, n), kLayout[0], kLayout);
        CHECK(f.rows() == n);
        CHECK(f.cols() == 7);
    }
    CHECK_THROWS(featurize(make_traj({{0, 0, 0}}), kLayout[0], kLayout));
    CHECK_THROWS(featurize(random_walk(rng, 5), kLayout[0], {}));
}

TEST_CASE("toy trajectory cells match per-feature oracles") {
    const auto tr = make_traj({{0.30, 0.05, 0.20}, {0.27, 0.06, 0.17}, {0.23, 0.05, 0.13}, {0.20, 0.02, 0.10},
                               {0.18, 0.01, 0.09}});
    const Vec3 g = kLayout[3];
    const auto f = featurize(tr, g, kLayout);
    const auto set = legibility_goal_set(g, kLayout);
    const auto& x = tr.positions;
    auto vel = [&](std::size_t i) { return i == 0 ? (x[1] - x[0]) / 0.1 : (x[i] - x[i - 1]) / 0.1; };
    double prefix = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        const Vec3 v = vel(i);
        const auto ref = pid_reference(x[i], v, g);
        const double nv = norm(v);
        CHECK(f(i, kExpectVelocity) == doctest::Approx(dot(v, ref.v_opt) / (nv * norm(ref.v_opt))).epsilon(1e-12));
        CHECK(f(i, kExpectPosition) == doctest::Approx(norm(x[i] - ref.x_opt)).epsilon(1e-12));
        CHECK(f(i, kDirectness) == doctest::Approx(dot(v, g - x[i]) / (nv * norm(g - x[i]))).epsilon(1e-12));
        const Vec3 vp = vel(i == 0 ? 0 : i - 1);
        CHECK(f(i, kVelocityConsistency) == doctest::Approx(dot(v, vp) / (nv * norm(vp))).epsilon(1e-12));
        CHECK(f(i, kLegibility) == doctest::Approx(legibility_oracle(x, i + 1, set)).epsilon(1e-12));
        CHECK(f(i, kDistanceToGoal) == doctest::Approx(norm(x[i] - g)).epsilon(1e-14));
        const double cost_now = prefix + (i > 0 ? norm(x[i] - x[i - 1]) : 0.0) + norm(x[i] - g);
        const double cost_prev = i > 0 ? prefix + norm(x[i - 1] - g) : cost_now;
        CHECK(f(i, kOptimalityRatio) == doctest::Approx(std::exp(cost_prev - cost_now)).epsilon(1e-12));
        if (i > 0) prefix += norm(x[i] - x[i - 1]);
    }
}

TEST_CASE("feature ranges hold on random walks") {
    Rng rng(25);
    for (int trial = 0; trial < 30; ++trial) {
        const auto tr = random_walk(rng, 2 + rng.below(40));
        const Vec3 g = kLayout[rng.below(kLayout.size())];
        const auto f = featurize(tr, g, kLayout);
        CHECK(f.all_finite());
        for (std::size_t r = 0; r < f.rows(); ++r) {
            for (auto c : {kExpectVelocity, kDirectness, kVelocityConsistency}) {
                CHECK(f(r, c) >= -1.0);
                CHECK(f(r, c) <= 1.0);
            }
            CHECK(f(r, kExpectPosition) >= 0.0);
            CHECK(f(r, kDistanceToGoal) >= 0.0);
            CHECK(f(r, kLegibility) >= 0.0);
            CHECK(f(r, kLegibility) <= 1.0);
            CHECK(f(r, kOptimalityRatio) > 0.0);
        }
    }
}

TEST_CASE("single-goal layout pins legibility to one") {
    Rng rng(27);
    const std::vector<Vec3> one{{0.0, 0.0, 0.0}};
    const auto f = featurize(random_walk(rng, 15), {0.01, 0.0, 0.0}, one);
    for (std::size_t r = 0; r < f.rows(); ++r) CHECK(f(r, kLegibility) == 1.0);
}

TEST_CASE("optimality ratio telescopes to the total cost difference") {
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        const auto tr = random_walk(rng, 5 + rng.below(50));
        const Vec3 g = kLayout[rng.below(kLayout.size())];
        const auto f = featurize(tr, g, kLayout);
        double log_prod = 0.0;
        for (std::size_t r = 1; r < f.rows(); ++r) log_prod += std::log(f(r, kOptimalityRatio));
        const std::size_t T = tr.length();
        const double cost_T = path_length(tr, 1, T) + norm(tr.positions.back() - g);
        const double cost_1 = norm(tr.positions.front() - g);
        CHECK(std::abs(std::exp(log_prod) - std::exp(cost_1 - cost_T)) < 1e-9);
    }
}

TEST_CASE("distance to goal is invariant under rigid rotation") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        const auto tr = random_walk(rng, 20);
        const Vec3 g = kLayout[trial % 4];
        Vec3 axis{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        axis = axis / norm(axis);
        const double a = rng.uniform(0.0, 6.28), c = std::cos(a), s = std::sin(a);
        auto rot = [&](const Vec3& p) { return p * c + cross(axis, p) * s + axis * (dot(axis, p) * (1.0 - c)); };
        std::vector<Vec3> pts, layout;
        for (const auto& p : tr.positions) pts.push_back(rot(p));
        for (const auto& p : kLayout) layout.push_back(rot(p));
        const auto f0 = featurize(tr, g, kLayout);
        const auto f1 = featurize(make_traj(pts), rot(g), layout);
        for (std::size_t r = 0; r < f0.rows(); ++r)
            CHECK(f1(r, kDistanceToGoal) == doctest::Approx(f0(r, kDistanceToGoal)).epsilon(1e-12));
    }
}

TEST_CASE("featurize is deterministic and writes long CSV rows") {
    Rng rng(33);
    const auto tr = random_walk(rng, 6);
    const auto a = featurize(tr, kLayout[2], kLayout);
    const auto b = featurize(tr, kLayout[2], kLayout);
    CHECK(a == b);
    std::ostringstream os;
    write_features_csv_header(os);
    write_features_csv(os, "ep1", a);
    const auto text = os.str();
    CHECK(text.rfind("trajectory_id,t,expect_align_vel", 0) == 0);
    std::size_t lines = 0;
    for (char ch : text) lines += ch == '\n';
    CHECK(lines == 7);
    CHECK(text.find("\nep1,6,") != std::string::npos);
}
