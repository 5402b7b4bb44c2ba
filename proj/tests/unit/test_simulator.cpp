#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "corrtime/simulator.hpp"
#include "doctest.h"

using namespace corrtime;

namespace {

IntervenerProfile proximity_profile(double bias) {
    IntervenerProfile p;
    p.terms = {{kDistanceToGoal, -3.0, 0.20, 0.02}, {kDirectness, -3.0, 0.97, 0.02}};
    p.bias = bias;
    p.temperature = 0.25;
    return p;
}

SimulationSettings short_settings() {
    SimulationSettings s;
    s.min_length = 40;
    s.max_length = 60;
    return s;
}

// Wilson score interval for k successes out of n at z = 3.
std::pair<double, double> wilson(std::size_t k, std::size_t n) {
    const double z = 3.0, p = static_cast<double>(k) / n, z2 = z * z;
    const double centre = (p + z2 / (2 * n)) / (1 + z2 / n);
    const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4.0 * n * n)) / (1 + z2 / n);
    return {centre - half, centre + half};
}

}  // namespace

TEST_CASE("standard layout is a valid 4x4 board") {
    const auto b = BoardLayout::standard();
    CHECK(b.goals.size() == 16);
    CHECK_NOTHROW(b.validate(GridSpec{}));
    for (std::size_t i = 0; i < b.goals.size(); ++i) {
        CHECK(b.goals[i].id == static_cast<int>(i));
        CHECK(b.goals[i].position.z == 0.0);
        for (std::size_t j = i + 1; j < b.goals.size(); ++j)
            CHECK(distance(b.goals[i].position, b.goals[j].position) >= 0.08 - 1e-12);
    }
    CHECK(b.find(Shape::triangle, "blue").shape == Shape::triangle);
    CHECK(b.goal(5).id == 5);
    CHECK_THROWS(b.goal(16));
    CHECK_THROWS(b.find(Shape::circle, "purple"));

    auto crowded = b;
    crowded.goals[1].position = crowded.goals[0].position + Vec3{0.05, 0, 0};
    CHECK_THROWS(crowded.validate(GridSpec{}));
    auto outside = b;
    outside.goals[3].position = {0.5, 0.0, 0.0};
    CHECK_THROWS(outside.validate(GridSpec{}));
}

TEST_CASE("profile validation and hazard values") {
    auto p = proximity_profile(-4.0);
    CHECK_NOTHROW(p.validate());
    std::vector<double> row(kFeatureCount, 0.0);
    row[kDistanceToGoal] = 0.20;
    row[kDirectness] = 0.97;
    CHECK(p.hazard(row) == doctest::Approx(1.0 / (1.0 + std::exp(4.0 / 0.25))).epsilon(1e-12));
    row[kDistanceToGoal] = 0.0;
    row[kDirectness] = 0.0;
    const double s = -3.0 * std::tanh(-0.20 / 0.02) - 3.0 * std::tanh(-0.97 / 0.02) - 4.0;
    CHECK(p.hazard(row) == doctest::Approx(1.0 / (1.0 + std::exp(-s / 0.25))).epsilon(1e-12));

    auto bad = p;
    bad.release_noise_std = -1.0;
    CHECK_THROWS(bad.validate());
    bad = p;
    bad.reaction_delay_mean = -0.1;
    CHECK_THROWS(bad.validate());
    bad = p;
    bad.terms[0].feature = 9;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("ground-truth mixtures: translation, ordering and mass") {
    const auto b = BoardLayout::standard();
    const auto circle = shape_release_components(Shape::circle);
    const auto rect = shape_release_components(Shape::rectangle);
    CHECK(circle.size() <= 2);
    CHECK(circle[0].sxx < std::max(rect[0].sxx, rect[0].syy));

    for (Shape shape : {Shape::circle, Shape::square, Shape::triangle, Shape::rectangle}) {
        std::vector<int> ids;
        for (const auto& g : b.goals)
            if (g.shape == shape) ids.push_back(g.id);
        const auto d0 = ground_truth_distribution(shape, ids[0], b);
        const auto d1 = ground_truth_distribution(shape, ids[1], b);
        const Vec3 off = b.goal(ids[1]).position - b.goal(ids[0]).position;
        for (double dx : {-0.02, 0.0, 0.013})
            for (double dy : {-0.01, 0.0, 0.02})
                CHECK(d1.density(d1.center.x + dx, d1.center.y + dy) ==
                      doctest::Approx(d0.density(d0.center.x + dx, d0.center.y + dy)).epsilon(1e-12));
        CHECK(norm(d1.center - d0.center - off) < 1e-12);

        Rng rng(static_cast<std::uint64_t>(ids[0]) + 1);
        const GridSpec grid;
        std::size_t inside = 0;
        const std::size_t n = 20000;
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3 s = d0.sample(rng);
            inside += s.x >= grid.x_min && s.x <= grid.x_max && s.y >= grid.y_min && s.y <= grid.y_max;
        }
        CHECK(static_cast<double>(inside) / n >= 0.99);

        const auto cells = d0.discretize(GoalGrid(grid));
        double sum = 0.0;
        for (double c : cells) {
            CHECK(c >= 0.0);
            sum += c;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK_THROWS(ground_truth_distribution(Shape::square, 0, b));
    CHECK_THROWS(ground_truth_distribution(Shape::circle, 42, b));
}

TEST_CASE("ground-truth density integrates to one on the grid") {
    const auto b = BoardLayout::standard();
    const auto d = ground_truth_distribution(Shape::triangle, 9, b);
    GridSpec fine;
    fine.resolution = 0.002;
    const GoalGrid g(fine);
    double s = 0.0;
    for (const auto& c : g.cells()) s += d.density(c.x, c.y);
    CHECK(s * fine.resolution * fine.resolution == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("zero hazard never intervenes and certain hazard fires at the first step") {
    const auto b = BoardLayout::standard();
    IntervenerProfile never;
    never.bias = -std::numeric_limits<double>::infinity();
    IntervenerProfile always;
    always.bias = std::numeric_limits<double>::infinity();
    always.reaction_delay_mean = 0.0;
    always.reaction_delay_std = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        CHECK_FALSE(gen_episode(b, never, short_settings(), seed).episode.correction.has_value());
        const auto e = gen_episode(b, always, short_settings(), seed).episode;
        REQUIRE(e.correction.has_value());
        CHECK(e.correction->t_c == 1);
    }
}

TEST_CASE("episodes are reproducible and satisfy the correction invariant") {
    const auto b = BoardLayout::standard();
    const auto p = proximity_profile(-2.0);
    std::size_t corrected = 0, wrong = 0, offset = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const auto a = gen_episode(b, p, short_settings(), seed, "x");
        const auto c = gen_episode(b, p, short_settings(), seed, "x");
        CHECK(episode_to_json_line(a.episode) == episode_to_json_line(c.episode));
        const auto& e = a.episode;
        CHECK_NOTHROW(e.trajectory.validate());
        CHECK(e.trajectory.length() >= 40);
        CHECK(e.trajectory.length() <= 60);
        CHECK(e.trajectory.corrected == e.correction.has_value());
        wrong += a.wrong_goal;
        offset += a.offset_goal;
        if (e.correction) {
            ++corrected;
            CHECK_NOTHROW(e.correction->validate(e.trajectory));
            CHECK(e.correction->c_p == e.trajectory.at(e.correction->t_c));
        }
    }
    CHECK(corrected > 20);
    CHECK(wrong > 15);
    CHECK(offset > 15);
}

TEST_CASE("correction probability grows with the hazard bias") {
    const auto b = BoardLayout::standard();
    std::vector<std::pair<double, double>> intervals;
    for (double bias : {-6.0, -4.5, -3.0, -1.5, 0.0}) {
        std::size_t k = 0;
        const std::size_t n = 1000;
        for (std::uint64_t seed = 0; seed < n; ++seed)
            k += gen_episode(b, proximity_profile(bias), short_settings(), mix_seed(seed, 77)).episode.correction.has_value();
        intervals.push_back(wilson(k, n));
    }
    for (std::size_t i = 1; i < intervals.size(); ++i) CHECK(intervals[i].second >= intervals[i - 1].first);
    CHECK(intervals.back().first > intervals.front().second);
}

TEST_CASE("dataset generation checks sizes and is worker independent") {
    const auto b = BoardLayout::standard();
    CHECK_THROWS(gen_dataset(b, proximity_profile(-4.0), short_settings(), 49, 1));
    IntervenerProfile never;
    never.bias = -std::numeric_limits<double>::infinity();
    CHECK_THROWS(gen_dataset(b, never, short_settings(), 60, 1));

    const auto a = gen_dataset(b, proximity_profile(-3.0), short_settings(), 80, 5, 1);
    const auto c = gen_dataset(b, proximity_profile(-3.0), short_settings(), 80, 5, 4);
    REQUIRE(a.episodes.size() == 80);
    for (std::size_t i = 0; i < 80; ++i)
        CHECK(episode_to_json_line(a.episodes[i]) == episode_to_json_line(c.episodes[i]));
    std::set<std::string> ids;
    for (const auto& e : a.episodes) ids.insert(e.trajectory.id);
    CHECK(ids.size() == 80);
}

TEST_CASE("percentile sets nest and match a brute-force rescan") {
    Episode e;
    e.trajectory.positions.assign(100, Vec3{});
    CorrectionEvent c;
    c.t_c = 65;
    c.t_end = 80;
    e.correction = c;
    for (double p : kPercentileSets) CHECK(in_percentile_set(e, p));
    CHECK(completion_fraction(e).value() == doctest::Approx(0.65));
    e.correction->t_c = 75;
    CHECK_FALSE(in_percentile_set(e, 0.7));
    CHECK(in_percentile_set(e, 0.8));
    e.correction.reset();
    CHECK_FALSE(completion_fraction(e).has_value());
    CHECK_FALSE(in_percentile_set(e, 1.0));

    const auto d = gen_dataset(BoardLayout::standard(), proximity_profile(-3.0), short_settings(), 200, 9, 2);
    for (const auto& ep : d.episodes) {
        bool prev = false;
        for (double p : kPercentileSets) {
            const bool in = in_percentile_set(ep, p);
            const bool brute =
                ep.correction && static_cast<double>(ep.correction->t_c) / ep.trajectory.length() <= p + 1e-12;
            CHECK(in == brute);
            if (prev) CHECK(in);
            prev = in;
        }
    }
}

TEST_CASE("splits are 60/10/30 over corrected episodes with balanced uncorrected fill") {
    const auto d = gen_dataset(BoardLayout::standard(), proximity_profile(-2.5), short_settings(), 400, 13, 2);
    std::vector<std::size_t> in_set;
    for (std::size_t i = 0; i < d.episodes.size(); ++i)
        if (in_percentile_set(d.episodes[i], 1.0)) in_set.push_back(i);
    REQUIRE(in_set.size() >= 100);

    const auto s = split_dataset(d, 1.0, 3);
    auto count_corrected = [&](const std::vector<std::size_t>& part) {
        return static_cast<std::size_t>(std::count_if(part.begin(), part.end(), [&](std::size_t i) {
            return d.episodes[i].correction.has_value();
        }));
    };
    const std::size_t n = in_set.size();
    const auto tr = count_corrected(s.train), va = count_corrected(s.val), te = count_corrected(s.test);
    CHECK(tr + va + te == n);
    CHECK(tr == static_cast<std::size_t>(std::llround(0.6 * n)));
    CHECK(va == static_cast<std::size_t>(std::llround(0.1 * n)));
    CHECK(te == n - tr - va);
    CHECK(s.train.size() - tr == tr);
    CHECK(s.val.size() - va == va);

    std::set<std::size_t> all;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
        CHECK(std::is_sorted(part->begin(), part->end()));
        for (auto i : *part) CHECK(all.insert(i).second);
    }
    const auto again = split_dataset(d, 1.0, 3);
    CHECK(again.train == s.train);
    CHECK(again.test == s.test);
    CHECK(split_dataset(d, 1.0, 4).train != s.train);

    // Episodes beyond the percentile never enter any part as corrected.
    const auto s70 = split_dataset(d, 0.7, 3);
    for (const auto* part : {&s70.train, &s70.val, &s70.test})
        for (auto i : *part)
            if (d.episodes[i].correction) CHECK(in_percentile_set(d.episodes[i], 0.7));
}
