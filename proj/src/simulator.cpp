#include "corrtime/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "corrtime/parallel.hpp"

namespace corrtime {

namespace {

constexpr std::array<Shape, 4> kShapes{Shape::circle, Shape::square, Shape::triangle, Shape::rectangle};
constexpr std::array<std::string_view, 4> kColors{"red", "green", "blue", "yellow"};
constexpr std::array<double, 4> kShapeRowX{-0.12, -0.04, 0.04, 0.12};
constexpr std::array<double, 4> kColorColumnY{-0.18, -0.06, 0.06, 0.18};

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

BoardLayout BoardLayout::standard() {
    BoardLayout b;
    for (std::size_t s = 0; s < kShapes.size(); ++s)
        for (std::size_t c = 0; c < kColors.size(); ++c)
            b.goals.push_back({static_cast<int>(s * kColors.size() + c),
                               {kShapeRowX[s], kColorColumnY[c], 0.0},
                               kShapes[s],
                               std::string(kColors[c])});
    return b;
}

std::vector<Vec3> BoardLayout::positions() const {
    std::vector<Vec3> out;
    out.reserve(goals.size());
    for (const auto& g : goals) out.push_back(g.position);
    return out;
}

const Goal& BoardLayout::goal(int id) const {
    for (const auto& g : goals)
        if (g.id == id) return g;
    throw std::out_of_range("unknown goal id " + std::to_string(id));
}

const Goal& BoardLayout::find(Shape shape, std::string_view color) const {
    for (const auto& g : goals)
        if (g.shape == shape && g.color == color) return g;
    throw std::out_of_range("no " + std::string(color) + " " + std::string(to_string(shape)) + " target");
}

void BoardLayout::validate(const GridSpec& grid) const {
    if (goals.empty()) throw std::invalid_argument("board layout has no goals");
    for (std::size_t i = 0; i < goals.size(); ++i) {
        const auto& p = goals[i].position;
        if (p.x < grid.x_min || p.x > grid.x_max || p.y < grid.y_min || p.y > grid.y_max)
            throw std::invalid_argument("goal " + std::to_string(goals[i].id) + " lies outside the goal grid");
        for (std::size_t j = 0; j < i; ++j)
            if (distance(p, goals[j].position) < 0.08 - 1e-12)
                throw std::invalid_argument("goals " + std::to_string(goals[j].id) + " and " +
                                            std::to_string(goals[i].id) + " are closer than 8 cm");
    }
}

void IntervenerProfile::validate() const {
    for (const auto& t : terms) {
        if (t.feature >= kFeatureCount) throw std::invalid_argument("hazard term feature out of range");
        if (!(t.scale > 0.0)) throw std::invalid_argument("hazard term scale must be positive");
    }
    if (!(temperature > 0.0)) throw std::invalid_argument("hazard temperature must be positive");
    if (std::isnan(bias)) throw std::invalid_argument("hazard bias is NaN");
    if (!(reaction_delay_mean >= 0.0) || !(reaction_delay_std >= 0.0))
        throw std::invalid_argument("reaction delay must be non-negative");
    if (!(grasp_angle_noise_deg >= 0.0) || !(grasp_speed_noise >= 0.0) || !(release_noise_std >= 0.0))
        throw std::invalid_argument("noise levels must be non-negative");
    if (!(grasp_speed_gain > 0.0)) throw std::invalid_argument("grasp speed gain must be positive");
    if (!(correction_duration >= 0.0)) throw std::invalid_argument("correction duration must be non-negative");
}

double IntervenerProfile::hazard(std::span<const double> row) const {
    double z = bias;
    for (const auto& t : terms) z += t.weight * std::tanh((row[t.feature] - t.center) / t.scale);
    if (std::isinf(z)) return z > 0 ? 1.0 : 0.0;
    return sigmoid(z / temperature);
}

void SimulationSettings::validate() const {
    if (min_length < 2 || max_length < min_length) throw std::invalid_argument("invalid episode length range");
    if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
    if (!(wrong_goal_rate >= 0.0) || !(offset_goal_rate >= 0.0) || wrong_goal_rate + offset_goal_rate > 1.0)
        throw std::invalid_argument("wrong/offset goal rates must be non-negative and sum to at most 1");
    if (!(offset_min >= 0.0) || offset_max < offset_min) throw std::invalid_argument("invalid offset range");
    if (!(tracking_kp > 0.0) || !(tracking_kd > 0.0)) throw std::invalid_argument("tracking gains must be positive");
}

std::vector<PlanarComponent> shape_release_components(Shape shape) {
    switch (shape) {
        case Shape::circle: return {{1.0, 0.0, 0.0, 1.0e-4, 0.0, 1.0e-4}};
        case Shape::square: return {{1.0, 0.0, 0.0, 2.25e-4, 0.0, 2.25e-4}};
        case Shape::triangle:
            return {{0.6, 0.0, -0.008, 1.0e-4, 0.0, 1.0e-4}, {0.4, 0.0, 0.012, 1.0e-4, 0.0, 1.0e-4}};
        case Shape::rectangle: return {{1.0, 0.0, 0.0, 1.0e-4, 0.0, 6.25e-4}};
    }
    throw std::invalid_argument("unknown shape");
}

GroundTruthGoalDistribution ground_truth_distribution(Shape shape, int target_id, const BoardLayout& layout) {
    const Goal& g = layout.goal(target_id);
    if (g.shape != shape)
        throw std::invalid_argument("target " + std::to_string(target_id) + " does not hold a " +
                                    std::string(to_string(shape)));
    return {shape, target_id, g.position, shape_release_components(shape)};
}

double GroundTruthGoalDistribution::density(double x, double y) const {
    double total = 0.0;
    for (const auto& c : components) {
        const double det = c.sxx * c.syy - c.sxy * c.sxy;
        const double dx = x - center.x - c.dx, dy = y - center.y - c.dy;
        const double q = (c.syy * dx * dx - 2.0 * c.sxy * dx * dy + c.sxx * dy * dy) / det;
        total += c.weight * std::exp(-0.5 * q) / (2.0 * std::numbers::pi * std::sqrt(det));
    }
    return total;
}

Vec3 GroundTruthGoalDistribution::sample(Rng& rng) const {
    double u = rng.uniform();
    const PlanarComponent* chosen = &components.back();
    for (const auto& c : components) {
        if (u < c.weight) {
            chosen = &c;
            break;
        }
        u -= c.weight;
    }
    const double l00 = std::sqrt(chosen->sxx);
    const double l10 = chosen->sxy / l00;
    const double l11 = std::sqrt(chosen->syy - l10 * l10);
    const double z0 = rng.normal(), z1 = rng.normal();
    return {center.x + chosen->dx + l00 * z0, center.y + chosen->dy + l10 * z0 + l11 * z1, center.z};
}

std::vector<double> GroundTruthGoalDistribution::discretize(const GoalGrid& grid) const {
    std::vector<double> p(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) p[i] = density(grid.cell(i).x, grid.cell(i).y);
    const double z = pairwise_sum(p.data(), p.size());
    if (!(z > 0.0)) throw std::runtime_error("ground-truth distribution has no mass on the grid");
    for (auto& v : p) v /= z;
    return p;
}

namespace {

Vec3 bezier(const std::array<Vec3, 4>& p, double s) {
    const double u = 1.0 - s;
    return p[0] * (u * u * u) + p[1] * (3 * u * u * s) + p[2] * (3 * u * s * s) + p[3] * (s * s * s);
}

Vec3 bezier_tangent(const std::array<Vec3, 4>& p, double s) {
    const double u = 1.0 - s;
    return (p[1] - p[0]) * (3 * u * u) + (p[2] - p[1]) * (6 * u * s) + (p[3] - p[2]) * (3 * s * s);
}

// Smooth curved path to `target`, timed by a minimum-jerk profile and tracked
// by a PD controller on a point mass.
std::vector<Vec3> synthesize_path(const Vec3& start, const Vec3& target, double bulge, double side,
                                  std::size_t length, const SimulationSettings& s) {
    const Vec3 d = target - start;
    Vec3 lateral = cross(d, Vec3{0, 0, 1});
    if (norm(lateral) < 1e-9) lateral = {0, 1, 0};
    lateral = lateral / norm(lateral) * side;
    const std::array<Vec3, 4> ctrl{start, start + d / 3.0 + lateral * bulge,
                                   start + d * (2.0 / 3.0) + lateral * bulge, target};
    const double duration = static_cast<double>(length - 1) * s.dt;
    constexpr int kSubsteps = 10;
    const double h = s.dt / kSubsteps;

    std::vector<Vec3> out(length);
    Vec3 x = start, v{};
    out[0] = x;
    for (std::size_t k = 1; k < length; ++k) {
        for (int sub = 1; sub <= kSubsteps; ++sub) {
            const double time = (static_cast<double>(k - 1) * s.dt) + sub * h;
            const double tau = std::min(1.0, time / duration);
            const double phase = tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau);
            const double phase_rate = 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau) / duration;
            const Vec3 r = bezier(ctrl, phase);
            const Vec3 rdot = bezier_tangent(ctrl, phase) * phase_rate;
            const Vec3 a = (r - x) * s.tracking_kp + (rdot - v) * s.tracking_kd;
            v = v + a * h;
            x = x + v * h;
        }
        out[k] = x;
    }
    return out;
}

// Rotates unit vector u by `angle` about a random axis perpendicular to it.
Vec3 perturb_direction(const Vec3& u, double angle, Rng& rng) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    axis = axis - u * dot(axis, u);
    if (norm(axis) < 1e-12) return u;
    axis = axis / norm(axis);
    // Rodrigues with axis perpendicular to u.
    return u * std::cos(angle) + cross(axis, u) * std::sin(angle);
}

}  // namespace

SimulatedEpisode gen_episode(const BoardLayout& layout, const IntervenerProfile& profile,
                             const SimulationSettings& settings, std::uint64_t seed, const std::string& id) {
    profile.validate();
    settings.validate();
    Rng rng(seed);
    SimulatedEpisode out;

    const Goal& intended = layout.goals[rng.below(layout.goals.size())];
    const std::size_t length =
        settings.min_length + rng.below(settings.max_length - settings.min_length + 1);
    const int legibility = static_cast<int>(rng.below(settings.bulge_by_legibility.size()));
    const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const Vec3 start{settings.start_mean.x + rng.uniform(-1.0, 1.0) * settings.start_spread.x,
                     settings.start_mean.y + rng.uniform(-1.0, 1.0) * settings.start_spread.y,
                     settings.start_mean.z + rng.uniform(-1.0, 1.0) * settings.start_spread.z};

    // Nominal execution goal: intended, another color of the same shape, or an offset.
    Vec3 nominal = intended.position;
    int nominal_id = intended.id;
    const double mode = rng.uniform();
    if (mode < settings.wrong_goal_rate) {
        std::vector<const Goal*> others;
        for (const auto& g : layout.goals)
            if (g.shape == intended.shape && g.id != intended.id) others.push_back(&g);
        if (!others.empty()) {
            const Goal* wrong = others[rng.below(others.size())];
            nominal = wrong->position;
            nominal_id = wrong->id;
            out.wrong_goal = true;
        }
    } else if (mode < settings.wrong_goal_rate + settings.offset_goal_rate) {
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double radius = rng.uniform(settings.offset_min, settings.offset_max);
        nominal = nominal + Vec3{radius * std::cos(angle), radius * std::sin(angle), 0.0};
        out.offset_goal = true;
    }
    out.nominal_goal = nominal;

    Trajectory& tr = out.episode.trajectory;
    tr.id = id;
    tr.dt = settings.dt;
    tr.goal_id = nominal_id;
    tr.legibility_level = legibility;
    tr.positions = synthesize_path(start, nominal, settings.bulge_by_legibility[legibility], side, length, settings);
    out.episode.intended_goal_id = intended.id;

    // Intervener watches features measured against the goal it wants.
    const auto layout_positions = layout.positions();
    const Matrix features = featurize(tr, intended.position, layout_positions);
    std::optional<Step> fired;
    for (Step t = 1; t <= length; ++t) {
        const double h = profile.hazard(features.row(t - 1));
        if (rng.uniform() < h) {
            fired = t;
            break;
        }
    }
    const double delay = std::max(0.0, rng.normal(profile.reaction_delay_mean, profile.reaction_delay_std));
    if (fired) {
        const Step t_c = *fired + static_cast<Step>(std::llround(delay / settings.dt));
        if (t_c <= length) {
            CorrectionEvent ev;
            ev.t_c = t_c;
            ev.c_p = tr.at(t_c);
            const Vec3 to_goal = intended.position - ev.c_p;
            const double dist = norm(to_goal);
            const Vec3 dir = dist > 1e-9 ? to_goal / dist : Vec3{0, 0, -1};
            const double angle = rng.normal() * profile.grasp_angle_noise_deg * std::numbers::pi / 180.0;
            const double speed =
                profile.grasp_speed_gain * dist * std::max(0.05, 1.0 + profile.grasp_speed_noise * rng.normal());
            ev.c_p_prime = perturb_direction(dir, angle, rng) * speed;
            ev.c_l = intended.position + Vec3{rng.normal(), rng.normal(), rng.normal()} * profile.release_noise_std;
            ev.t_end = std::min<Step>(length, t_c + static_cast<Step>(std::llround(profile.correction_duration / settings.dt)));
            out.episode.correction = ev;
        }
    }
    tr.corrected = out.episode.correction.has_value();
    return out;
}

std::optional<double> completion_fraction(const Episode& e) {
    if (!e.correction) return std::nullopt;
    return static_cast<double>(e.correction->t_c) / static_cast<double>(e.trajectory.length());
}

bool in_percentile_set(const Episode& e, double percentile) {
    const auto f = completion_fraction(e);
    return f && *f <= percentile + 1e-12;
}

std::size_t Dataset::corrected_count() const {
    return static_cast<std::size_t>(
        std::count_if(episodes.begin(), episodes.end(), [](const Episode& e) { return e.correction.has_value(); }));
}

Dataset gen_dataset(const BoardLayout& layout, const IntervenerProfile& profile,
                    const SimulationSettings& settings, std::size_t n, std::uint64_t seed, std::size_t workers) {
    if (n < 50) throw std::invalid_argument("gen_dataset: need at least 50 episodes");
    Dataset d;
    d.layout = layout;
    d.profile = profile;
    d.settings = settings;
    d.seed = seed;
    d.episodes.resize(n);
    parallel_for(n, workers, [&](std::size_t i) {
        char id[32];
        std::snprintf(id, sizeof id, "ep%05zu", i);
        d.episodes[i] = gen_episode(layout, profile, settings, mix_seed(seed, i), id).episode;
    });
    if (d.corrected_count() < 10)
        throw std::runtime_error("gen_dataset: only " + std::to_string(d.corrected_count()) +
                                 " corrected episodes (need at least 10); the intervener profile is degenerate");
    return d;
}

DatasetSplit split_dataset(const Dataset& dataset, double percentile, std::uint64_t split_seed,
                           const SplitFractions& fractions) {
    if (!(fractions.train > 0.0) || !(fractions.val >= 0.0) || fractions.train + fractions.val >= 1.0)
        throw std::invalid_argument("split fractions must leave room for a test part");
    std::vector<std::size_t> corrected, uncorrected;
    for (std::size_t i = 0; i < dataset.episodes.size(); ++i) {
        const auto& e = dataset.episodes[i];
        if (!e.correction) uncorrected.push_back(i);
        else if (in_percentile_set(e, percentile)) corrected.push_back(i);
    }
    if (corrected.size() < 3) throw std::runtime_error("split_dataset: fewer than 3 corrected episodes in the set");
    Rng rng(mix_seed(split_seed, 0x5b11));
    rng.shuffle(corrected.begin(), corrected.end());
    rng.shuffle(uncorrected.begin(), uncorrected.end());

    const std::size_t n = corrected.size();
    const auto n_train = static_cast<std::size_t>(std::llround(fractions.train * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(fractions.val * static_cast<double>(n)));
    DatasetSplit s;
    std::size_t u = 0;
    auto take = [&](std::vector<std::size_t>& part, std::size_t lo, std::size_t hi) {
        for (std::size_t k = lo; k < hi; ++k) part.push_back(corrected[k]);
        const std::size_t want = hi - lo;
        for (std::size_t k = 0; k < want && u < uncorrected.size(); ++k) part.push_back(uncorrected[u++]);
        std::sort(part.begin(), part.end());
    };
    take(s.train, 0, n_train);
    take(s.val, n_train, std::min(n, n_train + n_val));
    take(s.test, std::min(n, n_train + n_val), n);
    return s;
}

}  // namespace corrtime
