#include "corrtime/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "corrtime/parallel.hpp"
#include "json.hpp"

namespace corrtime {

void GridSpec::validate() const {
    if (!(resolution > 0.0) || !std::isfinite(resolution))
        throw std::invalid_argument("grid resolution must be positive");
    if (!(x_max >= x_min) || !(y_max >= y_min)) throw std::invalid_argument("grid extents are inverted");
    for (double extent : {x_max - x_min, y_max - y_min}) {
        const double steps = extent / resolution;
        if (std::abs(steps - std::round(steps)) > 1e-6)
            throw std::invalid_argument("grid extent is not a multiple of the resolution");
    }
}

GoalGrid::GoalGrid(const GridSpec& spec) : spec_(spec), regular_(true) {
    spec.validate();
    nx_ = static_cast<std::size_t>(std::llround((spec.x_max - spec.x_min) / spec.resolution)) + 1;
    ny_ = static_cast<std::size_t>(std::llround((spec.y_max - spec.y_min) / spec.resolution)) + 1;
    cells_.reserve(nx_ * ny_);
    for (std::size_t iy = 0; iy < ny_; ++iy)
        for (std::size_t ix = 0; ix < nx_; ++ix)
            cells_.push_back({spec.x_min + static_cast<double>(ix) * spec.resolution,
                              spec.y_min + static_cast<double>(iy) * spec.resolution, spec.z});
}

GoalGrid GoalGrid::from_cells(std::vector<Vec3> cells) {
    if (cells.empty()) throw std::invalid_argument("goal grid needs at least one cell");
    GoalGrid g;
    g.cells_ = std::move(cells);
    g.nx_ = g.cells_.size();
    g.ny_ = 1;
    return g;
}

std::size_t GoalGrid::nearest(const Vec3& p) const {
    if (regular_) {
        auto index = [&](double v, double lo, std::size_t n) {
            const double f = std::round((v - lo) / spec_.resolution);
            return static_cast<std::size_t>(std::clamp(f, 0.0, static_cast<double>(n - 1)));
        };
        return index(p.y, spec_.y_min, ny_) * nx_ + index(p.x, spec_.x_min, nx_);
    }
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cells_.size(); ++i) {
        const double d = distance(cells_[i], p);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

bool GoalGrid::same_as(const GoalGrid& other) const {
    return cells_.size() == other.cells_.size() && std::equal(cells_.begin(), cells_.end(), other.cells_.begin());
}

std::size_t PosteriorMap::argmax() const {
    if (probability.empty()) throw std::logic_error("argmax of an empty posterior");
    return static_cast<std::size_t>(std::max_element(probability.begin(), probability.end()) -
                                    probability.begin());
}

void InferenceConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
    if (!(likelihood_floor > 0.0)) throw std::invalid_argument("likelihood floor must be positive");
}

PosteriorMap posterior_from_log_likelihood(std::shared_ptr<const GoalGrid> grid,
                                           std::span<const double> log_likelihood, double floor) {
    if (!grid) throw std::invalid_argument("posterior needs a grid");
    if (log_likelihood.size() != grid->size())
        throw std::invalid_argument("log-likelihood length differs from the grid size");
    const double log_floor = std::log(floor);
    PosteriorMap out;
    out.grid = std::move(grid);
    const std::size_t n = log_likelihood.size();
    std::vector<double> w(n);
    double mx = -std::numeric_limits<double>::infinity();
    bool all_floor = true;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = log_likelihood[i];
        if (std::isnan(v)) throw std::invalid_argument("log-likelihood contains NaN");
        w[i] = v > log_floor ? v : log_floor;
        if (w[i] > log_floor) all_floor = false;
        mx = std::max(mx, w[i]);
    }
    if (all_floor || !std::isfinite(mx)) {
        out.probability.assign(n, 1.0 / static_cast<double>(n));
        out.degenerate = true;
        return out;
    }
    for (auto& v : w) v = std::exp(v - mx);
    const double z = pairwise_sum(w.data(), n);
    for (auto& v : w) v /= z;
    out.probability = std::move(w);
    return out;
}

std::vector<double> log_of_likelihoods(std::span<const double> likelihood, double floor) {
    std::vector<double> out(likelihood.size());
    for (std::size_t i = 0; i < likelihood.size(); ++i) {
        if (!(likelihood[i] >= 0.0)) throw std::invalid_argument("likelihoods must be non-negative");
        out[i] = std::log(std::max(likelihood[i], floor));
    }
    return out;
}

std::vector<double> when_likelihoods(const Trajectory& traj, Step t_c, const GoalGrid& grid,
                                     const TimingModel& model, std::span<const Vec3> layout,
                                     const FeatureSettings& features, std::size_t workers) {
    const std::size_t T = traj.length();
    if (t_c < 1 || t_c > T) throw std::out_of_range("when_likelihoods: t_c outside the trajectory");
    // Window of pdf steps averaged by timing_likelihood, and the cdf rows it needs.
    const auto half = static_cast<std::size_t>(std::llround(1.2 / traj.dt)) / 2;
    const std::size_t lo = t_c > half ? t_c - half : 1;
    const std::size_t hi = std::min(T, t_c + half);
    const std::size_t row_lo = lo > 1 ? lo - 2 : 0;  // 0-based row of cdf(lo - 1)
    const std::size_t row_hi = hi;                   // exclusive

    std::vector<double> out(grid.size());
    const std::size_t blocks = std::max<std::size_t>(1, std::min(workers, grid.size()));
    const std::size_t chunk = (grid.size() + blocks - 1) / blocks;
    parallel_for(blocks, blocks, [&](std::size_t b) {
        InferenceWorkspace ws;
        std::vector<double> pdf;
        for (std::size_t i = b * chunk; i < std::min(grid.size(), (b + 1) * chunk); ++i) {
            const Matrix raw = featurize(traj, grid.cell(i), layout, features);
            const Matrix x = model.prepare_input(raw);
            const auto cdf = forward_rows(model, x, row_lo, row_hi, ws);
            pdf.assign(T, 0.0);
            for (std::size_t s = lo; s <= hi; ++s) {
                if (s == 1) {
                    pdf[0] = cdf[0];
                } else {
                    const double d = cdf[s - 1 - row_lo] - cdf[s - 2 - row_lo];
                    pdf[s - 1] = d > 0.0 ? d : 0.0;
                }
            }
            out[i] = timing_likelihood(pdf, t_c, 1.2, traj.dt);
        }
    });
    return out;
}

std::vector<double> where_log_likelihoods(const Vec3& point, const GoalGrid& grid, const GmmModel& gmm) {
    if (!is_finite(point)) throw std::invalid_argument("where_log_likelihoods: non-finite point");
    std::vector<double> out(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) out[i] = gmm_logpdf(gmm, point, grid.cell(i));
    return out;
}

std::vector<double> combine_log_likelihoods(std::span<const double> when_likelihood,
                                            std::span<const double> where_log_likelihood,
                                            double alpha, double floor) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
    if (when_likelihood.size() != where_log_likelihood.size())
        throw std::invalid_argument("combine: likelihood lengths differ");
    const double log_floor = std::log(floor);
    const auto lw = log_of_likelihoods(when_likelihood, floor);
    std::vector<double> out(lw.size());
    for (std::size_t i = 0; i < lw.size(); ++i) {
        const double spatial = std::max(where_log_likelihood[i], log_floor);
        out[i] = alpha * lw[i] + (1.0 - alpha) * spatial;
    }
    return out;
}

PosteriorMap when_posterior(Step t_c, const Trajectory& traj, std::shared_ptr<const GoalGrid> grid,
                            const TimingModel& model, std::span<const Vec3> layout,
                            const InferenceConfig& config, const FeatureSettings& features) {
    config.validate();
    const auto lik = when_likelihoods(traj, t_c, *grid, model, layout, features, config.workers);
    return posterior_from_log_likelihood(std::move(grid), log_of_likelihoods(lik, config.likelihood_floor),
                                         config.likelihood_floor);
}

PosteriorMap where_posterior_onset(const Vec3& c_p, const Vec3& c_p_prime,
                                   std::shared_ptr<const GoalGrid> grid, const MlpModel& mlp,
                                   const GmmModel& gmm, const InferenceConfig& config) {
    config.validate();
    const Vec3 predicted = mlp_predict(mlp, c_p, c_p_prime);
    const auto ll = where_log_likelihoods(predicted, *grid, gmm);
    return posterior_from_log_likelihood(std::move(grid), ll, config.likelihood_floor);
}

PosteriorMap where_posterior_release(const Vec3& c_l, std::shared_ptr<const GoalGrid> grid,
                                     const GmmModel& gmm, const InferenceConfig& config) {
    config.validate();
    const auto ll = where_log_likelihoods(c_l, *grid, gmm);
    return posterior_from_log_likelihood(std::move(grid), ll, config.likelihood_floor);
}

PosteriorMap combined_posterior_onset(Step t_c, const Trajectory& traj, const Vec3& c_p,
                                      const Vec3& c_p_prime, std::shared_ptr<const GoalGrid> grid,
                                      const TimingModel& timing, const MlpModel& mlp,
                                      const GmmModel& gmm, std::span<const Vec3> layout,
                                      const InferenceConfig& config, const FeatureSettings& features) {
    config.validate();
    const auto when = when_likelihoods(traj, t_c, *grid, timing, layout, features, config.workers);
    const auto where = where_log_likelihoods(mlp_predict(mlp, c_p, c_p_prime), *grid, gmm);
    return posterior_from_log_likelihood(
        std::move(grid), combine_log_likelihoods(when, where, config.alpha, config.likelihood_floor),
        config.likelihood_floor);
}

PosteriorMap combined_posterior_release(Step t_c, const Trajectory& traj, const Vec3& c_l,
                                        std::shared_ptr<const GoalGrid> grid,
                                        const TimingModel& timing, const GmmModel& gmm,
                                        std::span<const Vec3> layout, const InferenceConfig& config,
                                        const FeatureSettings& features) {
    config.validate();
    const auto when = when_likelihoods(traj, t_c, *grid, timing, layout, features, config.workers);
    const auto where = where_log_likelihoods(c_l, *grid, gmm);
    return posterior_from_log_likelihood(
        std::move(grid), combine_log_likelihoods(when, where, config.alpha, config.likelihood_floor),
        config.likelihood_floor);
}

void write_posterior_csv(std::ostream& os, const PosteriorMap& map) {
    if (!map.grid) throw std::invalid_argument("posterior has no grid");
    const auto old = os.precision(17);
    os << "x,y,probability\n";
    for (std::size_t i = 0; i < map.probability.size(); ++i) {
        const auto& c = map.grid->cell(i);
        os << c.x << ',' << c.y << ',' << map.probability[i] << '\n';
    }
    os.precision(old);
}

std::string posterior_to_json(const PosteriorMap& map) {
    if (!map.grid) throw std::invalid_argument("posterior has no grid");
    nlohmann::json grid;
    const auto& g = *map.grid;
    if (g.regular()) {
        const auto& s = g.spec();
        grid = {{"x_min", s.x_min}, {"x_max", s.x_max}, {"y_min", s.y_min}, {"y_max", s.y_max},
                {"resolution", s.resolution}, {"z", s.z}, {"nx", g.nx()}, {"ny", g.ny()},
                {"order", "row-major (index = iy * nx + ix)"}};
    } else {
        nlohmann::json cells = nlohmann::json::array();
        for (const auto& c : g.cells()) cells.push_back({c.x, c.y, c.z});
        grid = {{"cells", cells}};
    }
    grid["cell_count"] = g.size();
    return nlohmann::json{{"grid", grid}, {"degenerate", map.degenerate}, {"probability", map.probability}}
        .dump();
}

}  // namespace corrtime
