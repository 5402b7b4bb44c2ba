#pragma once

#include <cstddef>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "corrtime/features.hpp"
#include "corrtime/geometry.hpp"
#include "corrtime/spatial.hpp"
#include "corrtime/timing.hpp"
#include "corrtime/trajectory.hpp"

namespace corrtime {

struct GridSpec {
    double x_min = -0.20;
    double x_max = 0.20;
    double y_min = -0.30;
    double y_max = 0.30;
    double resolution = 0.01;
    double z = 0.0;

    void validate() const;
};

// Candidate goals on a plane. Regular grids order cells row by row
// (index = iy * nx + ix); arbitrary cell lists are accepted for small toy grids.
class GoalGrid {
public:
    explicit GoalGrid(const GridSpec& spec);
    static GoalGrid from_cells(std::vector<Vec3> cells);

    std::size_t size() const { return cells_.size(); }
    const Vec3& cell(std::size_t i) const { return cells_.at(i); }
    std::span<const Vec3> cells() const { return cells_; }
    bool regular() const { return regular_; }
    std::size_t nx() const { return nx_; }
    std::size_t ny() const { return ny_; }
    const GridSpec& spec() const { return spec_; }

    std::size_t nearest(const Vec3& p) const;
    bool same_as(const GoalGrid& other) const;

private:
    GoalGrid() = default;
    GridSpec spec_;
    bool regular_ = false;
    std::size_t nx_ = 0, ny_ = 0;
    std::vector<Vec3> cells_;
};

struct PosteriorMap {
    std::shared_ptr<const GoalGrid> grid;
    std::vector<double> probability;
    // Set when every cell sat at the likelihood floor and the map fell back to uniform.
    bool degenerate = false;

    std::size_t argmax() const;
};

struct InferenceConfig {
    double alpha = 0.8;
    double likelihood_floor = 1e-300;
    std::size_t workers = 1;

    void validate() const;
};

// Normalizes per-cell log-likelihoods under a uniform prior. Values are floored at
// log(floor); max-subtracted; summed pairwise.
PosteriorMap posterior_from_log_likelihood(std::shared_ptr<const GoalGrid> grid,
                                           std::span<const double> log_likelihood,
                                           double floor = 1e-300);

// Per-cell timing likelihoods P(t_c | traj, g) (direct space, one forward per cell).
std::vector<double> when_likelihoods(const Trajectory& traj, Step t_c, const GoalGrid& grid,
                                     const TimingModel& model, std::span<const Vec3> layout,
                                     const FeatureSettings& features = {}, std::size_t workers = 1);

// Per-cell log P_GMM(point | g).
std::vector<double> where_log_likelihoods(const Vec3& point, const GoalGrid& grid, const GmmModel& gmm);

// alpha * max(log when, log floor) + (1 - alpha) * max(log where, log floor).
std::vector<double> combine_log_likelihoods(std::span<const double> when_likelihood,
                                            std::span<const double> where_log_likelihood,
                                            double alpha, double floor = 1e-300);

std::vector<double> log_of_likelihoods(std::span<const double> likelihood, double floor = 1e-300);

PosteriorMap when_posterior(Step t_c, const Trajectory& traj, std::shared_ptr<const GoalGrid> grid,
                            const TimingModel& model, std::span<const Vec3> layout,
                            const InferenceConfig& config = {}, const FeatureSettings& features = {});

PosteriorMap where_posterior_onset(const Vec3& c_p, const Vec3& c_p_prime,
                                   std::shared_ptr<const GoalGrid> grid, const MlpModel& mlp,
                                   const GmmModel& gmm, const InferenceConfig& config = {});

PosteriorMap where_posterior_release(const Vec3& c_l, std::shared_ptr<const GoalGrid> grid,
                                     const GmmModel& gmm, const InferenceConfig& config = {});

PosteriorMap combined_posterior_onset(Step t_c, const Trajectory& traj, const Vec3& c_p,
                                      const Vec3& c_p_prime, std::shared_ptr<const GoalGrid> grid,
                                      const TimingModel& timing, const MlpModel& mlp,
                                      const GmmModel& gmm, std::span<const Vec3> layout,
                                      const InferenceConfig& config = {},
                                      const FeatureSettings& features = {});

PosteriorMap combined_posterior_release(Step t_c, const Trajectory& traj, const Vec3& c_l,
                                        std::shared_ptr<const GoalGrid> grid,
                                        const TimingModel& timing, const GmmModel& gmm,
                                        std::span<const Vec3> layout,
                                        const InferenceConfig& config = {},
                                        const FeatureSettings& features = {});

// x,y,probability rows in cell order.
void write_posterior_csv(std::ostream& os, const PosteriorMap& map);
std::string posterior_to_json(const PosteriorMap& map);

}  // namespace corrtime
