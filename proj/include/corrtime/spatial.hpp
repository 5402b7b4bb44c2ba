#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "corrtime/geometry.hpp"
#include "corrtime/optim.hpp"
#include "corrtime/trajectory.hpp"

namespace corrtime {

// Onset cues and the observed release point of one correction.
struct SpatialPair {
    Vec3 c_p;
    Vec3 c_p_prime;
    Vec3 c_l;
};

inline constexpr std::size_t kMlpInputs = 6;
inline constexpr std::size_t kMlpOutputs = 3;

// 6 -> hidden -> hidden -> 3 with ReLU between layers. Inputs and outputs are
// z-scored with training statistics.
struct MlpModel {
    std::size_t hidden = 64;
    std::vector<double> params;
    std::array<double, kMlpInputs> input_mean{};
    std::array<double, kMlpInputs> input_std{};
    std::array<double, kMlpOutputs> output_mean{};
    std::array<double, kMlpOutputs> output_std{};
    std::uint64_t seed = 0;

    void validate() const;
};

std::size_t mlp_param_count(std::size_t hidden);

// Fan-in scaled uniform weights, zero biases, identity normalization.
MlpModel mlp_initialize(std::size_t hidden, std::uint64_t seed);

// Mean squared error over all rows and outputs of normalized data (inputs N x 6,
// targets N x 3, row-major) and its gradient.
double mlp_loss_and_gradient(std::size_t hidden, std::span<const double> params,
                             std::span<const double> inputs, std::span<const double> targets,
                             std::span<double> grad);

struct MlpTrainOptions {
    std::size_t hidden = 64;
    std::size_t max_epochs = 400;
    std::size_t batch_size = 32;
    std::size_t patience = 40;
    AdamSettings adam;
};

struct MlpTrainResult {
    MlpModel model;
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::size_t best_epoch = 0;
};

// Requires at least 10 training pairs. Keeps the lowest validation-loss weights
// (training loss when `val` is empty). Throws DivergenceError on non-finite loss.
MlpTrainResult mlp_train(std::span<const SpatialPair> train, std::span<const SpatialPair> val,
                         std::uint64_t seed, const MlpTrainOptions& options = {});

Vec3 mlp_predict(const MlpModel& model, const Vec3& c_p, const Vec3& c_p_prime);

std::string mlp_to_json(const MlpModel& model);
MlpModel mlp_from_json(const std::string& text);

using Mat3 = std::array<std::array<double, 3>, 3>;

struct GmmComponent {
    double weight = 1.0;
    Vec3 mean;
    Mat3 covariance{};
};

// Mixture over goal-relative residuals (c_l - g).
class GmmModel {
public:
    GmmModel() = default;
    // Validates weights and covariances and caches Cholesky factors.
    explicit GmmModel(std::vector<GmmComponent> components);

    const std::vector<GmmComponent>& components() const { return components_; }
    std::size_t size() const { return components_.size(); }

    double log_density(const Vec3& residual) const;

private:
    struct Factor {
        Mat3 chol{};  // lower triangular
        double log_norm = 0.0;  // log weight - 1.5 log(2 pi) - log |L|
    };
    std::vector<GmmComponent> components_;
    std::vector<Factor> factors_;
};

// Lower Cholesky factor of a symmetric 3x3 matrix; false if not positive definite.
bool cholesky3(const Mat3& a, Mat3& lower);

struct GmmFitOptions {
    std::size_t k_min = 1;
    std::size_t k_max = 5;
    bool select_by_bic = true;
    std::size_t fallback_k = 2;  // used when select_by_bic is false
    std::size_t max_iterations = 500;
    double tolerance = 1e-10;  // on the change in mean log-likelihood
    std::size_t restarts = 3;
};

struct GmmFit {
    GmmModel model;
    // Mean per-sample log-likelihood after each EM iteration.
    std::vector<double> log_likelihood_trace;
    double log_likelihood = 0.0;  // total
    double bic = 0.0;
    std::size_t reinitializations = 0;
};

struct GmmSelection {
    GmmFit best;
    std::size_t selected_k = 0;
    std::map<std::size_t, double> bic_by_k;
};

class GmmDegenerateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// EM for a fixed K with k-means++ seeding. Needs at least 10*K samples. A component
// whose weight drops below 1e-6 triggers one reinitialization; a second collapse
// throws GmmDegenerateError.
GmmFit gmm_fit_k(std::span<const Vec3> residuals, std::size_t k, std::uint64_t seed,
                 const GmmFitOptions& options = {});

// Fits K over [k_min, min(k_max, n / 10)] and keeps the lowest BIC.
GmmSelection gmm_fit(std::span<const Vec3> residuals, std::uint64_t seed,
                     const GmmFitOptions& options = {});

// Log density of the mixture at residual (point - goal).
double gmm_logpdf(const GmmModel& model, const Vec3& point, const Vec3& goal);

std::string gmm_to_json(const GmmModel& model);
GmmModel gmm_from_json(const std::string& text);

// Release-point MLP plus one residual mixture per block shape.
struct SpatialModels {
    MlpModel mlp;
    std::map<Shape, GmmModel> gmms;

    const GmmModel& gmm_for(Shape shape) const;
};

std::string spatial_models_to_json(const SpatialModels& models);
SpatialModels spatial_models_from_json(const std::string& text);

}  // namespace corrtime
