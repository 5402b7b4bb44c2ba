#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corrtime/matrix.hpp"
#include "corrtime/optim.hpp"
#include "corrtime/trajectory.hpp"

namespace corrtime {

struct TransformerConfig {
    std::size_t layers = 2;
    std::size_t heads = 8;
    std::size_t width = 32;
    std::size_t ff_width = 64;
    double dropout = 0.1;
    std::size_t max_length = 512;
    std::size_t input_width = 7;

    void validate() const;
};

// Named slice of the flat parameter vector.
struct ParamBlock {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t size() const { return rows * cols; }
};

std::vector<ParamBlock> transformer_param_layout(const TransformerConfig& config);

// Per-column z-score statistics computed from training features.
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> stddev;

    // Columns whose standard deviation is below 1e-12 get stddev 1.
    static Standardizer fit(std::span<const Matrix> samples);
    Matrix apply(const Matrix& raw) const;
    Matrix invert(const Matrix& standardized) const;
};

struct TimingModel {
    TransformerConfig config;
    std::vector<double> params;
    Standardizer standardizer;
    // Columns of the raw feature matrix fed to the network, in order.
    std::vector<std::size_t> feature_columns;
    std::uint64_t seed = 0;

    // Fan-in scaled uniform weights, zero biases, unit layer-norm gains.
    static TimingModel initialize(const TransformerConfig& config,
                                  std::vector<std::size_t> feature_columns, std::uint64_t seed);

    // Picks `feature_columns` out of a raw feature matrix and standardizes them.
    Matrix prepare_input(const Matrix& raw_features) const;
};

struct LabelSequence {
    std::vector<double> labels;        // 0 before t_c, 1 from t_c onward
    std::vector<std::uint8_t> valid;   // 1 for steps that count in attention and loss
};

// Throws std::out_of_range when t_c is outside [1, length].
LabelSequence make_labels(std::size_t length, std::optional<Step> t_c);
LabelSequence make_labels(const Trajectory& traj, const std::optional<CorrectionEvent>& event);

// Reusable scratch buffers for inference; one per thread.
class InferenceWorkspace {
public:
    InferenceWorkspace();
    ~InferenceWorkspace();
    InferenceWorkspace(InferenceWorkspace&&) noexcept;
    InferenceWorkspace& operator=(InferenceWorkspace&&) noexcept;

    struct Buffers;
    Buffers& buffers() { return *buffers_; }

private:
    std::unique_ptr<Buffers> buffers_;
};

// Per-step CDF P(t_c <= t | trajectory, goal) from raw features. `valid` marks
// steps visible to attention (empty = all). Dropout is disabled.
std::vector<double> forward(const TimingModel& model, const Matrix& raw_features,
                            std::span<const std::uint8_t> valid = {});

// CDF values only for 0-based rows [row_lo, row_hi); the final encoder layer
// evaluates queries for those rows alone.
std::vector<double> forward_rows(const TimingModel& model, const Matrix& standardized_input,
                                 std::size_t row_lo, std::size_t row_hi, InferenceWorkspace& ws,
                                 std::span<const std::uint8_t> valid = {});

// Training sequence already passed through TimingModel::prepare_input.
struct PreparedSequence {
    Matrix input;
    LabelSequence labels;
};

// Masked mean binary cross-entropy over `batch` with its gradient w.r.t. `params`
// (written to `grad`). dropout_seed == 0 disables dropout. Per-sequence gradients
// are reduced in index order, so the result does not depend on `workers`.
double timing_loss_and_gradient(const TransformerConfig& config, std::span<const double> params,
                                std::span<const PreparedSequence> batch, std::span<double> grad,
                                std::uint64_t dropout_seed = 0, std::size_t workers = 1);

double timing_loss(const TransformerConfig& config, std::span<const double> params,
                   std::span<const PreparedSequence> sequences);

struct TimingSample {
    Matrix features;  // raw (unstandardized) features
    LabelSequence labels;
};

struct TimingTrainOptions {
    std::size_t max_epochs = 300;
    std::size_t batch_size = 32;
    // Stop after this many epochs without a validation improvement (0 = never).
    std::size_t patience = 25;
    AdamSettings adam;
    std::size_t workers = 1;
};

struct TimingTrainResult {
    TimingModel model;
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::size_t best_epoch = 0;
};

// Minimizes masked BCE with Adam and keeps the parameters with the lowest
// validation loss. Deterministic for a given seed. Throws DivergenceError on a
// non-finite loss.
TimingTrainResult train_timing_model(std::span<const TimingSample> train,
                                     std::span<const TimingSample> val,
                                     const TransformerConfig& config,
                                     std::vector<std::size_t> feature_columns, std::uint64_t seed,
                                     const TimingTrainOptions& options = {});

// pdf(1) = cdf(1), pdf(t) = max(0, cdf(t) - cdf(t-1)).
std::vector<double> pdf_from_cdf(std::span<const double> cdf);

// Mean pdf over the steps within +-round(window/dt)/2 of step t (1-based),
// truncated at the sequence bounds.
double timing_likelihood(std::span<const double> pdf, Step t, double window = 1.2, double dt = 0.1);

// First step where the thresholded CDF switches to 1 and stays 1 through the end.
std::optional<Step> predict_correction_time(std::span<const double> cdf, double threshold = 0.5);

// Self-describing JSON checkpoint; reload is bit-exact.
std::string timing_model_to_json(const TimingModel& model);
TimingModel timing_model_from_json(const std::string& text);

}  // namespace corrtime
