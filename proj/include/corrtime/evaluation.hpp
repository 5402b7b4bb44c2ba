#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corrtime/features.hpp"
#include "corrtime/inference.hpp"
#include "corrtime/simulator.hpp"
#include "corrtime/spatial.hpp"
#include "corrtime/timing.hpp"

namespace corrtime {

struct F1Result {
    double f1 = 0.0;
    // No positive labels and no positive predictions anywhere: F1 reported as 1.
    bool degenerate = false;
    std::size_t tp = 0, fp = 0, fn = 0;
};

F1Result f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn);

// Timestep-level F1 pooled over every valid step of every trajectory.
F1Result f1_score(std::span<const std::vector<double>> cdfs, std::span<const LabelSequence> labels,
                  double threshold = 0.5);

// Mean of per-trajectory F1 (degenerate trajectories count as 1).
double f1_per_trajectory(std::span<const std::vector<double>> cdfs,
                         std::span<const LabelSequence> labels, double threshold = 0.5);

struct MaeResult {
    std::optional<double> seconds;  // absent when no trajectory has both times
    std::size_t pairs = 0;
    std::size_t excluded = 0;  // truly corrected trajectories without a prediction
};

MaeResult correction_mae(std::span<const std::optional<Step>> predicted,
                         std::span<const std::optional<Step>> truth, double dt);

double predicted_ratio(std::size_t n_predicted, std::size_t n_true);

// KL(p_true || p_est) after adding eps to both and renormalizing.
double kld(std::span<const double> p_true, std::span<const double> p_est, double eps = 1e-12);
double kld(const PosteriorMap& p_true, const PosteriorMap& p_est, double eps = 1e-12);

// Knobs shared by the split-based experiments.
struct ExperimentSettings {
    TransformerConfig transformer;
    TimingTrainOptions timing_train;
    MlpTrainOptions mlp;
    GmmFitOptions gmm;
    GridSpec grid;
    InferenceConfig inference;
    FeatureSettings features;
    SplitFractions fractions;
    double threshold = 0.5;
    // Cap on corrected test episodes scored per split for KLD (0 = all).
    std::size_t max_kld_episodes = 0;

    void validate() const;
};

// Feature matrices of every episode against its intended goal.
std::vector<Matrix> featurize_dataset(const Dataset& dataset, const FeatureSettings& settings = {},
                                      std::size_t workers = 1);

// Copy of `m` with one extra column set to `value`.
Matrix append_constant_column(const Matrix& m, double value = 1.0);

std::vector<TimingSample> timing_samples(const Dataset& dataset, std::span<const Matrix> features,
                                         std::span<const std::size_t> indices);

struct TimingMetrics {
    F1Result f1;
    double f1_per_trajectory = 0.0;
    MaeResult mae;
    double ratio = 0.0;
    std::size_t n_predicted = 0;
    std::size_t n_true = 0;
};

TimingMetrics evaluate_timing(const TimingModel& model, std::span<const TimingSample> test,
                              double dt, double threshold = 0.5);

struct TimingRun {
    TimingModel model;
    TimingMetrics metrics;
    DatasetSplit split;
    std::size_t best_epoch = 0;
};

// Splits with `split_seed`, trains on `columns` of `features` and scores the test part.
TimingRun run_timing_split(const Dataset& dataset, std::span<const Matrix> features, double percentile,
                           std::uint64_t split_seed, const std::vector<std::size_t>& columns,
                           const ExperimentSettings& settings);

// Corrected episodes among `indices` as (c_p, c_p', c_l) triples.
std::vector<SpatialPair> spatial_pairs(const Dataset& dataset, std::span<const std::size_t> indices);

// MLP on (c_p, c_p') -> c_l and one release mixture per shape over c_l - intended goal.
// Shapes with fewer than 10 training residuals share a mixture fit on all shapes.
SpatialModels fit_spatial_models(const Dataset& dataset, std::span<const std::size_t> train,
                                 std::span<const std::size_t> val, std::uint64_t seed,
                                 const ExperimentSettings& settings);

inline constexpr std::array<double, 9> kSweepAlphas{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

// Per-episode KLDs of every posterior variant; sweep[a][e] is the onset KLD at alphas[a].
struct InferenceScores {
    std::vector<std::size_t> episodes;
    std::vector<double> when, where_onset, combined_onset, where_release, combined_release;
    std::vector<double> alphas;
    std::vector<std::vector<double>> sweep;
    std::size_t degenerate_maps = 0;
};

InferenceScores score_inference(const Dataset& dataset, std::span<const std::size_t> episodes,
                                const TimingModel& timing, const SpatialModels& spatial,
                                const ExperimentSettings& settings,
                                std::span<const double> sweep_alphas = {});

struct InferenceRun {
    InferenceScores scores;
    DatasetSplit split;
};

// Trains timing (all seven features) and spatial models on one split and scores
// the corrected test episodes.
InferenceRun run_inference_split(const Dataset& dataset, std::span<const Matrix> features,
                                 double percentile, std::uint64_t split_seed,
                                 const ExperimentSettings& settings,
                                 std::span<const double> sweep_alphas = {});

// Baseline-minus-ablated F1 per split. feature_index is 1-based; 8 names a
// constant dummy column appended to every feature matrix.
std::vector<double> ablation_run(const Dataset& dataset, std::span<const Matrix> features,
                                 double percentile, std::size_t feature_index, std::size_t n_splits,
                                 std::uint64_t seed, const ExperimentSettings& settings,
                                 std::size_t workers = 1);

// Mean onset KLD per alpha over the given corrected episodes with fixed models.
std::vector<double> alpha_sweep(const Dataset& dataset, std::span<const std::size_t> episodes,
                                const TimingModel& timing, const SpatialModels& spatial,
                                const ExperimentSettings& settings,
                                std::span<const double> alphas = kSweepAlphas);

double mean(std::span<const double> v);
double stddev(std::span<const double> v);  // sample standard deviation; 0 below two values

struct MetricRow {
    std::string metric;
    std::string set;
    std::string model;
    std::size_t split = 0;
    double value = 0.0;
};

struct MetricsReport {
    std::vector<MetricRow> rows;
    std::string metadata_json = "{}";  // seeds, split counts, config hash

    void add(std::string metric, std::string set, std::string model, std::size_t split, double value);
};

std::string percentile_label(double percentile);

void write_report_csv(std::ostream& os, const MetricsReport& report);
// Mean/std/count per (metric, set, model) plus the metadata object.
std::string report_summary_json(const MetricsReport& report);

struct EvaluationPlan {
    std::vector<double> percentiles{kPercentileSets.begin(), kPercentileSets.end()};
    std::size_t timing_splits = 20;
    std::size_t kld_splits = 10;
    std::uint64_t seed = 1;
    bool baseline = true;  // also train the F7-only model
    bool kld = true;
    std::size_t workers = 1;
};

// Multi-split protocol: timing metrics for the multi-feature model (and the
// Boltzmann baseline) on every percentile set, then KLDs per posterior variant.
MetricsReport evaluate_dataset(const Dataset& dataset, std::span<const Matrix> features,
                               const EvaluationPlan& plan, const ExperimentSettings& settings);

}  // namespace corrtime
