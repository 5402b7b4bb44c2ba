#include "corrtime/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <tuple>

#include "json.hpp"

#include "corrtime/parallel.hpp"

namespace corrtime {

using json = nlohmann::json;

F1Result f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
    F1Result r;
    r.tp = tp;
    r.fp = fp;
    r.fn = fn;
    if (tp + fp + fn == 0) {
        r.f1 = 1.0;
        r.degenerate = true;
    } else {
        r.f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    }
    return r;
}

namespace {

void check_aligned(std::span<const std::vector<double>> cdfs, std::span<const LabelSequence> labels) {
    if (cdfs.size() != labels.size()) throw std::invalid_argument("f1: prediction and label counts differ");
    for (std::size_t i = 0; i < cdfs.size(); ++i) {
        if (cdfs[i].size() != labels[i].labels.size())
            throw std::invalid_argument("f1: sequence " + std::to_string(i) + " length mismatch");
        if (!labels[i].valid.empty() && labels[i].valid.size() != labels[i].labels.size())
            throw std::invalid_argument("f1: sequence " + std::to_string(i) + " mask length mismatch");
    }
}

void count_sequence(const std::vector<double>& cdf, const LabelSequence& lab, double threshold,
                    std::size_t& tp, std::size_t& fp, std::size_t& fn) {
    for (std::size_t t = 0; t < cdf.size(); ++t) {
        if (!lab.valid.empty() && !lab.valid[t]) continue;
        const bool yhat = cdf[t] >= threshold;
        const bool y = lab.labels[t] >= 0.5;
        tp += yhat && y;
        fp += yhat && !y;
        fn += !yhat && y;
    }
}

std::optional<Step> true_correction_time(const LabelSequence& lab) {
    for (std::size_t t = 0; t < lab.labels.size(); ++t)
        if ((lab.valid.empty() || lab.valid[t]) && lab.labels[t] >= 0.5) return t + 1;
    return std::nullopt;
}

std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

F1Result f1_score(std::span<const std::vector<double>> cdfs, std::span<const LabelSequence> labels,
                  double threshold) {
    check_aligned(cdfs, labels);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < cdfs.size(); ++i) count_sequence(cdfs[i], labels[i], threshold, tp, fp, fn);
    return f1_from_counts(tp, fp, fn);
}

double f1_per_trajectory(std::span<const std::vector<double>> cdfs, std::span<const LabelSequence> labels,
                         double threshold) {
    check_aligned(cdfs, labels);
    if (cdfs.empty()) throw std::invalid_argument("f1_per_trajectory: no trajectories");
    std::vector<double> scores;
    for (std::size_t i = 0; i < cdfs.size(); ++i) {
        std::size_t tp = 0, fp = 0, fn = 0;
        count_sequence(cdfs[i], labels[i], threshold, tp, fp, fn);
        scores.push_back(f1_from_counts(tp, fp, fn).f1);
    }
    return pairwise_sum(scores.data(), scores.size()) / static_cast<double>(scores.size());
}

MaeResult correction_mae(std::span<const std::optional<Step>> predicted,
                         std::span<const std::optional<Step>> truth, double dt) {
    if (predicted.size() != truth.size()) throw std::invalid_argument("correction_mae: length mismatch");
    if (!(dt > 0.0)) throw std::invalid_argument("correction_mae: dt must be positive");
    MaeResult r;
    std::vector<double> errors;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (!truth[i]) continue;
        if (!predicted[i]) {
            ++r.excluded;
            continue;
        }
        const auto a = static_cast<double>(*predicted[i]);
        const auto b = static_cast<double>(*truth[i]);
        errors.push_back(std::abs(a - b) * dt);
    }
    r.pairs = errors.size();
    if (!errors.empty()) r.seconds = pairwise_sum(errors.data(), errors.size()) / static_cast<double>(errors.size());
    return r;
}

double predicted_ratio(std::size_t n_predicted, std::size_t n_true) {
    if (n_true == 0) throw std::invalid_argument("predicted_ratio: no true corrections");
    return static_cast<double>(n_predicted) / static_cast<double>(n_true);
}

double kld(std::span<const double> p, std::span<const double> q, double eps) {
    if (p.size() != q.size() || p.empty()) throw std::invalid_argument("kld: maps differ in size");
    if (!(eps >= 0.0)) throw std::invalid_argument("kld: eps must be non-negative");
    const std::size_t n = p.size();
    std::vector<double> ps(n), qs(n), terms(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw std::invalid_argument("kld: negative probability");
        ps[i] = p[i] + eps;
        qs[i] = q[i] + eps;
    }
    const double zp = pairwise_sum(ps.data(), n), zq = pairwise_sum(qs.data(), n);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = ps[i] / zp, b = qs[i] / zq;
        terms[i] = a > 0.0 ? a * std::log(a / b) : 0.0;
    }
    return std::max(0.0, pairwise_sum(terms.data(), n));
}

double kld(const PosteriorMap& p, const PosteriorMap& q, double eps) {
    if (!p.grid || !q.grid || !p.grid->same_as(*q.grid)) throw std::invalid_argument("kld: grid mismatch");
    return kld(p.probability, q.probability, eps);
}

void ExperimentSettings::validate() const {
    transformer.validate();
    grid.validate();
    inference.validate();
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must lie in (0, 1)");
    if (!(fractions.train > 0.0) || !(fractions.val >= 0.0) || fractions.train + fractions.val >= 1.0)
        throw std::invalid_argument("split fractions must leave room for a test part");
}

std::vector<Matrix> featurize_dataset(const Dataset& dataset, const FeatureSettings& settings,
                                      std::size_t workers) {
    const auto layout = dataset.layout.positions();
    std::vector<Matrix> out(dataset.episodes.size());
    parallel_for(out.size(), workers, [&](std::size_t i) {
        const auto& e = dataset.episodes[i];
        out[i] = featurize(e.trajectory, dataset.layout.goal(e.intended_goal_id).position, layout, settings);
    });
    return out;
}

Matrix append_constant_column(const Matrix& m, double value) {
    Matrix out(m.rows(), m.cols() + 1);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(r, c);
        out(r, m.cols()) = value;
    }
    return out;
}

std::vector<TimingSample> timing_samples(const Dataset& dataset, std::span<const Matrix> features,
                                         std::span<const std::size_t> indices) {
    if (features.size() != dataset.episodes.size())
        throw std::invalid_argument("timing_samples: one feature matrix per episode required");
    std::vector<TimingSample> out;
    out.reserve(indices.size());
    for (const auto i : indices) {
        const auto& e = dataset.episodes.at(i);
        out.push_back({features[i], make_labels(e.trajectory, e.correction)});
    }
    return out;
}

TimingMetrics evaluate_timing(const TimingModel& model, std::span<const TimingSample> test, double dt,
                              double threshold) {
    if (test.empty()) throw std::invalid_argument("evaluate_timing: empty test set");
    std::vector<std::vector<double>> cdfs;
    std::vector<LabelSequence> labels;
    std::vector<std::optional<Step>> predicted, truth;
    for (const auto& s : test) {
        cdfs.push_back(forward(model, s.features, s.labels.valid));
        labels.push_back(s.labels);
        predicted.push_back(predict_correction_time(cdfs.back(), threshold));
        truth.push_back(true_correction_time(s.labels));
    }
    TimingMetrics m;
    m.f1 = f1_score(cdfs, labels, threshold);
    m.f1_per_trajectory = f1_per_trajectory(cdfs, labels, threshold);
    m.mae = correction_mae(predicted, truth, dt);
    m.n_predicted = static_cast<std::size_t>(std::count_if(predicted.begin(), predicted.end(),
                                                           [](const auto& p) { return p.has_value(); }));
    m.n_true = static_cast<std::size_t>(std::count_if(truth.begin(), truth.end(),
                                                      [](const auto& p) { return p.has_value(); }));
    m.ratio = m.n_true > 0 ? predicted_ratio(m.n_predicted, m.n_true) : 0.0;
    return m;
}

TimingRun run_timing_split(const Dataset& dataset, std::span<const Matrix> features, double percentile,
                           std::uint64_t split_seed, const std::vector<std::size_t>& columns,
                           const ExperimentSettings& settings) {
    TimingRun run;
    run.split = split_dataset(dataset, percentile, split_seed, settings.fractions);
    const auto train = timing_samples(dataset, features, run.split.train);
    const auto val = timing_samples(dataset, features, run.split.val);
    const auto test = timing_samples(dataset, features, run.split.test);
    TransformerConfig cfg = settings.transformer;
    cfg.input_width = columns.size();
    auto result = train_timing_model(train, val, cfg, columns, mix_seed(split_seed, 0x7157), settings.timing_train);
    run.best_epoch = result.best_epoch;
    run.model = std::move(result.model);
    run.metrics = evaluate_timing(run.model, test, dataset.settings.dt, settings.threshold);
    return run;
}

std::vector<SpatialPair> spatial_pairs(const Dataset& dataset, std::span<const std::size_t> indices) {
    std::vector<SpatialPair> out;
    for (const auto i : indices) {
        const auto& e = dataset.episodes.at(i);
        if (e.correction) out.push_back({e.correction->c_p, e.correction->c_p_prime, e.correction->c_l});
    }
    return out;
}

SpatialModels fit_spatial_models(const Dataset& dataset, std::span<const std::size_t> train,
                                 std::span<const std::size_t> val, std::uint64_t seed,
                                 const ExperimentSettings& settings) {
    SpatialModels models;
    const auto train_pairs = spatial_pairs(dataset, train);
    const auto val_pairs = spatial_pairs(dataset, val);
    models.mlp = mlp_train(train_pairs, val_pairs, mix_seed(seed, 1), settings.mlp).model;

    std::map<Shape, std::vector<Vec3>> residuals;
    std::vector<Vec3> pooled;
    for (const auto i : train) {
        const auto& e = dataset.episodes.at(i);
        if (!e.correction) continue;
        const Goal& g = dataset.layout.goal(e.intended_goal_id);
        residuals[g.shape].push_back(e.correction->c_l - g.position);
        pooled.push_back(residuals[g.shape].back());
    }
    std::optional<GmmModel> shared;
    for (const auto& g : dataset.layout.goals) {
        if (models.gmms.count(g.shape)) continue;
        const auto& r = residuals[g.shape];
        const auto shape_seed = mix_seed(seed, 0x600 + static_cast<std::uint64_t>(g.shape));
        if (r.size() >= 10) {
            models.gmms.emplace(g.shape, gmm_fit(r, shape_seed, settings.gmm).best.model);
        } else {
            if (!shared) shared = gmm_fit(pooled, mix_seed(seed, 0x6ff), settings.gmm).best.model;
            models.gmms.emplace(g.shape, *shared);
        }
    }
    return models;
}

InferenceScores score_inference(const Dataset& dataset, std::span<const std::size_t> episodes,
                                const TimingModel& timing, const SpatialModels& spatial,
                                const ExperimentSettings& settings, std::span<const double> sweep_alphas) {
    settings.inference.validate();
    const auto grid = std::make_shared<const GoalGrid>(settings.grid);
    const auto layout = dataset.layout.positions();
    const double floor = settings.inference.likelihood_floor;
    const double alpha = settings.inference.alpha;

    InferenceScores s;
    s.alphas.assign(sweep_alphas.begin(), sweep_alphas.end());
    s.sweep.resize(s.alphas.size());
    std::map<int, PosteriorMap> truths;
    auto score = [&](const PosteriorMap& truth, const PosteriorMap& est) {
        s.degenerate_maps += est.degenerate;
        return kld(truth, est);
    };

    for (const auto i : episodes) {
        const auto& e = dataset.episodes.at(i);
        if (!e.correction) continue;
        if (settings.max_kld_episodes > 0 && s.episodes.size() >= settings.max_kld_episodes) break;
        const auto& c = *e.correction;
        const Goal& goal = dataset.layout.goal(e.intended_goal_id);
        auto it = truths.find(goal.id);
        if (it == truths.end()) {
            PosteriorMap t{grid, ground_truth_distribution(goal.shape, goal.id, dataset.layout).discretize(*grid)};
            it = truths.emplace(goal.id, std::move(t)).first;
        }
        const PosteriorMap& truth = it->second;
        const GmmModel& gmm = spatial.gmm_for(goal.shape);

        const auto when_lik = when_likelihoods(e.trajectory, c.t_c, *grid, timing, layout, settings.features,
                                               settings.inference.workers);
        const auto when_log = log_of_likelihoods(when_lik, floor);
        const Vec3 predicted_release = mlp_predict(spatial.mlp, c.c_p, c.c_p_prime);
        const auto onset_log = where_log_likelihoods(predicted_release, *grid, gmm);
        const auto release_log = where_log_likelihoods(c.c_l, *grid, gmm);

        s.episodes.push_back(i);
        s.when.push_back(score(truth, posterior_from_log_likelihood(grid, when_log, floor)));
        s.where_onset.push_back(score(truth, posterior_from_log_likelihood(grid, onset_log, floor)));
        s.where_release.push_back(score(truth, posterior_from_log_likelihood(grid, release_log, floor)));
        s.combined_onset.push_back(score(
            truth, posterior_from_log_likelihood(grid, combine_log_likelihoods(when_lik, onset_log, alpha, floor), floor)));
        s.combined_release.push_back(score(
            truth, posterior_from_log_likelihood(grid, combine_log_likelihoods(when_lik, release_log, alpha, floor), floor)));
        for (std::size_t a = 0; a < s.alphas.size(); ++a)
            s.sweep[a].push_back(score(truth, posterior_from_log_likelihood(
                                                  grid, combine_log_likelihoods(when_lik, onset_log, s.alphas[a], floor),
                                                  floor)));
    }
    return s;
}

InferenceRun run_inference_split(const Dataset& dataset, std::span<const Matrix> features, double percentile,
                                 std::uint64_t split_seed, const ExperimentSettings& settings,
                                 std::span<const double> sweep_alphas) {
    InferenceRun run;
    run.split = split_dataset(dataset, percentile, split_seed, settings.fractions);
    const auto train = timing_samples(dataset, features, run.split.train);
    const auto val = timing_samples(dataset, features, run.split.val);
    std::vector<std::size_t> columns(kFeatureCount);
    for (std::size_t c = 0; c < kFeatureCount; ++c) columns[c] = c;
    TransformerConfig cfg = settings.transformer;
    cfg.input_width = columns.size();
    const auto timing =
        train_timing_model(train, val, cfg, columns, mix_seed(split_seed, 0x7157), settings.timing_train).model;
    const auto spatial = fit_spatial_models(dataset, run.split.train, run.split.val, mix_seed(split_seed, 0x5a7),
                                            settings);
    run.scores = score_inference(dataset, run.split.test, timing, spatial, settings, sweep_alphas);
    return run;
}

std::vector<double> ablation_run(const Dataset& dataset, std::span<const Matrix> features, double percentile,
                                 std::size_t feature_index, std::size_t n_splits, std::uint64_t seed,
                                 const ExperimentSettings& settings, std::size_t workers) {
    if (feature_index < 1 || feature_index > kFeatureCount + 1)
        throw std::invalid_argument("ablation_run: feature index must lie in [1, 8]");
    if (n_splits == 0) throw std::invalid_argument("ablation_run: need at least one split");
    std::vector<Matrix> augmented;
    std::span<const Matrix> used = features;
    std::size_t width = kFeatureCount;
    if (feature_index == kFeatureCount + 1) {
        augmented.reserve(features.size());
        for (const auto& f : features) augmented.push_back(append_constant_column(f, 1.0));
        used = augmented;
        width = kFeatureCount + 1;
    }
    std::vector<std::size_t> baseline(width), ablated;
    for (std::size_t c = 0; c < width; ++c) {
        baseline[c] = c;
        if (c != feature_index - 1) ablated.push_back(c);
    }
    std::vector<double> delta(n_splits);
    parallel_for(n_splits, workers, [&](std::size_t s) {
        const auto split_seed = mix_seed(seed, s);
        const auto full = run_timing_split(dataset, used, percentile, split_seed, baseline, settings);
        const auto without = run_timing_split(dataset, used, percentile, split_seed, ablated, settings);
        delta[s] = full.metrics.f1.f1 - without.metrics.f1.f1;
    });
    return delta;
}

std::vector<double> alpha_sweep(const Dataset& dataset, std::span<const std::size_t> episodes,
                                const TimingModel& timing, const SpatialModels& spatial,
                                const ExperimentSettings& settings, std::span<const double> alphas) {
    for (const double a : alphas)
        if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("alpha_sweep: alpha outside [0, 1]");
    const auto scores = score_inference(dataset, episodes, timing, spatial, settings, alphas);
    if (scores.episodes.empty()) throw std::invalid_argument("alpha_sweep: no corrected episodes to score");
    std::vector<double> out;
    for (const auto& per_episode : scores.sweep) out.push_back(mean(per_episode));
    return out;
}

double mean(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("mean of an empty range");
    return pairwise_sum(v.data(), v.size()) / static_cast<double>(v.size());
}

double stddev(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    std::vector<double> sq(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) sq[i] = (v[i] - m) * (v[i] - m);
    return std::sqrt(pairwise_sum(sq.data(), sq.size()) / static_cast<double>(v.size() - 1));
}

void MetricsReport::add(std::string metric, std::string set, std::string model, std::size_t split, double value) {
    rows.push_back({std::move(metric), std::move(set), std::move(model), split, value});
}

std::string percentile_label(double percentile) {
    return std::to_string(static_cast<int>(std::lround(percentile * 100.0)));
}

void write_report_csv(std::ostream& os, const MetricsReport& report) {
    os << "metric,set,model,split,value\n";
    for (const auto& r : report.rows)
        os << r.metric << ',' << r.set << ',' << r.model << ',' << r.split << ',' << format_value(r.value) << '\n';
}

std::string report_summary_json(const MetricsReport& report) {
    std::vector<std::tuple<std::string, std::string, std::string>> keys;
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
    for (const auto& r : report.rows) {
        auto key = std::make_tuple(r.metric, r.set, r.model);
        auto& g = groups[key];
        if (g.empty()) keys.push_back(key);
        g.push_back(r.value);
    }
    json summary = json::array();
    for (const auto& key : keys) {
        const auto& v = groups[key];
        summary.push_back({{"metric", std::get<0>(key)},
                           {"set", std::get<1>(key)},
                           {"model", std::get<2>(key)},
                           {"mean", mean(v)},
                           {"std", stddev(v)},
                           {"n", v.size()}});
    }
    json doc;
    doc["format"] = "corrtime.metrics";
    doc["version"] = 1;
    doc["metadata"] = json::parse(report.metadata_json);
    doc["summary"] = std::move(summary);
    return doc.dump(2);
}

MetricsReport evaluate_dataset(const Dataset& dataset, std::span<const Matrix> features,
                               const EvaluationPlan& plan, const ExperimentSettings& settings) {
    settings.validate();
    struct Task {
        double percentile;
        std::size_t split;
        int kind;  // 0 multi-feature timing, 1 Boltzmann baseline, 2 goal inference
    };
    std::vector<Task> tasks;
    for (const double p : plan.percentiles) {
        for (std::size_t s = 0; s < plan.timing_splits; ++s) {
            tasks.push_back({p, s, 0});
            if (plan.baseline) tasks.push_back({p, s, 1});
        }
        if (plan.kld)
            for (std::size_t s = 0; s < plan.kld_splits; ++s) tasks.push_back({p, s, 2});
    }
    std::vector<std::size_t> all(kFeatureCount);
    for (std::size_t c = 0; c < kFeatureCount; ++c) all[c] = c;
    const std::vector<std::size_t> boltzmann{kOptimalityRatio};

    std::vector<std::vector<MetricRow>> results(tasks.size());
    parallel_for(tasks.size(), plan.workers, [&](std::size_t k) {
        const auto& t = tasks[k];
        const auto set = percentile_label(t.percentile);
        auto& out = results[k];
        if (t.kind < 2) {
            const auto split_seed = mix_seed(plan.seed, t.split);
            const auto run = run_timing_split(dataset, features, t.percentile, split_seed,
                                              t.kind == 0 ? all : boltzmann, settings);
            const std::string model = t.kind == 0 ? "multi" : "boltzmann";
            const auto& m = run.metrics;
            out.push_back({"f1", set, model, t.split, m.f1.f1});
            out.push_back({"f1_per_trajectory", set, model, t.split, m.f1_per_trajectory});
            out.push_back({"ratio", set, model, t.split, m.ratio});
            if (m.mae.seconds) out.push_back({"mae_s", set, model, t.split, *m.mae.seconds});
            out.push_back({"mae_excluded", set, model, t.split, static_cast<double>(m.mae.excluded)});
        } else {
            const auto split_seed = mix_seed(mix_seed(plan.seed, 0x4b1d), t.split);
            const auto run = run_inference_split(dataset, features, t.percentile, split_seed, settings);
            const auto& s = run.scores;
            if (s.episodes.empty()) return;
            out.push_back({"kld", set, "when", t.split, mean(s.when)});
            out.push_back({"kld", set, "where_onset", t.split, mean(s.where_onset)});
            out.push_back({"kld", set, "combined_onset", t.split, mean(s.combined_onset)});
            out.push_back({"kld", set, "where_release", t.split, mean(s.where_release)});
            out.push_back({"kld", set, "combined_release", t.split, mean(s.combined_release)});
            out.push_back({"kld_degenerate_maps", set, "all", t.split, static_cast<double>(s.degenerate_maps)});
        }
    });
    MetricsReport report;
    for (auto& r : results)
        for (auto& row : r) report.rows.push_back(std::move(row));
    return report;
}

}  // namespace corrtime
