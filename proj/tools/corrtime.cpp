#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "corrtime/config.hpp"
#include "corrtime/evaluation.hpp"
#include "corrtime/inference.hpp"
#include "corrtime/parallel.hpp"
#include "corrtime/simulator.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace corrtime;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kConfig = 2, kDivergence = 3, kIo = 4 };

struct Common {
    std::string config_path;
    std::string out_dir;
    std::size_t workers = 0;
    bool workers_set = false;
};

struct Context {
    RunConfig config;
    std::string hash;
    fs::path out;
    std::size_t workers = 1;
};

Context make_context(const Common& c) {
    Context ctx;
    ctx.config = load_config(c.config_path);
    if (c.workers_set) ctx.config.workers = c.workers;
    ctx.hash = config_hash(ctx.config);
    ctx.out = c.out_dir.empty() ? ctx.config.resolved_output_dir() : fs::path(c.out_dir);
    ctx.workers = ctx.config.resolved_workers();
    ctx.config.experiment.inference.workers = 1;
    return ctx;
}

fs::path dataset_dir(const Context& ctx, const std::string& arg) {
    return arg.empty() ? ctx.out / "dataset" : fs::path(arg);
}

std::string provenance_line(const Context& ctx, const LoadedDataset& data, const std::string& extra = {}) {
    std::string s = "# config_hash=" + ctx.hash + " dataset_hash=" + data.dataset_hash +
                    " dataset_seed=" + std::to_string(data.dataset.seed);
    if (!extra.empty()) s += " " + extra;
    return s + "\n";
}

std::vector<std::size_t> all_columns() {
    std::vector<std::size_t> c(kFeatureCount);
    for (std::size_t i = 0; i < kFeatureCount; ++i) c[i] = i;
    return c;
}

struct Checkpoint {
    json header;
    std::string model;
};

std::string wrap_checkpoint(const std::string& kind, const Context& ctx, const LoadedDataset& data,
                            double percentile, std::uint64_t split_seed, json extra, const std::string& model_json) {
    json j;
    j["format"] = "corrtime.checkpoint";
    j["version"] = 1;
    j["kind"] = kind;
    j["config_hash"] = ctx.hash;
    j["dataset_hash"] = data.dataset_hash;
    j["percentile"] = percentile;
    j["split_seed"] = split_seed;
    for (auto& [k, v] : extra.items()) j[k] = v;
    j["model"] = json::parse(model_json);
    return j.dump(2) + "\n";
}

Checkpoint read_checkpoint(const fs::path& path, const std::string& kind, const LoadedDataset& data) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error&) {
        throw IoError(path.string() + " is not valid JSON");
    }
    if (j.value("format", "") != "corrtime.checkpoint" || j.value("kind", "") != kind)
        throw ConfigError(path.string() + " is not a " + kind + " checkpoint");
    if (j.value("dataset_hash", "") != data.dataset_hash)
        throw ConfigError(path.string() + " was trained on a different dataset (hash " + j.value("dataset_hash", "?") +
                          ", dataset " + data.dataset_hash + ")");
    Checkpoint c;
    c.model = j.at("model").dump();
    j.erase("model");
    c.header = std::move(j);
    return c;
}

const Episode& find_episode(const Dataset& d, const std::string& id) {
    for (const auto& e : d.episodes)
        if (e.trajectory.id == id) return e;
    throw std::invalid_argument("no episode with id '" + id + "'");
}

int cmd_simulate(const Common& common, const std::string& dataset_arg) {
    const auto ctx = make_context(common);
    const auto& c = ctx.config;
    std::cerr << "simulating " << c.episodes << " episodes (seed " << c.dataset_seed << ")\n";
    const auto d = gen_dataset(c.layout, c.intervener, c.simulation, c.episodes, c.dataset_seed, ctx.workers);
    const auto dir = dataset_dir(ctx, dataset_arg);
    write_dataset(dir, d, c);
    std::cout << "wrote " << dir.string() << " (" << d.episodes.size() << " episodes, " << d.corrected_count()
              << " corrected)\n";
    return kOk;
}

int cmd_featurize(const Common& common, const std::string& dataset_arg, const std::string& goal_mode,
                  const std::string& output) {
    const auto ctx = make_context(common);
    const auto data = read_dataset(dataset_dir(ctx, dataset_arg));
    const auto& d = data.dataset;
    const auto layout = d.layout.positions();
    std::vector<Matrix> features(d.episodes.size());
    parallel_for(features.size(), ctx.workers, [&](std::size_t i) {
        const auto& e = d.episodes[i];
        const int goal = goal_mode == "nominal" ? e.trajectory.goal_id : e.intended_goal_id;
        features[i] = featurize(e.trajectory, d.layout.goal(goal).position, layout, ctx.config.experiment.features);
    });
    std::ostringstream os;
    os << provenance_line(ctx, data, "goal=" + goal_mode);
    write_features_csv_header(os);
    for (std::size_t i = 0; i < features.size(); ++i)
        write_features_csv(os, d.episodes[i].trajectory.id, features[i]);
    const fs::path path = output.empty() ? ctx.out / ("features_" + goal_mode + ".csv") : fs::path(output);
    atomic_write(path, os.str());
    std::cout << "wrote " << path.string() << "\n";
    return kOk;
}

int cmd_train_timing(const Common& common, const std::string& dataset_arg, double percentile, const std::string& mode,
                     std::uint64_t seed, bool seed_set, const std::string& output) {
    const auto ctx = make_context(common);
    const auto data = read_dataset(dataset_dir(ctx, dataset_arg));
    const auto& d = data.dataset;
    if (percentile <= 0.0) percentile = ctx.config.percentile;
    const auto features = featurize_dataset(d, ctx.config.experiment.features, ctx.workers);
    const auto split = split_dataset(d, percentile, ctx.config.split_seed, ctx.config.experiment.fractions);
    const auto columns = mode == "boltzmann-only" ? std::vector<std::size_t>{kOptimalityRatio} : all_columns();
    auto cfg = ctx.config.experiment.transformer;
    cfg.input_width = columns.size();
    auto opts = ctx.config.experiment.timing_train;
    opts.workers = ctx.workers;
    const auto train_seed = seed_set ? seed : mix_seed(ctx.config.split_seed, 0x7157);
    std::cerr << "training timing model (" << mode << ") on " << split.train.size() << " episodes\n";
    const auto result = train_timing_model(timing_samples(d, features, split.train),
                                           timing_samples(d, features, split.val), cfg, columns, train_seed, opts);
    const auto test = timing_samples(d, features, split.test);
    const auto m = evaluate_timing(result.model, test, d.settings.dt, ctx.config.experiment.threshold);
    json extra{{"mode", mode},
               {"train_seed", train_seed},
               {"best_epoch", result.best_epoch},
               {"test_f1", m.f1.f1},
               {"test_ratio", m.ratio}};
    const fs::path path = output.empty() ? ctx.out / ("timing_" + mode + ".json") : fs::path(output);
    atomic_write(path, wrap_checkpoint("timing", ctx, data, percentile, ctx.config.split_seed, extra,
                                       timing_model_to_json(result.model)));
    std::printf("test f1 %.4f ratio %.3f", m.f1.f1, m.ratio);
    if (m.mae.seconds) std::printf(" mae %.3f s", *m.mae.seconds);
    std::printf("\nwrote %s\n", path.string().c_str());
    return kOk;
}

int cmd_train_spatial(const Common& common, const std::string& dataset_arg, double percentile, std::uint64_t seed,
                      bool seed_set, const std::string& output) {
    const auto ctx = make_context(common);
    const auto data = read_dataset(dataset_dir(ctx, dataset_arg));
    const auto& d = data.dataset;
    if (percentile <= 0.0) percentile = ctx.config.percentile;
    const auto split = split_dataset(d, percentile, ctx.config.split_seed, ctx.config.experiment.fractions);
    const auto fit_seed = seed_set ? seed : mix_seed(ctx.config.split_seed, 0x5a7);
    const auto models = fit_spatial_models(d, split.train, split.val, fit_seed, ctx.config.experiment);
    json ks = json::object();
    for (const auto& [shape, g] : models.gmms) ks[std::string(to_string(shape))] = g.components().size();
    const fs::path path = output.empty() ? ctx.out / "spatial_models.json" : fs::path(output);
    atomic_write(path, wrap_checkpoint("spatial", ctx, data, percentile, ctx.config.split_seed,
                                       {{"fit_seed", fit_seed}, {"components", ks}}, spatial_models_to_json(models)));
    std::printf("wrote %s\n", path.string().c_str());
    return kOk;
}

int cmd_infer(const Common& common, const std::string& dataset_arg, const std::string& timing_path,
              const std::string& spatial_path, const std::string& episode_id, const std::string& model,
              double alpha, bool alpha_set, const std::string& output) {
    auto ctx = make_context(common);
    const auto data = read_dataset(dataset_dir(ctx, dataset_arg));
    const auto& d = data.dataset;
    auto cfg = ctx.config.experiment.inference;
    if (alpha_set) cfg.alpha = alpha;
    cfg.workers = ctx.workers;
    cfg.validate();
    const auto grid = std::make_shared<const GoalGrid>(ctx.config.experiment.grid);
    const auto layout = d.layout.positions();
    const auto& feats = ctx.config.experiment.features;

    const bool needs_timing = model != "where-onset" && model != "where-release";
    const bool needs_spatial = model != "when";
    TimingModel timing;
    SpatialModels spatial;
    if (needs_timing) {
        if (timing_path.empty()) throw std::invalid_argument("--timing is required for model " + model);
        timing = timing_model_from_json(read_checkpoint(timing_path, "timing", data).model);
    }
    if (needs_spatial) {
        if (spatial_path.empty()) throw std::invalid_argument("--spatial is required for model " + model);
        spatial = spatial_models_from_json(read_checkpoint(spatial_path, "spatial", data).model);
    }
    const auto& e = find_episode(d, episode_id);
    if (!e.correction) throw std::invalid_argument("episode '" + episode_id + "' has no correction");
    const auto& c = *e.correction;
    const Shape shape = d.layout.goal(e.intended_goal_id).shape;
    PosteriorMap map;
    if (model == "when") {
        map = when_posterior(c.t_c, e.trajectory, grid, timing, layout, cfg, feats);
    } else if (model == "where-onset") {
        map = where_posterior_onset(c.c_p, c.c_p_prime, grid, spatial.mlp, spatial.gmm_for(shape), cfg);
    } else if (model == "where-release") {
        map = where_posterior_release(c.c_l, grid, spatial.gmm_for(shape), cfg);
    } else if (model == "combined-onset") {
        map = combined_posterior_onset(c.t_c, e.trajectory, c.c_p, c.c_p_prime, grid, timing, spatial.mlp,
                                       spatial.gmm_for(shape), layout, cfg, feats);
    } else {
        map = combined_posterior_release(c.t_c, e.trajectory, c.c_l, grid, timing, spatial.gmm_for(shape), layout,
                                         cfg, feats);
    }
    std::ostringstream os;
    char extra[160];
    std::snprintf(extra, sizeof extra, "episode=%s model=%s alpha=%.17g degenerate=%d", episode_id.c_str(),
                  model.c_str(), cfg.alpha, map.degenerate ? 1 : 0);
    os << provenance_line(ctx, data, extra);
    write_posterior_csv(os, map);
    const fs::path path = output.empty() ? ctx.out / ("posterior_" + episode_id + "_" + model + ".csv") : fs::path(output);
    atomic_write(path, os.str());
    const auto best = grid->cell(map.argmax());
    std::printf("argmax (%.3f, %.3f)%s\nwrote %s\n", best.x, best.y, map.degenerate ? " [degenerate]" : "",
                path.string().c_str());
    return kOk;
}

int cmd_evaluate(const Common& common, const std::string& dataset_arg, const std::string& timing_path,
                 const std::string& spatial_path, std::size_t splits, std::size_t kld_splits, bool no_kld,
                 const std::string& output) {
    const auto ctx = make_context(common);
    const auto data = read_dataset(dataset_dir(ctx, dataset_arg));
    const auto& d = data.dataset;
    const auto& x = ctx.config.experiment;
    auto plan = ctx.config.evaluation;
    if (splits > 0) plan.timing_splits = splits;
    if (kld_splits > 0) plan.kld_splits = kld_splits;
    if (no_kld) plan.kld = false;
    plan.workers = ctx.workers;
    const auto features = featurize_dataset(d, x.features, ctx.workers);

    std::optional<TimingModel> timing;
    std::optional<SpatialModels> spatial;
    json checkpoints = json::object();
    if (!timing_path.empty()) {
        const auto ck = read_checkpoint(timing_path, "timing", data);
        timing = timing_model_from_json(ck.model);
        checkpoints["timing"] = ck.header;
    }
    if (!spatial_path.empty()) {
        const auto ck = read_checkpoint(spatial_path, "spatial", data);
        spatial = spatial_models_from_json(ck.model);
        checkpoints["spatial"] = ck.header;
    }

    std::cerr << "evaluating " << plan.percentiles.size() << " sets x " << plan.timing_splits << " timing / "
              << (plan.kld ? plan.kld_splits : 0) << " KLD splits on " << ctx.workers << " workers\n";
    auto report = evaluate_dataset(d, features, plan, x);

    // Fixed checkpoints are scored on the configured split's test part.
    if (timing || spatial) {
        const auto split = split_dataset(d, ctx.config.percentile, ctx.config.split_seed, x.fractions);
        const auto set = percentile_label(ctx.config.percentile);
        if (timing) {
            const auto m = evaluate_timing(*timing, timing_samples(d, features, split.test), d.settings.dt, x.threshold);
            report.add("f1", set, "checkpoint", 0, m.f1.f1);
            report.add("ratio", set, "checkpoint", 0, m.ratio);
            if (m.mae.seconds) report.add("mae_s", set, "checkpoint", 0, *m.mae.seconds);
        }
        if (timing && spatial) {
            const auto s = score_inference(d, split.test, *timing, *spatial, x);
            if (!s.episodes.empty()) {
                report.add("kld", set, "checkpoint_when", 0, mean(s.when));
                report.add("kld", set, "checkpoint_where_onset", 0, mean(s.where_onset));
                report.add("kld", set, "checkpoint_combined_onset", 0, mean(s.combined_onset));
                report.add("kld", set, "checkpoint_where_release", 0, mean(s.where_release));
                report.add("kld", set, "checkpoint_combined_release", 0, mean(s.combined_release));
            }
        }
    }
    json meta{{"config_hash", ctx.hash},
              {"dataset_hash", data.dataset_hash},
              {"dataset_seed", d.seed},
              {"evaluation_seed", plan.seed},
              {"timing_splits", plan.timing_splits},
              {"kld_splits", plan.kld ? plan.kld_splits : 0},
              {"percentiles", plan.percentiles},
              {"grid_cells", GoalGrid(x.grid).size()},
              {"checkpoints", checkpoints}};
    report.metadata_json = meta.dump();
    std::ostringstream csv;
    csv << "# config_hash=" << ctx.hash << " dataset_hash=" << data.dataset_hash << " seed=" << plan.seed << "\n";
    write_report_csv(csv, report);
    const fs::path base = output.empty() ? ctx.out / "metrics" : fs::path(output);
    atomic_write(fs::path(base.string() + ".csv"), csv.str());
    atomic_write(fs::path(base.string() + ".json"), report_summary_json(report) + "\n");
    std::printf("wrote %s.csv and %s.json\n", base.string().c_str(), base.string().c_str());
    return kOk;
}

int cmd_ablate(const Common& common, const std::string& dataset_arg, std::vector<std::size_t> feature_list,
               double percentile, std::size_t splits, const std::string& output) {
    const auto ctx = make_context(common);
    const auto data = read_dataset(dataset_dir(ctx, dataset_arg));
    const auto& d = data.dataset;
    if (percentile <= 0.0) percentile = ctx.config.percentile;
    if (splits == 0) splits = ctx.config.ablation_splits;
    if (feature_list.empty())
        for (std::size_t f = 1; f <= kFeatureCount + 1; ++f) feature_list.push_back(f);
    const auto features = featurize_dataset(d, ctx.config.experiment.features, ctx.workers);
    std::ostringstream os;
    os << provenance_line(ctx, data, "seed=" + std::to_string(ctx.config.evaluation.seed) +
                                         " percentile=" + percentile_label(percentile));
    os << "feature,split,delta_f1\n";
    for (const auto f : feature_list) {
        std::cerr << "ablating feature " << f << " over " << splits << " splits\n";
        const auto delta = ablation_run(d, features, percentile, f, splits, ctx.config.evaluation.seed,
                                        ctx.config.experiment, ctx.workers);
        for (std::size_t s = 0; s < delta.size(); ++s) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", delta[s]);
            os << (f <= kFeatureCount ? "F" + std::to_string(f) : std::string("dummy")) << ',' << s << ',' << buf
               << '\n';
        }
    }
    const fs::path path = output.empty() ? ctx.out / "ablation.csv" : fs::path(output);
    atomic_write(path, os.str());
    std::printf("wrote %s\n", path.string().c_str());
    return kOk;
}

int cmd_sweep_alpha(const Common& common, const std::string& dataset_arg, const std::string& timing_path,
                    const std::string& spatial_path, const std::string& output) {
    auto ctx = make_context(common);
    const auto data = read_dataset(dataset_dir(ctx, dataset_arg));
    const auto& d = data.dataset;
    const auto timing_ck = read_checkpoint(timing_path, "timing", data);
    const auto spatial_ck = read_checkpoint(spatial_path, "spatial", data);
    const double percentile = timing_ck.header.value("percentile", ctx.config.percentile);
    const auto split_seed = timing_ck.header.value("split_seed", ctx.config.split_seed);
    const auto split = split_dataset(d, percentile, split_seed, ctx.config.experiment.fractions);
    auto x = ctx.config.experiment;
    x.inference.workers = ctx.workers;
    const auto values = alpha_sweep(d, split.test, timing_model_from_json(timing_ck.model),
                                    spatial_models_from_json(spatial_ck.model), x);
    std::ostringstream os;
    os << provenance_line(ctx, data, "percentile=" + percentile_label(percentile) +
                                         " split_seed=" + std::to_string(split_seed));
    os << "alpha,mean_kld\n";
    for (std::size_t a = 0; a < values.size(); ++a) {
        char buf[80];
        std::snprintf(buf, sizeof buf, "%.1f,%.17g\n", kSweepAlphas[a], values[a]);
        os << buf;
    }
    const fs::path path = output.empty() ? ctx.out / "alpha_sweep.csv" : fs::path(output);
    atomic_write(path, os.str());
    std::printf("wrote %s\n", path.string().c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"corrtime: correction-timing models, goal inference and synthetic benchmarks"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", common.config_path, "Run config (JSON)")->required();
        sub->add_option("-o,--out", common.out_dir, "Output directory (overrides config)");
        sub->add_option("-w,--workers", common.workers, "Worker threads (0 = all cores)")
            ->each([&](const std::string&) { common.workers_set = true; });
    };

    std::string dataset, output, timing, spatial, episode, model = "combined-onset", goal_mode = "intended",
                                                           mode = "features";
    double percentile = 0.0, alpha = 0.8;
    std::uint64_t seed = 0;
    std::size_t splits = 0, kld_splits = 0;
    bool no_kld = false;
    std::vector<std::size_t> features;

    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic dataset (episodes.jsonl + manifest.json)");
    add_common(simulate);
    simulate->add_option("--dataset", dataset, "Dataset directory (default <out>/dataset)");

    auto* featurize_cmd = app.add_subcommand("featurize", "Dump the seven motion features per step as CSV");
    add_common(featurize_cmd);
    featurize_cmd->add_option("--dataset", dataset, "Dataset directory");
    featurize_cmd->add_option("--goal", goal_mode, "Goal the features are measured against")
        ->check(CLI::IsMember({"intended", "nominal"}));
    featurize_cmd->add_option("--output", output, "Output CSV path");

    auto* train_timing = app.add_subcommand("train-timing", "Train the correction-timing transformer");
    add_common(train_timing);
    train_timing->add_option("--dataset", dataset, "Dataset directory");
    train_timing->add_option("--percentile", percentile, "Percentile set in (0, 1] (default from config)");
    train_timing->add_option("--mode", mode, "Input features")->check(CLI::IsMember({"features", "boltzmann-only"}));
    auto* timing_seed = train_timing->add_option("--seed", seed, "Training seed");
    train_timing->add_option("--output", output, "Checkpoint path");

    auto* train_spatial = app.add_subcommand("train-spatial", "Fit the release MLP and per-shape mixtures");
    add_common(train_spatial);
    train_spatial->add_option("--dataset", dataset, "Dataset directory");
    train_spatial->add_option("--percentile", percentile, "Percentile set in (0, 1] (default from config)");
    auto* spatial_seed = train_spatial->add_option("--seed", seed, "Fitting seed");
    train_spatial->add_option("--output", output, "Checkpoint path");

    auto* infer = app.add_subcommand("infer", "Goal posterior for one corrected episode");
    add_common(infer);
    infer->add_option("--dataset", dataset, "Dataset directory");
    infer->add_option("--timing", timing, "Timing checkpoint");
    infer->add_option("--spatial", spatial, "Spatial checkpoint");
    infer->add_option("--episode", episode, "Episode id")->required();
    infer->add_option("--model", model, "Posterior variant")
        ->check(CLI::IsMember({"when", "where-onset", "where-release", "combined-onset", "combined-release"}));
    auto* alpha_opt = infer->add_option("--alpha", alpha, "Timing weight in [0, 1] (default from config)");
    infer->add_option("--output", output, "Posterior CSV path");

    auto* evaluate = app.add_subcommand("evaluate", "Multi-split metrics report (CSV + JSON)");
    add_common(evaluate);
    evaluate->add_option("--dataset", dataset, "Dataset directory");
    evaluate->add_option("--timing", timing, "Also score this timing checkpoint");
    evaluate->add_option("--spatial", spatial, "Also score this spatial checkpoint");
    evaluate->add_option("--splits", splits, "Timing splits (default from config)");
    evaluate->add_option("--kld-splits", kld_splits, "KLD splits (default from config)");
    evaluate->add_flag("--no-kld", no_kld, "Skip goal-inference KLDs");
    evaluate->add_option("--output", output, "Output path prefix");

    auto* ablate = app.add_subcommand("ablate", "Feature ablation: baseline-minus-ablated F1 per split");
    add_common(ablate);
    ablate->add_option("--dataset", dataset, "Dataset directory");
    ablate->add_option("--feature", features, "Feature index 1-7, or 8 for a constant dummy (default all)")
        ->check(CLI::Range(1, 8));
    ablate->add_option("--percentile", percentile, "Percentile set in (0, 1]");
    ablate->add_option("--splits", splits, "Splits per feature (default from config)");
    ablate->add_option("--output", output, "Output CSV path");

    auto* sweep = app.add_subcommand("sweep-alpha", "Mean onset KLD for alpha in 0.1..0.9");
    add_common(sweep);
    sweep->add_option("--dataset", dataset, "Dataset directory");
    sweep->add_option("--timing", timing, "Timing checkpoint")->required();
    sweep->add_option("--spatial", spatial, "Spatial checkpoint")->required();
    sweep->add_option("--output", output, "Output CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*simulate) return cmd_simulate(common, dataset);
        if (*featurize_cmd) return cmd_featurize(common, dataset, goal_mode, output);
        if (*train_timing)
            return cmd_train_timing(common, dataset, percentile, mode, seed, timing_seed->count() > 0, output);
        if (*train_spatial) return cmd_train_spatial(common, dataset, percentile, seed, spatial_seed->count() > 0, output);
        if (*infer)
            return cmd_infer(common, dataset, timing, spatial, episode, model, alpha, alpha_opt->count() > 0, output);
        if (*evaluate) return cmd_evaluate(common, dataset, timing, spatial, splits, kld_splits, no_kld, output);
        if (*ablate) return cmd_ablate(common, dataset, features, percentile, splits, output);
        if (*sweep) return cmd_sweep_alpha(common, dataset, timing, spatial, output);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "numeric divergence: " << e.what() << "\n";
        return kDivergence;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
    return kUsage;
}
