#include "corrtime/config.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <unistd.h>

#include "corrtime/parallel.hpp"

namespace corrtime {

using json = nlohmann::json;

namespace {

// Object reader that rejects keys nobody asked for.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        used_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
                if (!it->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
            }
            out = it->template get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where(key) + ": " + e.what());
        }
    }

    void get_real(const char* key, double& out) {
        used_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        if (it->is_string()) {
            const auto s = it->get<std::string>();
            if (s == "inf") out = std::numeric_limits<double>::infinity();
            else if (s == "-inf") out = -std::numeric_limits<double>::infinity();
            else throw ConfigError(where(key) + " must be a number, \"inf\" or \"-inf\"");
            return;
        }
        if (!it->is_number()) throw ConfigError(where(key) + " must be a number");
        out = it->get<double>();
    }

    void get_vec(const char* key, Vec3& out) {
        used_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        if (!it->is_array() || it->size() != 3) throw ConfigError(where(key) + " must be [x, y, z]");
        for (int k = 0; k < 3; ++k) {
            if (!(*it)[k].is_number()) throw ConfigError(where(key) + " must hold numbers");
            out[k] = (*it)[k].get<double>();
        }
    }

    bool has(const char* key) const { return j_.contains(key); }

    const json& raw(const char* key) {
        used_.insert(key);
        return j_.at(key);
    }

    Section sub(const char* key) {
        used_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return Section(empty(), path_ + "." + key);
        return Section(*it, path_ + "." + key);
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!used_.count(k)) throw ConfigError("unknown key " + path_ + "." + k);
    }

    std::string where(const char* key) const { return path_ + "." + key; }

private:
    static const json& empty() {
        static const json e = json::object();
        return e;
    }
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

json real_json(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

json adam_json(const AdamSettings& a) {
    return {{"learning_rate", a.learning_rate}, {"decay_steps", a.decay_steps}, {"decay_rate", a.decay_rate},
            {"clip_norm", a.clip_norm},         {"beta1", a.beta1},             {"beta2", a.beta2},
            {"epsilon", a.epsilon}};
}

void read_adam(Section s, AdamSettings& a) {
    s.get_real("learning_rate", a.learning_rate);
    s.get_real("decay_steps", a.decay_steps);
    s.get_real("decay_rate", a.decay_rate);
    s.get_real("clip_norm", a.clip_norm);
    s.get_real("beta1", a.beta1);
    s.get_real("beta2", a.beta2);
    s.get_real("epsilon", a.epsilon);
    s.finish();
    if (!(a.learning_rate > 0.0) || !(a.decay_steps > 0.0) || !(a.decay_rate > 0.0) || !(a.clip_norm >= 0.0) ||
        !(a.beta1 >= 0.0 && a.beta1 < 1.0) || !(a.beta2 >= 0.0 && a.beta2 < 1.0) || !(a.epsilon > 0.0))
        throw ConfigError("invalid optimizer settings");
}

IntervenerProfile read_intervener(Section s) {
    IntervenerProfile p;
    if (s.has("terms")) {
        const json& terms = s.raw("terms");
        if (!terms.is_array()) throw ConfigError(s.where("terms") + " must be an array");
        for (std::size_t i = 0; i < terms.size(); ++i) {
            Section t(terms[i], s.where("terms") + "[" + std::to_string(i) + "]");
            HazardTerm h;
            std::size_t feature = 0;
            t.get("feature", feature);
            if (feature < 1 || feature > kFeatureCount)
                throw ConfigError(t.where("feature") + " must name F1..F7 (1-7)");
            h.feature = feature - 1;
            t.get_real("weight", h.weight);
            t.get_real("center", h.center);
            t.get_real("scale", h.scale);
            t.finish();
            p.terms.push_back(h);
        }
    }
    s.get_real("bias", p.bias);
    s.get_real("temperature", p.temperature);
    s.get_real("reaction_delay_mean", p.reaction_delay_mean);
    s.get_real("reaction_delay_std", p.reaction_delay_std);
    s.get_real("grasp_angle_noise_deg", p.grasp_angle_noise_deg);
    s.get_real("grasp_speed_gain", p.grasp_speed_gain);
    s.get_real("grasp_speed_noise", p.grasp_speed_noise);
    s.get_real("release_noise_std", p.release_noise_std);
    s.get_real("correction_duration", p.correction_duration);
    s.finish();
    return p;
}

SimulationSettings read_simulation(Section& s) {
    SimulationSettings out;
    s.get("min_length", out.min_length);
    s.get("max_length", out.max_length);
    s.get_real("dt", out.dt);
    s.get_real("wrong_goal_rate", out.wrong_goal_rate);
    s.get_real("offset_goal_rate", out.offset_goal_rate);
    s.get_real("offset_min", out.offset_min);
    s.get_real("offset_max", out.offset_max);
    s.get("bulge_by_legibility", out.bulge_by_legibility);
    s.get_vec("start_mean", out.start_mean);
    s.get_vec("start_spread", out.start_spread);
    s.get_real("tracking_kp", out.tracking_kp);
    s.get_real("tracking_kd", out.tracking_kd);
    return out;
}

}  // namespace

json layout_to_json(const BoardLayout& layout) {
    json goals = json::array();
    for (const auto& g : layout.goals)
        goals.push_back({{"id", g.id}, {"position", vec_json(g.position)}, {"shape", to_string(g.shape)},
                         {"color", g.color}});
    return {{"goals", goals}, {"origin", vec_json(layout.origin)}};
}

BoardLayout layout_from_json(const json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() != "standard") throw ConfigError("layout must be \"standard\" or an object");
        return BoardLayout::standard();
    }
    Section s(j, "layout");
    BoardLayout b;
    s.get_vec("origin", b.origin);
    if (!s.has("goals")) throw ConfigError("layout.goals is required");
    const json& goals = s.raw("goals");
    if (!goals.is_array() || goals.empty()) throw ConfigError("layout.goals must be a non-empty array");
    for (std::size_t i = 0; i < goals.size(); ++i) {
        Section g(goals[i], "layout.goals[" + std::to_string(i) + "]");
        Goal goal;
        std::string shape = "circle";
        g.get("id", goal.id);
        g.get_vec("position", goal.position);
        g.get("shape", shape);
        g.get("color", goal.color);
        g.finish();
        try {
            goal.shape = shape_from_string(shape);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        b.goals.push_back(goal);
    }
    s.finish();
    return b;
}

json intervener_to_json(const IntervenerProfile& p) {
    json terms = json::array();
    for (const auto& t : p.terms)
        terms.push_back({{"feature", t.feature + 1}, {"weight", t.weight}, {"center", t.center}, {"scale", t.scale}});
    return {{"terms", terms},
            {"bias", real_json(p.bias)},
            {"temperature", p.temperature},
            {"reaction_delay_mean", p.reaction_delay_mean},
            {"reaction_delay_std", p.reaction_delay_std},
            {"grasp_angle_noise_deg", p.grasp_angle_noise_deg},
            {"grasp_speed_gain", p.grasp_speed_gain},
            {"grasp_speed_noise", p.grasp_speed_noise},
            {"release_noise_std", p.release_noise_std},
            {"correction_duration", p.correction_duration}};
}

IntervenerProfile intervener_from_json(const json& j) { return read_intervener(Section(j, "intervener")); }

json simulation_to_json(const SimulationSettings& s) {
    return {{"min_length", s.min_length},
            {"max_length", s.max_length},
            {"dt", s.dt},
            {"wrong_goal_rate", s.wrong_goal_rate},
            {"offset_goal_rate", s.offset_goal_rate},
            {"offset_min", s.offset_min},
            {"offset_max", s.offset_max},
            {"bulge_by_legibility", s.bulge_by_legibility},
            {"start_mean", vec_json(s.start_mean)},
            {"start_spread", vec_json(s.start_spread)},
            {"tracking_kp", s.tracking_kp},
            {"tracking_kd", s.tracking_kd}};
}

SimulationSettings simulation_from_json(const json& j) {
    Section s(j, "simulation");
    auto out = read_simulation(s);
    s.finish();
    return out;
}

IntervenerProfile default_intervener() {
    IntervenerProfile p;
    p.terms = {{kDistanceToGoal, -3.0, 0.20, 0.02}, {kDirectness, -3.0, 0.97, 0.02}};
    p.bias = -4.0;
    p.temperature = 0.25;
    return p;
}

IntervenerProfile legibility_intervener() {
    IntervenerProfile p;
    p.terms = {{kDistanceToGoal, -3.0, 0.20, 0.02}, {kLegibility, -3.0, 0.0631, 0.0002}};
    p.bias = -4.0;
    p.temperature = 0.25;
    return p;
}

RunConfig default_config() {
    RunConfig c;
    c.intervener = default_intervener();
    return c;
}

void RunConfig::validate() const {
    try {
        simulation.validate();
        intervener.validate();
        experiment.validate();
        layout.validate(experiment.grid);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (episodes < 50) throw ConfigError("simulation.episodes must be at least 50");
    if (!(percentile > 0.0 && percentile <= 1.0)) throw ConfigError("split.percentile must lie in (0, 1]");
    for (const double p : evaluation.percentiles)
        if (!(p > 0.0 && p <= 1.0)) throw ConfigError("evaluation.percentiles must lie in (0, 1]");
    if (evaluation.percentiles.empty()) throw ConfigError("evaluation.percentiles is empty");
    if (ablation_splits == 0) throw ConfigError("evaluation.ablation_splits must be positive");
}

std::size_t RunConfig::resolved_workers() const { return workers == 0 ? default_workers() : workers; }

std::filesystem::path RunConfig::resolved_output_dir() const {
    if (!output_dir.empty()) return output_dir;
    if (const char* root = std::getenv("CORRTIME_OUTPUT_ROOT"); root && *root) return root;
    return "runs";
}

std::string config_to_json(const RunConfig& c) {
    const auto& x = c.experiment;
    json j;
    j["format"] = kConfigFormat;
    j["version"] = kConfigVersion;
    j["output_dir"] = c.output_dir;
    j["workers"] = c.workers;
    j["layout"] = layout_to_json(c.layout);
    json sim = simulation_to_json(c.simulation);
    sim["episodes"] = c.episodes;
    sim["seed"] = c.dataset_seed;
    j["simulation"] = sim;
    j["intervener"] = intervener_to_json(c.intervener);
    const auto& pid = x.features.pid;
    j["features"] = {{"pid",
                      {{"kp", pid.gains.kp},
                       {"ki", pid.gains.ki},
                       {"kd", pid.gains.kd},
                       {"lookahead", pid.lookahead},
                       {"substeps", pid.substeps}}}};
    j["timing_model"] = {{"layers", x.transformer.layers},   {"heads", x.transformer.heads},
                         {"width", x.transformer.width},     {"ff_width", x.transformer.ff_width},
                         {"dropout", x.transformer.dropout}, {"max_length", x.transformer.max_length}};
    j["timing_training"] = {{"max_epochs", x.timing_train.max_epochs},
                            {"batch_size", x.timing_train.batch_size},
                            {"patience", x.timing_train.patience},
                            {"adam", adam_json(x.timing_train.adam)}};
    j["mlp"] = {{"hidden", x.mlp.hidden},
                {"max_epochs", x.mlp.max_epochs},
                {"batch_size", x.mlp.batch_size},
                {"patience", x.mlp.patience},
                {"adam", adam_json(x.mlp.adam)}};
    j["gmm"] = {{"k_min", x.gmm.k_min},
                {"k_max", x.gmm.k_max},
                {"select_by_bic", x.gmm.select_by_bic},
                {"fallback_k", x.gmm.fallback_k},
                {"max_iterations", x.gmm.max_iterations},
                {"tolerance", x.gmm.tolerance},
                {"restarts", x.gmm.restarts}};
    j["grid"] = {{"x_min", x.grid.x_min}, {"x_max", x.grid.x_max},           {"y_min", x.grid.y_min},
                 {"y_max", x.grid.y_max}, {"resolution", x.grid.resolution}, {"z", x.grid.z}};
    j["inference"] = {{"alpha", x.inference.alpha}, {"likelihood_floor", x.inference.likelihood_floor}};
    j["split"] = {{"percentile", c.percentile},
                  {"seed", c.split_seed},
                  {"train", x.fractions.train},
                  {"val", x.fractions.val}};
    j["evaluation"] = {{"percentiles", c.evaluation.percentiles},
                       {"timing_splits", c.evaluation.timing_splits},
                       {"kld_splits", c.evaluation.kld_splits},
                       {"seed", c.evaluation.seed},
                       {"baseline", c.evaluation.baseline},
                       {"kld", c.evaluation.kld},
                       {"full_counts", c.full_counts},
                       {"threshold", x.threshold},
                       {"max_kld_episodes", x.max_kld_episodes},
                       {"ablation_splits", c.ablation_splits}};
    return j.dump(2);
}

RunConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    Section root(j, "config");
    RunConfig c = default_config();
    std::string format;
    int version = 0;
    root.get("format", format);
    root.get("version", version);
    if (format != kConfigFormat) throw ConfigError("config format must be \"" + std::string(kConfigFormat) + "\"");
    if (version != kConfigVersion)
        throw ConfigError("config version " + std::to_string(version) + " does not match " +
                          std::to_string(kConfigVersion));
    root.get("output_dir", c.output_dir);
    root.get("workers", c.workers);
    if (root.has("layout")) c.layout = layout_from_json(root.raw("layout"));
    {
        auto s = root.sub("simulation");
        c.simulation = read_simulation(s);
        s.get("episodes", c.episodes);
        s.get("seed", c.dataset_seed);
        s.finish();
    }
    if (root.has("intervener")) c.intervener = read_intervener(root.sub("intervener"));
    auto& x = c.experiment;
    {
        auto f = root.sub("features");
        auto pid = f.sub("pid");
        pid.get_real("kp", x.features.pid.gains.kp);
        pid.get_real("ki", x.features.pid.gains.ki);
        pid.get_real("kd", x.features.pid.gains.kd);
        pid.get_real("lookahead", x.features.pid.lookahead);
        pid.get("substeps", x.features.pid.substeps);
        pid.finish();
        f.finish();
        x.features.pid.dt = c.simulation.dt;
    }
    {
        auto s = root.sub("timing_model");
        s.get("layers", x.transformer.layers);
        s.get("heads", x.transformer.heads);
        s.get("width", x.transformer.width);
        s.get("ff_width", x.transformer.ff_width);
        s.get_real("dropout", x.transformer.dropout);
        s.get("max_length", x.transformer.max_length);
        s.finish();
    }
    {
        auto s = root.sub("timing_training");
        s.get("max_epochs", x.timing_train.max_epochs);
        s.get("batch_size", x.timing_train.batch_size);
        s.get("patience", x.timing_train.patience);
        read_adam(s.sub("adam"), x.timing_train.adam);
        s.finish();
    }
    {
        auto s = root.sub("mlp");
        s.get("hidden", x.mlp.hidden);
        s.get("max_epochs", x.mlp.max_epochs);
        s.get("batch_size", x.mlp.batch_size);
        s.get("patience", x.mlp.patience);
        read_adam(s.sub("adam"), x.mlp.adam);
        s.finish();
    }
    {
        auto s = root.sub("gmm");
        s.get("k_min", x.gmm.k_min);
        s.get("k_max", x.gmm.k_max);
        s.get("select_by_bic", x.gmm.select_by_bic);
        s.get("fallback_k", x.gmm.fallback_k);
        s.get("max_iterations", x.gmm.max_iterations);
        s.get_real("tolerance", x.gmm.tolerance);
        s.get("restarts", x.gmm.restarts);
        s.finish();
        if (x.gmm.k_min == 0 || x.gmm.k_max < x.gmm.k_min || x.gmm.fallback_k == 0 || x.gmm.restarts == 0)
            throw ConfigError("invalid gmm settings");
    }
    {
        auto s = root.sub("grid");
        s.get_real("x_min", x.grid.x_min);
        s.get_real("x_max", x.grid.x_max);
        s.get_real("y_min", x.grid.y_min);
        s.get_real("y_max", x.grid.y_max);
        s.get_real("resolution", x.grid.resolution);
        s.get_real("z", x.grid.z);
        s.finish();
    }
    {
        auto s = root.sub("inference");
        s.get_real("alpha", x.inference.alpha);
        s.get_real("likelihood_floor", x.inference.likelihood_floor);
        s.finish();
    }
    {
        auto s = root.sub("split");
        s.get_real("percentile", c.percentile);
        s.get("seed", c.split_seed);
        s.get_real("train", x.fractions.train);
        s.get_real("val", x.fractions.val);
        s.finish();
    }
    {
        auto s = root.sub("evaluation");
        s.get("percentiles", c.evaluation.percentiles);
        s.get("timing_splits", c.evaluation.timing_splits);
        s.get("kld_splits", c.evaluation.kld_splits);
        s.get("seed", c.evaluation.seed);
        s.get("baseline", c.evaluation.baseline);
        s.get("kld", c.evaluation.kld);
        s.get("full_counts", c.full_counts);
        s.get_real("threshold", x.threshold);
        s.get("max_kld_episodes", x.max_kld_episodes);
        s.get("ablation_splits", c.ablation_splits);
        s.finish();
        if (c.full_counts) {
            c.evaluation.timing_splits = 200;
            c.evaluation.kld_splits = 50;
        }
    }
    root.finish();
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    return config_from_json(text);
}

std::string content_hash(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < 8 && i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", digest[i]);
        hex += buf;
    }
    return hex;
}

std::string config_hash(const RunConfig& config) {
    // output_dir and workers do not change results.
    RunConfig canonical = config;
    canonical.output_dir.clear();
    canonical.workers = 0;
    return content_hash(json::parse(config_to_json(canonical)).dump());
}

void atomic_write(const std::filesystem::path& path, std::string_view content) {
    std::error_code ec;
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    auto tmp = path;
    tmp += ".tmp" + std::to_string(::getpid());
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        os.write(content.data(), static_cast<std::streamsize>(content.size()));
        os.flush();
        if (!os) throw IoError("write to " + tmp.string() + " failed");
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move output into place at " + path.string());
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    if (is.bad()) throw IoError("read from " + path.string() + " failed");
    return ss.str();
}

DatasetFiles DatasetFiles::in(const std::filesystem::path& dir) {
    return {dir / "episodes.jsonl", dir / "manifest.json"};
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset, const RunConfig& config) {
    std::ostringstream episodes;
    write_episodes_jsonl(episodes, dataset.episodes);
    const std::string body = episodes.str();

    json manifest;
    manifest["format"] = kManifestFormat;
    manifest["version"] = 1;
    manifest["config_hash"] = config_hash(config);
    manifest["dataset_hash"] = content_hash(body);
    manifest["seed"] = dataset.seed;
    manifest["episodes"] = dataset.episodes.size();
    manifest["corrected"] = dataset.corrected_count();
    manifest["layout"] = layout_to_json(dataset.layout);
    manifest["intervener"] = intervener_to_json(dataset.profile);
    manifest["simulation"] = simulation_to_json(dataset.settings);

    json split;
    split["percentile"] = config.percentile;
    split["seed"] = config.split_seed;
    try {
        const auto s = split_dataset(dataset, config.percentile, config.split_seed, config.experiment.fractions);
        split["train"] = s.train;
        split["val"] = s.val;
        split["test"] = s.test;
    } catch (const std::exception&) {
        split["train"] = nullptr;
    }
    manifest["split"] = split;

    json tags = json::array();
    for (const auto& e : dataset.episodes) {
        const auto f = completion_fraction(e);
        if (!f) continue;
        json sets = json::array();
        for (const double p : kPercentileSets)
            if (in_percentile_set(e, p)) sets.push_back(percentile_label(p));
        tags.push_back({{"id", e.trajectory.id}, {"t_c", e.correction->t_c}, {"completion", *f}, {"sets", sets}});
    }
    manifest["percentile_tags"] = tags;

    const auto files = DatasetFiles::in(dir);
    atomic_write(files.episodes, body);
    atomic_write(files.manifest, manifest.dump(2) + "\n");
}

LoadedDataset read_dataset(const std::filesystem::path& dir) {
    const auto files = DatasetFiles::in(dir);
    const std::string body = read_file(files.episodes);
    json manifest;
    try {
        manifest = json::parse(read_file(files.manifest));
    } catch (const json::parse_error& e) {
        throw IoError("manifest " + files.manifest.string() + " is not valid JSON");
    }
    if (manifest.value("format", "") != kManifestFormat) throw IoError(files.manifest.string() + " is not a dataset manifest");
    LoadedDataset out;
    out.dataset_hash = content_hash(body);
    if (manifest.value("dataset_hash", "") != out.dataset_hash)
        throw IoError("episodes file does not match its manifest (hash mismatch)");
    out.config_hash = manifest.value("config_hash", "");
    auto& d = out.dataset;
    try {
        d.layout = layout_from_json(manifest.at("layout"));
        d.profile = intervener_from_json(manifest.at("intervener"));
        d.settings = simulation_from_json(manifest.at("simulation"));
        d.seed = manifest.at("seed").get<std::uint64_t>();
        std::istringstream is(body);
        d.episodes = read_episodes_jsonl(is);
    } catch (const ConfigError& e) {
        throw IoError(std::string("corrupt manifest: ") + e.what());
    } catch (const std::exception& e) {
        throw IoError(std::string("cannot read dataset: ") + e.what());
    }
    return out;
}

}  // namespace corrtime
