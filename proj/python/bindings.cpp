#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "corrtime/config.hpp"
#include "corrtime/evaluation.hpp"
#include "corrtime/features.hpp"
#include "corrtime/inference.hpp"
#include "corrtime/optim.hpp"
#include "corrtime/spatial.hpp"
#include "corrtime/timing.hpp"

namespace py = pybind11;
using namespace corrtime;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<Vec3> points(const Array& a, const char* what) {
    const auto r = a.unchecked();
    if (a.ndim() != 2 || a.shape(1) != 3) throw std::invalid_argument(std::string(what) + " must have shape (n, 3)");
    std::vector<Vec3> out;
    for (py::ssize_t i = 0; i < a.shape(0); ++i) out.push_back({r(i, 0), r(i, 1), r(i, 2)});
    return out;
}

Vec3 point(const Array& a, const char* what) {
    if (a.size() != 3) throw std::invalid_argument(std::string(what) + " must hold 3 values");
    return {a.data()[0], a.data()[1], a.data()[2]};
}

std::vector<double> values(const Array& a) { return {a.data(), a.data() + a.size()}; }

Array to_array(const Matrix& m) {
    Array out({m.rows(), m.cols()});
    std::copy(m.data(), m.data() + m.size(), out.mutable_data());
    return out;
}

Array to_array(const std::vector<double>& v) {
    Array out(static_cast<py::ssize_t>(v.size()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

Matrix to_matrix(const Array& a) {
    if (a.ndim() != 2) throw std::invalid_argument("features must be a 2-d array");
    Matrix m(a.shape(0), a.shape(1));
    std::copy(a.data(), a.data() + a.size(), m.data());
    return m;
}

Trajectory trajectory(const Array& positions, double dt) {
    Trajectory t;
    t.id = "py";
    t.dt = dt;
    t.positions = points(positions, "positions");
    return t;
}

std::vector<Vec3> layout_or_default(const std::optional<Array>& layout) {
    return layout ? points(*layout, "layout") : BoardLayout::standard().positions();
}

py::tuple posterior_tuple(const PosteriorMap& map) {
    Array cells({static_cast<py::ssize_t>(map.grid->size()), py::ssize_t{3}});
    auto w = cells.mutable_unchecked();
    for (std::size_t i = 0; i < map.grid->size(); ++i) {
        const auto& c = map.grid->cell(i);
        w(i, 0) = c.x;
        w(i, 1) = c.y;
        w(i, 2) = c.z;
    }
    return py::make_tuple(cells, to_array(map.probability));
}

// Bare model JSON or a CLI checkpoint of the given kind.
std::string model_text(const std::string& path, const std::string& kind) {
    const auto text = read_file(path);
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", "") != "corrtime.checkpoint") return text;
    if (j.value("kind", "") != kind) throw ConfigError(path + " is not a " + kind + " checkpoint");
    return j.at("model").dump();
}

std::shared_ptr<const GoalGrid> grid_of(double resolution) {
    GridSpec spec;
    spec.resolution = resolution;
    return std::make_shared<const GoalGrid>(spec);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "correction-timing models and goal inference";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

    m.def("feature_names", [] {
        std::vector<std::string> names;
        for (std::size_t c = 0; c < kFeatureCount; ++c) names.emplace_back(feature_name(c));
        return names;
    });

    m.def(
        "featurize",
        [](const Array& positions, const Array& goal, const std::optional<Array>& layout, double dt) {
            const auto traj = trajectory(positions, dt);
            const auto goals = layout_or_default(layout);
            return to_array(featurize(traj, point(goal, "goal"), goals));
        },
        py::arg("positions"), py::arg("goal"), py::arg("layout") = py::none(), py::arg("dt") = 0.1,
        "T x 7 feature matrix of a trajectory against one goal hypothesis");

    m.def(
        "discounted_legibility",
        [](const Array& p, std::size_t total_steps) { return discounted_legibility(values(p), total_steps); },
        py::arg("prefix_probabilities"), py::arg("total_steps"));

    m.def("pdf_from_cdf", [](const Array& cdf) { return to_array(pdf_from_cdf(values(cdf))); }, py::arg("cdf"));
    m.def(
        "predict_correction_time",
        [](const Array& cdf, double threshold) { return predict_correction_time(values(cdf), threshold); },
        py::arg("cdf"), py::arg("threshold") = 0.5, "1-based step, or None when no correction is predicted");

    m.def(
        "kld", [](const Array& p, const Array& q, double eps) { return kld(values(p), values(q), eps); },
        py::arg("p_true"), py::arg("p_est"), py::arg("eps") = 1e-12);
    m.def(
        "f1_from_counts", [](std::size_t tp, std::size_t fp, std::size_t fn) { return f1_from_counts(tp, fp, fn).f1; },
        py::arg("tp"), py::arg("fp"), py::arg("fn"));

    m.def(
        "config_hash", [](const std::string& path) { return config_hash(load_config(path)); }, py::arg("path"));
    m.def(
        "read_episodes",
        [](const std::string& dir) {
            const auto loaded = read_dataset(dir);
            std::vector<std::string> lines;
            for (const auto& e : loaded.dataset.episodes) lines.push_back(episode_to_json_line(e));
            return lines;
        },
        py::arg("dataset_dir"), "episodes of a dataset directory as JSON lines");

    py::class_<TimingModel>(m, "TimingModel")
        .def_static(
            "load", [](const std::string& path) { return timing_model_from_json(model_text(path, "timing")); },
            py::arg("path"))
        .def_static("from_json", &timing_model_from_json, py::arg("text"))
        .def("to_json", &timing_model_to_json)
        .def_readonly("feature_columns", &TimingModel::feature_columns)
        .def(
            "cdf", [](const TimingModel& model, const Array& features) {
                return to_array(forward(model, to_matrix(features)));
            },
            py::arg("features"), "per-step correction CDF from a raw T x 7 feature matrix");

    py::class_<SpatialModels>(m, "SpatialModels")
        .def_static(
            "load", [](const std::string& path) { return spatial_models_from_json(model_text(path, "spatial")); },
            py::arg("path"))
        .def(
            "predict_release",
            [](const SpatialModels& s, const Array& c_p, const Array& c_p_prime) {
                const auto v = mlp_predict(s.mlp, point(c_p, "c_p"), point(c_p_prime, "c_p_prime"));
                return to_array(std::vector<double>{v.x, v.y, v.z});
            },
            py::arg("c_p"), py::arg("c_p_prime"))
        .def(
            "release_logpdf",
            [](const SpatialModels& s, const std::string& shape, const Array& c_l, const Array& goal) {
                return gmm_logpdf(s.gmm_for(shape_from_string(shape)), point(c_l, "c_l"), point(goal, "goal"));
            },
            py::arg("shape"), py::arg("c_l"), py::arg("goal"));

    m.def(
        "when_posterior",
        [](const TimingModel& model, const Array& positions, std::size_t t_c, const std::optional<Array>& layout,
           double resolution, double dt, std::size_t workers) {
            InferenceConfig ic;
            ic.workers = workers;
            const auto goals = layout_or_default(layout);
            const auto traj = trajectory(positions, dt);
            PosteriorMap map;
            {
                py::gil_scoped_release release;
                map = when_posterior(t_c, traj, grid_of(resolution), model, goals, ic);
            }
            return posterior_tuple(map);
        },
        py::arg("model"), py::arg("positions"), py::arg("t_c"), py::arg("layout") = py::none(),
        py::arg("resolution") = 0.01, py::arg("dt") = 0.1, py::arg("workers") = 1,
        "(cells, probabilities) over the default board grid");

    m.def(
        "where_posterior_release",
        [](const SpatialModels& s, const std::string& shape, const Array& c_l, double resolution) {
            return posterior_tuple(
                where_posterior_release(point(c_l, "c_l"), grid_of(resolution), s.gmm_for(shape_from_string(shape))));
        },
        py::arg("spatial"), py::arg("shape"), py::arg("c_l"), py::arg("resolution") = 0.01);

    m.def(
        "combined_posterior_onset",
        [](const TimingModel& timing, const SpatialModels& s, const std::string& shape, const Array& positions,
           std::size_t t_c, const Array& c_p, const Array& c_p_prime, double alpha, const std::optional<Array>& layout,
           double resolution, double dt, std::size_t workers) {
            InferenceConfig ic;
            ic.alpha = alpha;
            ic.workers = workers;
            const auto goals = layout_or_default(layout);
            const auto traj = trajectory(positions, dt);
            const Vec3 p = point(c_p, "c_p"), v = point(c_p_prime, "c_p_prime");
            const auto& gmm = s.gmm_for(shape_from_string(shape));
            PosteriorMap map;
            {
                py::gil_scoped_release release;
                map = combined_posterior_onset(t_c, traj, p, v, grid_of(resolution), timing, s.mlp, gmm, goals, ic);
            }
            return posterior_tuple(map);
        },
        py::arg("timing"), py::arg("spatial"), py::arg("shape"), py::arg("positions"), py::arg("t_c"), py::arg("c_p"),
        py::arg("c_p_prime"), py::arg("alpha") = 0.8, py::arg("layout") = py::none(), py::arg("resolution") = 0.01,
        py::arg("dt") = 0.1, py::arg("workers") = 1);
}
