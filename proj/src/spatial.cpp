#include "corrtime/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>

#include "corrtime/matrix.hpp"
#include "corrtime/parallel.hpp"
#include "corrtime/rng.hpp"
#include "json.hpp"

namespace corrtime {

using nlohmann::json;

namespace {

struct MlpPtrs {
    std::size_t w1, b1, w2, b2, w3, b3;
};

MlpPtrs mlp_offsets(std::size_t h) {
    MlpPtrs p{};
    p.w1 = 0;
    p.b1 = p.w1 + kMlpInputs * h;
    p.w2 = p.b1 + h;
    p.b2 = p.w2 + h * h;
    p.w3 = p.b2 + h;
    p.b3 = p.w3 + h * kMlpOutputs;
    return p;
}

// Forward pass on n normalized rows; keeps activations for backward.
void mlp_forward(std::size_t h, const double* params, const double* x, std::size_t n,
                 std::vector<double>& a1, std::vector<double>& a2, std::vector<double>& y) {
    const auto o = mlp_offsets(h);
    a1.resize(n * h);
    a2.resize(n * h);
    y.resize(n * kMlpOutputs);
    kernels::gemm_nn(n, kMlpInputs, h, x, params + o.w1, a1.data(), false);
    kernels::add_row_bias(n, h, params + o.b1, a1.data());
    for (auto& v : a1) v = v > 0.0 ? v : 0.0;
    kernels::gemm_nn(n, h, h, a1.data(), params + o.w2, a2.data(), false);
    kernels::add_row_bias(n, h, params + o.b2, a2.data());
    for (auto& v : a2) v = v > 0.0 ? v : 0.0;
    kernels::gemm_nn(n, h, kMlpOutputs, a2.data(), params + o.w3, y.data(), false);
    kernels::add_row_bias(n, kMlpOutputs, params + o.b3, y.data());
}

std::array<double, kMlpInputs> input_row(const Vec3& c_p, const Vec3& c_pp) {
    return {c_p.x, c_p.y, c_p.z, c_pp.x, c_pp.y, c_pp.z};
}

template <std::size_t N>
void column_stats(const std::vector<std::array<double, N>>& rows, std::array<double, N>& mean,
                  std::array<double, N>& sd) {
    mean.fill(0.0);
    sd.fill(0.0);
    for (const auto& r : rows)
        for (std::size_t k = 0; k < N; ++k) mean[k] += r[k];
    for (auto& m : mean) m /= static_cast<double>(rows.size());
    for (const auto& r : rows)
        for (std::size_t k = 0; k < N; ++k) sd[k] += (r[k] - mean[k]) * (r[k] - mean[k]);
    for (auto& s : sd) {
        s = std::sqrt(s / static_cast<double>(rows.size()));
        if (!(s >= 1e-12)) s = 1.0;
    }
}

struct NormalizedSet {
    std::vector<double> x;
    std::vector<double> y;
    std::size_t n = 0;
};

NormalizedSet normalize(const MlpModel& m, std::span<const SpatialPair> pairs) {
    NormalizedSet s;
    s.n = pairs.size();
    s.x.reserve(s.n * kMlpInputs);
    s.y.reserve(s.n * kMlpOutputs);
    for (const auto& p : pairs) {
        const auto in = input_row(p.c_p, p.c_p_prime);
        for (std::size_t k = 0; k < kMlpInputs; ++k) s.x.push_back((in[k] - m.input_mean[k]) / m.input_std[k]);
        for (std::size_t k = 0; k < kMlpOutputs; ++k)
            s.y.push_back((p.c_l[k] - m.output_mean[k]) / m.output_std[k]);
    }
    return s;
}

double mlp_mse(std::size_t h, std::span<const double> params, const NormalizedSet& s) {
    std::vector<double> a1, a2, y;
    mlp_forward(h, params.data(), s.x.data(), s.n, a1, a2, y);
    double sum = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) sum += (y[i] - s.y[i]) * (y[i] - s.y[i]);
    return sum / static_cast<double>(y.size());
}

json mlp_json(const MlpModel& m) {
    return {{"schema", "corrtime.mlp"},
            {"version", 1},
            {"architecture", {{"inputs", kMlpInputs}, {"hidden", m.hidden}, {"outputs", kMlpOutputs},
                              {"layers", 3}, {"activation", "relu"}}},
            {"seed", m.seed},
            {"input_mean", m.input_mean},
            {"input_std", m.input_std},
            {"output_mean", m.output_mean},
            {"output_std", m.output_std},
            {"params", m.params}};
}

MlpModel mlp_from(const json& j) {
    if (j.value("schema", "") != "corrtime.mlp" || j.value("version", 0) != 1)
        throw std::runtime_error("not a version 1 MLP checkpoint");
    MlpModel m;
    m.hidden = j.at("architecture").at("hidden").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.input_mean = j.at("input_mean").get<std::array<double, kMlpInputs>>();
    m.input_std = j.at("input_std").get<std::array<double, kMlpInputs>>();
    m.output_mean = j.at("output_mean").get<std::array<double, kMlpOutputs>>();
    m.output_std = j.at("output_std").get<std::array<double, kMlpOutputs>>();
    m.params = j.at("params").get<std::vector<double>>();
    m.validate();
    return m;
}

}  // namespace

void MlpModel::validate() const {
    if (hidden == 0) throw std::invalid_argument("MLP hidden width must be positive");
    if (params.size() != mlp_param_count(hidden)) throw std::invalid_argument("MLP parameter count mismatch");
    for (double v : params)
        if (!std::isfinite(v)) throw std::invalid_argument("MLP has non-finite weights");
    for (double s : input_std)
        if (!(s > 0.0)) throw std::invalid_argument("MLP input normalization missing");
    for (double s : output_std)
        if (!(s > 0.0)) throw std::invalid_argument("MLP output normalization missing");
}

std::size_t mlp_param_count(std::size_t h) { return mlp_offsets(h).b3 + kMlpOutputs; }

MlpModel mlp_initialize(std::size_t hidden, std::uint64_t seed) {
    MlpModel m;
    m.hidden = hidden;
    m.seed = seed;
    m.input_std.fill(1.0);
    m.output_std.fill(1.0);
    m.params.assign(mlp_param_count(hidden), 0.0);
    const auto o = mlp_offsets(hidden);
    Rng rng(mix_seed(seed, 0x3170));
    auto fill = [&](std::size_t offset, std::size_t fan_in, std::size_t fan_out) {
        const double limit = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < fan_in * fan_out; ++i) m.params[offset + i] = rng.uniform(-limit, limit);
    };
    fill(o.w1, kMlpInputs, hidden);
    fill(o.w2, hidden, hidden);
    fill(o.w3, hidden, kMlpOutputs);
    return m;
}

double mlp_loss_and_gradient(std::size_t h, std::span<const double> params,
                             std::span<const double> inputs, std::span<const double> targets,
                             std::span<double> grad) {
    if (params.size() != mlp_param_count(h) || grad.size() != params.size())
        throw std::invalid_argument("mlp_loss_and_gradient: parameter size mismatch");
    if (inputs.size() % kMlpInputs != 0) throw std::invalid_argument("mlp_loss_and_gradient: bad input shape");
    const std::size_t n = inputs.size() / kMlpInputs;
    if (n == 0 || targets.size() != n * kMlpOutputs)
        throw std::invalid_argument("mlp_loss_and_gradient: bad target shape");
    const auto o = mlp_offsets(h);
    std::vector<double> a1, a2, y;
    mlp_forward(h, params.data(), inputs.data(), n, a1, a2, y);

    const double scale = 1.0 / static_cast<double>(n * kMlpOutputs);
    double loss = 0.0;
    std::vector<double> dy(n * kMlpOutputs);
    for (std::size_t i = 0; i < dy.size(); ++i) {
        const double r = y[i] - targets[i];
        loss += r * r;
        dy[i] = 2.0 * r * scale;
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    double* g = grad.data();
    kernels::gemm_tn(n, h, kMlpOutputs, a2.data(), dy.data(), g + o.w3, false);
    kernels::accumulate_col_sums(n, kMlpOutputs, dy.data(), g + o.b3);
    std::vector<double> d2(n * h), d1(n * h);
    kernels::gemm_nt(n, kMlpOutputs, h, dy.data(), params.data() + o.w3, d2.data(), false);
    for (std::size_t i = 0; i < d2.size(); ++i)
        if (a2[i] <= 0.0) d2[i] = 0.0;
    kernels::gemm_tn(n, h, h, a1.data(), d2.data(), g + o.w2, false);
    kernels::accumulate_col_sums(n, h, d2.data(), g + o.b2);
    kernels::gemm_nt(n, h, h, d2.data(), params.data() + o.w2, d1.data(), false);
    for (std::size_t i = 0; i < d1.size(); ++i)
        if (a1[i] <= 0.0) d1[i] = 0.0;
    kernels::gemm_tn(n, kMlpInputs, h, inputs.data(), d1.data(), g + o.w1, false);
    kernels::accumulate_col_sums(n, h, d1.data(), g + o.b1);
    return loss * scale;
}

MlpTrainResult mlp_train(std::span<const SpatialPair> train, std::span<const SpatialPair> val,
                         std::uint64_t seed, const MlpTrainOptions& options) {
    if (train.size() < 10) throw std::invalid_argument("mlp_train: need at least 10 training pairs");
    MlpTrainResult result;
    result.model = mlp_initialize(options.hidden, seed);
    auto& m = result.model;
    {
        std::vector<std::array<double, kMlpInputs>> ins;
        std::vector<std::array<double, kMlpOutputs>> outs;
        for (const auto& p : train) {
            ins.push_back(input_row(p.c_p, p.c_p_prime));
            outs.push_back({p.c_l.x, p.c_l.y, p.c_l.z});
        }
        column_stats(ins, m.input_mean, m.input_std);
        column_stats(outs, m.output_mean, m.output_std);
    }
    const NormalizedSet tr = normalize(m, train);
    const NormalizedSet va = normalize(m, val);

    AdamState adam(m.params.size(), options.adam);
    std::vector<double> grad(m.params.size()), bx, by;
    std::vector<std::size_t> order(tr.n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> best = m.params;
    double best_loss = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    const std::size_t bs = std::max<std::size_t>(1, options.batch_size);

    for (std::size_t epoch = 0; epoch < options.max_epochs; ++epoch) {
        Rng rng(mix_seed(seed, 0x77a1u + epoch));
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < tr.n; start += bs) {
            const std::size_t end = std::min(tr.n, start + bs);
            bx.clear();
            by.clear();
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                bx.insert(bx.end(), tr.x.begin() + i * kMlpInputs, tr.x.begin() + (i + 1) * kMlpInputs);
                by.insert(by.end(), tr.y.begin() + i * kMlpOutputs, tr.y.begin() + (i + 1) * kMlpOutputs);
            }
            const double loss = mlp_loss_and_gradient(m.hidden, m.params, bx, by, grad);
            if (!std::isfinite(loss))
                throw DivergenceError("mlp_train: non-finite loss at epoch " + std::to_string(epoch));
            adam_step(m.params, grad, adam);
            epoch_loss += loss;
            ++batches;
        }
        result.train_loss.push_back(epoch_loss / static_cast<double>(batches));
        const double vl = va.n > 0 ? mlp_mse(m.hidden, m.params, va) : mlp_mse(m.hidden, m.params, tr);
        if (!std::isfinite(vl)) throw DivergenceError("mlp_train: non-finite validation loss");
        result.val_loss.push_back(vl);
        if (vl < best_loss) {
            best_loss = vl;
            best = m.params;
            result.best_epoch = epoch;
            since_best = 0;
        } else if (options.patience > 0 && ++since_best >= options.patience) {
            break;
        }
    }
    m.params = std::move(best);
    return result;
}

Vec3 mlp_predict(const MlpModel& m, const Vec3& c_p, const Vec3& c_p_prime) {
    const auto raw = input_row(c_p, c_p_prime);
    double x[kMlpInputs];
    for (std::size_t k = 0; k < kMlpInputs; ++k) x[k] = (raw[k] - m.input_mean[k]) / m.input_std[k];
    std::vector<double> a1, a2, y;
    mlp_forward(m.hidden, m.params.data(), x, 1, a1, a2, y);
    return {y[0] * m.output_std[0] + m.output_mean[0], y[1] * m.output_std[1] + m.output_mean[1],
            y[2] * m.output_std[2] + m.output_mean[2]};
}

std::string mlp_to_json(const MlpModel& m) { return mlp_json(m).dump(); }

MlpModel mlp_from_json(const std::string& text) { return mlp_from(json::parse(text)); }

bool cholesky3(const Mat3& a, Mat3& l) {
    l = Mat3{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[i][j];
            for (int k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
            if (i == j) {
                if (!(s > 0.0) || !std::isfinite(s)) return false;
                l[i][i] = std::sqrt(s);
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    return true;
}

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

// log N(r; mean, L L^T) without the weight term.
double gaussian_log(const Vec3& r, const Vec3& mean, const Mat3& l, double log_det_l) {
    const double d0 = r.x - mean.x, d1 = r.y - mean.y, d2 = r.z - mean.z;
    const double y0 = d0 / l[0][0];
    const double y1 = (d1 - l[1][0] * y0) / l[1][1];
    const double y2 = (d2 - l[2][0] * y0 - l[2][1] * y1) / l[2][2];
    return -1.5 * kLog2Pi - log_det_l - 0.5 * (y0 * y0 + y1 * y1 + y2 * y2);
}

double log_det_lower(const Mat3& l) { return std::log(l[0][0]) + std::log(l[1][1]) + std::log(l[2][2]); }

double log_sum_exp(const double* v, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i]);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - mx);
    return mx + std::log(s);
}

bool symmetric(const Mat3& a) {
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < i; ++j)
            if (std::abs(a[i][j] - a[j][i]) > 1e-12 * (std::abs(a[i][j]) + std::abs(a[j][i]) + 1e-300))
                return false;
    return true;
}

}  // namespace

GmmModel::GmmModel(std::vector<GmmComponent> components) : components_(std::move(components)) {
    if (components_.empty()) throw std::invalid_argument("GmmModel: no components");
    double total = 0.0;
    for (const auto& c : components_) {
        if (!(c.weight > 0.0)) throw std::invalid_argument("GmmModel: non-positive weight");
        if (!is_finite(c.mean)) throw std::invalid_argument("GmmModel: non-finite mean");
        if (!symmetric(c.covariance)) throw std::invalid_argument("GmmModel: covariance not symmetric");
        total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("GmmModel: weights do not sum to 1");
    factors_.resize(components_.size());
    for (std::size_t k = 0; k < components_.size(); ++k) {
        if (!cholesky3(components_[k].covariance, factors_[k].chol))
            throw std::invalid_argument("GmmModel: covariance not positive definite");
        factors_[k].log_norm = std::log(components_[k].weight) - log_det_lower(factors_[k].chol);
    }
}

double GmmModel::log_density(const Vec3& r) const {
    if (components_.empty()) throw std::logic_error("GmmModel: empty model");
    std::vector<double> t(components_.size());
    for (std::size_t k = 0; k < components_.size(); ++k)
        t[k] = factors_[k].log_norm + gaussian_log(r, components_[k].mean, factors_[k].chol, 0.0);
    return log_sum_exp(t.data(), t.size());
}

double gmm_logpdf(const GmmModel& model, const Vec3& point, const Vec3& goal) {
    return model.log_density(point - goal);
}

namespace {

struct EmState {
    std::vector<double> weight;
    std::vector<Vec3> mean;
    std::vector<Mat3> cov;
    std::vector<Mat3> chol;
    std::vector<double> log_det;
};

// Adds 1e-6 I only when the covariance is not numerically positive definite.
void floor_covariance(Mat3& cov, Mat3& chol) {
    if (cholesky3(cov, chol)) return;
    for (int i = 0; i < 3; ++i) cov[i][i] += 1e-6;
    if (!cholesky3(cov, chol)) throw GmmDegenerateError("gmm: covariance stays singular after flooring");
}

// M-step from responsibilities (n x k). Returns false on a collapsed component.
bool m_step(std::span<const Vec3> x, const std::vector<double>& resp, std::size_t k, EmState& s) {
    const std::size_t n = x.size();
    s.weight.assign(k, 0.0);
    s.mean.assign(k, Vec3{});
    s.cov.assign(k, Mat3{});
    s.chol.assign(k, Mat3{});
    s.log_det.assign(k, 0.0);
    std::vector<double> nk(k, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c) {
            const double r = resp[i * k + c];
            nk[c] += r;
            s.mean[c] += x[i] * r;
        }
    for (std::size_t c = 0; c < k; ++c) {
        s.weight[c] = nk[c] / static_cast<double>(n);
        if (s.weight[c] < 1e-6) return false;
        s.mean[c] = s.mean[c] / nk[c];
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c) {
            const double r = resp[i * k + c];
            const Vec3 d = x[i] - s.mean[c];
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b <= a; ++b) s.cov[c][a][b] += r * d[a] * d[b];
        }
    for (std::size_t c = 0; c < k; ++c) {
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b <= a; ++b) {
                s.cov[c][a][b] /= nk[c];
                s.cov[c][b][a] = s.cov[c][a][b];
            }
        floor_covariance(s.cov[c], s.chol[c]);
        s.log_det[c] = log_det_lower(s.chol[c]);
    }
    return true;
}

// E-step: fills responsibilities, returns total log-likelihood.
double e_step(std::span<const Vec3> x, std::size_t k, const EmState& s, std::vector<double>& resp) {
    const std::size_t n = x.size();
    resp.resize(n * k);
    std::vector<double> lw(k);
    for (std::size_t c = 0; c < k; ++c) lw[c] = std::log(s.weight[c]);
    std::vector<double> ll(n);
    for (std::size_t i = 0; i < n; ++i) {
        double* r = resp.data() + i * k;
        for (std::size_t c = 0; c < k; ++c) r[c] = lw[c] + gaussian_log(x[i], s.mean[c], s.chol[c], s.log_det[c]);
        const double lse = log_sum_exp(r, k);
        for (std::size_t c = 0; c < k; ++c) r[c] = std::exp(r[c] - lse);
        ll[i] = lse;
    }
    return pairwise_sum(ll.data(), n);
}

// k-means++ centers, then one hard assignment to seed the M-step.
std::vector<double> kmeanspp_responsibilities(std::span<const Vec3> x, std::size_t k, Rng& rng) {
    const std::size_t n = x.size();
    std::vector<Vec3> centers{x[rng.below(n)]};
    std::vector<double> d2(n);
    while (centers.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& c : centers) {
                const Vec3 d = x[i] - c;
                best = std::min(best, dot(d, d));
            }
            d2[i] = best;
            total += best;
        }
        std::size_t pick = rng.below(n);
        if (total > 0.0) {
            double u = rng.uniform() * total;
            for (std::size_t i = 0; i < n; ++i) {
                u -= d2[i];
                if (u < 0.0) {
                    pick = i;
                    break;
                }
            }
        }
        centers.push_back(x[pick]);
    }
    std::vector<double> resp(n * k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best_c = 0;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
            const Vec3 d = x[i] - centers[c];
            if (dot(d, d) < best) {
                best = dot(d, d);
                best_c = c;
            }
        }
        resp[i * k + best_c] = 1.0;
    }
    return resp;
}

struct EmRun {
    EmState state;
    std::vector<double> trace;
    double log_likelihood = 0.0;
};

// One EM run; returns false if a component collapsed.
bool run_em(std::span<const Vec3> x, std::size_t k, Rng& rng, const GmmFitOptions& opt, EmRun& out) {
    std::vector<double> resp = kmeanspp_responsibilities(x, k, rng);
    out.trace.clear();
    const double n = static_cast<double>(x.size());
    double prev = -std::numeric_limits<double>::infinity();
    for (std::size_t it = 0; it < std::max<std::size_t>(1, opt.max_iterations); ++it) {
        if (!m_step(x, resp, k, out.state)) return false;
        const double ll = e_step(x, k, out.state, resp);
        if (!std::isfinite(ll)) throw GmmDegenerateError("gmm: non-finite log-likelihood");
        out.trace.push_back(ll / n);
        out.log_likelihood = ll;
        if (std::abs(ll / n - prev) < opt.tolerance) break;
        prev = ll / n;
    }
    return true;
}

GmmModel to_model(const EmState& s) {
    std::vector<GmmComponent> comps(s.weight.size());
    double total = 0.0;
    for (double w : s.weight) total += w;
    for (std::size_t c = 0; c < comps.size(); ++c) comps[c] = {s.weight[c] / total, s.mean[c], s.cov[c]};
    return GmmModel(std::move(comps));
}

json gmm_json(const GmmModel& m) {
    json weights = json::array(), means = json::array(), covs = json::array();
    for (const auto& c : m.components()) {
        weights.push_back(c.weight);
        means.push_back({c.mean.x, c.mean.y, c.mean.z});
        covs.push_back(c.covariance);
    }
    return {{"schema", "corrtime.gmm"}, {"version", 1}, {"frame", "residual"}, {"K", m.size()},
            {"weights", weights}, {"means", means}, {"covariances", covs}};
}

GmmModel gmm_from(const json& j) {
    if (j.value("schema", "") != "corrtime.gmm" || j.value("version", 0) != 1)
        throw std::runtime_error("not a version 1 GMM checkpoint");
    const auto k = j.at("K").get<std::size_t>();
    const auto w = j.at("weights").get<std::vector<double>>();
    const auto mu = j.at("means").get<std::vector<std::array<double, 3>>>();
    const auto cov = j.at("covariances").get<std::vector<Mat3>>();
    if (w.size() != k || mu.size() != k || cov.size() != k)
        throw std::runtime_error("GMM checkpoint: component count mismatch");
    std::vector<GmmComponent> comps(k);
    for (std::size_t c = 0; c < k; ++c) comps[c] = {w[c], {mu[c][0], mu[c][1], mu[c][2]}, cov[c]};
    return GmmModel(std::move(comps));
}

}  // namespace

GmmFit gmm_fit_k(std::span<const Vec3> x, std::size_t k, std::uint64_t seed, const GmmFitOptions& opt) {
    if (k == 0) throw std::invalid_argument("gmm_fit_k: K must be positive");
    if (x.size() < 10 * k)
        throw std::invalid_argument("gmm_fit_k: need at least 10*K samples (have " + std::to_string(x.size()) +
                                    ", K=" + std::to_string(k) + ")");
    for (const auto& p : x)
        if (!is_finite(p)) throw std::invalid_argument("gmm_fit_k: non-finite sample");

    std::optional<EmRun> best;
    std::size_t reinits = 0;
    for (std::size_t r = 0; r < std::max<std::size_t>(1, opt.restarts); ++r) {
        EmRun run;
        bool ok = false;
        for (int attempt = 0; attempt < 2 && !ok; ++attempt) {
            Rng rng(mix_seed(seed, (k << 16) + (r << 4) + static_cast<std::uint64_t>(attempt)));
            ok = run_em(x, k, rng, opt, run);
            if (!ok && attempt == 0) ++reinits;
        }
        if (!ok) continue;
        if (!best || run.log_likelihood > best->log_likelihood) best = std::move(run);
    }
    if (!best)
        throw GmmDegenerateError("gmm_fit_k: component weight fell below 1e-6 after reinitialization (K=" +
                                 std::to_string(k) + ")");
    GmmFit fit;
    fit.model = to_model(best->state);
    fit.log_likelihood_trace = std::move(best->trace);
    fit.log_likelihood = best->log_likelihood;
    const double params = 10.0 * static_cast<double>(k) - 1.0;
    fit.bic = -2.0 * fit.log_likelihood + params * std::log(static_cast<double>(x.size()));
    fit.reinitializations = reinits;
    return fit;
}

GmmSelection gmm_fit(std::span<const Vec3> x, std::uint64_t seed, const GmmFitOptions& opt) {
    GmmSelection sel;
    if (!opt.select_by_bic) {
        sel.best = gmm_fit_k(x, opt.fallback_k, seed, opt);
        sel.selected_k = opt.fallback_k;
        sel.bic_by_k[opt.fallback_k] = sel.best.bic;
        return sel;
    }
    const std::size_t k_hi = std::min(opt.k_max, x.size() / 10);
    if (opt.k_min == 0 || k_hi < opt.k_min)
        throw std::invalid_argument("gmm_fit: not enough samples for K=" + std::to_string(opt.k_min));
    std::optional<GmmFit> best;
    for (std::size_t k = opt.k_min; k <= k_hi; ++k) {
        GmmFit fit;
        try {
            fit = gmm_fit_k(x, k, seed, opt);
        } catch (const GmmDegenerateError&) {
            continue;
        }
        sel.bic_by_k[k] = fit.bic;
        if (!best || fit.bic < best->bic) {
            sel.selected_k = k;
            best = std::move(fit);
        }
    }
    if (!best) throw GmmDegenerateError("gmm_fit: every candidate K degenerated");
    sel.best = std::move(*best);
    return sel;
}

std::string gmm_to_json(const GmmModel& m) { return gmm_json(m).dump(); }

GmmModel gmm_from_json(const std::string& text) { return gmm_from(json::parse(text)); }

const GmmModel& SpatialModels::gmm_for(Shape shape) const {
    const auto it = gmms.find(shape);
    if (it == gmms.end())
        throw std::out_of_range("no release mixture for shape '" + std::string(to_string(shape)) + "'");
    return it->second;
}

std::string spatial_models_to_json(const SpatialModels& m) {
    json gmms = json::object();
    for (const auto& [shape, g] : m.gmms) gmms[std::string(to_string(shape))] = gmm_json(g);
    return json{{"schema", "corrtime.spatial_models"}, {"version", 1}, {"mlp", mlp_json(m.mlp)},
                {"gmms", gmms}}
        .dump();
}

SpatialModels spatial_models_from_json(const std::string& text) {
    const json j = json::parse(text);
    if (j.value("schema", "") != "corrtime.spatial_models" || j.value("version", 0) != 1)
        throw std::runtime_error("not a version 1 spatial model checkpoint");
    SpatialModels m;
    m.mlp = mlp_from(j.at("mlp"));
    for (const auto& [name, g] : j.at("gmms").items()) m.gmms.emplace(shape_from_string(name), gmm_from(g));
    return m;
}

}  // namespace corrtime
