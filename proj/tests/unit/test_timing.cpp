#include <cmath>
#include <map>
#include <numeric>

#include "corrtime/rng.hpp"
#include "corrtime/timing.hpp"
#include "doctest.h"

using namespace corrtime;

namespace {

TransformerConfig small_config() {
    TransformerConfig c;
    c.layers = 2;
    c.heads = 2;
    c.width = 8;
    c.ff_width = 12;
    c.dropout = 0.0;
    c.max_length = 64;
    c.input_width = 3;
    return c;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = rng.normal();
    return m;
}

std::vector<std::size_t> iota_columns(std::size_t n) {
    std::vector<std::size_t> c(n);
    std::iota(c.begin(), c.end(), 0);
    return c;
}

// Straightforward re-implementation on whole matrices, used as an oracle.
std::vector<double> reference_forward(const TimingModel& m, const Matrix& x,
                                      const std::vector<std::uint8_t>& valid) {
    const auto& c = m.config;
    std::map<std::string, Matrix> p;
    for (const auto& b : transformer_param_layout(c)) {
        Matrix w(b.rows, b.cols);
        for (std::size_t i = 0; i < b.size(); ++i) w.values()[i] = m.params[b.offset + i];
        p.emplace(b.name, std::move(w));
    }
    auto add_bias = [](Matrix a, const Matrix& b) {
        for (std::size_t r = 0; r < a.rows(); ++r)
            for (std::size_t k = 0; k < a.cols(); ++k) a(r, k) += b(0, k);
        return a;
    };
    auto norm_rows = [](const Matrix& a, const Matrix& g, const Matrix& b) {
        Matrix out(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r) {
            const auto y = layer_norm(a.row(r), g.values(), b.values());
            std::copy(y.begin(), y.end(), out.row(r).begin());
        }
        return out;
    };
    const std::size_t T = x.rows(), D = c.width, dk = D / c.heads;
    Matrix h = add_bias(matmul(x, p.at("input.weight")), p.at("input.bias"));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < D; ++i) {
            const double f = std::pow(10000.0, -static_cast<double>(i - i % 2) / D);
            h(t, i) += i % 2 == 0 ? std::sin(t * f) : std::cos(t * f);
        }
    std::vector<std::uint8_t> masked(T * T);
    for (std::size_t i = 0; i < T * T; ++i) masked[i] = valid.empty() ? 0 : !valid[i % T];
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        const Matrix q = add_bias(matmul(h, p.at(pre + "attn.wq")), p.at(pre + "attn.bq"));
        const Matrix k = add_bias(matmul(h, p.at(pre + "attn.wk")), p.at(pre + "attn.bk"));
        const Matrix v = add_bias(matmul(h, p.at(pre + "attn.wv")), p.at(pre + "attn.bv"));
        Matrix ctx(T, D);
        for (std::size_t hd = 0; hd < c.heads; ++hd) {
            Matrix s(T, T);
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t j = 0; j < T; ++j) {
                    double acc = 0.0;
                    for (std::size_t e = 0; e < dk; ++e) acc += q(i, hd * dk + e) * k(j, hd * dk + e);
                    s(i, j) = acc / std::sqrt(static_cast<double>(dk));
                }
            const Matrix a = softmax_rows(s, masked);
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t e = 0; e < dk; ++e) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < T; ++j) acc += a(i, j) * v(j, hd * dk + e);
                    ctx(i, hd * dk + e) = acc;
                }
        }
        Matrix r1 = add_bias(matmul(ctx, p.at(pre + "attn.wo")), p.at(pre + "attn.bo"));
        for (std::size_t i = 0; i < T * D; ++i) r1.values()[i] += h.values()[i];
        const Matrix h1 = norm_rows(r1, p.at(pre + "norm1.gain"), p.at(pre + "norm1.bias"));
        Matrix f = add_bias(matmul(h1, p.at(pre + "ff1.weight")), p.at(pre + "ff1.bias"));
        for (auto& val : f.values()) val = std::max(val, 0.0);
        Matrix r2 = add_bias(matmul(f, p.at(pre + "ff2.weight")), p.at(pre + "ff2.bias"));
        for (std::size_t i = 0; i < T * D; ++i) r2.values()[i] += h1.values()[i];
        h = norm_rows(r2, p.at(pre + "norm2.gain"), p.at(pre + "norm2.bias"));
    }
    const Matrix z = add_bias(matmul(h, p.at("output.weight")), p.at("output.bias"));
    std::vector<double> out(T);
    for (std::size_t t = 0; t < T; ++t) out[t] = 1.0 / (1.0 + std::exp(-z(t, 0)));
    return out;
}

TimingModel perturbed_model(const TransformerConfig& c, std::uint64_t seed) {
    auto m = TimingModel::initialize(c, iota_columns(c.input_width), seed);
    Rng rng(seed + 7);
    // Move gains and biases off their initial values so every path is exercised.
    for (auto& v : m.params) v += 0.1 * rng.normal();
    return m;
}

}  // namespace

TEST_CASE("parameter layout is contiguous and sized for the default architecture") {
    const TransformerConfig c;
    const auto blocks = transformer_param_layout(c);
    std::size_t offset = 0;
    for (const auto& b : blocks) {
        CHECK(b.offset == offset);
        offset += b.size();
    }
    const std::size_t d = 32, ff = 64, f = 7;
    const std::size_t per_layer = 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d) + 2 * d;
    CHECK(offset == f * d + d + 2 * per_layer + d + 1);
}

TEST_CASE("initialization uses unit gains, zero biases and fan-in bounded weights") {
    const TransformerConfig c;
    const auto m = TimingModel::initialize(c, iota_columns(7), 3);
    for (const auto& b : transformer_param_layout(c)) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(b.rows));
        for (std::size_t i = 0; i < b.size(); ++i) {
            const double v = m.params[b.offset + i];
            if (b.name.ends_with(".gain")) CHECK(v == 1.0);
            else if (b.rows == 1) CHECK(v == 0.0);
            else CHECK(std::abs(v) <= bound);
        }
    }
    CHECK(TimingModel::initialize(c, iota_columns(7), 3).params == m.params);
    CHECK(TimingModel::initialize(c, iota_columns(7), 4).params != m.params);
}

TEST_CASE("config validation rejects inconsistent sizes") {
    TransformerConfig c;
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.dropout = 1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK_THROWS_AS(TimingModel::initialize(TransformerConfig{}, {0, 1}, 1), std::invalid_argument);
}

TEST_CASE("forward agrees with a whole-matrix reference implementation") {
    const auto c = small_config();
    const auto m = perturbed_model(c, 11);
    Rng rng(5);
    const Matrix x = random_matrix(9, 3, rng);
    std::vector<std::uint8_t> valid(9, 1);
    valid[7] = valid[8] = 0;
    for (const auto& mask : {std::vector<std::uint8_t>{}, valid}) {
        InferenceWorkspace ws;
        const auto got = forward_rows(m, x, 0, 9, ws, mask);
        const auto want = reference_forward(m, x, mask);
        for (std::size_t t = 0; t < 9; ++t) CHECK(got[t] == doctest::Approx(want[t]).epsilon(1e-12));
    }
}

TEST_CASE("forward_rows on a sub-range matches the full pass") {
    const auto c = small_config();
    const auto m = perturbed_model(c, 12);
    Rng rng(6);
    const Matrix x = random_matrix(20, 3, rng);
    InferenceWorkspace ws;
    const auto full = forward_rows(m, x, 0, 20, ws);
    const auto part = forward_rows(m, x, 5, 12, ws);
    REQUIRE(part.size() == 7);
    for (std::size_t i = 0; i < 7; ++i) CHECK(part[i] == doctest::Approx(full[5 + i]).epsilon(1e-13));
    CHECK_THROWS_AS(forward_rows(m, x, 4, 4, ws), std::invalid_argument);
}

TEST_CASE("masked steps do not influence visible outputs") {
    const auto c = small_config();
    const auto m = perturbed_model(c, 13);
    Rng rng(7);
    Matrix x = random_matrix(10, 3, rng);
    std::vector<std::uint8_t> valid(10, 1);
    valid[8] = valid[9] = 0;
    InferenceWorkspace ws;
    const auto a = forward_rows(m, x, 0, 10, ws, valid);
    x(8, 0) += 5.0;
    x(9, 2) -= 3.0;
    const auto b = forward_rows(m, x, 0, 10, ws, valid);
    for (std::size_t t = 0; t < 8; ++t) CHECK(a[t] == b[t]);
    std::vector<std::uint8_t> none(10, 0);
    CHECK_THROWS_AS(forward_rows(m, x, 0, 10, ws, none), std::invalid_argument);
}

TEST_CASE("sequences longer than max_length are rejected") {
    auto c = small_config();
    c.max_length = 8;
    const auto m = TimingModel::initialize(c, iota_columns(3), 1);
    InferenceWorkspace ws;
    CHECK_THROWS_AS(forward_rows(m, Matrix(9, 3), 0, 9, ws), std::length_error);
    CHECK_THROWS_AS(forward_rows(m, Matrix(4, 2), 0, 4, ws), std::invalid_argument);
}

TEST_CASE("analytic gradient matches central differences") {
    const auto c = small_config();
    const auto m = perturbed_model(c, 21);
    Rng rng(8);
    std::vector<PreparedSequence> batch;
    batch.push_back({random_matrix(7, 3, rng), make_labels(7, Step{4})});
    batch.push_back({random_matrix(5, 3, rng), make_labels(5, std::nullopt)});
    batch[1].labels.valid[4] = 0;

    for (std::uint64_t dropout_seed : {std::uint64_t{0}, std::uint64_t{99}}) {
        auto cfg = c;
        cfg.dropout = dropout_seed == 0 ? 0.0 : 0.2;
        const LossWithGradient f = [&](std::span<const double> p, std::span<double> g) {
            if (g.empty()) {
                std::vector<double> tmp(p.size());
                return timing_loss_and_gradient(cfg, p, batch, tmp, dropout_seed);
            }
            return timing_loss_and_gradient(cfg, p, batch, g, dropout_seed);
        };
        CHECK(grad_check(f, m.params, 1e-6) < 1e-6);
    }
}

TEST_CASE("batch gradient is identical for any worker count") {
    const auto c = small_config();
    const auto m = perturbed_model(c, 22);
    Rng rng(9);
    std::vector<PreparedSequence> batch;
    for (int i = 0; i < 5; ++i) batch.push_back({random_matrix(6 + i, 3, rng), make_labels(6 + i, Step{3})});
    std::vector<double> g1(m.params.size()), g3(m.params.size());
    const double l1 = timing_loss_and_gradient(c, m.params, batch, g1, 0, 1);
    const double l3 = timing_loss_and_gradient(c, m.params, batch, g3, 0, 3);
    CHECK(l1 == l3);
    CHECK(g1 == g3);
    CHECK(timing_loss(c, m.params, batch) == doctest::Approx(l1).epsilon(1e-12));
}

TEST_CASE("labels switch to one at the correction step") {
    const auto l = make_labels(5, Step{3});
    CHECK(l.labels == std::vector<double>{0, 0, 1, 1, 1});
    CHECK(make_labels(3, std::nullopt).labels == std::vector<double>{0, 0, 0});
    CHECK(make_labels(3, Step{1}).labels == std::vector<double>{1, 1, 1});
    CHECK_THROWS_AS(make_labels(3, Step{4}), std::out_of_range);
    CHECK_THROWS_AS(make_labels(3, Step{0}), std::out_of_range);
}

TEST_CASE("pdf from cdf is non-negative and telescopes for monotone input") {
    const std::vector<double> cdf{0.1, 0.3, 0.25, 0.6, 0.9};
    const auto pdf = pdf_from_cdf(cdf);
    CHECK(pdf[0] == 0.1);
    CHECK(pdf[1] == doctest::Approx(0.2));
    CHECK(pdf[2] == 0.0);
    CHECK(pdf[3] == doctest::Approx(0.35));
    CHECK(pdf[4] == doctest::Approx(0.3));

    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> c(1 + rng.below(40));
        double acc = 0.0;
        for (auto& v : c) v = (acc += rng.uniform() / c.size());
        const auto p = pdf_from_cdf(c);
        CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(c.back()).epsilon(1e-12));
        for (double v : p) CHECK(v >= 0.0);
    }
}

TEST_CASE("timing likelihood averages the pdf over a 13-step window") {
    std::vector<double> pdf(40, 0.0);
    pdf[19] = 0.65;  // step 20
    for (Step t = 14; t <= 26; ++t) CHECK(timing_likelihood(pdf, t) == doctest::Approx(0.05));
    CHECK(timing_likelihood(pdf, 13) == 0.0);
    CHECK(timing_likelihood(pdf, 27) == 0.0);

    std::vector<double> edge(10, 0.0);
    edge[0] = 0.7;
    CHECK(timing_likelihood(edge, 1) == doctest::Approx(0.1));  // steps 1..7
    CHECK(timing_likelihood(edge, 7) == doctest::Approx(0.7 / 10));  // steps 1..10 truncated
    CHECK_THROWS_AS(timing_likelihood(edge, 0), std::out_of_range);
    CHECK_THROWS_AS(timing_likelihood(edge, 11), std::out_of_range);

    std::vector<double> uniform(30, 1.0 / 30);
    for (Step t = 1; t <= 30; ++t) CHECK(timing_likelihood(uniform, t) == doctest::Approx(1.0 / 30));
}

TEST_CASE("predicted correction time is the start of the final run above threshold") {
    CHECK(predict_correction_time(std::vector<double>{0.1, 0.2, 0.7, 0.8}) == Step{3});
    CHECK(predict_correction_time(std::vector<double>{0.6, 0.2, 0.7, 0.8}) == Step{3});
    CHECK(predict_correction_time(std::vector<double>{0.6, 0.7}) == Step{1});
    CHECK_FALSE(predict_correction_time(std::vector<double>{0.1, 0.9, 0.2}).has_value());
    CHECK_FALSE(predict_correction_time(std::vector<double>{}).has_value());
    CHECK(predict_correction_time(std::vector<double>{0.1, 0.5}) == Step{2});
}

TEST_CASE("standardizer z-scores columns and floors constant ones") {
    Matrix a(2, 2, std::vector<double>{1, 5, 3, 5});
    Matrix b(2, 2, std::vector<double>{5, 5, 7, 5});
    const std::vector<Matrix> set{a, b};
    const auto s = Standardizer::fit(set);
    CHECK(s.mean[0] == 4.0);
    CHECK(s.stddev[0] == doctest::Approx(std::sqrt(5.0)));
    CHECK(s.stddev[1] == 1.0);
    const Matrix z = s.apply(a);
    CHECK(z(1, 1) == 0.0);
    const Matrix back = s.invert(z);
    for (std::size_t i = 0; i < 4; ++i) CHECK(back.values()[i] == doctest::Approx(a.values()[i]));
}

namespace {

// Label flips once the first feature exceeds zero.
std::vector<TimingSample> threshold_task(std::size_t count, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TimingSample> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t T = 12 + rng.below(10);
        const std::size_t tc = 3 + rng.below(T - 4);
        Matrix f(T, 3);
        for (std::size_t t = 0; t < T; ++t) {
            f(t, 0) = static_cast<double>(t + 1) - static_cast<double>(tc) + 0.5;
            f(t, 1) = rng.normal();
            f(t, 2) = 1.0;
        }
        out.push_back({f, make_labels(T, Step{tc})});
    }
    return out;
}

}  // namespace

TEST_CASE("training reduces loss, is reproducible and round-trips through JSON") {
    auto c = small_config();
    c.dropout = 0.1;
    const auto train = threshold_task(40, 1);
    const auto val = threshold_task(10, 2);
    TimingTrainOptions opt;
    opt.max_epochs = 40;
    opt.batch_size = 8;
    opt.adam.learning_rate = 5e-3;
    const auto r1 = train_timing_model(train, val, c, iota_columns(3), 77, opt);
    const auto r2 = train_timing_model(train, val, c, iota_columns(3), 77, opt);
    CHECK(r1.model.params == r2.model.params);
    CHECK(r1.val_loss.back() < r1.val_loss.front());
    CHECK(r1.val_loss[r1.best_epoch] < 0.3);

    opt.workers = 3;
    const auto r3 = train_timing_model(train, val, c, iota_columns(3), 77, opt);
    CHECK(r3.model.params == r1.model.params);

    const auto text = timing_model_to_json(r1.model);
    const auto back = timing_model_from_json(text);
    CHECK(back.params == r1.model.params);
    CHECK(back.standardizer.mean == r1.model.standardizer.mean);
    CHECK(back.feature_columns == r1.model.feature_columns);
    CHECK(forward(back, val[0].features) == forward(r1.model, val[0].features));
    CHECK_THROWS(timing_model_from_json("{\"schema\":\"other\"}"));
}
