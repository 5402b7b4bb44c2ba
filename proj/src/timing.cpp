#include "corrtime/timing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "corrtime/parallel.hpp"
#include "corrtime/rng.hpp"
#include "json.hpp"

namespace corrtime {

void TransformerConfig::validate() const {
    if (layers == 0 || heads == 0 || width == 0 || ff_width == 0 || input_width == 0)
        throw std::invalid_argument("TransformerConfig: sizes must be positive");
    if (width % heads != 0) throw std::invalid_argument("TransformerConfig: width not divisible by heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("TransformerConfig: dropout outside [0, 1)");
    if (max_length == 0) throw std::invalid_argument("TransformerConfig: max_length must be positive");
}

std::vector<ParamBlock> transformer_param_layout(const TransformerConfig& c) {
    std::vector<ParamBlock> blocks;
    std::size_t offset = 0;
    auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
        blocks.push_back({std::move(name), offset, rows, cols});
        offset += rows * cols;
    };
    const std::size_t d = c.width;
    add("input.weight", c.input_width, d);
    add("input.bias", 1, d);
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        add(p + "attn.wq", d, d);
        add(p + "attn.bq", 1, d);
        add(p + "attn.wk", d, d);
        add(p + "attn.bk", 1, d);
        add(p + "attn.wv", d, d);
        add(p + "attn.bv", 1, d);
        add(p + "attn.wo", d, d);
        add(p + "attn.bo", 1, d);
        add(p + "norm1.gain", 1, d);
        add(p + "norm1.bias", 1, d);
        add(p + "ff1.weight", d, c.ff_width);
        add(p + "ff1.bias", 1, c.ff_width);
        add(p + "ff2.weight", c.ff_width, d);
        add(p + "ff2.bias", 1, d);
        add(p + "norm2.gain", 1, d);
        add(p + "norm2.bias", 1, d);
    }
    add("output.weight", d, 1);
    add("output.bias", 1, 1);
    return blocks;
}

namespace {

constexpr std::size_t kBlocksPerLayer = 16;

template <class T>
struct LayerPtrs {
    T *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo, *g1, *be1, *w1, *b1, *w2, *b2, *g2, *be2;
};

template <class T>
struct NetPtrs {
    T* w_in;
    T* b_in;
    std::vector<LayerPtrs<T>> layers;
    T* w_out;
    T* b_out;
};

template <class T>
NetPtrs<T> bind(const TransformerConfig& c, T* base) {
    const auto blocks = transformer_param_layout(c);
    NetPtrs<T> n{};
    std::size_t b = 0;
    auto next = [&] { return base + blocks[b++].offset; };
    n.w_in = next();
    n.b_in = next();
    for (std::size_t l = 0; l < c.layers; ++l) {
        LayerPtrs<T> L{};
        T** fields[kBlocksPerLayer] = {&L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo, &L.bo,
                                       &L.g1, &L.be1, &L.w1, &L.b1, &L.w2, &L.b2, &L.g2, &L.be2};
        for (auto* f : fields) *f = next();
        n.layers.push_back(L);
    }
    n.w_out = next();
    n.b_out = next();
    return n;
}

std::size_t param_count(const TransformerConfig& c) {
    const auto blocks = transformer_param_layout(c);
    return blocks.back().offset + blocks.back().size();
}

void fill_positional(std::size_t rows, std::size_t width, std::vector<double>& table) {
    table.resize(rows * width);
    for (std::size_t t = 0; t < rows; ++t) {
        for (std::size_t i = 0; i < width; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(width));
            table[t * width + i] = std::sin(static_cast<double>(t) * freq);
            if (i + 1 < width) table[t * width + i + 1] = std::cos(static_cast<double>(t) * freq);
        }
    }
}

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Stable BCE on a logit.
double bce_logit(double z, double y) {
    return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

// Activations of one encoder layer for query rows [lo, hi) (R = hi - lo).
struct LayerTape {
    std::size_t lo = 0, rows = 0;
    std::vector<double> x_in;          // T x D
    std::vector<double> q;             // R x D
    std::vector<double> kt, vt;        // H x dk x T (head-major, transposed)
    std::vector<double> probs;         // H x R x T
    std::vector<double> ctx;           // R x D
    std::vector<double> drop1;         // R x D scale factors (empty = no dropout)
    std::vector<double> r1, xhat1, inv1, h1;  // R x D, R, R x D
    std::vector<double> ff_pre, ff_act;       // R x FF
    std::vector<double> ff_out, drop2;        // R x D
    std::vector<double> xhat2, inv2, out;     // R x D, R, R x D
};

struct Dims {
    std::size_t d, heads, dk, ff;
    double scale;
};

Dims dims_of(const TransformerConfig& c) {
    const std::size_t dk = c.width / c.heads;
    return {c.width, c.heads, dk, c.ff_width, 1.0 / std::sqrt(static_cast<double>(dk))};
}

void dropout_mask(std::size_t n, double p, Rng* rng, std::vector<double>& mask) {
    if (!rng || p <= 0.0) {
        mask.clear();
        return;
    }
    mask.resize(n);
    const double keep_scale = 1.0 / (1.0 - p);
    for (auto& m : mask) m = rng->uniform() < p ? 0.0 : keep_scale;
}

void layer_forward(const LayerPtrs<const double>& w, const Dims& dm, std::size_t T,
                   const double* x_in, const std::uint8_t* valid, std::size_t lo, std::size_t hi,
                   LayerTape& tp, Rng* rng, double p, std::vector<double>& scratch) {
    const std::size_t D = dm.d, H = dm.heads, dk = dm.dk, FF = dm.ff;
    const std::size_t R = hi - lo;
    tp.lo = lo;
    tp.rows = R;
    tp.x_in.assign(x_in, x_in + T * D);

    // Projections.
    tp.q.resize(R * D);
    kernels::gemm_nn(R, D, D, x_in + lo * D, w.wq, tp.q.data(), false);
    kernels::add_row_bias(R, D, w.bq, tp.q.data());
    scratch.resize(T * D);
    tp.kt.resize(H * T * dk);
    tp.vt.resize(H * T * dk);
    kernels::gemm_nn(T, D, D, x_in, w.wk, scratch.data(), false);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t e = 0; e < dk; ++e)
                tp.kt[(h * dk + e) * T + t] = scratch[t * D + h * dk + e] + w.bk[h * dk + e];
    kernels::gemm_nn(T, D, D, x_in, w.wv, scratch.data(), false);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t e = 0; e < dk; ++e)
                tp.vt[(h * dk + e) * T + t] = scratch[t * D + h * dk + e] + w.bv[h * dk + e];

    // Masked scaled dot-product attention.
    std::vector<double> key_bias, key_keep;
    if (valid) {
        key_bias.resize(T);
        key_keep.resize(T);
        for (std::size_t j = 0; j < T; ++j) {
            key_bias[j] = valid[j] ? 0.0 : -std::numeric_limits<double>::infinity();
            key_keep[j] = valid[j] ? 1.0 : 0.0;
        }
    }
    tp.probs.resize(H * R * T);
    tp.ctx.assign(R * D, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        const double* kh = tp.kt.data() + h * dk * T;
        const double* vh = tp.vt.data() + h * dk * T;
        for (std::size_t i = 0; i < R; ++i) {
            const double* qi = tp.q.data() + i * D + h * dk;
            double* __restrict pr = tp.probs.data() + (h * R + i) * T;
            for (std::size_t j = 0; j < T; ++j) pr[j] = 0.0;
            for (std::size_t e = 0; e < dk; ++e) {
                const double qe = qi[e] * dm.scale;
                const double* __restrict ke = kh + e * T;
                for (std::size_t j = 0; j < T; ++j) pr[j] += qe * ke[j];
            }
            if (valid)
                for (std::size_t j = 0; j < T; ++j) pr[j] += key_bias[j];
            const double mx = kernels::max_value(pr, T);
            for (std::size_t j = 0; j < T; ++j) pr[j] -= mx;
            kernels::exp_nonpositive(pr, T);
            if (valid)
                for (std::size_t j = 0; j < T; ++j) pr[j] *= key_keep[j];
            const double inv = 1.0 / kernels::sum(pr, T);
            for (std::size_t j = 0; j < T; ++j) pr[j] *= inv;
            double* ci = tp.ctx.data() + i * D + h * dk;
            for (std::size_t e = 0; e < dk; ++e) ci[e] = kernels::dot(pr, vh + e * T, T);
        }
    }

    // Output projection, residual and norm.
    tp.r1.resize(R * D);
    kernels::gemm_nn(R, D, D, tp.ctx.data(), w.wo, tp.r1.data(), false);
    kernels::add_row_bias(R, D, w.bo, tp.r1.data());
    dropout_mask(R * D, p, rng, tp.drop1);
    for (std::size_t i = 0; i < R * D; ++i) {
        const double a = tp.drop1.empty() ? tp.r1[i] : tp.r1[i] * tp.drop1[i];
        tp.r1[i] = x_in[lo * D + i] + a;
    }
    tp.h1.resize(R * D);
    tp.xhat1.resize(R * D);
    tp.inv1.resize(R);
    kernels::layer_norm_rows(R, D, tp.r1.data(), w.g1, w.be1, 1e-5, tp.h1.data(), tp.xhat1.data(),
                             tp.inv1.data());

    // Feed-forward.
    tp.ff_pre.resize(R * FF);
    kernels::gemm_nn(R, D, FF, tp.h1.data(), w.w1, tp.ff_pre.data(), false);
    kernels::add_row_bias(R, FF, w.b1, tp.ff_pre.data());
    tp.ff_act.resize(R * FF);
    for (std::size_t i = 0; i < R * FF; ++i) tp.ff_act[i] = tp.ff_pre[i] > 0.0 ? tp.ff_pre[i] : 0.0;
    tp.ff_out.resize(R * D);
    kernels::gemm_nn(R, FF, D, tp.ff_act.data(), w.w2, tp.ff_out.data(), false);
    kernels::add_row_bias(R, D, w.b2, tp.ff_out.data());
    dropout_mask(R * D, p, rng, tp.drop2);
    scratch.resize(R * D);
    for (std::size_t i = 0; i < R * D; ++i)
        scratch[i] = tp.h1[i] + (tp.drop2.empty() ? tp.ff_out[i] : tp.ff_out[i] * tp.drop2[i]);
    tp.out.resize(R * D);
    tp.xhat2.resize(R * D);
    tp.inv2.resize(R);
    kernels::layer_norm_rows(R, D, scratch.data(), w.g2, w.be2, 1e-5, tp.out.data(), tp.xhat2.data(),
                             tp.inv2.data());
}

// Backward through one full-row layer. d_out (T x D) is consumed; d_in receives dL/dx_in.
void layer_backward(const LayerPtrs<const double>& w, const LayerPtrs<double>& g, const Dims& dm,
                    std::size_t T, const LayerTape& tp, const std::vector<double>& d_out,
                    std::vector<double>& d_in) {
    const std::size_t D = dm.d, H = dm.heads, dk = dm.dk, FF = dm.ff;
    std::vector<double> d_r2(T * D), d_h1(T * D), d_ff(T * D), d_act(T * FF), d_r1(T * D);

    kernels::layer_norm_rows_backward(T, D, d_out.data(), tp.xhat2.data(), tp.inv2.data(), w.g2,
                                      d_r2.data(), g.g2, g.be2);
    d_h1 = d_r2;
    for (std::size_t i = 0; i < T * D; ++i) d_ff[i] = tp.drop2.empty() ? d_r2[i] : d_r2[i] * tp.drop2[i];
    kernels::gemm_tn(T, FF, D, tp.ff_act.data(), d_ff.data(), g.w2, true);
    kernels::accumulate_col_sums(T, D, d_ff.data(), g.b2);
    kernels::gemm_nt(T, D, FF, d_ff.data(), w.w2, d_act.data(), false);
    for (std::size_t i = 0; i < T * FF; ++i)
        if (tp.ff_pre[i] <= 0.0) d_act[i] = 0.0;
    kernels::gemm_tn(T, D, FF, tp.h1.data(), d_act.data(), g.w1, true);
    kernels::accumulate_col_sums(T, FF, d_act.data(), g.b1);
    kernels::gemm_nt(T, FF, D, d_act.data(), w.w1, d_h1.data(), true);

    kernels::layer_norm_rows_backward(T, D, d_h1.data(), tp.xhat1.data(), tp.inv1.data(), w.g1,
                                      d_r1.data(), g.g1, g.be1);
    d_in = d_r1;  // residual path
    std::vector<double> d_attn(T * D);
    for (std::size_t i = 0; i < T * D; ++i) d_attn[i] = tp.drop1.empty() ? d_r1[i] : d_r1[i] * tp.drop1[i];
    kernels::gemm_tn(T, D, D, tp.ctx.data(), d_attn.data(), g.wo, true);
    kernels::accumulate_col_sums(T, D, d_attn.data(), g.bo);
    std::vector<double> d_ctx(T * D);
    kernels::gemm_nt(T, D, D, d_attn.data(), w.wo, d_ctx.data(), false);

    std::vector<double> dq(T * D, 0.0), dk_(T * D, 0.0), dv(T * D, 0.0), dp(T), ds(T);
    std::vector<double> dkt(dk * T), dvt(dk * T);
    for (std::size_t h = 0; h < H; ++h) {
        const double* kh = tp.kt.data() + h * dk * T;
        const double* vh = tp.vt.data() + h * dk * T;
        std::fill(dkt.begin(), dkt.end(), 0.0);
        std::fill(dvt.begin(), dvt.end(), 0.0);
        for (std::size_t i = 0; i < T; ++i) {
            const double* __restrict pr = tp.probs.data() + (h * T + i) * T;
            const double* dci = d_ctx.data() + i * D + h * dk;
            std::fill(dp.begin(), dp.end(), 0.0);
            for (std::size_t e = 0; e < dk; ++e) {
                const double g = dci[e];
                const double* __restrict ve = vh + e * T;
                double* __restrict dve = dvt.data() + e * T;
                for (std::size_t j = 0; j < T; ++j) {
                    dp[j] += g * ve[j];
                    dve[j] += pr[j] * g;
                }
            }
            const double dot_pdp = kernels::dot(pr, dp.data(), T);
            for (std::size_t j = 0; j < T; ++j) ds[j] = pr[j] * (dp[j] - dot_pdp) * dm.scale;
            const double* qi = tp.q.data() + i * D + h * dk;
            double* dqi = dq.data() + i * D + h * dk;
            for (std::size_t e = 0; e < dk; ++e) {
                const double* __restrict ke = kh + e * T;
                double* __restrict dke = dkt.data() + e * T;
                const double qe = qi[e];
                for (std::size_t j = 0; j < T; ++j) dke[j] += ds[j] * qe;
                dqi[e] = kernels::dot(ds.data(), ke, T);
            }
        }
        for (std::size_t e = 0; e < dk; ++e)
            for (std::size_t j = 0; j < T; ++j) {
                dk_[j * D + h * dk + e] = dkt[e * T + j];
                dv[j * D + h * dk + e] = dvt[e * T + j];
            }
    }
    const double* x = tp.x_in.data();
    kernels::gemm_tn(T, D, D, x, dq.data(), g.wq, true);
    kernels::accumulate_col_sums(T, D, dq.data(), g.bq);
    kernels::gemm_nt(T, D, D, dq.data(), w.wq, d_in.data(), true);
    kernels::gemm_tn(T, D, D, x, dk_.data(), g.wk, true);
    kernels::accumulate_col_sums(T, D, dk_.data(), g.bk);
    kernels::gemm_nt(T, D, D, dk_.data(), w.wk, d_in.data(), true);
    kernels::gemm_tn(T, D, D, x, dv.data(), g.wv, true);
    kernels::accumulate_col_sums(T, D, dv.data(), g.bv);
    kernels::gemm_nt(T, D, D, dv.data(), w.wv, d_in.data(), true);
}

void embed(const NetPtrs<const double>& net, const Dims& dm, std::size_t in_width,
           const double* x, std::size_t T, const std::vector<double>& pe, std::vector<double>& h) {
    h.resize(T * dm.d);
    kernels::gemm_nn(T, in_width, dm.d, x, net.w_in, h.data(), false);
    kernels::add_row_bias(T, dm.d, net.b_in, h.data());
    for (std::size_t i = 0; i < T * dm.d; ++i) h[i] += pe[i];
}

void check_input(const TransformerConfig& c, const Matrix& x, std::span<const std::uint8_t> valid) {
    if (x.cols() != c.input_width)
        throw std::invalid_argument("timing model: input has " + std::to_string(x.cols()) +
                                    " columns, expected " + std::to_string(c.input_width));
    if (x.rows() == 0) throw std::invalid_argument("timing model: empty sequence");
    if (x.rows() > c.max_length)
        throw std::length_error("timing model: sequence length " + std::to_string(x.rows()) +
                                " exceeds max_length " + std::to_string(c.max_length));
    if (!valid.empty()) {
        if (valid.size() != x.rows()) throw std::invalid_argument("timing model: mask length mismatch");
        if (std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; }))
            throw std::invalid_argument("timing model: mask hides every step");
    }
}

// Loss (sum over valid steps, unnormalized) and gradient scaled by `inv_total`.
double sequence_loss_grad(const TransformerConfig& c, std::span<const double> params,
                          const PreparedSequence& seq, std::span<double> grad, Rng* rng,
                          double inv_total) {
    check_input(c, seq.input, seq.labels.valid);
    const Dims dm = dims_of(c);
    const std::size_t T = seq.input.rows(), D = dm.d;
    const auto net = bind<const double>(c, params.data());
    const auto gnet = bind<double>(c, grad.data());
    const std::uint8_t* valid = seq.labels.valid.empty() ? nullptr : seq.labels.valid.data();

    std::vector<double> pe, h, scratch;
    fill_positional(T, D, pe);
    embed(net, dm, c.input_width, seq.input.data(), T, pe, h);
    std::vector<LayerTape> tapes(c.layers);
    for (std::size_t l = 0; l < c.layers; ++l) {
        layer_forward(net.layers[l], dm, T, h.data(), valid, 0, T, tapes[l], rng, c.dropout, scratch);
        h = tapes[l].out;
    }

    double loss = 0.0;
    std::vector<double> dz(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        if (valid && !valid[t]) continue;
        double z = *net.b_out;
        for (std::size_t j = 0; j < D; ++j) z += h[t * D + j] * net.w_out[j];
        const double y = seq.labels.labels[t];
        loss += bce_logit(z, y);
        dz[t] = (sigmoid(z) - y) * inv_total;
    }

    std::vector<double> dh(T * D);
    for (std::size_t t = 0; t < T; ++t) {
        *gnet.b_out += dz[t];
        for (std::size_t j = 0; j < D; ++j) {
            gnet.w_out[j] += h[t * D + j] * dz[t];
            dh[t * D + j] = dz[t] * net.w_out[j];
        }
    }
    std::vector<double> d_in;
    for (std::size_t l = c.layers; l-- > 0;) {
        layer_backward(net.layers[l], gnet.layers[l], dm, T, tapes[l], dh, d_in);
        dh.swap(d_in);
    }
    kernels::gemm_tn(T, c.input_width, D, seq.input.data(), dh.data(), gnet.w_in, true);
    kernels::accumulate_col_sums(T, D, dh.data(), gnet.b_in);
    return loss;
}

std::size_t valid_count(const LabelSequence& l) {
    if (l.valid.empty()) return l.labels.size();
    return static_cast<std::size_t>(std::count_if(l.valid.begin(), l.valid.end(),
                                                  [](std::uint8_t v) { return v != 0; }));
}

}  // namespace

struct InferenceWorkspace::Buffers {
    std::vector<double> pe;
    std::size_t pe_rows = 0, pe_width = 0;
    std::vector<double> h, scratch;
    LayerTape tape;
};

InferenceWorkspace::InferenceWorkspace() : buffers_(std::make_unique<Buffers>()) {}
InferenceWorkspace::~InferenceWorkspace() = default;
InferenceWorkspace::InferenceWorkspace(InferenceWorkspace&&) noexcept = default;
InferenceWorkspace& InferenceWorkspace::operator=(InferenceWorkspace&&) noexcept = default;

Standardizer Standardizer::fit(std::span<const Matrix> samples) {
    if (samples.empty()) throw std::invalid_argument("Standardizer::fit: no samples");
    const std::size_t cols = samples.front().cols();
    Standardizer s;
    s.mean.assign(cols, 0.0);
    s.stddev.assign(cols, 0.0);
    double count = 0.0;
    for (const auto& m : samples) {
        if (m.cols() != cols) throw std::invalid_argument("Standardizer::fit: column mismatch");
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) s.mean[c] += m(r, c);
        count += static_cast<double>(m.rows());
    }
    for (auto& v : s.mean) v /= count;
    for (const auto& m : samples)
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const double d = m(r, c) - s.mean[c];
                s.stddev[c] += d * d;
            }
    for (auto& v : s.stddev) {
        v = std::sqrt(v / count);
        if (!(v >= 1e-12)) v = 1.0;
    }
    return s;
}

Matrix Standardizer::apply(const Matrix& raw) const {
    if (raw.cols() != mean.size()) throw std::invalid_argument("Standardizer::apply: column mismatch");
    Matrix out(raw.rows(), raw.cols());
    for (std::size_t r = 0; r < raw.rows(); ++r)
        for (std::size_t c = 0; c < raw.cols(); ++c) out(r, c) = (raw(r, c) - mean[c]) / stddev[c];
    return out;
}

Matrix Standardizer::invert(const Matrix& z) const {
    if (z.cols() != mean.size()) throw std::invalid_argument("Standardizer::invert: column mismatch");
    Matrix out(z.rows(), z.cols());
    for (std::size_t r = 0; r < z.rows(); ++r)
        for (std::size_t c = 0; c < z.cols(); ++c) out(r, c) = z(r, c) * stddev[c] + mean[c];
    return out;
}

TimingModel TimingModel::initialize(const TransformerConfig& config,
                                    std::vector<std::size_t> feature_columns, std::uint64_t seed) {
    config.validate();
    if (feature_columns.size() != config.input_width)
        throw std::invalid_argument("TimingModel: feature column count differs from input width");
    TimingModel m;
    m.config = config;
    m.feature_columns = std::move(feature_columns);
    m.seed = seed;
    m.standardizer.mean.assign(config.input_width, 0.0);
    m.standardizer.stddev.assign(config.input_width, 1.0);
    const auto blocks = transformer_param_layout(config);
    m.params.assign(param_count(config), 0.0);
    Rng rng(mix_seed(seed, 0x1417));
    for (const auto& b : blocks) {
        const bool is_gain = b.name.ends_with(".gain");
        const bool is_bias = b.name.ends_with("bias") || b.name.ends_with(".bq") ||
                             b.name.ends_with(".bk") || b.name.ends_with(".bv") ||
                             b.name.ends_with(".bo");
        for (std::size_t i = 0; i < b.size(); ++i) {
            double& p = m.params[b.offset + i];
            if (is_gain) {
                p = 1.0;
            } else if (is_bias) {
                p = 0.0;
            } else {
                const double limit = 1.0 / std::sqrt(static_cast<double>(b.rows));
                p = rng.uniform(-limit, limit);
            }
        }
    }
    return m;
}

Matrix TimingModel::prepare_input(const Matrix& raw) const {
    Matrix sel(raw.rows(), feature_columns.size());
    for (std::size_t r = 0; r < raw.rows(); ++r)
        for (std::size_t k = 0; k < feature_columns.size(); ++k) {
            if (feature_columns[k] >= raw.cols())
                throw std::invalid_argument("TimingModel: feature column out of range");
            sel(r, k) = raw(r, feature_columns[k]);
        }
    return standardizer.apply(sel);
}

LabelSequence make_labels(std::size_t length, std::optional<Step> t_c) {
    LabelSequence l;
    l.labels.assign(length, 0.0);
    l.valid.assign(length, 1);
    if (t_c) {
        if (*t_c < 1 || *t_c > length)
            throw std::out_of_range("make_labels: t_c " + std::to_string(*t_c) + " outside [1, " +
                                    std::to_string(length) + "]");
        for (std::size_t i = *t_c - 1; i < length; ++i) l.labels[i] = 1.0;
    }
    return l;
}

LabelSequence make_labels(const Trajectory& traj, const std::optional<CorrectionEvent>& event) {
    return make_labels(traj.length(), event ? std::optional<Step>(event->t_c) : std::nullopt);
}

std::vector<double> forward_rows(const TimingModel& model, const Matrix& x, std::size_t row_lo,
                                 std::size_t row_hi, InferenceWorkspace& ws,
                                 std::span<const std::uint8_t> valid) {
    const auto& c = model.config;
    check_input(c, x, valid);
    const std::size_t T = x.rows();
    row_hi = std::min(row_hi, T);
    if (row_lo >= row_hi) throw std::invalid_argument("forward_rows: empty row range");
    const Dims dm = dims_of(c);
    const std::size_t D = dm.d;
    auto& b = ws.buffers();
    if (b.pe_width != D || b.pe_rows < T) {
        fill_positional(std::max(T, b.pe_rows), D, b.pe);
        b.pe_rows = std::max(T, b.pe_rows);
        b.pe_width = D;
    }
    const auto net = bind<const double>(c, model.params.data());
    const std::uint8_t* vm = valid.empty() ? nullptr : valid.data();

    embed(net, dm, c.input_width, x.data(), T, b.pe, b.h);
    for (std::size_t l = 0; l < c.layers; ++l) {
        const bool last = l + 1 == c.layers;
        layer_forward(net.layers[l], dm, T, b.h.data(), vm, last ? row_lo : 0, last ? row_hi : T,
                      b.tape, nullptr, 0.0, b.scratch);
        b.h.swap(b.tape.out);
    }
    std::vector<double> cdf(row_hi - row_lo);
    for (std::size_t i = 0; i < cdf.size(); ++i) {
        double z = *net.b_out;
        for (std::size_t j = 0; j < D; ++j) z += b.h[i * D + j] * net.w_out[j];
        cdf[i] = sigmoid(z);
    }
    return cdf;
}

std::vector<double> forward(const TimingModel& model, const Matrix& raw_features,
                            std::span<const std::uint8_t> valid) {
    InferenceWorkspace ws;
    const Matrix x = model.prepare_input(raw_features);
    return forward_rows(model, x, 0, x.rows(), ws, valid);
}

double timing_loss_and_gradient(const TransformerConfig& config, std::span<const double> params,
                                std::span<const PreparedSequence> batch, std::span<double> grad,
                                std::uint64_t dropout_seed, std::size_t workers) {
    if (grad.size() != params.size()) throw std::invalid_argument("timing_loss_and_gradient: grad size");
    std::size_t total = 0;
    for (const auto& s : batch) total += valid_count(s.labels);
    if (total == 0) throw std::invalid_argument("timing_loss_and_gradient: no valid steps");
    const double inv_total = 1.0 / static_cast<double>(total);

    std::vector<std::vector<double>> grads(batch.size());
    std::vector<double> losses(batch.size(), 0.0);
    parallel_for(batch.size(), workers, [&](std::size_t i) {
        grads[i].assign(params.size(), 0.0);
        if (dropout_seed != 0 && config.dropout > 0.0) {
            Rng rng(mix_seed(dropout_seed, i));
            losses[i] = sequence_loss_grad(config, params, batch[i], grads[i], &rng, inv_total);
        } else {
            losses[i] = sequence_loss_grad(config, params, batch[i], grads[i], nullptr, inv_total);
        }
    });
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        loss += losses[i];
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += grads[i][k];
    }
    return loss * inv_total;
}

double timing_loss(const TransformerConfig& config, std::span<const double> params,
                   std::span<const PreparedSequence> sequences) {
    TimingModel tmp;
    tmp.config = config;
    tmp.params.assign(params.begin(), params.end());
    InferenceWorkspace ws;
    double loss = 0.0;
    std::size_t total = 0;
    for (const auto& s : sequences) {
        const auto cdf = forward_rows(tmp, s.input, 0, s.input.rows(), ws, s.labels.valid);
        for (std::size_t t = 0; t < cdf.size(); ++t) {
            if (!s.labels.valid.empty() && !s.labels.valid[t]) continue;
            const double p = std::clamp(cdf[t], 1e-15, 1.0 - 1e-15);
            const double y = s.labels.labels[t];
            loss -= y * std::log(p) + (1.0 - y) * std::log1p(-p);
            ++total;
        }
    }
    return total == 0 ? 0.0 : loss / static_cast<double>(total);
}

TimingTrainResult train_timing_model(std::span<const TimingSample> train,
                                     std::span<const TimingSample> val,
                                     const TransformerConfig& config,
                                     std::vector<std::size_t> feature_columns, std::uint64_t seed,
                                     const TimingTrainOptions& options) {
    if (train.empty()) throw std::invalid_argument("train_timing_model: empty training set");
    TimingTrainResult result;
    result.model = TimingModel::initialize(config, std::move(feature_columns), seed);
    auto& model = result.model;

    {
        std::vector<Matrix> selected;
        selected.reserve(train.size());
        for (const auto& s : train) {
            Matrix sel(s.features.rows(), model.feature_columns.size());
            for (std::size_t r = 0; r < sel.rows(); ++r)
                for (std::size_t k = 0; k < sel.cols(); ++k)
                    sel(r, k) = s.features(r, model.feature_columns.at(k));
            selected.push_back(std::move(sel));
        }
        model.standardizer = Standardizer::fit(selected);
    }
    auto prepare = [&](std::span<const TimingSample> set) {
        std::vector<PreparedSequence> out;
        out.reserve(set.size());
        for (const auto& s : set) {
            if (s.labels.labels.size() != s.features.rows())
                throw std::invalid_argument("train_timing_model: label length mismatch");
            out.push_back({model.prepare_input(s.features), s.labels});
        }
        return out;
    };
    const auto train_seq = prepare(train);
    const auto val_seq = prepare(val);
    const bool have_val = !val_seq.empty();

    AdamState adam(model.params.size(), options.adam);
    std::vector<double> grad(model.params.size());
    std::vector<std::size_t> order(train_seq.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<PreparedSequence> batch;
    std::vector<double> best = model.params;
    double best_loss = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    const std::size_t bs = std::max<std::size_t>(1, options.batch_size);

    for (std::size_t epoch = 0; epoch < options.max_epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(seed, 0x5e9u + epoch));
        shuffle_rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            batch.clear();
            for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k)
                batch.push_back(train_seq[order[k]]);
            const std::uint64_t dseed = mix_seed(seed, (epoch << 20) + batches + 1) | 1u;
            const double loss =
                timing_loss_and_gradient(model.config, model.params, batch, grad, dseed, options.workers);
            if (!std::isfinite(loss))
                throw DivergenceError("train_timing_model: non-finite loss at epoch " +
                                      std::to_string(epoch) + ", batch " + std::to_string(batches));
            adam_step(model.params, grad, adam);
            epoch_loss += loss;
            ++batches;
        }
        result.train_loss.push_back(epoch_loss / static_cast<double>(batches));
        const double vl = have_val ? timing_loss(model.config, model.params, val_seq)
                                   : timing_loss(model.config, model.params, train_seq);
        if (!std::isfinite(vl))
            throw DivergenceError("train_timing_model: non-finite validation loss at epoch " +
                                  std::to_string(epoch));
        result.val_loss.push_back(vl);
        if (vl < best_loss) {
            best_loss = vl;
            best = model.params;
            result.best_epoch = epoch;
            since_best = 0;
        } else if (options.patience > 0 && ++since_best >= options.patience) {
            break;
        }
    }
    model.params = std::move(best);
    return result;
}

std::vector<double> pdf_from_cdf(std::span<const double> cdf) {
    std::vector<double> pdf(cdf.size());
    for (std::size_t i = 0; i < cdf.size(); ++i) {
        if (i == 0) {
            pdf[i] = cdf[0];
        } else {
            const double d = cdf[i] - cdf[i - 1];
            pdf[i] = d > 0.0 ? d : 0.0;
        }
    }
    return pdf;
}

double timing_likelihood(std::span<const double> pdf, Step t, double window, double dt) {
    if (t < 1 || t > pdf.size())
        throw std::out_of_range("timing_likelihood: step " + std::to_string(t) + " out of range");
    const auto half = static_cast<std::size_t>(std::llround(window / dt)) / 2;
    const std::size_t lo = t > half ? t - half : 1;
    const std::size_t hi = std::min(pdf.size(), t + half);
    double sum = 0.0;
    for (std::size_t s = lo; s <= hi; ++s) sum += pdf[s - 1];
    return sum / static_cast<double>(hi - lo + 1);
}

std::optional<Step> predict_correction_time(std::span<const double> cdf, double threshold) {
    if (cdf.empty()) return std::nullopt;
    if (!(cdf.back() >= threshold)) return std::nullopt;
    std::size_t i = cdf.size();
    while (i > 0 && cdf[i - 1] >= threshold) --i;
    return static_cast<Step>(i + 1);
}

namespace {

using nlohmann::json;

constexpr const char* kTimingSchema = "corrtime.timing_model";
constexpr int kTimingSchemaVersion = 1;

}  // namespace

std::string timing_model_to_json(const TimingModel& m) {
    json blocks = json::array();
    for (const auto& b : transformer_param_layout(m.config))
        blocks.push_back({{"name", b.name}, {"offset", b.offset}, {"rows", b.rows}, {"cols", b.cols}});
    const auto& c = m.config;
    json j = {{"schema", kTimingSchema},
              {"version", kTimingSchemaVersion},
              {"config",
               {{"layers", c.layers},
                {"heads", c.heads},
                {"width", c.width},
                {"ff_width", c.ff_width},
                {"dropout", c.dropout},
                {"max_length", c.max_length},
                {"input_width", c.input_width}}},
              {"positional_encoding", "sinusoidal"},
              {"initialization", "fan_in_uniform"},
              {"seed", m.seed},
              {"feature_columns", m.feature_columns},
              {"standardizer", {{"mean", m.standardizer.mean}, {"stddev", m.standardizer.stddev}}},
              {"blocks", std::move(blocks)},
              {"params", m.params}};
    return j.dump();
}

TimingModel timing_model_from_json(const std::string& text) {
    const json j = json::parse(text);
    if (j.value("schema", "") != kTimingSchema) throw std::runtime_error("not a timing model checkpoint");
    if (j.value("version", 0) != kTimingSchemaVersion)
        throw std::runtime_error("unsupported timing model checkpoint version");
    TimingModel m;
    const auto& c = j.at("config");
    m.config.layers = c.at("layers").get<std::size_t>();
    m.config.heads = c.at("heads").get<std::size_t>();
    m.config.width = c.at("width").get<std::size_t>();
    m.config.ff_width = c.at("ff_width").get<std::size_t>();
    m.config.dropout = c.at("dropout").get<double>();
    m.config.max_length = c.at("max_length").get<std::size_t>();
    m.config.input_width = c.at("input_width").get<std::size_t>();
    m.config.validate();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.feature_columns = j.at("feature_columns").get<std::vector<std::size_t>>();
    m.standardizer.mean = j.at("standardizer").at("mean").get<std::vector<double>>();
    m.standardizer.stddev = j.at("standardizer").at("stddev").get<std::vector<double>>();
    m.params = j.at("params").get<std::vector<double>>();
    if (m.params.size() != param_count(m.config))
        throw std::runtime_error("timing model checkpoint: parameter count mismatch");
    if (m.feature_columns.size() != m.config.input_width ||
        m.standardizer.mean.size() != m.config.input_width ||
        m.standardizer.stddev.size() != m.config.input_width)
        throw std::runtime_error("timing model checkpoint: input width mismatch");
    return m;
}

}  // namespace corrtime
