#include "corrtime/matrix.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace corrtime {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows * cols) {
        throw std::invalid_argument("Matrix: value count " + std::to_string(values_.size()) +
                                    " does not match shape " + std::to_string(rows) + "x" +
                                    std::to_string(cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: dimension mismatch " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " * " + std::to_string(b.rows()) +
                                    "x" + std::to_string(b.cols()));
    }
    Matrix c(a.rows(), b.cols());
    kernels::gemm_nn(a.rows(), a.cols(), b.cols(), a.data(), b.data(), c.data(), false);
    return c;
}

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
    return t;
}

Matrix softmax_rows(const Matrix& m, std::span<const std::uint8_t> mask) {
    if (!mask.empty() && mask.size() != m.size())
        throw std::invalid_argument("softmax_rows: mask shape mismatch");
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto in = m.row(r);
        auto o = out.row(r);
        const std::uint8_t* mrow = mask.empty() ? nullptr : mask.data() + r * m.cols();
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t c = 0; c < in.size(); ++c) {
            if (mrow && mrow[c]) continue;
            mx = std::max(mx, in[c]);
            any = true;
        }
        if (!any) throw std::invalid_argument("softmax_rows: row " + std::to_string(r) + " fully masked");
        double sum = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            if (mrow && mrow[c]) {
                o[c] = 0.0;
                continue;
            }
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (std::size_t c = 0; c < in.size(); ++c) o[c] /= sum;
    }
    return out;
}

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain,
                               std::span<const double> bias, double eps) {
    if (x.empty()) throw std::invalid_argument("layer_norm: empty input");
    if (gain.size() != x.size() || bias.size() != x.size())
        throw std::invalid_argument("layer_norm: gain/bias size mismatch");
    std::vector<double> y(x.size()), xhat(x.size());
    double inv_std = 0.0;
    kernels::layer_norm_rows(1, x.size(), x.data(), gain.data(), bias.data(), eps, y.data(),
                             xhat.data(), &inv_std);
    return y;
}

namespace kernels {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a,
             const double* __restrict b, double* __restrict c, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* __restrict ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* __restrict bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a,
             const double* __restrict b, double* __restrict c, bool accumulate) {
    if (!accumulate) std::fill(c, c + k * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* __restrict bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            double* __restrict cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a,
             const double* __restrict b, double* __restrict c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* __restrict ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* __restrict bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + s : s;
        }
    }
}

void add_row_bias(std::size_t m, std::size_t n, const double* __restrict bias, double* __restrict x) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) x[i * n + j] += bias[j];
}

void accumulate_col_sums(std::size_t m, std::size_t n, const double* __restrict x,
                         double* __restrict out) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
}

void layer_norm_rows(std::size_t m, std::size_t n, const double* x, const double* gain,
                     const double* bias, double eps, double* y, double* xhat, double* inv_std) {
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = x + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xi[j];
        mean *= inv_n;
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = xi[j] - mean;
            var += d * d;
        }
        var *= inv_n;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xi[j] - mean) * is;
            xhat[i * n + j] = h;
            y[i * n + j] = h * gain[j] + bias[j];
        }
    }
}

void layer_norm_rows_backward(std::size_t m, std::size_t n, const double* dy, const double* xhat,
                              const double* inv_std, const double* gain, double* dx,
                              double* dgain, double* dbias) {
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* dyi = dy + i * n;
        const double* hi = xhat + i * n;
        double sum_g = 0.0, sum_gh = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double g = dyi[j] * gain[j];
            sum_g += g;
            sum_gh += g * hi[j];
            dgain[j] += dyi[j] * hi[j];
            dbias[j] += dyi[j];
        }
        const double is = inv_std[i];
        for (std::size_t j = 0; j < n; ++j) {
            const double g = dyi[j] * gain[j];
            dx[i * n + j] = is * (g - inv_n * sum_g - hi[j] * inv_n * sum_gh);
        }
    }
}

namespace {
constexpr std::size_t kLanes = 8;

double fold_lanes(const double* acc) {
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}
}  // namespace

double dot(const double* __restrict a, const double* __restrict b, std::size_t n) {
    double acc[kLanes] = {};
    const std::size_t full = n - n % kLanes;
    for (std::size_t i = 0; i < full; i += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l) acc[l] += a[i + l] * b[i + l];
    for (std::size_t i = full; i < n; ++i) acc[i - full] += a[i] * b[i];
    return fold_lanes(acc);
}

double sum(const double* __restrict a, std::size_t n) {
    double acc[kLanes] = {};
    const std::size_t full = n - n % kLanes;
    for (std::size_t i = 0; i < full; i += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l) acc[l] += a[i + l];
    for (std::size_t i = full; i < n; ++i) acc[i - full] += a[i];
    return fold_lanes(acc);
}

double max_value(const double* __restrict a, std::size_t n) {
    constexpr double lowest = -std::numeric_limits<double>::infinity();
    double acc[kLanes] = {lowest, lowest, lowest, lowest, lowest, lowest, lowest, lowest};
    const std::size_t full = n - n % kLanes;
    for (std::size_t i = 0; i < full; i += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l) acc[l] = a[i + l] > acc[l] ? a[i + l] : acc[l];
    for (std::size_t i = full; i < n; ++i) acc[i - full] = a[i] > acc[i - full] ? a[i] : acc[i - full];
    double m = acc[0];
    for (std::size_t l = 1; l < kLanes; ++l) m = acc[l] > m ? acc[l] : m;
    return m;
}

void exp_nonpositive(double* __restrict x, std::size_t n) {
    constexpr double log2e = 1.4426950408889634;
    constexpr double ln2_hi = 6.93147180369123816490e-01;
    constexpr double ln2_lo = 1.90821492927058770002e-10;
    constexpr double shifter = 0x1.8p52;
    for (std::size_t i = 0; i < n; ++i) x[i] = x[i] < -708.0 ? -708.0 : x[i];
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x[i];
        const double kf = (v * log2e + shifter) - shifter;  // round to nearest integer
        const double r = (v - kf * ln2_hi) - kf * ln2_lo;
        double p = 1.0 / 6227020800.0;
        p = p * r + 1.0 / 479001600.0;
        p = p * r + 1.0 / 39916800.0;
        p = p * r + 1.0 / 3628800.0;
        p = p * r + 1.0 / 362880.0;
        p = p * r + 1.0 / 40320.0;
        p = p * r + 1.0 / 5040.0;
        p = p * r + 1.0 / 720.0;
        p = p * r + 1.0 / 120.0;
        p = p * r + 1.0 / 24.0;
        p = p * r + 1.0 / 6.0;
        p = p * r + 0.5;
        p = p * r + 1.0;
        p = p * r + 1.0;
        const auto k = static_cast<std::int64_t>(kf);
        x[i] = p * std::bit_cast<double>(static_cast<std::uint64_t>(k + 1023) << 52);
    }
}

}  // namespace kernels

}  // namespace corrtime
