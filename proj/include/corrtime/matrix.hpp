#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace corrtime {

// Dense row-major matrix of doubles. Values are required to be finite.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }

    std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
    std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }

    std::span<const double> values() const noexcept { return values_; }
    std::span<double> values() noexcept { return values_; }
    const double* data() const noexcept { return values_.data(); }
    double* data() noexcept { return values_.data(); }

    bool all_finite() const noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);

// Row-wise softmax. `mask` is either empty (nothing masked) or rows*cols
// entries where nonzero means "masked out"; masked entries come out as 0.
// Throws std::invalid_argument if a row is fully masked.
Matrix softmax_rows(const Matrix& m, std::span<const std::uint8_t> mask = {});

// (x - mean) / sqrt(var + eps) * gain + bias, population variance.
std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain,
                               std::span<const double> bias, double eps = 1e-5);

namespace kernels {

// C[MxN] (+)= A[MxK] * B[KxN]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c, bool accumulate);
// C[KxN] (+)= A[MxK]^T * B[MxN]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c, bool accumulate);
// C[MxN] (+)= A[MxK] * B[NxK]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c, bool accumulate);

// Adds bias[n] to every row of x[m x n].
void add_row_bias(std::size_t m, std::size_t n, const double* bias, double* x);
// out[n] += column sums of x[m x n]
void accumulate_col_sums(std::size_t m, std::size_t n, const double* x, double* out);

// Layer norm over each row of x[m x n]; stores normalized values and 1/sigma per row.
void layer_norm_rows(std::size_t m, std::size_t n, const double* x, const double* gain,
                     const double* bias, double eps, double* y, double* xhat, double* inv_std);
// Backward of layer_norm_rows. dx is overwritten; dgain/dbias accumulate.
void layer_norm_rows_backward(std::size_t m, std::size_t n, const double* dy, const double* xhat,
                              const double* inv_std, const double* gain, double* dx,
                              double* dgain, double* dbias);

// Reductions with a fixed 8-lane accumulation order; vectorizable without
// reassociation, so results do not depend on the instruction set.
double dot(const double* a, const double* b, std::size_t n);
double sum(const double* a, std::size_t n);
double max_value(const double* a, std::size_t n);

// In-place exp for arguments <= 0 (max-subtracted softmax logits). Inputs below
// -708 map to exp(-708). Relative error is within a few ulp of std::exp.
void exp_nonpositive(double* x, std::size_t n);

}  // namespace kernels

}  // namespace corrtime
