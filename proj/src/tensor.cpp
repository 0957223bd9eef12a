#include "padapter/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "padapter/errors.hpp"
#include "padapter/rng.hpp"

namespace padapter {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected matrix, got " + shape_str(t.shape()));
}

}  // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
        throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = stddev * rng.normal();
    return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    Tensor out({a.rows(), b.cols()});
    Map(out.data(), a.rows(), b.cols()).noalias() =
        MapC(a.data(), a.rows(), a.cols()) * MapC(b.data(), b.rows(), b.cols());
    return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_bt");
    require_matrix(b, "matmul_bt");
    if (a.cols() != b.cols())
        throw ShapeError("matmul_bt: inner dimensions differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()) + "^T");
    Tensor out({a.rows(), b.rows()});
    Map(out.data(), a.rows(), b.rows()).noalias() =
        MapC(a.data(), a.rows(), a.cols()) * MapC(b.data(), b.rows(), b.cols()).transpose();
    return out;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_at");
    require_matrix(b, "matmul_at");
    if (a.rows() != b.rows())
        throw ShapeError("matmul_at: inner dimensions differ, " + shape_str(a.shape()) + "^T * " +
                         shape_str(b.shape()));
    Tensor out({a.cols(), b.cols()});
    Map(out.data(), a.cols(), b.cols()).noalias() =
        MapC(a.data(), a.rows(), a.cols()).transpose() * MapC(b.data(), b.rows(), b.cols());
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    // A rank-1 input is treated as a single row.
    const std::size_t cols = x.rank() == 1 ? x.dim(0) : x.cols();
    const std::size_t rows = x.rank() == 1 ? 1 : x.rows();
    if (x.rank() > 2) throw ShapeError("softmax: expected vector or matrix, got " + shape_str(x.shape()));
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * cols;
        double* o = out.data() + r * cols;
        double mx = in[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        const double inv = 1.0 / sum;
        for (std::size_t c = 0; c < cols; ++c) o[c] *= inv;
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
    return out;
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
    require_same_shape(x, y, "axpy");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace padapter
