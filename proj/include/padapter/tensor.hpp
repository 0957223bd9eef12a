#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace padapter {

class Rng;

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major array of doubles. Images are {C, H, W}; matrices {rows, cols}.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor identity(std::size_t n);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Matrix view helpers; valid for rank-2 tensors.
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.at(1); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    double& at(std::size_t ch, std::size_t y, std::size_t x) { return data_[(ch * shape_[1] + y) * shape_[2] + x]; }
    double at(std::size_t ch, std::size_t y, std::size_t x) const { return data_[(ch * shape_[1] + y) * shape_[2] + x]; }

    Tensor reshaped(Shape shape) const;
    bool all_finite() const;
    void fill(double v);

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<double> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Plain (untracked) kernels. The autodiff graph uses the same kernels so the
// value path is shared.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_bt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor matmul_at(const Tensor& a, const Tensor& b);  // a^T * b
Tensor softmax_rows(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void axpy(double alpha, const Tensor& x, Tensor& y);  // y += alpha * x

}  // namespace padapter
