#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace kfcl {

// Dense row-major array of doubles. Rank 0 (empty dims) is a valid tensor
// holding a single value only when constructed that way; the default tensor
// is empty. Used for parameters, activations, gradients, and Fisher blocks.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> dims)
        : dims_(std::move(dims)), data_(checked_size(dims_), 0.0) {}

    Tensor(std::vector<std::size_t> dims, std::vector<double> data)
        : dims_(std::move(dims)), data_(std::move(data)) {
        if (data_.size() != checked_size(dims_))
            throw std::invalid_argument("Tensor: data length does not match dims");
    }

    static Tensor zeros(std::vector<std::size_t> dims) { return Tensor(std::move(dims)); }

    static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t rank() const { return dims_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const { return dims_.empty() ? 0 : dims_[0]; }
    std::size_t cols() const { return dims_.size() < 2 ? (dims_.empty() ? 0 : 1) : dims_[1]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-d access; the tensor must have rank 2.
    double& operator()(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }

    double* row(std::size_t r) { return data_.data() + r * dims_[1]; }
    const double* row(std::size_t r) const { return data_.data() + r * dims_[1]; }

    bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    void add_scaled(const Tensor& other, double scale) {
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
    }

    void scale(double s) {
        for (double& v : data_) v *= s;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < dims_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(dims_[i]);
        }
        return s + "]";
    }

private:
    static std::size_t checked_size(const std::vector<std::size_t>& dims) {
        std::size_t n = 1;
        for (std::size_t d : dims) {
            if (d == 0) throw std::invalid_argument("Tensor: zero extent");
            n *= d;
        }
        return dims.empty() ? 0 : n;
    }

    std::vector<std::size_t> dims_;
    std::vector<double> data_;
};

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

// C += outer(a, b) * scale, C is rows(a) x cols(b).
inline void add_outer(Tensor& c, const double* a, std::size_t na, const double* b, std::size_t nb,
                      double scale = 1.0) {
    for (std::size_t i = 0; i < na; ++i) {
        const double ai = a[i] * scale;
        double* crow = c.row(i);
        for (std::size_t j = 0; j < nb; ++j) crow[j] += ai * b[j];
    }
}

// Dense matrix product: returns A (m x k) * B (k x n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) throw std::invalid_argument("matmul: inner dims differ");
    Tensor c = Tensor::matrix(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.row(i);
        double* crow = c.row(i);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.row(p);
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// trace(A^T B) over equally shaped matrices; the Frobenius inner product.
inline double frobenius_dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace kfcl
