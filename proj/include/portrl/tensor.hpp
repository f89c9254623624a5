#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace portrl {

// Dense row-major tensor of doubles. Rank is arbitrary but the engine only
// uses ranks 1-3 (vectors, matrices, and (time, batch, feature) sequences).
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        v.assign(count(shape), 0.0);
    }
    Tensor(std::vector<std::size_t> s, std::vector<double> values)
        : shape(std::move(s)), v(std::move(values)) {
        if (v.size() != count(shape)) throw std::invalid_argument("tensor: value count does not match shape");
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<std::size_t> s, double x) {
        Tensor t(std::move(s));
        for (double& e : t.v) e = x;
        return t;
    }
    static Tensor scalar(double x) { return Tensor({1}, {x}); }
    static Tensor row(std::vector<double> values) {
        std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    std::size_t size() const { return v.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 0 : shape[0]); }
    std::size_t cols() const { return shape.size() == 2 ? shape[1] : (shape.size() == 1 ? shape[0] : 0); }

    double& at(std::size_t i, std::size_t j) { return v[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * shape[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

// C = A * B for 2-D tensors; loop order keeps the inner loop contiguous.
void matmul(const Tensor& a, const Tensor& b, Tensor& out);
// C = A * B^T.
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out);
// C = A^T * B.
void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out);

bool all_finite(const Tensor& t);

}  // namespace portrl
