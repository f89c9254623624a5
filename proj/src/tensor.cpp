#include "portrl/tensor.hpp"

#include <cmath>

namespace portrl {

void matmul(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    if (b.shape[0] != k) throw std::invalid_argument("matmul: inner dimensions differ " + a.shape_str() + " x " + b.shape_str());
    out = Tensor({m, n});
    const double* pa = a.v.data();
    const double* pb = b.v.data();
    double* pc = out.v.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* crow = pc + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    if (b.shape[1] != k) throw std::invalid_argument("matmul_nt: inner dimensions differ " + a.shape_str() + " x " + b.shape_str());
    out = Tensor({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.v.data() + i * k;
        double* crow = out.v.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b.v.data() + j * k;
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = acc;
        }
    }
}

void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
    if (b.shape[0] != k) throw std::invalid_argument("matmul_tn: inner dimensions differ " + a.shape_str() + " x " + b.shape_str());
    out = Tensor({m, n});
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double* arow = a.v.data() + kk * m;
        const double* brow = b.v.data() + kk * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = out.v.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

bool all_finite(const Tensor& t) {
    for (double x : t.v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace portrl
