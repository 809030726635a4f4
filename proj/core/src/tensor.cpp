#include "bridgeseg/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>

namespace bridgeseg {

namespace {
int64_t shape_numel(const std::vector<int>& s) {
    if (s.empty()) throw std::invalid_argument("tensor rank must be >= 1");
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
        n *= d;
    }
    return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
}

Tensor Tensor::full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    t.fill(v);
    return t;
}

Tensor Tensor::randn(std::vector<int> s, Rng& rng, double stddev) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = rng.normal() * stddev;
    return t;
}

void Tensor::fill(double v) {
    for (auto& x : data) x = v;
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("tensor shape mismatch");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("tensor shape mismatch");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

Tensor operator*(const Tensor& a, double s) {
    Tensor out = a;
    for (auto& v : out.data) v *= s;
    return out;
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
    if (!x.same_shape(y)) throw std::invalid_argument("tensor shape mismatch");
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += alpha * x.data[i];
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("tensor shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

}  // namespace bridgeseg
