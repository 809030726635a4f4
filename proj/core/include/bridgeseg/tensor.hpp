#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "bridgeseg/rng.hpp"

namespace bridgeseg {

// Dense row-major double tensor. Small fixed rank set (1..4) covers every
// shape in this project: vectors, matrices, (C,H,W) masks, (O,I,KH,KW)
// convolution kernels.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v);
    static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // (C,H,W) accessor.
    double& at3(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    double at3(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    // (rows, cols) accessor.
    double& at2(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    double at2(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    void fill(double v);
    bool all_finite() const;
};

// Elementwise helpers; shapes must match.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, double s);
void axpy(double alpha, const Tensor& x, Tensor& y);  // y += alpha * x
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace bridgeseg
