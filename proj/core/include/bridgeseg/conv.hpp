#pragma once

#include "bridgeseg/nn.hpp"
#include "bridgeseg/tensor.hpp"

namespace bridgeseg::nn {

// 2D convolution on single-sample (C, H, W) tensors, stride 1, symmetric
// zero padding (pad = k/2 keeps spatial dims). im2col + GEMM.
struct Conv2d {
    Param weight;  // (out, in, k, k)
    Param bias;    // (out)
    int kernel = 3;
    int pad = 1;

    Conv2d() = default;
    Conv2d(const std::string& name, int in_ch, int out_ch, int k, Rng& rng);

    // cache_for_backward=false runs a blocked, allocation-light path that
    // leaves the layer untouched (safe for concurrent inference).
    Tensor forward(const Tensor& x, bool cache_for_backward = true);
    Tensor backward(const Tensor& grad_out);
    ParamRefs params();

private:
    Tensor cached_x_;
    Tensor cached_cols_;  // (in*k*k, H*W)
};

// 2x2 average pooling; dims must be even.
Tensor avgpool2(const Tensor& x);
Tensor avgpool2_backward(const Tensor& grad_out);  // grad w.r.t. the input

// 2x nearest-neighbor upsampling.
Tensor upsample2(const Tensor& x);
Tensor upsample2_backward(const Tensor& grad_out);

// Channel concatenation of (Ca,H,W) and (Cb,H,W).
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& grad, int ca, Tensor& grad_a, Tensor& grad_b);

// Sinusoidal embedding of normalized time u = t/T in [0, 1]; dim must be even.
Tensor sinusoidal_embedding(double u, int dim);

}  // namespace bridgeseg::nn
