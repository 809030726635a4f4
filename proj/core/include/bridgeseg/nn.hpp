#pragma once

#include <string>
#include <vector>

#include "bridgeseg/tensor.hpp"

namespace bridgeseg::nn {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool frozen = false;
    std::string adapter_of;

    Param() = default;
    Param(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)) {}
    void zero_grad() { grad.fill(0.0); }
};

using ParamRefs = std::vector<Param*>;

// Row-major GEMM, C = alpha * op(A) op(B) + beta * C with beta in {0, 1}.
// Work is split into fixed 64-row (or 64-column) blocks of C along the larger
// dimension; each block is one sequential Eigen product, so the result is
// bit-identical for any worker-pool size.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc);

// Linear layer y = x W^T + b with optional LoRA adapter pair on top of a
// frozen base: y += x A^T B^T. x is (rows, in).
struct AdaptedLinear {
    Param weight;  // (out, in)
    Param bias;    // (out)
    Param lora_b;  // (out, r), zero-initialized
    Param lora_a;  // (r, in), Gaussian
    bool has_adapter = false;

    AdaptedLinear() = default;
    AdaptedLinear(const std::string& name, int in, int out, Rng& rng);

    // Attaches a zero-impact adapter; base outputs are unchanged until
    // training moves B away from zero. Requires 1 <= rank <= min(in, out).
    void inject_adapter(int rank, Rng& rng);

    Tensor forward(const Tensor& x);               // caches x (and xA^T)
    Tensor backward(const Tensor& grad_out);       // accumulates param grads
    ParamRefs params();

private:
    Tensor cached_x_;
    Tensor cached_xa_;
};

struct LayerNorm {
    Param gamma;
    Param beta;
    double eps = 1e-5;

    LayerNorm() = default;
    LayerNorm(const std::string& name, int dim);

    Tensor forward(const Tensor& x);  // x (rows, dim)
    Tensor backward(const Tensor& grad_out);
    ParamRefs params();

private:
    Tensor cached_norm_;     // normalized activations
    Tensor cached_inv_std_;  // (rows)
};

// Elementwise activations; backward needs the forward input.
Tensor gelu(const Tensor& x);
Tensor gelu_backward(const Tensor& x, const Tensor& grad_out);
Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& grad_out);

// Row softmax and mean cross-entropy on integer labels.
Tensor softmax_rows(const Tensor& logits);
double cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     Tensor* grad_logits);

struct SgdOptimizer {
    double lr = 1e-2;
    void step(const ParamRefs& params) const;  // skips frozen params
};

struct AdamOptimizer {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void step(const ParamRefs& params);

private:
    struct State {
        Tensor m, v;
    };
    std::vector<State> state_;
    int64_t t_ = 0;
};

// Bitwise checksum over the value bytes of the given params (frozen-base
// invariance checks).
std::string params_checksum(const ParamRefs& params);
int64_t param_count(const ParamRefs& params);

}  // namespace bridgeseg::nn
