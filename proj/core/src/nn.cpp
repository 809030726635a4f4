#include "bridgeseg/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bridgeseg/hash.hpp"
#include "bridgeseg/parallel.hpp"

namespace bridgeseg::nn {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                          0, Eigen::OuterStride<>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
               Eigen::OuterStride<>>;

constexpr int64_t kGemmGrain = 64;

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    ConstMatMap a_map(a, trans_a ? k : m, trans_a ? m : k, Eigen::OuterStride<>(lda));
    ConstMatMap b_map(b, trans_b ? n : k, trans_b ? k : n, Eigen::OuterStride<>(ldb));
    MatMap c_map(c, m, n, Eigen::OuterStride<>(ldc));

    auto assign = [&](auto&& dst, auto&& expr) {
        if (beta == 0.0) {
            dst.noalias() = alpha * expr;
        } else {
            dst.noalias() += alpha * expr;
        }
    };

    if (m >= n) {
        parallel_blocks(m, kGemmGrain, [&](int64_t r0, int64_t r1) {
            const auto rows = r1 - r0;
            auto dst = c_map.middleRows(r0, rows);
            if (!trans_a && !trans_b) {
                assign(dst, a_map.middleRows(r0, rows) * b_map);
            } else if (!trans_a && trans_b) {
                assign(dst, a_map.middleRows(r0, rows) * b_map.transpose());
            } else if (trans_a && !trans_b) {
                assign(dst, a_map.middleCols(r0, rows).transpose() * b_map);
            } else {
                assign(dst, a_map.middleCols(r0, rows).transpose() * b_map.transpose());
            }
        });
    } else {
        parallel_blocks(n, kGemmGrain, [&](int64_t c0, int64_t c1) {
            const auto cols = c1 - c0;
            auto dst = c_map.middleCols(c0, cols);
            if (!trans_a && !trans_b) {
                assign(dst, a_map * b_map.middleCols(c0, cols));
            } else if (!trans_a && trans_b) {
                assign(dst, a_map * b_map.middleRows(c0, cols).transpose());
            } else if (trans_a && !trans_b) {
                assign(dst, a_map.transpose() * b_map.middleCols(c0, cols));
            } else {
                assign(dst, a_map.transpose() * b_map.middleRows(c0, cols).transpose());
            }
        });
    }
}

AdaptedLinear::AdaptedLinear(const std::string& name, int in, int out, Rng& rng) {
    // He-style fan-in scaling keeps activations bounded at init.
    weight = Param(name + ".weight", Tensor::randn({out, in}, rng, std::sqrt(2.0 / in)));
    bias = Param(name + ".bias", Tensor::zeros({out}));
}

void AdaptedLinear::inject_adapter(int rank, Rng& rng) {
    const int out = weight.value.dim(0);
    const int in = weight.value.dim(1);
    if (rank <= 0 || rank > std::min(in, out)) {
        throw std::invalid_argument("adapter rank out of range");
    }
    if (has_adapter) throw std::logic_error("adapter already attached: " + weight.name);
    lora_b = Param(weight.name + ".lora_b", Tensor::zeros({out, rank}));
    lora_a = Param(weight.name + ".lora_a", Tensor::randn({rank, in}, rng, 0.02));
    lora_b.adapter_of = weight.name;
    lora_a.adapter_of = weight.name;
    has_adapter = true;
}

Tensor AdaptedLinear::forward(const Tensor& x) {
    const int rows = x.dim(0);
    const int in = weight.value.dim(1);
    const int out = weight.value.dim(0);
    if (x.dim(1) != in) throw std::invalid_argument("AdaptedLinear: input width mismatch");

    cached_x_ = x;
    Tensor y({rows, out});
    gemm(false, true, rows, out, in, 1.0, x.ptr(), in, weight.value.ptr(), in, 0.0, y.ptr(), out);
    for (int r = 0; r < rows; ++r) {
        double* yr = y.ptr() + static_cast<size_t>(r) * out;
        for (int o = 0; o < out; ++o) yr[o] += bias.value[o];
    }
    if (has_adapter) {
        const int rank = lora_a.value.dim(0);
        cached_xa_ = Tensor({rows, rank});
        gemm(false, true, rows, rank, in, 1.0, x.ptr(), in, lora_a.value.ptr(), in, 0.0,
             cached_xa_.ptr(), rank);
        gemm(false, true, rows, out, rank, 1.0, cached_xa_.ptr(), rank, lora_b.value.ptr(), rank,
             1.0, y.ptr(), out);
    }
    return y;
}

Tensor AdaptedLinear::backward(const Tensor& grad_out) {
    const int rows = cached_x_.dim(0);
    const int in = weight.value.dim(1);
    const int out = weight.value.dim(0);
    if (grad_out.dim(0) != rows || grad_out.dim(1) != out) {
        throw std::invalid_argument("AdaptedLinear: grad shape mismatch");
    }

    if (!weight.frozen) {
        gemm(true, false, out, in, rows, 1.0, grad_out.ptr(), out, cached_x_.ptr(), in, 1.0,
             weight.grad.ptr(), in);
        for (int r = 0; r < rows; ++r) {
            const double* g = grad_out.ptr() + static_cast<size_t>(r) * out;
            for (int o = 0; o < out; ++o) bias.grad[o] += g[o];
        }
    }

    Tensor grad_x({rows, in});
    gemm(false, false, rows, in, out, 1.0, grad_out.ptr(), out, weight.value.ptr(), in, 0.0,
         grad_x.ptr(), in);

    if (has_adapter) {
        const int rank = lora_a.value.dim(0);
        // dB += dY^T (x A^T); dA += (dY B)^T x; dX += (dY B) A
        gemm(true, false, out, rank, rows, 1.0, grad_out.ptr(), out, cached_xa_.ptr(), rank, 1.0,
             lora_b.grad.ptr(), rank);
        Tensor gy_b({rows, rank});
        gemm(false, false, rows, rank, out, 1.0, grad_out.ptr(), out, lora_b.value.ptr(), rank,
             0.0, gy_b.ptr(), rank);
        gemm(true, false, rank, in, rows, 1.0, gy_b.ptr(), rank, cached_x_.ptr(), in, 1.0,
             lora_a.grad.ptr(), in);
        gemm(false, false, rows, in, rank, 1.0, gy_b.ptr(), rank, lora_a.value.ptr(), in, 1.0,
             grad_x.ptr(), in);
    }
    return grad_x;
}

ParamRefs AdaptedLinear::params() {
    ParamRefs p{&weight, &bias};
    if (has_adapter) {
        p.push_back(&lora_b);
        p.push_back(&lora_a);
    }
    return p;
}

LayerNorm::LayerNorm(const std::string& name, int dim) {
    gamma = Param(name + ".gamma", Tensor::full({dim}, 1.0));
    beta = Param(name + ".beta", Tensor::zeros({dim}));
}

Tensor LayerNorm::forward(const Tensor& x) {
    const int rows = x.dim(0);
    const int dim = x.dim(1);
    cached_norm_ = Tensor({rows, dim});
    cached_inv_std_ = Tensor({rows});
    Tensor y({rows, dim});
    for (int r = 0; r < rows; ++r) {
        const double* xr = x.ptr() + static_cast<size_t>(r) * dim;
        double mean = 0.0;
        for (int i = 0; i < dim; ++i) mean += xr[i];
        mean /= dim;
        double var = 0.0;
        for (int i = 0; i < dim; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= dim;
        const double inv_std = 1.0 / std::sqrt(var + eps);
        cached_inv_std_[r] = inv_std;
        double* nr = cached_norm_.ptr() + static_cast<size_t>(r) * dim;
        double* yr = y.ptr() + static_cast<size_t>(r) * dim;
        for (int i = 0; i < dim; ++i) {
            nr[i] = (xr[i] - mean) * inv_std;
            yr[i] = nr[i] * gamma.value[i] + beta.value[i];
        }
    }
    return y;
}

Tensor LayerNorm::backward(const Tensor& grad_out) {
    const int rows = grad_out.dim(0);
    const int dim = grad_out.dim(1);
    Tensor grad_x({rows, dim});
    for (int r = 0; r < rows; ++r) {
        const double* g = grad_out.ptr() + static_cast<size_t>(r) * dim;
        const double* nr = cached_norm_.ptr() + static_cast<size_t>(r) * dim;
        const double inv_std = cached_inv_std_[r];
        double sum_gn = 0.0, sum_gnn = 0.0;
        for (int i = 0; i < dim; ++i) {
            const double gi = g[i] * gamma.value[i];
            sum_gn += gi;
            sum_gnn += gi * nr[i];
            if (!gamma.frozen) {
                gamma.grad[i] += g[i] * nr[i];
                beta.grad[i] += g[i];
            }
        }
        double* gx = grad_x.ptr() + static_cast<size_t>(r) * dim;
        for (int i = 0; i < dim; ++i) {
            const double gi = g[i] * gamma.value[i];
            gx[i] = inv_std * (gi - sum_gn / dim - nr[i] * sum_gnn / dim);
        }
    }
    return grad_x;
}

ParamRefs LayerNorm::params() { return {&gamma, &beta}; }

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.data) v = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    return y;
}

Tensor gelu_backward(const Tensor& x, const Tensor& grad_out) {
    Tensor g = grad_out;
    for (size_t i = 0; i < g.data.size(); ++i) {
        const double v = x.data[i];
        const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        g.data[i] *= phi + v * pdf;
    }
    return g;
}

Tensor silu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.data) v = v / (1.0 + std::exp(-v));
    return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& grad_out) {
    Tensor g = grad_out;
    for (size_t i = 0; i < g.data.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x.data[i]));
        g.data[i] *= s * (1.0 + x.data[i] * (1.0 - s));
    }
    return g;
}

Tensor softmax_rows(const Tensor& logits) {
    const int rows = logits.dim(0);
    const int cols = logits.dim(1);
    Tensor out({rows, cols});
    for (int r = 0; r < rows; ++r) {
        const double* lr = logits.ptr() + static_cast<size_t>(r) * cols;
        double* o = out.ptr() + static_cast<size_t>(r) * cols;
        double mx = lr[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, lr[c]);
        double sum = 0.0;
        for (int c = 0; c < cols; ++c) {
            o[c] = std::exp(lr[c] - mx);
            sum += o[c];
        }
        for (int c = 0; c < cols; ++c) o[c] /= sum;
    }
    return out;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tensor* grad_logits) {
    const int rows = logits.dim(0);
    const int cols = logits.dim(1);
    if (static_cast<int>(labels.size()) != rows) {
        throw std::invalid_argument("cross_entropy: label count mismatch");
    }
    Tensor probs = softmax_rows(logits);
    double loss = 0.0;
    for (int r = 0; r < rows; ++r) {
        const int y = labels[static_cast<size_t>(r)];
        if (y < 0 || y >= cols) throw std::invalid_argument("cross_entropy: label out of range");
        loss -= std::log(std::max(probs.at2(r, y), 1e-300));
    }
    loss /= rows;
    if (grad_logits) {
        *grad_logits = probs;
        for (int r = 0; r < rows; ++r) {
            grad_logits->at2(r, labels[static_cast<size_t>(r)]) -= 1.0;
        }
        for (auto& v : grad_logits->data) v /= rows;
    }
    return loss;
}

void SgdOptimizer::step(const ParamRefs& params) const {
    for (Param* p : params) {
        if (p->frozen) continue;
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            p->value.data[i] -= lr * p->grad.data[i];
        }
    }
}

void AdamOptimizer::step(const ParamRefs& params) {
    if (state_.empty()) {
        state_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state_[i].m = Tensor::zeros(params[i]->value.shape);
            state_[i].v = Tensor::zeros(params[i]->value.shape);
        }
    }
    if (state_.size() != params.size()) {
        throw std::logic_error("AdamOptimizer: parameter set changed between steps");
    }
    t_++;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        Param* p = params[i];
        if (p->frozen) continue;
        auto& st = state_[i];
        for (size_t j = 0; j < p->value.data.size(); ++j) {
            const double g = p->grad.data[j];
            st.m.data[j] = beta1 * st.m.data[j] + (1.0 - beta1) * g;
            st.v.data[j] = beta2 * st.v.data[j] + (1.0 - beta2) * g * g;
            const double mh = st.m.data[j] / bc1;
            const double vh = st.v.data[j] / bc2;
            p->value.data[j] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

std::string params_checksum(const ParamRefs& params) {
    std::string bytes;
    for (const Param* p : params) {
        bytes.append(reinterpret_cast<const char*>(p->value.data.data()),
                     p->value.data.size() * sizeof(double));
    }
    return sha256_hex(bytes);
}

int64_t param_count(const ParamRefs& params) {
    int64_t n = 0;
    for (const Param* p : params) n += p->value.numel();
    return n;
}

}  // namespace bridgeseg::nn
