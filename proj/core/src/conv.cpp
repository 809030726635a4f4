#include "bridgeseg/conv.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bridgeseg/parallel.hpp"

namespace bridgeseg::nn {

Conv2d::Conv2d(const std::string& name, int in_ch, int out_ch, int k, Rng& rng)
    : kernel(k), pad(k / 2) {
    const double stddev = std::sqrt(2.0 / (in_ch * k * k));
    weight = Param(name + ".weight", Tensor::randn({out_ch, in_ch, k, k}, rng, stddev));
    bias = Param(name + ".bias", Tensor::zeros({out_ch}));
}

// cols is (n_pixels, patch) row-major: each output pixel's receptive field is
// one contiguous row, so the fill is sequential writes.
static void im2col_rows(const Tensor& x, int k, int pad, int row0, int row1, Tensor& cols) {
    const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    for (int oy = row0; oy < row1; ++oy) {
        for (int ox = 0; ox < w; ++ox) {
            double* dst = cols.ptr() +
                          (static_cast<size_t>(oy - row0) * w + ox) * (c_in * k * k);
            for (int c = 0; c < c_in; ++c) {
                const double* plane = x.ptr() + static_cast<size_t>(c) * h * w;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy + ky - pad;
                    if (iy < 0 || iy >= h) {
                        for (int kx = 0; kx < k; ++kx) *dst++ = 0.0;
                        continue;
                    }
                    const double* row = plane + static_cast<size_t>(iy) * w;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox + kx - pad;
                        *dst++ = (ix >= 0 && ix < w) ? row[ix] : 0.0;
                    }
                }
            }
        }
    }
}

static void im2col(const Tensor& x, int k, int pad, Tensor& cols) {
    const int h = x.dim(1), w = x.dim(2);
    cols = Tensor({h * w, x.dim(0) * k * k});
    parallel_blocks(h, 16, [&](int64_t y0, int64_t y1) {
        const int patch = x.dim(0) * k * k;
        Tensor view({static_cast<int>(y1 - y0) * w, patch});
        im2col_rows(x, k, pad, static_cast<int>(y0), static_cast<int>(y1), view);
        std::copy(view.data.begin(), view.data.end(),
                  cols.data.begin() + static_cast<size_t>(y0) * w * patch);
    });
}

// Gather form of col2im: each input pixel sums the column entries that
// referenced it, so parallel rows write disjoint outputs.
static Tensor col2im(const Tensor& dcols, int c_in, int h, int w, int k, int pad) {
    Tensor dx({c_in, h, w});
    const int patch = c_in * k * k;
    parallel_blocks(h, 16, [&](int64_t y0, int64_t y1) {
        for (int64_t iy = y0; iy < y1; ++iy) {
            for (int ix = 0; ix < w; ++ix) {
                for (int c = 0; c < c_in; ++c) {
                    double acc = 0.0;
                    for (int ky = 0; ky < k; ++ky) {
                        const int oy = static_cast<int>(iy) - ky + pad;
                        if (oy < 0 || oy >= h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ox = ix - kx + pad;
                            if (ox < 0 || ox >= w) continue;
                            acc += dcols.ptr()[(static_cast<size_t>(oy) * w + ox) * patch +
                                               (static_cast<size_t>(c) * k + ky) * k + kx];
                        }
                    }
                    dx.at3(c, static_cast<int>(iy), ix) = acc;
                }
            }
        }
    });
    return dx;
}

Tensor Conv2d::forward(const Tensor& x, bool cache_for_backward) {
    if (x.rank() != 3) throw std::invalid_argument("Conv2d expects (C,H,W)");
    const int c_in = weight.value.dim(1);
    if (x.dim(0) != c_in) throw std::invalid_argument("Conv2d: channel mismatch");
    const int c_out = weight.value.dim(0);
    const int h = x.dim(1), w = x.dim(2);
    const int patch = c_in * kernel * kernel;

    Tensor y({c_out, h, w});
    if (cache_for_backward) {
        cached_x_ = x;
        im2col(x, kernel, pad, cached_cols_);
        // y (c_out, HW) = W (c_out, patch) * cols^T (patch, HW)
        gemm(false, true, c_out, h * w, patch, 1.0, weight.value.ptr(), patch,
             cached_cols_.ptr(), patch, 0.0, y.ptr(), h * w);
    } else {
        // Blocked over output rows; only one small column buffer lives at a
        // time and nothing is written to the layer.
        constexpr int kRowBlock = 16;
        const int64_t blocks = (h + kRowBlock - 1) / kRowBlock;
        parallel_for(blocks, [&](int64_t b) {
            const int row0 = static_cast<int>(b) * kRowBlock;
            const int row1 = std::min(h, row0 + kRowBlock);
            const int block_w = (row1 - row0) * w;
            Tensor cols({block_w, patch});
            im2col_rows(x, kernel, pad, row0, row1, cols);
            Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
                       Eigen::OuterStride<>>
                out(y.ptr() + static_cast<size_t>(row0) * w, c_out, block_w,
                    Eigen::OuterStride<>(static_cast<Eigen::Index>(h) * w));
            Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                           Eigen::RowMajor>>
                wm(weight.value.ptr(), c_out, patch);
            Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                           Eigen::RowMajor>>
                cm(cols.ptr(), block_w, patch);
            out.noalias() = wm * cm.transpose();
        });
    }
    for (int o = 0; o < c_out; ++o) {
        double* plane = y.ptr() + static_cast<size_t>(o) * h * w;
        const double b = bias.value[o];
        for (int i = 0; i < h * w; ++i) plane[i] += b;
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
    const int c_out = weight.value.dim(0);
    const int c_in = weight.value.dim(1);
    const int h = cached_x_.dim(1), w = cached_x_.dim(2);
    const int patch = c_in * kernel * kernel;
    if (grad_out.dim(0) != c_out || grad_out.dim(1) != h || grad_out.dim(2) != w) {
        throw std::invalid_argument("Conv2d: grad shape mismatch");
    }

    if (!weight.frozen) {
        // dW (c_out, patch) = dY (c_out, HW) * cols (HW, patch)
        gemm(false, false, c_out, patch, h * w, 1.0, grad_out.ptr(), h * w,
             cached_cols_.ptr(), patch, 1.0, weight.grad.ptr(), patch);
        for (int o = 0; o < c_out; ++o) {
            const double* plane = grad_out.ptr() + static_cast<size_t>(o) * h * w;
            double acc = 0.0;
            for (int i = 0; i < h * w; ++i) acc += plane[i];
            bias.grad[o] += acc;
        }
    }

    // dcols (HW, patch) = dY^T (HW, c_out) * W (c_out, patch)
    Tensor dcols({h * w, patch});
    gemm(true, false, h * w, patch, c_out, 1.0, grad_out.ptr(), h * w, weight.value.ptr(), patch,
         0.0, dcols.ptr(), patch);
    return col2im(dcols, c_in, h, w, kernel, pad);
}

ParamRefs Conv2d::params() { return {&weight, &bias}; }

Tensor avgpool2(const Tensor& x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 != 0 || w % 2 != 0) throw std::invalid_argument("avgpool2: dims must be even");
    Tensor y({c, h / 2, w / 2});
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < h / 2; ++oy) {
            for (int ox = 0; ox < w / 2; ++ox) {
                y.at3(ch, oy, ox) = 0.25 * (x.at3(ch, 2 * oy, 2 * ox) + x.at3(ch, 2 * oy, 2 * ox + 1) +
                                            x.at3(ch, 2 * oy + 1, 2 * ox) +
                                            x.at3(ch, 2 * oy + 1, 2 * ox + 1));
            }
        }
    }
    return y;
}

Tensor avgpool2_backward(const Tensor& grad_out) {
    const int c = grad_out.dim(0), h2 = grad_out.dim(1), w2 = grad_out.dim(2);
    Tensor dx({c, h2 * 2, w2 * 2});
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < h2; ++oy) {
            for (int ox = 0; ox < w2; ++ox) {
                const double g = 0.25 * grad_out.at3(ch, oy, ox);
                dx.at3(ch, 2 * oy, 2 * ox) = g;
                dx.at3(ch, 2 * oy, 2 * ox + 1) = g;
                dx.at3(ch, 2 * oy + 1, 2 * ox) = g;
                dx.at3(ch, 2 * oy + 1, 2 * ox + 1) = g;
            }
        }
    }
    return dx;
}

Tensor upsample2(const Tensor& x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y({c, h * 2, w * 2});
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < 2 * h; ++oy) {
            for (int ox = 0; ox < 2 * w; ++ox) {
                y.at3(ch, oy, ox) = x.at3(ch, oy / 2, ox / 2);
            }
        }
    }
    return y;
}

Tensor upsample2_backward(const Tensor& grad_out) {
    const int c = grad_out.dim(0), h2 = grad_out.dim(1), w2 = grad_out.dim(2);
    if (h2 % 2 != 0 || w2 % 2 != 0) throw std::invalid_argument("upsample2_backward: dims must be even");
    Tensor dx({c, h2 / 2, w2 / 2});
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < h2; ++oy) {
            for (int ox = 0; ox < w2; ++ox) {
                dx.at3(ch, oy / 2, ox / 2) += grad_out.at3(ch, oy, ox);
            }
        }
    }
    return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
        throw std::invalid_argument("concat_channels: spatial mismatch");
    }
    Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
    return out;
}

void split_channels(const Tensor& grad, int ca, Tensor& grad_a, Tensor& grad_b) {
    const int h = grad.dim(1), w = grad.dim(2);
    const int cb = grad.dim(0) - ca;
    grad_a = Tensor({ca, h, w});
    grad_b = Tensor({cb, h, w});
    std::copy(grad.data.begin(), grad.data.begin() + grad_a.data.size(), grad_a.data.begin());
    std::copy(grad.data.begin() + grad_a.data.size(), grad.data.end(), grad_b.data.begin());
}

Tensor sinusoidal_embedding(double u, int dim) {
    if (dim % 2 != 0) throw std::invalid_argument("embedding dim must be even");
    const int half = dim / 2;
    Tensor e({dim});
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(std::log(1000.0) * static_cast<double>(i) /
                                     static_cast<double>(half - 1));
        e[i] = std::sin(u * freq);
        e[half + i] = std::cos(u * freq);
    }
    return e;
}

}  // namespace bridgeseg::nn
