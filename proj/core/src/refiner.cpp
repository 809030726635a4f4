#include "bridgeseg/refiner.hpp"

#include <cmath>
#include <stdexcept>

#include "bridgeseg/errors.hpp"
#include "bridgeseg/tensor_io.hpp"

namespace bridgeseg {

BridgeSchedule build_schedule(int steps, double scale) {
    if (steps < 2) throw std::invalid_argument("schedule needs at least 2 steps");
    if (scale <= 0.0) throw std::invalid_argument("schedule scale must be positive");
    BridgeSchedule s;
    s.steps = steps;
    s.scale = scale;
    s.m.resize(static_cast<size_t>(steps) + 1);
    s.delta.resize(static_cast<size_t>(steps) + 1);
    s.delta_cond.assign(static_cast<size_t>(steps) + 1, 0.0);
    s.delta_tilde.assign(static_cast<size_t>(steps) + 1, 0.0);
    for (int t = 0; t <= steps; ++t) {
        const double m = static_cast<double>(t) / static_cast<double>(steps);
        s.m[static_cast<size_t>(t)] = m;
        s.delta[static_cast<size_t>(t)] = 2.0 * scale * (m - m * m);
    }
    for (int t = 1; t <= steps; ++t) {
        const double r = (1.0 - s.m[static_cast<size_t>(t)]) / (1.0 - s.m[static_cast<size_t>(t) - 1]);
        s.delta_cond[static_cast<size_t>(t)] =
            s.delta[static_cast<size_t>(t)] - s.delta[static_cast<size_t>(t) - 1] * r * r;
    }
    for (int t = 1; t < steps; ++t) {
        // delta[t] > 0 for interior t; delta[0] = 0 makes delta_tilde[1] = 0.
        s.delta_tilde[static_cast<size_t>(t)] = s.delta_cond[static_cast<size_t>(t)] *
                                                s.delta[static_cast<size_t>(t) - 1] /
                                                s.delta[static_cast<size_t>(t)];
    }
    // t = T by limit: x_T = y carries no information about x_{T-1}, so the
    // posterior equals the marginal at T-1.
    s.delta_tilde[static_cast<size_t>(steps)] = s.delta[static_cast<size_t>(steps) - 1];
    return s;
}

static void check_t(int t, const BridgeSchedule& sched) {
    if (t < 0 || t > sched.steps) throw std::invalid_argument("t out of range");
}

double bridge_forward_scalar(double x0, double y, int t, const BridgeSchedule& sched, double eps) {
    check_t(t, sched);
    const double m = sched.m[static_cast<size_t>(t)];
    return (1.0 - m) * x0 + m * y + std::sqrt(sched.delta[static_cast<size_t>(t)]) * eps;
}

GaussianMoments posterior_moments(double x_t, double x0, double y, int t, int t_prev,
                                  const BridgeSchedule& sched) {
    check_t(t, sched);
    if (t_prev < 0 || t_prev >= t) throw std::invalid_argument("t_prev must be in [0, t)");
    const double m_t = sched.m[static_cast<size_t>(t)];
    const double m_p = sched.m[static_cast<size_t>(t_prev)];
    const double d_t = sched.delta[static_cast<size_t>(t)];
    const double d_p = sched.delta[static_cast<size_t>(t_prev)];

    if (d_p == 0.0) {
        // x_{t_prev} is pinned (t_prev = 0).
        return {(1.0 - m_p) * x0 + m_p * y, 0.0};
    }
    const double a = (1.0 - m_t) / (1.0 - m_p);
    const double b = m_t - a * m_p;
    const double d_gap = d_t - a * a * d_p;
    if (d_gap <= 0.0) {
        if (a == 0.0) {
            // t = T: x_T = y regardless of x_{t_prev}; posterior = marginal.
            return {(1.0 - m_p) * x0 + m_p * y, d_p};
        }
        // Deterministic transition: invert it.
        return {(x_t - b * y) / a, 0.0};
    }
    const double var = d_p * d_gap / d_t;
    const double prior_mean = (1.0 - m_p) * x0 + m_p * y;
    const double mean = var * (prior_mean / d_p + a * (x_t - b * y) / d_gap);
    return {mean, var};
}

std::pair<ProbMask, Tensor> forward_sample(const ProbMask& x0, const ProbMask& y, int t,
                                           const BridgeSchedule& sched, Rng& rng) {
    if (x0.kind != MaskKind::OneHot) throw std::invalid_argument("x0 must be a one-hot mask");
    if (y.kind != MaskKind::Coarse) throw std::invalid_argument("y must be a coarse mask");
    if (!x0.values.same_shape(y.values)) throw std::invalid_argument("x0 / y shape mismatch");
    check_t(t, sched);

    Tensor eps = Tensor::randn(x0.values.shape, rng);
    const double m = sched.m[static_cast<size_t>(t)];
    const double sd = std::sqrt(sched.delta[static_cast<size_t>(t)]);
    ProbMask xt;
    xt.kind = MaskKind::DiffusionState;
    xt.values = Tensor(x0.values.shape);
    for (int64_t i = 0; i < xt.values.numel(); ++i) {
        xt.values[i] = (1.0 - m) * x0.values[i] + m * y.values[i] + sd * eps[i];
    }
    return {std::move(xt), std::move(eps)};
}

Tensor noise_target(const Tensor& x0, const Tensor& y, int t, const Tensor& eps,
                    const BridgeSchedule& sched) {
    if (!x0.same_shape(y) || !x0.same_shape(eps)) {
        throw std::invalid_argument("noise_target: shape mismatch");
    }
    check_t(t, sched);
    const double m = sched.m[static_cast<size_t>(t)];
    const double sd = std::sqrt(sched.delta[static_cast<size_t>(t)]);
    Tensor g(x0.shape);
    for (int64_t i = 0; i < g.numel(); ++i) {
        g[i] = m * (y[i] - x0[i]) + sd * eps[i];
    }
    return g;
}

double transition_loss(const Tensor& prediction, const Tensor& target, int t,
                       const BridgeSchedule& sched) {
    if (!prediction.same_shape(target)) throw std::invalid_argument("transition_loss: shape mismatch");
    check_t(t, sched);
    if (!prediction.all_finite() || !target.all_finite()) {
        throw NumericalError("transition_loss: non-finite input");
    }
    const double weight = 1.0;  // c_eps_t, unit weighting
    double acc = 0.0;
    for (int64_t i = 0; i < prediction.numel(); ++i) {
        const double d = prediction[i] - target[i];
        acc += d * d;
    }
    return weight * acc / static_cast<double>(prediction.numel());
}

Tensor reconstruct_x0(const Tensor& x_t, const Tensor& y, const Tensor& eps_pred, int t,
                      const BridgeSchedule& sched) {
    if (!x_t.same_shape(y) || !x_t.same_shape(eps_pred)) {
        throw std::invalid_argument("reconstruct_x0: shape mismatch");
    }
    check_t(t, sched);
    if (t == sched.steps) throw std::invalid_argument("reconstruct_x0 is singular at t = T");
    const double m = sched.m[static_cast<size_t>(t)];
    const double sd = std::sqrt(sched.delta[static_cast<size_t>(t)]);
    const double inv = 1.0 / (1.0 - m);
    Tensor out(x_t.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = (x_t[i] - m * y[i] - sd * eps_pred[i]) * inv;
    }
    return out;
}

// Softmax cross-entropy per pixel; grad (if requested) is w.r.t. x0_hat.
static double segmentation_loss_impl(const Tensor& x0_hat, const Tensor& x0_onehot,
                                     Tensor* grad) {
    if (!x0_hat.same_shape(x0_onehot)) throw std::invalid_argument("segmentation_loss: shape mismatch");
    if (x0_hat.rank() != 3) throw std::invalid_argument("segmentation_loss expects (C,h,w)");
    if (!x0_hat.all_finite()) throw NumericalError("segmentation_loss: non-finite reconstruction");
    const int c = x0_hat.dim(0), h = x0_hat.dim(1), w = x0_hat.dim(2);
    const int64_t hw = static_cast<int64_t>(h) * w;
    if (grad) *grad = Tensor(x0_hat.shape);

    double loss = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double mx = x0_hat.at3(0, y, x);
            for (int ch = 1; ch < c; ++ch) mx = std::max(mx, x0_hat.at3(ch, y, x));
            double sum = 0.0;
            for (int ch = 0; ch < c; ++ch) sum += std::exp(x0_hat.at3(ch, y, x) - mx);
            const double lse = mx + std::log(sum);
            double dot = 0.0;
            for (int ch = 0; ch < c; ++ch) dot += x0_onehot.at3(ch, y, x) * x0_hat.at3(ch, y, x);
            loss += lse - dot;
            if (grad) {
                for (int ch = 0; ch < c; ++ch) {
                    const double p = std::exp(x0_hat.at3(ch, y, x) - lse);
                    grad->at3(ch, y, x) =
                        (p - x0_onehot.at3(ch, y, x)) / static_cast<double>(hw);
                }
            }
        }
    }
    return loss / static_cast<double>(hw);
}

double segmentation_loss(const Tensor& x0_hat, const Tensor& x0_onehot) {
    return segmentation_loss_impl(x0_hat, x0_onehot, nullptr);
}

Tensor ConditionEncoder::forward(const Tensor& y_cat_o, bool train) {
    if (train) {
        pre1_ = c1.forward(y_cat_o);
        Tensor s1 = nn::silu(pre1_);
        pre2_ = c2.forward(s1);
        Tensor s2 = nn::silu(pre2_);
        return c3.forward(s2);
    }
    Tensor s1 = nn::silu(c1.forward(y_cat_o, false));
    Tensor s2 = nn::silu(c2.forward(s1, false));
    return c3.forward(s2, false);
}

Tensor ConditionEncoder::backward(const Tensor& grad) {
    Tensor d = c3.backward(grad);
    d = nn::silu_backward(pre2_, d);
    d = c2.backward(d);
    d = nn::silu_backward(pre1_, d);
    return c1.backward(d);
}

nn::ParamRefs ConditionEncoder::params() {
    nn::ParamRefs out;
    for (auto* conv : {&c1, &c2, &c3}) {
        for (auto* p : conv->params()) out.push_back(p);
    }
    return out;
}

namespace {

void add_channel_bias(Tensor& x, const Tensor& bias_row) {
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    for (int ch = 0; ch < c; ++ch) {
        double* plane = x.ptr() + static_cast<size_t>(ch) * hw;
        const double b = bias_row[ch];
        for (int64_t i = 0; i < hw; ++i) plane[i] += b;
    }
}

Tensor channel_sums(const Tensor& g) {
    const int c = g.dim(0);
    const int64_t hw = static_cast<int64_t>(g.dim(1)) * g.dim(2);
    Tensor out({1, c});
    for (int ch = 0; ch < c; ++ch) {
        const double* plane = g.ptr() + static_cast<size_t>(ch) * hw;
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += plane[i];
        out[ch] = acc;
    }
    return out;
}

}  // namespace

Tensor Denoiser::forward(const Tensor& x_cat_cond, double u, bool train) {
    Tensor temb_vec = nn::sinusoidal_embedding(u, temb_dim);
    Tensor temb({1, temb_dim});
    std::copy(temb_vec.data.begin(), temb_vec.data.end(), temb.data.begin());

    if (!train) {
        // Stateless path: per-channel time biases computed into locals.
        Tensor t0({1, temb0.weight.value.dim(0)});
        nn::gemm(false, true, 1, t0.dim(1), temb_dim, 1.0, temb.ptr(), temb_dim,
                 temb0.weight.value.ptr(), temb_dim, 0.0, t0.ptr(), t0.dim(1));
        for (int i = 0; i < t0.dim(1); ++i) t0[i] += temb0.bias.value[i];
        Tensor t1({1, temb1.weight.value.dim(0)});
        nn::gemm(false, true, 1, t1.dim(1), temb_dim, 1.0, temb.ptr(), temb_dim,
                 temb1.weight.value.ptr(), temb_dim, 0.0, t1.ptr(), t1.dim(1));
        for (int i = 0; i < t1.dim(1); ++i) t1[i] += temb1.bias.value[i];
        Tensor t2({1, temb2.weight.value.dim(0)});
        nn::gemm(false, true, 1, t2.dim(1), temb_dim, 1.0, temb.ptr(), temb_dim,
                 temb2.weight.value.ptr(), temb_dim, 0.0, t2.ptr(), t2.dim(1));
        for (int i = 0; i < t2.dim(1); ++i) t2[i] += temb2.bias.value[i];

        Tensor a1 = conv_in.forward(x_cat_cond, false);
        add_channel_bias(a1, t0);
        Tensor s1 = nn::silu(a1);
        Tensor skip = nn::silu(conv0b.forward(s1, false));
        Tensor a3 = conv_down.forward(nn::avgpool2(skip), false);
        add_channel_bias(a3, t1);
        Tensor s4 = nn::silu(conv1b.forward(nn::silu(a3), false));
        Tensor a5 = conv_up.forward(nn::upsample2(s4), false);
        Tensor a6 = conv_dec.forward(nn::concat_channels(a5, skip), false);
        add_channel_bias(a6, t2);
        return conv_out.forward(nn::silu(a6), false);
    }

    pre1_ = conv_in.forward(x_cat_cond);
    add_channel_bias(pre1_, temb0.forward(temb));
    Tensor s1 = nn::silu(pre1_);

    pre2_ = conv0b.forward(s1);
    skip_ = nn::silu(pre2_);

    Tensor pooled = nn::avgpool2(skip_);
    pre3_ = conv_down.forward(pooled);
    add_channel_bias(pre3_, temb1.forward(temb));
    Tensor s3 = nn::silu(pre3_);

    pre4_ = conv1b.forward(s3);
    Tensor s4 = nn::silu(pre4_);

    Tensor up = nn::upsample2(s4);
    Tensor a5 = conv_up.forward(up);

    Tensor cat = nn::concat_channels(a5, skip_);
    pre6_ = conv_dec.forward(cat);
    add_channel_bias(pre6_, temb2.forward(temb));
    Tensor s6 = nn::silu(pre6_);

    return conv_out.forward(s6);
}

Tensor Denoiser::backward(const Tensor& grad) {
    Tensor d6 = conv_out.backward(grad);
    d6 = nn::silu_backward(pre6_, d6);
    temb2.backward(channel_sums(d6));

    Tensor dcat = conv_dec.backward(d6);
    Tensor d_a5, d_skip_cat;
    nn::split_channels(dcat, conv_up.weight.value.dim(0), d_a5, d_skip_cat);

    Tensor dup = conv_up.backward(d_a5);
    Tensor ds4 = nn::upsample2_backward(dup);
    Tensor d4 = nn::silu_backward(pre4_, ds4);
    Tensor d3 = conv1b.backward(d4);
    d3 = nn::silu_backward(pre3_, d3);
    temb1.backward(channel_sums(d3));

    Tensor dpooled = conv_down.backward(d3);
    Tensor d_skip_pool = nn::avgpool2_backward(dpooled);
    Tensor d_skip = d_skip_pool + d_skip_cat;

    Tensor d2 = nn::silu_backward(pre2_, d_skip);
    Tensor ds1 = conv0b.backward(d2);
    Tensor d1 = nn::silu_backward(pre1_, ds1);
    temb0.backward(channel_sums(d1));
    return conv_in.backward(d1);
}

nn::ParamRefs Denoiser::params() {
    nn::ParamRefs out;
    for (auto* conv : {&conv_in, &conv0b, &conv_down, &conv1b, &conv_up, &conv_dec, &conv_out}) {
        for (auto* p : conv->params()) out.push_back(p);
    }
    for (auto* lin : {&temb0, &temb1, &temb2}) {
        for (auto* p : lin->params()) out.push_back(p);
    }
    return out;
}

nn::ParamRefs RefinerState::params() {
    nn::ParamRefs out = encoder.params();
    for (auto* p : denoiser.params()) out.push_back(p);
    return out;
}

RefinerState init_refiner(const RefinerConfig& cfg, uint64_t seed) {
    if (cfg.lambda < 0.0) throw std::invalid_argument("lambda must be non-negative");
    if (cfg.o_downsample != 1 && cfg.o_downsample != 2 && cfg.o_downsample != 4) {
        throw std::invalid_argument("o_downsample must be 1, 2 or 4");
    }
    RefinerState st;
    st.cfg = cfg;
    st.seed = seed;
    st.schedule = build_schedule(cfg.steps, cfg.scale);
    st.opt.lr = cfg.lr;

    Rng rng = Rng(seed).fork(0x4ef1ae5);
    const int f = cfg.cond_features;
    const int bw = cfg.base_width;
    st.encoder.c1 = nn::Conv2d("cond.c1", kNumClasses + 3, f, 3, rng);
    st.encoder.c2 = nn::Conv2d("cond.c2", f, f, 3, rng);
    st.encoder.c3 = nn::Conv2d("cond.c3", f, f, 3, rng);

    st.denoiser.temb_dim = cfg.temb_dim;
    st.denoiser.conv_in = nn::Conv2d("den.conv_in", kNumClasses + f, bw, 3, rng);
    st.denoiser.conv0b = nn::Conv2d("den.conv0b", bw, bw, 3, rng);
    st.denoiser.conv_down = nn::Conv2d("den.conv_down", bw, 2 * bw, 3, rng);
    st.denoiser.conv1b = nn::Conv2d("den.conv1b", 2 * bw, 2 * bw, 3, rng);
    st.denoiser.conv_up = nn::Conv2d("den.conv_up", 2 * bw, bw, 3, rng);
    st.denoiser.conv_dec = nn::Conv2d("den.conv_dec", 2 * bw, bw, 3, rng);
    st.denoiser.conv_out = nn::Conv2d("den.conv_out", bw, kNumClasses, 1, rng);
    st.denoiser.temb0 = nn::AdaptedLinear("den.temb0", cfg.temb_dim, bw, rng);
    st.denoiser.temb1 = nn::AdaptedLinear("den.temb1", cfg.temb_dim, 2 * bw, rng);
    st.denoiser.temb2 = nn::AdaptedLinear("den.temb2", cfg.temb_dim, bw, rng);
    return st;
}

namespace {

Tensor downsample_by(Tensor x, int factor) {
    for (int s = factor; s > 1; s /= 2) x = nn::avgpool2(x);
    return x;
}
Tensor upsample_by(Tensor x, int factor) {
    for (int s = factor; s > 1; s /= 2) x = nn::upsample2(x);
    return x;
}
Tensor upsample_by_backward(Tensor g, int factor) {
    for (int s = factor; s > 1; s /= 2) g = nn::upsample2_backward(g);
    return g;
}

void check_region_inputs(const Tensor& x0, const Tensor& y, const Tensor& o_rgb) {
    if (!x0.same_shape(y)) throw std::invalid_argument("x0 / y shape mismatch");
    if (x0.rank() != 3 || x0.dim(0) != kNumClasses) {
        throw std::invalid_argument("masks must be (C,h,w)");
    }
    if (o_rgb.rank() != 3 || o_rgb.dim(0) != 3 || o_rgb.dim(1) != x0.dim(1) ||
        o_rgb.dim(2) != x0.dim(2)) {
        throw std::invalid_argument("tissue region must be (3,h,w) at mask resolution");
    }
}

struct StepTensors {
    Tensor x_t, target, pred, x0_hat;
};

RefinerLosses forward_pass(RefinerState& state, const Tensor& x0, const Tensor& y,
                           const Tensor& o_rgb, int t, const Tensor& eps, bool with_grads,
                           StepTensors* out, Tensor* seg_grad) {
    check_region_inputs(x0, y, o_rgb);
    if (!eps.same_shape(x0)) throw std::invalid_argument("eps shape mismatch");
    const auto& sched = state.schedule;
    if (t < 1 || t >= sched.steps) throw std::invalid_argument("training t must be in [1, T)");

    const double m = sched.m[static_cast<size_t>(t)];
    const double sd = std::sqrt(sched.delta[static_cast<size_t>(t)]);

    StepTensors st;
    st.x_t = Tensor(x0.shape);
    st.target = Tensor(x0.shape);
    for (int64_t i = 0; i < x0.numel(); ++i) {
        const double drift = m * (y[i] - x0[i]) + sd * eps[i];
        st.target[i] = drift;
        st.x_t[i] = x0[i] + drift;
    }

    const int f = state.cfg.o_downsample;
    Tensor cond = state.encoder.forward(downsample_by(nn::concat_channels(y, o_rgb), f));
    if (f > 1) cond = upsample_by(cond, f);

    st.pred = state.denoiser.forward(nn::concat_channels(st.x_t, cond),
                                     static_cast<double>(t) / sched.steps);

    RefinerLosses losses;
    losses.l_trans = transition_loss(st.pred, st.target, t, sched);
    st.x0_hat = st.x_t - st.pred;
    losses.l_seg = segmentation_loss_impl(st.x0_hat, x0, seg_grad);
    losses.l_ref = losses.l_trans + state.cfg.lambda * losses.l_seg;
    if (!std::isfinite(losses.l_ref)) {
        throw NumericalError("refiner loss non-finite at t=" + std::to_string(t));
    }
    (void)with_grads;
    if (out) *out = std::move(st);
    return losses;
}

RefinerLosses forward_backward(RefinerState& state, const Tensor& x0, const Tensor& y,
                               const Tensor& o_rgb, int t, const Tensor& eps) {
    for (auto* p : state.params()) p->zero_grad();
    StepTensors st;
    Tensor seg_grad;
    RefinerLosses losses = forward_pass(state, x0, y, o_rgb, t, eps, true, &st, &seg_grad);

    const double inv_n = 1.0 / static_cast<double>(st.pred.numel());
    Tensor dpred(st.pred.shape);
    for (int64_t i = 0; i < dpred.numel(); ++i) {
        // d l_trans / d pred + lambda * d l_seg / d pred (x0_hat = x_t - pred)
        dpred[i] = 2.0 * inv_n * (st.pred[i] - st.target[i]) - state.cfg.lambda * seg_grad[i];
    }

    Tensor dz = state.denoiser.backward(dpred);
    Tensor d_xt, d_cond;
    nn::split_channels(dz, kNumClasses, d_xt, d_cond);
    const int f = state.cfg.o_downsample;
    if (f > 1) d_cond = upsample_by_backward(d_cond, f);
    state.encoder.backward(d_cond);
    return losses;
}

}  // namespace

Tensor condition_features(RefinerState& state, const Tensor& y, const Tensor& o_rgb) {
    const int f = state.cfg.o_downsample;
    Tensor cond = state.encoder.forward(downsample_by(nn::concat_channels(y, o_rgb), f), false);
    if (f > 1) cond = upsample_by(cond, f);
    return cond;
}

RefinerLosses refiner_train_step(RefinerState& state, const Tensor& x0, const Tensor& y,
                                 const Tensor& o_rgb, Rng& rng) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(state.cfg.steps - 1)));
    Tensor eps = Tensor::randn(x0.shape, rng);
    RefinerLosses losses = forward_backward(state, x0, y, o_rgb, t, eps);
    state.opt.step(state.params());
    return losses;
}

RefinerLosses refiner_loss(RefinerState& state, const Tensor& x0, const Tensor& y,
                           const Tensor& o_rgb, int t, const Tensor& eps) {
    return forward_pass(state, x0, y, o_rgb, t, eps, false, nullptr, nullptr);
}

RefinerLosses refiner_grads(RefinerState& state, const Tensor& x0, const Tensor& y,
                            const Tensor& o_rgb, int t, const Tensor& eps) {
    return forward_backward(state, x0, y, o_rgb, t, eps);
}

std::vector<int> ddim_timesteps(int total_steps, int n_steps) {
    std::vector<int> ts;
    ts.reserve(static_cast<size_t>(n_steps) + 1);
    for (int i = 0; i <= n_steps; ++i) {
        const int t = static_cast<int>(std::llround(
            static_cast<double>(total_steps) *
            (1.0 - static_cast<double>(i) / static_cast<double>(n_steps))));
        if (ts.empty() || t < ts.back()) ts.push_back(t);
    }
    ts.front() = total_steps;
    if (ts.back() != 0) ts.push_back(0);
    return ts;
}

ProbMask sample_refined_with(const BridgeSchedule& sched, const DenoiseFn& denoise,
                             const ProbMask& y, int n_steps, SampleMode mode, Rng& rng) {
    if (y.kind != MaskKind::Coarse && y.kind != MaskKind::OneHot) {
        throw std::invalid_argument("sampler expects a coarse (or one-hot) starting mask");
    }
    if (n_steps < 1 || n_steps > sched.steps) throw std::invalid_argument("n_steps out of range");

    const std::vector<int> ts = ddim_timesteps(sched.steps, n_steps);
    Tensor x = y.values;  // x_T = y
    for (size_t i = 0; i + 1 < ts.size(); ++i) {
        const int t = ts[i];
        const int tp = ts[i + 1];
        Tensor g = denoise(x, t);
        Tensor x0_hat = x - g;

        const double m_t = sched.m[static_cast<size_t>(t)];
        const double m_p = sched.m[static_cast<size_t>(tp)];
        const double d_t = sched.delta[static_cast<size_t>(t)];
        const double d_p = sched.delta[static_cast<size_t>(tp)];

        Tensor x_next(x.shape);
        if (mode == SampleMode::Ddim) {
            const double carry = d_t > 0.0 ? std::sqrt(d_p / d_t) : 0.0;
            for (int64_t j = 0; j < x.numel(); ++j) {
                const double residual = x[j] - (1.0 - m_t) * x0_hat[j] - m_t * y.values[j];
                x_next[j] = (1.0 - m_p) * x0_hat[j] + m_p * y.values[j] + carry * residual;
            }
        } else {
            for (int64_t j = 0; j < x.numel(); ++j) {
                const GaussianMoments mom =
                    posterior_moments(x[j], x0_hat[j], y.values[j], t, tp, sched);
                x_next[j] = mom.mean + std::sqrt(mom.var) * rng.normal();
            }
        }
        x = std::move(x_next);
    }

    // x now holds the final reconstruction at t = 0.
    ProbMask out;
    out.kind = MaskKind::Refined;
    out.values = Tensor(x.shape);
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    for (int yy = 0; yy < h; ++yy) {
        for (int xx = 0; xx < w; ++xx) {
            double mx = x.at3(0, yy, xx);
            for (int ch = 1; ch < c; ++ch) mx = std::max(mx, x.at3(ch, yy, xx));
            double sum = 0.0;
            for (int ch = 0; ch < c; ++ch) sum += std::exp(x.at3(ch, yy, xx) - mx);
            for (int ch = 0; ch < c; ++ch) {
                out.values.at3(ch, yy, xx) = std::exp(x.at3(ch, yy, xx) - mx) / sum;
            }
        }
    }
    return out;
}

ProbMask sample_refined(RefinerState& state, const ProbMask& y, const Tensor& o_rgb, int n_steps,
                        SampleMode mode, Rng& rng) {
    check_region_inputs(y.values, y.values, o_rgb);
    Tensor cond = condition_features(state, y.values, o_rgb);
    DenoiseFn denoise = [&state, &cond](const Tensor& x_t, int t) {
        return state.denoiser.forward(nn::concat_channels(x_t, cond),
                                      static_cast<double>(t) / state.schedule.steps, false);
    };
    return sample_refined_with(state.schedule, denoise, y, n_steps, mode, rng);
}

void save_refiner(const RefinerState& state, const std::filesystem::path& path) {
    TensorFile tf;
    tf.meta = {{"kind", "refiner"},
               {"steps", state.cfg.steps},
               {"scale", state.cfg.scale},
               {"lambda", state.cfg.lambda},
               {"cond_features", state.cfg.cond_features},
               {"base_width", state.cfg.base_width},
               {"temb_dim", state.cfg.temb_dim},
               {"o_downsample", state.cfg.o_downsample},
               {"lr", state.cfg.lr},
               {"seed", state.seed}};
    auto& st = const_cast<RefinerState&>(state);
    for (auto* p : st.params()) tf.add(p->name, p->value, p->frozen, p->adapter_of);
    tf.save(path);
}

RefinerState load_refiner(const std::filesystem::path& path) {
    TensorFile tf = TensorFile::load(path);
    if (tf.meta.value("kind", "") != "refiner") {
        throw std::runtime_error("not a refiner checkpoint: " + path.string());
    }
    RefinerConfig cfg;
    cfg.steps = tf.meta.at("steps").get<int>();
    cfg.scale = tf.meta.at("scale").get<double>();
    cfg.lambda = tf.meta.at("lambda").get<double>();
    cfg.cond_features = tf.meta.at("cond_features").get<int>();
    cfg.base_width = tf.meta.at("base_width").get<int>();
    cfg.temb_dim = tf.meta.at("temb_dim").get<int>();
    cfg.o_downsample = tf.meta.at("o_downsample").get<int>();
    cfg.lr = tf.meta.at("lr").get<double>();
    RefinerState st = init_refiner(cfg, tf.meta.at("seed").get<uint64_t>());
    for (auto* p : st.params()) {
        const Tensor& t = tf.require(p->name);
        if (t.shape != p->value.shape) {
            throw std::runtime_error("checkpoint shape mismatch for " + p->name);
        }
        p->value = t;
    }
    return st;
}

}  // namespace bridgeseg
