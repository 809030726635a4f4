#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "bridgeseg/conv.hpp"
#include "bridgeseg/nn.hpp"
#include "bridgeseg/tiling.hpp"

namespace bridgeseg {

// Precomputed Brownian-bridge coefficients for T steps:
//   m_t     = t / T
//   delta_t = 2 s (m_t - m_t^2)          marginal variance, 0 at both ends
//   delta_cond[t] = delta_t - delta_{t-1} (1-m_t)^2 / (1-m_{t-1})^2
//   delta_tilde[t] = delta_cond[t] delta_{t-1} / delta_t   (posterior variance,
//                    boundary cases by limit: 0 at t=1, delta_{T-1} at t=T)
struct BridgeSchedule {
    int steps = 0;  // T
    double scale = 1.0;
    std::vector<double> m;            // size T+1
    std::vector<double> delta;        // size T+1
    std::vector<double> delta_cond;   // size T+1, [0] unused
    std::vector<double> delta_tilde;  // size T+1, [0] unused
};

BridgeSchedule build_schedule(int steps, double scale);

// x_t = (1 - m_t) x0 + m_t y + sqrt(delta_t) eps, elementwise.
double bridge_forward_scalar(double x0, double y, int t, const BridgeSchedule& sched, double eps);

// Gaussian q(x_{t_prev} | x_t, x0, y) for any t_prev < t, derived from the
// bridge marginals by conjugacy. t_prev = t-1 gives the ancestral posterior
// with variance delta_tilde[t].
struct GaussianMoments {
    double mean = 0.0;
    double var = 0.0;
};
GaussianMoments posterior_moments(double x_t, double x0, double y, int t, int t_prev,
                                  const BridgeSchedule& sched);

// Forward diffusion of a one-hot mask toward a coarse mask. Returns the
// diffusion state and the realized noise field for loss construction.
std::pair<ProbMask, Tensor> forward_sample(const ProbMask& x0, const ProbMask& y, int t,
                                           const BridgeSchedule& sched, Rng& rng);

// Training target for the denoiser: m_t (y - x0) + sqrt(delta_t) eps.
Tensor noise_target(const Tensor& x0, const Tensor& y, int t, const Tensor& eps,
                    const BridgeSchedule& sched);

// Mean squared error between prediction and target (unit weighting).
double transition_loss(const Tensor& prediction, const Tensor& target, int t,
                       const BridgeSchedule& sched);

// x0_hat = (x_t - m_t y - sqrt(delta_t) eps_pred) / (1 - m_t); the algebraic
// inverse of the forward map, so eps_pred == realized eps recovers x0
// exactly. t must be < T.
Tensor reconstruct_x0(const Tensor& x_t, const Tensor& y, const Tensor& eps_pred, int t,
                      const BridgeSchedule& sched);

// Channel-wise softmax cross-entropy of the reconstruction against the
// one-hot truth, mean over pixels. The softmax makes the unconstrained
// diffusion state a valid distribution before the log.
double segmentation_loss(const Tensor& x0_hat, const Tensor& x0_onehot);

// Condition encoder tau: 3 convolutions over the channel concatenation of
// the coarse mask and the RGB region, emitting feature maps at mask
// resolution.
struct ConditionEncoder {
    nn::Conv2d c1, c2, c3;

    // train=false leaves the encoder untouched (safe for concurrent use).
    Tensor forward(const Tensor& y_cat_o, bool train = true);
    Tensor backward(const Tensor& grad);
    nn::ParamRefs params();

    Tensor pre1_, pre2_;
};

// Two-level U-shaped denoiser over the concatenation of the diffusion state
// and the conditioning features, with a sinusoidal embedding of t/T added at
// each resolution level.
struct Denoiser {
    nn::Conv2d conv_in, conv0b, conv_down, conv1b, conv_up, conv_dec, conv_out;
    nn::AdaptedLinear temb0, temb1, temb2;
    int temb_dim = 32;

    Tensor forward(const Tensor& x_cat_cond, double u, bool train = true);
    Tensor backward(const Tensor& grad);
    nn::ParamRefs params();

    Tensor pre1_, pre2_, pre3_, pre4_, pre6_;
    Tensor skip_;
};

struct RefinerConfig {
    int steps = 200;       // T
    double scale = 1.0;    // s
    double lambda = 1.0;   // weight of the segmentation loss
    int cond_features = 16;
    int base_width = 32;
    int temb_dim = 32;
    int o_downsample = 1;  // 1, 2 or 4; area downsample of (y, O) before the
                           // encoder, features re-upsampled nearest-neighbor
    double lr = 3e-4;
};

struct RefinerState {
    RefinerConfig cfg;
    BridgeSchedule schedule;
    ConditionEncoder encoder;
    Denoiser denoiser;
    nn::AdamOptimizer opt;
    uint64_t seed = 0;

    nn::ParamRefs params();
};

RefinerState init_refiner(const RefinerConfig& cfg, uint64_t seed);

// Conditioning features for a region: encoder over y (+) O with the
// configured downsample factor. o_rgb is (3,h,w) in [0,1].
Tensor condition_features(RefinerState& state, const Tensor& y, const Tensor& o_rgb);

struct RefinerLosses {
    double l_ref = 0.0;
    double l_trans = 0.0;
    double l_seg = 0.0;
};

// One training step: t ~ U{1..T-1}, eps ~ N(0,I), gradient step on
// L_ref = L_trans + lambda L_seg for encoder and denoiser.
RefinerLosses refiner_train_step(RefinerState& state, const Tensor& x0, const Tensor& y,
                                 const Tensor& o_rgb, Rng& rng);

// Deterministic loss/grad evaluations at fixed (t, eps) for oracle checks.
RefinerLosses refiner_loss(RefinerState& state, const Tensor& x0, const Tensor& y,
                           const Tensor& o_rgb, int t, const Tensor& eps);
RefinerLosses refiner_grads(RefinerState& state, const Tensor& x0, const Tensor& y,
                            const Tensor& o_rgb, int t, const Tensor& eps);

enum class SampleMode { Ancestral, Ddim };

// Denoiser hook for sampling; tests substitute an oracle returning the true
// residual target.
using DenoiseFn = std::function<Tensor(const Tensor& x_t, int t)>;

// Reverse process from x_T = y over an evenly spaced timestep subsequence
// ending at 0 (n_steps segments). Ddim steps deterministically, carrying the
// implied residual; ancestral draws from the Gaussian posterior. The final
// reconstruction is converted to a refined mask by channel-wise softmax.
ProbMask sample_refined_with(const BridgeSchedule& sched, const DenoiseFn& denoise,
                             const ProbMask& y, int n_steps, SampleMode mode, Rng& rng);

ProbMask sample_refined(RefinerState& state, const ProbMask& y, const Tensor& o_rgb, int n_steps,
                        SampleMode mode, Rng& rng);

std::vector<int> ddim_timesteps(int total_steps, int n_steps);

void save_refiner(const RefinerState& state, const std::filesystem::path& path);
RefinerState load_refiner(const std::filesystem::path& path);

}  // namespace bridgeseg
