#pragma once

#include <functional>
#include <vector>

#include "flowpolicy/common.hpp"

namespace flowpolicy {

// Scalar denoising step: 0 = pure noise, 1 = clean signal.
struct DenoiseStep {
    double i = 0;
};

// One training draw of the rectified-flow objective. The interpolant and the
// velocity target follow the convention that integration SUBTRACTS dt * v:
//   xi = (1 - i) * x0 + i * x1,   v_target = x0 - x1.
struct FlowSample {
    std::vector<float> x0;  // noise
    std::vector<float> x1;  // clean target
    DenoiseStep step;
    std::vector<float> xi;
    std::vector<float> v_target;
};

enum class SamplerMethod { RectifiedFlow, DDPM, DDIM };
enum class Parameterization { Velocity, Noise };

struct SamplerConfig {
    SamplerMethod method = SamplerMethod::RectifiedFlow;
    int steps = 5;
    // DDPM/DDIM schedule (training discretization)
    int train_timesteps = 1000;
    double beta_min = 1e-4;
    double beta_max = 2e-2;
};

// i = sigmoid(g), g ~ N(0, std^2). uniform=true replaces the logit-normal
// with U(0,1) (the config flag variant).
DenoiseStep sample_denoise_step(Rng& rng, double logit_std = 1.5, bool uniform = false);

// Exact CDF of the logit-normal step distribution, for distribution tests.
double logit_normal_cdf(double i, double logit_std = 1.5);

FlowSample make_flow_sample(const std::vector<float>& x1, Rng& rng);
FlowSample make_flow_sample(const std::vector<float>& x1, Rng& rng, DenoiseStep i);

using VelocityField =
    std::function<std::vector<float>(const std::vector<float>& x, double i)>;

// N Euler steps of x_{k+1} = x_k - (1/N) * v(x_k, k/N).
std::vector<float> euler_integrate(const VelocityField& v, std::vector<float> x, int steps);

// A point mass of the target distribution used by the analytic oracle field.
struct MixtureMode {
    std::vector<float> mu;
    double weight = 1.0;
};

// Posterior mode weights of x at step i under x = (1-i) e + i mu_j, e~N(0,I).
std::vector<double> mixture_posterior(const std::vector<float>& x, double i,
                                      const std::vector<MixtureMode>& modes);

// E[x0 - x1 | x_i = x]: the exact velocity field for a discrete target.
std::vector<float> analytic_mixture_velocity(const std::vector<float>& x, double i,
                                             const std::vector<MixtureMode>& modes);

using NoiseModel =
    std::function<std::vector<float>(const std::vector<float>& x, double t_norm)>;

// Generalized DDIM family sampler over a linear-beta schedule with staged
// timestep selection; eta = 1 gives ancestral DDPM, eta = 0 deterministic
// DDIM. The model predicts the added noise and is conditioned on t / (T-1).
std::vector<float> ddim_family_sample(const NoiseModel& eps_model, std::vector<float> x,
                                      const SamplerConfig& cfg, double eta, Rng& rng);

std::vector<float> ddpm_sample(const NoiseModel& eps_model, std::vector<float> x_start,
                               const SamplerConfig& cfg, Rng& rng);
std::vector<float> ddim_sample(const NoiseModel& eps_model, std::vector<float> x_start,
                               const SamplerConfig& cfg, Rng& rng);

// Cumulative signal coefficients of the linear-beta schedule.
std::vector<double> alpha_bar_schedule(const SamplerConfig& cfg);

// Throws ConfigMismatch unless the model parameterization fits the sampler.
void check_sampler_parameterization(SamplerMethod method, Parameterization model_param);

}  // namespace flowpolicy
