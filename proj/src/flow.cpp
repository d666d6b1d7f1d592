#include "flowpolicy/flow.hpp"

#include <algorithm>
#include <cmath>

namespace flowpolicy {

DenoiseStep sample_denoise_step(Rng& rng, double logit_std, bool uniform) {
    if (uniform) {
        double u = rng.uniform();
        // keep strictly inside (0,1)
        return {std::min(std::max(u, 1e-12), 1.0 - 1e-12)};
    }
    double g = rng.normal(0.0, logit_std);
    return {1.0 / (1.0 + std::exp(-g))};
}

double logit_normal_cdf(double i, double logit_std) {
    if (i <= 0) return 0;
    if (i >= 1) return 1;
    double z = std::log(i / (1.0 - i)) / logit_std;
    return 0.5 * std::erfc(-z / std::sqrt(2.0));
}

FlowSample make_flow_sample(const std::vector<float>& x1, Rng& rng) {
    return make_flow_sample(x1, rng, sample_denoise_step(rng));
}

FlowSample make_flow_sample(const std::vector<float>& x1, Rng& rng, DenoiseStep step) {
    FlowSample s;
    s.x1 = x1;
    s.step = step;
    s.x0.resize(x1.size());
    for (float& v : s.x0) v = float(rng.normal());
    s.xi.resize(x1.size());
    s.v_target.resize(x1.size());
    const float i = float(step.i);
    for (size_t k = 0; k < x1.size(); ++k) {
        s.xi[k] = (1.0f - i) * s.x0[k] + i * s.x1[k];
        s.v_target[k] = s.x0[k] - s.x1[k];
    }
    return s;
}

std::vector<float> euler_integrate(const VelocityField& v, std::vector<float> x, int steps) {
    if (steps < 1) throw ValidationError("euler_integrate needs steps >= 1");
    const double dt = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        std::vector<float> vel = v(x, double(k) * dt);
        if (vel.size() != x.size()) throw ShapeMismatch("velocity field changed dimension");
        for (float f : vel)
            if (!std::isfinite(f)) throw NonFiniteField("velocity at step " + std::to_string(k));
        for (size_t j = 0; j < x.size(); ++j) x[j] -= float(dt) * vel[j];
    }
    return x;
}

std::vector<double> mixture_posterior(const std::vector<float>& x, double i,
                                      const std::vector<MixtureMode>& modes) {
    if (!(i > 0.0) || !(i < 1.0)) throw DegenerateStep("posterior needs i in (0,1)");
    if (modes.empty()) throw ValidationError("mixture has no modes");
    const double var = (1.0 - i) * (1.0 - i);
    std::vector<double> logp(modes.size());
    double max_lp = -1e300;
    for (size_t j = 0; j < modes.size(); ++j) {
        if (modes[j].mu.size() != x.size()) throw ShapeMismatch("mode dimension mismatch");
        double d2 = 0;
        for (size_t c = 0; c < x.size(); ++c) {
            double t = double(x[c]) - i * double(modes[j].mu[c]);
            d2 += t * t;
        }
        logp[j] = std::log(std::max(modes[j].weight, 1e-300)) - d2 / (2.0 * var);
        max_lp = std::max(max_lp, logp[j]);
    }
    double z = 0;
    for (double& lp : logp) {
        lp = std::exp(lp - max_lp);
        z += lp;
    }
    for (double& lp : logp) lp /= z;
    return logp;
}

std::vector<float> analytic_mixture_velocity(const std::vector<float>& x, double i,
                                             const std::vector<MixtureMode>& modes) {
    std::vector<double> post = mixture_posterior(x, i, modes);
    std::vector<float> v(x.size(), 0.0f);
    for (size_t j = 0; j < modes.size(); ++j) {
        for (size_t c = 0; c < x.size(); ++c) {
            // E[eps | mode j] - mu_j, with eps = (x - i mu_j) / (1 - i)
            double e = (double(x[c]) - i * double(modes[j].mu[c])) / (1.0 - i);
            v[c] += float(post[j] * (e - double(modes[j].mu[c])));
        }
    }
    return v;
}

std::vector<double> alpha_bar_schedule(const SamplerConfig& cfg) {
    if (cfg.train_timesteps < 1) throw ValidationError("schedule needs timesteps >= 1");
    std::vector<double> abar(cfg.train_timesteps);
    double acc = 1.0;
    for (int t = 0; t < cfg.train_timesteps; ++t) {
        double beta = cfg.beta_min +
                      (cfg.beta_max - cfg.beta_min) *
                          (cfg.train_timesteps == 1 ? 0.0
                                                    : double(t) / (cfg.train_timesteps - 1));
        acc *= (1.0 - beta);
        abar[t] = acc;
    }
    return abar;
}

std::vector<float> ddim_family_sample(const NoiseModel& eps_model, std::vector<float> x,
                                      const SamplerConfig& cfg, double eta, Rng& rng) {
    if (cfg.steps < 1) throw ValidationError("sampler needs steps >= 1");
    std::vector<double> abar = alpha_bar_schedule(cfg);
    const int T = cfg.train_timesteps;

    // evenly strided timesteps, descending, always starting at T-1
    std::vector<int> ts(cfg.steps);
    for (int s = 0; s < cfg.steps; ++s)
        ts[s] = int(std::llround(double(T - 1) * (1.0 - double(s) / cfg.steps)));

    for (int s = 0; s < cfg.steps; ++s) {
        int t = ts[s];
        double ab_t = abar[t];
        double ab_prev = (s + 1 < cfg.steps) ? abar[ts[s + 1]] : 1.0;

        std::vector<float> eps = eps_model(x, double(t) / (T - 1));
        if (eps.size() != x.size()) throw ShapeMismatch("noise model changed dimension");

        double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) *
                       std::sqrt(std::max(0.0, 1.0 - ab_t / ab_prev));
        double dir_coef = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
        double sa_t = std::sqrt(ab_t), sa_prev = std::sqrt(ab_prev);
        double s1mab = std::sqrt(1.0 - ab_t);

        for (size_t c = 0; c < x.size(); ++c) {
            double x0_hat = (double(x[c]) - s1mab * double(eps[c])) / sa_t;
            double nx = sa_prev * x0_hat + dir_coef * double(eps[c]);
            if (sigma > 0) nx += sigma * rng.normal();
            x[c] = float(nx);
        }
    }
    return x;
}

std::vector<float> ddpm_sample(const NoiseModel& eps_model, std::vector<float> x_start,
                               const SamplerConfig& cfg, Rng& rng) {
    return ddim_family_sample(eps_model, std::move(x_start), cfg, 1.0, rng);
}

std::vector<float> ddim_sample(const NoiseModel& eps_model, std::vector<float> x_start,
                               const SamplerConfig& cfg, Rng& rng) {
    return ddim_family_sample(eps_model, std::move(x_start), cfg, 0.0, rng);
}

void check_sampler_parameterization(SamplerMethod method, Parameterization model_param) {
    if (method == SamplerMethod::RectifiedFlow && model_param != Parameterization::Velocity)
        throw ConfigMismatch("rectified-flow sampling needs a velocity-parameterized model");
    if (method != SamplerMethod::RectifiedFlow && model_param != Parameterization::Noise)
        throw ConfigMismatch("DDPM/DDIM sampling needs a noise-parameterized model");
}

}  // namespace flowpolicy
