#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sdseg/tensor.hpp"

namespace sdseg {

// Precomputed forward-process table: betas, alphas = 1 - betas, and the
// cumulative products alpha_bars governing the signal/noise mix per step.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
};

NoiseSchedule make_schedule(int T, double beta_start = 0.00085, double beta_end = 0.012);

struct ReverseSpec {
    enum class Mode { SingleStep, Ddim };
    Mode mode = Mode::SingleStep;
    int ddim_steps = 1;  // ignored in single-step mode

    static ReverseSpec parse(const std::string& s);  // "single" | "ddim:<steps>"
    std::string str() const;
};

// conditional denoiser: (z_t, per-sample t, z_c) -> noise estimate
template <class R>
using DenoiseFn =
    std::function<Tensor<R>(const Tensor<R>&, const std::vector<int>&, const Tensor<R>&)>;

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) n, t per batch element
template <class R>
Tensor<R> forward_diffuse(const Tensor<R>& z0, const std::vector<int>& t, const Tensor<R>& n,
                          const NoiseSchedule& sched);
template <class R>
Tensor<R> forward_diffuse(const Tensor<R>& z0, int t, const Tensor<R>& n,
                          const NoiseSchedule& sched);

// z0_hat = (z_t - sqrt(1 - abar_t) n_hat) / sqrt(abar_t)
template <class R>
Tensor<R> latent_estimate(const Tensor<R>& z_t, const Tensor<R>& n_hat, const std::vector<int>& t,
                          const NoiseSchedule& sched);
template <class R>
Tensor<R> latent_estimate(const Tensor<R>& z_t, const Tensor<R>& n_hat, int t,
                          const NoiseSchedule& sched);

template <class R>
struct LossTerms {
    Tensor<R> total;    // L_noise + lambda * L_latent
    Tensor<R> noise;    // MAE(n_hat, n)
    Tensor<R> latent;   // MAE(z0_hat, z0); excluded from the graph when lambda == 0
};

template <class R>
LossTerms<R> training_loss(const Tensor<R>& z0, const Tensor<R>& z_c, const std::vector<int>& t,
                           const Tensor<R>& n, const DenoiseFn<R>& model, const NoiseSchedule& sched,
                           R lambda);

// timestep subsequence for a given step count: T-1 down to 0, evenly spaced
std::vector<int> ddim_timesteps(int steps, int T);

// deterministic DDIM (eta = 0); returns the final clean-latent estimate
template <class R>
Tensor<R> ddim_sample(const Tensor<R>& z_T, const Tensor<R>& z_c, int steps,
                      const NoiseSchedule& sched, const DenoiseFn<R>& model);

// draws z_T from rng, runs exactly one model call at t = T-1
template <class R>
Tensor<R> single_step_infer(Rng& rng, const Tensor<R>& z_c, const NoiseSchedule& sched,
                            const DenoiseFn<R>& model);

}  // namespace sdseg
