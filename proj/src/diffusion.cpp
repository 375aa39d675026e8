#include "sdseg/diffusion.hpp"

#include <cmath>

namespace sdseg {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be positive");
    if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) && T > 1)
        throw std::invalid_argument("make_schedule: need 0 < beta_start < beta_end < 1");
    if (T == 1 && !(0.0 < beta_start && beta_start < 1.0))
        throw std::invalid_argument("make_schedule: invalid beta_start");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        s.betas[t] = T == 1 ? beta_start
                            : beta_start + (beta_end - beta_start) * static_cast<double>(t) / (T - 1);
        s.alphas[t] = 1.0 - s.betas[t];
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
        if (!(s.betas[t] > 0.0 && s.betas[t] < 1.0))
            throw std::invalid_argument("make_schedule: beta out of (0,1)");
    }
    return s;
}

ReverseSpec ReverseSpec::parse(const std::string& s) {
    ReverseSpec r;
    if (s == "single") {
        r.mode = Mode::SingleStep;
        r.ddim_steps = 1;
        return r;
    }
    if (s.rfind("ddim:", 0) == 0) {
        r.mode = Mode::Ddim;
        r.ddim_steps = std::stoi(s.substr(5));
        if (r.ddim_steps < 1) throw std::invalid_argument("reverse spec: steps must be >= 1");
        return r;
    }
    throw std::invalid_argument("reverse spec: expected 'single' or 'ddim:<steps>', got '" + s + "'");
}

std::string ReverseSpec::str() const {
    return mode == Mode::SingleStep ? "single" : "ddim:" + std::to_string(ddim_steps);
}

namespace {

void check_t(const std::vector<int>& t, int T, int batch, const char* op) {
    if (t.size() != static_cast<size_t>(batch))
        throw std::invalid_argument(std::string(op) + ": t count != batch");
    for (int v : t)
        if (v < 0 || v >= T)
            throw std::invalid_argument(std::string(op) + ": t=" + std::to_string(v) +
                                        " out of [0," + std::to_string(T) + ")");
}

}  // namespace

template <class R>
Tensor<R> forward_diffuse(const Tensor<R>& z0, const std::vector<int>& t, const Tensor<R>& n,
                          const NoiseSchedule& sched) {
    const int B = z0.dim(0);
    check_t(t, sched.T, B, "forward_diffuse");
    std::vector<R> a(B), c(B);
    for (int b = 0; b < B; ++b) {
        const double ab = sched.alpha_bars[t[b]];
        a[b] = static_cast<R>(std::sqrt(ab));
        c[b] = static_cast<R>(std::sqrt(1.0 - ab));
    }
    return batch_affine(z0, n, a, c);
}

template <class R>
Tensor<R> forward_diffuse(const Tensor<R>& z0, int t, const Tensor<R>& n,
                          const NoiseSchedule& sched) {
    return forward_diffuse(z0, std::vector<int>(z0.dim(0), t), n, sched);
}

template <class R>
Tensor<R> latent_estimate(const Tensor<R>& z_t, const Tensor<R>& n_hat, const std::vector<int>& t,
                          const NoiseSchedule& sched) {
    const int B = z_t.dim(0);
    check_t(t, sched.T, B, "latent_estimate");
    std::vector<R> a(B), c(B);
    for (int b = 0; b < B; ++b) {
        const double ab = sched.alpha_bars[t[b]];
        const double inv = 1.0 / std::sqrt(ab);
        a[b] = static_cast<R>(inv);
        c[b] = static_cast<R>(-std::sqrt(1.0 - ab) * inv);
    }
    return batch_affine(z_t, n_hat, a, c);
}

template <class R>
Tensor<R> latent_estimate(const Tensor<R>& z_t, const Tensor<R>& n_hat, int t,
                          const NoiseSchedule& sched) {
    return latent_estimate(z_t, n_hat, std::vector<int>(z_t.dim(0), t), sched);
}

template <class R>
LossTerms<R> training_loss(const Tensor<R>& z0, const Tensor<R>& z_c, const std::vector<int>& t,
                           const Tensor<R>& n, const DenoiseFn<R>& model, const NoiseSchedule& sched,
                           R lambda) {
    if (lambda < R(0)) throw std::invalid_argument("training_loss: lambda must be >= 0");
    Tensor<R> z_t = forward_diffuse(z0, t, n, sched);
    Tensor<R> n_hat = model(z_t, t, z_c);
    LossTerms<R> out;
    out.noise = l1_distance(n_hat, n);
    if (lambda > R(0)) {
        Tensor<R> z0_hat = latent_estimate(z_t, n_hat, t, sched);
        out.latent = l1_distance(z0_hat, z0);
        out.total = add(out.noise, scale(out.latent, lambda));
    } else {
        // report the latent term without letting it touch the graph
        NoGradGuard ng;
        Tensor<R> z0_hat = latent_estimate(z_t.detach(), n_hat.detach(), t, sched);
        out.latent = l1_distance(z0_hat, z0.detach());
        out.total = out.noise;
    }
    return out;
}

std::vector<int> ddim_timesteps(int steps, int T) {
    if (steps < 1) throw std::invalid_argument("ddim_timesteps: steps must be >= 1");
    if (steps > T) throw std::invalid_argument("ddim_timesteps: steps exceed schedule length");
    std::vector<int> ts;
    if (steps == 1) {
        ts.push_back(T - 1);
        return ts;
    }
    for (int i = steps - 1; i >= 0; --i) {
        const int t = static_cast<int>(std::lround(static_cast<double>(T - 1) * i / (steps - 1)));
        if (ts.empty() || ts.back() != t) ts.push_back(t);
    }
    return ts;
}

template <class R>
Tensor<R> ddim_sample(const Tensor<R>& z_T, const Tensor<R>& z_c, int steps,
                      const NoiseSchedule& sched, const DenoiseFn<R>& model) {
    const std::vector<int> ts = ddim_timesteps(steps, sched.T);
    const int B = z_T.dim(0);
    Tensor<R> z = z_T;
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        Tensor<R> n_hat = model(z, std::vector<int>(B, t), z_c);
        Tensor<R> z0_hat = latent_estimate(z, n_hat, t, sched);
        if (i + 1 == ts.size()) return z0_hat;
        const double ab_prev = sched.alpha_bars[ts[i + 1]];
        z = batch_affine(z0_hat, n_hat, std::vector<R>(B, static_cast<R>(std::sqrt(ab_prev))),
                         std::vector<R>(B, static_cast<R>(std::sqrt(1.0 - ab_prev))));
    }
    return z;  // unreachable
}

template <class R>
Tensor<R> single_step_infer(Rng& rng, const Tensor<R>& z_c, const NoiseSchedule& sched,
                            const DenoiseFn<R>& model) {
    Tensor<R> z_T = Tensor<R>::randn(z_c.shape(), rng);
    return ddim_sample(z_T, z_c, 1, sched, model);
}

#define SDSEG_INSTANTIATE_DIFFUSION(R)                                                             \
    template Tensor<R> forward_diffuse<R>(const Tensor<R>&, const std::vector<int>&,               \
                                          const Tensor<R>&, const NoiseSchedule&);                 \
    template Tensor<R> forward_diffuse<R>(const Tensor<R>&, int, const Tensor<R>&,                 \
                                          const NoiseSchedule&);                                   \
    template Tensor<R> latent_estimate<R>(const Tensor<R>&, const Tensor<R>&,                      \
                                          const std::vector<int>&, const NoiseSchedule&);          \
    template Tensor<R> latent_estimate<R>(const Tensor<R>&, const Tensor<R>&, int,                 \
                                          const NoiseSchedule&);                                   \
    template LossTerms<R> training_loss<R>(const Tensor<R>&, const Tensor<R>&,                     \
                                           const std::vector<int>&, const Tensor<R>&,              \
                                           const DenoiseFn<R>&, const NoiseSchedule&, R);          \
    template Tensor<R> ddim_sample<R>(const Tensor<R>&, const Tensor<R>&, int,                     \
                                      const NoiseSchedule&, const DenoiseFn<R>&);                  \
    template Tensor<R> single_step_infer<R>(Rng&, const Tensor<R>&, const NoiseSchedule&,          \
                                            const DenoiseFn<R>&);

SDSEG_INSTANTIATE_DIFFUSION(float)
SDSEG_INSTANTIATE_DIFFUSION(double)

}  // namespace sdseg
