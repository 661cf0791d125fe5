#include "mdtk/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace mdtk {

double DiffusionSchedule::abar(int t) const {
    if (t == 0) return 1.0;
    if (t < 1 || t > T) throw std::out_of_range("timestep out of schedule range");
    return alphas_cum[static_cast<std::size_t>(t - 1)];
}

double DiffusionSchedule::sigma(int t, int t_prev) const {
    if (eta == 0.0) return 0.0;
    double ab_t = abar(t);
    double ab_p = abar(t_prev);
    double s2 = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p);
    return eta * std::sqrt(std::max(0.0, s2));
}

DiffusionSchedule make_linear_schedule(int T, double beta_start, double beta_end,
                                       double eta) {
    if (T < 1) throw std::invalid_argument("make_linear_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0))
        throw std::invalid_argument("make_linear_schedule: betas must lie in (0,1)");
    if (beta_start > beta_end)
        throw std::invalid_argument("make_linear_schedule: beta_start > beta_end");
    if (eta < 0.0 || eta > 1.0)
        throw std::invalid_argument("make_linear_schedule: eta must lie in [0,1]");

    DiffusionSchedule s;
    s.T = T;
    s.eta = eta;
    s.betas.resize(static_cast<std::size_t>(T));
    s.alphas_cum.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        double beta = (T == 1) ? beta_start
                               : beta_start + (beta_end - beta_start) * i / (T - 1);
        s.betas[static_cast<std::size_t>(i)] = beta;
        prod *= 1.0 - beta;
        s.alphas_cum[static_cast<std::size_t>(i)] = prod;
    }
    return s;
}

Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps,
                     const DiffusionSchedule& sched) {
    if (!z0.same_shape(eps))
        throw std::invalid_argument("forward_noise: eps shape " + eps.shape_str() +
                                    " != z0 shape " + z0.shape_str());
    double ab = sched.abar(t);
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out(z0.shape());
    for (std::int64_t i = 0; i < z0.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

double x0_loss(const Tensor& pred_z0, const Tensor& true_z0) {
    if (!pred_z0.same_shape(true_z0))
        throw std::invalid_argument("x0_loss: shape mismatch");
    double acc = 0.0;
    for (std::int64_t i = 0; i < pred_z0.numel(); ++i) {
        double d = pred_z0[i] - true_z0[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred_z0.numel());
}

Tensor ddim_step(const Tensor& z_t, const Tensor& pred_z0, int t, int t_prev,
                 const DiffusionSchedule& sched, const Tensor& eps) {
    if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be < t");
    if (!z_t.same_shape(pred_z0))
        throw std::invalid_argument("ddim_step: pred_z0 shape mismatch");
    double ab_t = sched.abar(t);
    double ab_p = sched.abar(t_prev);
    double sig = sched.sigma(t, t_prev);
    double rem = 1.0 - ab_p - sig * sig;
    if (rem < -1e-12)
        throw std::invalid_argument("ddim_step: sigma^2 exceeds 1 - abar(t_prev)");
    rem = std::max(0.0, rem);
    double c0 = std::sqrt(ab_p);
    double cd = std::sqrt(rem) / std::sqrt(1.0 - ab_t);
    double ct = std::sqrt(ab_t);

    Tensor out(z_t.shape());
    if (sig > 0.0 && !eps.same_shape(z_t))
        throw std::invalid_argument("ddim_step: eps shape mismatch");
    for (std::int64_t i = 0; i < z_t.numel(); ++i) {
        double v = c0 * pred_z0[i] + cd * (z_t[i] - ct * pred_z0[i]);
        if (sig > 0.0) v += sig * eps[i];
        out[i] = v;
    }
    return out;
}

std::vector<int> sampling_timesteps(int T, int n_steps) {
    if (n_steps < 1 || n_steps > T)
        throw std::invalid_argument("sampling_timesteps: need 1 <= n_steps <= T");
    std::vector<int> ts;
    ts.reserve(static_cast<std::size_t>(n_steps) + 1);
    for (int k = n_steps; k >= 1; --k) {
        int t = static_cast<int>(std::llround(static_cast<double>(k) * T / n_steps));
        ts.push_back(std::max(1, t));
    }
    ts.push_back(0);
    return ts;
}

SampleResult sample(const DenoiseFn& denoiser, const std::vector<int>& shape,
                    const DiffusionSchedule& sched, int n_steps,
                    std::uint64_t seed) {
    auto ts = sampling_timesteps(sched.T, n_steps);
    Rng rng(seed);
    Tensor z = rng.normal_tensor(shape);
    int calls = 0;
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        int t = ts[i], t_prev = ts[i + 1];
        Tensor pred = denoiser(z, t);
        ++calls;
        if (!pred.same_shape(z))
            throw std::runtime_error("sample: denoiser returned shape " +
                                     pred.shape_str() + ", expected " + z.shape_str());
        Tensor eps = (sched.eta > 0.0) ? rng.normal_tensor(shape) : Tensor(shape);
        z = ddim_step(z, pred, t, t_prev, sched, eps);
    }
    return {std::move(z), calls};
}

}  // namespace mdtk
