#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "mdtk/rng.hpp"
#include "mdtk/tensor.hpp"

namespace mdtk {

// Shape-generic denoising diffusion machinery shared by the motion and
// video models: linear beta schedule, forward noising, x0-prediction
// loss and the deterministic-capable DDIM reverse step.
struct DiffusionSchedule {
    int T = 0;
    std::vector<double> betas;       // length T, index t-1 for timestep t
    std::vector<double> alphas_cum;  // running product of (1 - beta)
    double eta = 0.0;

    // abar(0) == 1 by convention: the virtual terminal step.
    double abar(int t) const;
    double sigma(int t, int t_prev) const;
};

DiffusionSchedule make_linear_schedule(int T, double beta_start, double beta_end,
                                       double eta = 0.0);

Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps,
                     const DiffusionSchedule& sched);

double x0_loss(const Tensor& pred_z0, const Tensor& true_z0);

// One reverse step from timestep t to t_prev given the predicted clean
// sample. t_prev == 0 maps onto abar == 1 and returns pred_z0 exactly
// when eta == 0.
Tensor ddim_step(const Tensor& z_t, const Tensor& pred_z0, int t, int t_prev,
                 const DiffusionSchedule& sched, const Tensor& eps);

using DenoiseFn = std::function<Tensor(const Tensor& z_t, int t)>;

struct SampleResult {
    Tensor z0;
    int invocations = 0;
};

// DDIM sampling from seeded Gaussian noise over a uniform-stride
// decreasing timestep subsequence. Returns the denoised sample and the
// exact number of denoiser calls.
SampleResult sample(const DenoiseFn& denoiser, const std::vector<int>& shape,
                    const DiffusionSchedule& sched, int n_steps,
                    std::uint64_t seed);

// The uniform-stride subsequence used by sample(), highest timestep first,
// with the implied terminal t_prev = 0 appended.
std::vector<int> sampling_timesteps(int T, int n_steps);

}  // namespace mdtk
