#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "satm/hypergrad.hpp"

// One outer iteration: sample an expert segment, smooth the synthetic images
// with norm-scaled Gaussian noise, unroll and take the truncated
// hypergradient at the smoothed point, step to the worst-case perturbation
// epsilon, then re-run only the tail of the inner loop from the retained
// midpoint on phi + epsilon and apply that second hypergradient to phi and
// the shared step size.

namespace satm {

struct CondenseConfig {
  std::size_t inner_steps = 20;   // N
  std::size_t expert_span = 2;    // M
  std::size_t max_start = 2;      // T_max
  std::size_t truncate_index = 0; // iota: differentiate steps iota+1..N
  std::size_t reuse_index = 0;    // tau: second pass restarts from theta_tau
  double rho = 0.0;               // perturbation radius
  double gamma = 0.0;             // smoothing-noise scale
  double outer_lr = 10.0;         // beta
  double lr_lr = 1e-5;            // lambda, step size for the step size
  std::size_t outer_iterations = 500;
  std::optional<std::size_t> synthetic_batch_size;  // nullopt = full batch
  std::size_t ipc = 1;
  uint64_t seed = 0;
  std::size_t eval_cadence = 0;  // consumed by the CLI; 0 = off
  std::size_t max_retries = 3;
  double alpha_min = 1e-6;

  void validate() const;
  bool mtt_equivalent() const {
    return rho == 0.0 && gamma == 0.0 && truncate_index == 0 && reuse_index == 0;
  }
};

struct SharpnessRecord {
  std::size_t iteration = 0;
  double loss_phi = 0.0;       // pass-1 outer loss, at the smoothed point
  double loss_phi_eps = 0.0;   // pass-2 outer loss, at phi + epsilon
  double sharpness = 0.0;      // loss_phi_eps - loss_phi
  double hypergrad_norm = 0.0; // norm of the applied (pass-2) d_phi
  double epsilon_norm = 0.0;   // 0 or rho
  double alpha = 0.0;          // inner step size after the update
  double pass1_grad_norm = 0.0;
  double d_alpha_first_order = 0.0;  // the applied step-size gradient
  double d_alpha_exact = 0.0;        // reverse-mode over the differentiated steps
  bool degenerate_gradient = false;
  std::size_t segment_start = 0;
};

/// CSV with columns: iter, loss_phi, loss_phi_eps, sharpness, hypergrad_norm,
/// epsilon_norm, alpha.
std::string sharpness_csv(std::span<const SharpnessRecord> records);

/// Adds i.i.d. zero-mean Gaussian noise to each image with per-coordinate
/// variance gamma * ||phi_j||_2; returns the noise so it can be removed.
std::pair<SyntheticDataset, Matrix> smooth_perturb(const SyntheticDataset& dataset, double gamma,
                                                   Rng& rng);

struct EpsilonResult {
  Matrix epsilon;
  bool degenerate = false;  // gradient norm <= 1e-12 with rho > 0
};

/// epsilon = rho * d_phi / ||d_phi||_2, or zero when the gradient vanishes.
///
/// Extension point: variants that shape the perturbation differently
/// (adaptive per-image radii, momentum-filtered ascent directions, surrogate
/// sharpness objectives) replace only this rule; the smoothing, two-pass
/// reuse, and update machinery in satm_step_on_segment consume epsilon as an
/// opaque matrix and need no changes.
EpsilonResult compute_epsilon(const Matrix& d_phi, double rho);

/// One outer step against a caller-supplied segment and inner model; the
/// state is not modified (the updated dataset is returned).
std::pair<SyntheticDataset, SharpnessRecord> satm_step_on_segment(
    const SyntheticDataset& state, const Segment& segment,
    std::shared_ptr<const InnerModel> model, const CondenseConfig& config, Rng& rng);

/// One outer step: samples a trajectory uniformly from the pool, then a
/// segment, then runs satm_step_on_segment.
std::pair<SyntheticDataset, SharpnessRecord> satm_step(const SyntheticDataset& state,
                                                       std::span<const ExpertTrajectory> pool,
                                                       const CondenseConfig& config, Rng& rng);

/// Algorithm loop: outer_iterations steps with bounded retries on numeric
/// failures; deterministic given the rng state.
std::pair<SyntheticDataset, std::vector<SharpnessRecord>> condense(
    const CondenseConfig& config, std::span<const ExpertTrajectory> pool,
    const SyntheticDataset& init, Rng& rng);

enum class InitMode { real_samples, gaussian_noise };

/// real_samples copies ipc per-class rows without replacement; labels are
/// fixed class-major.
SyntheticDataset init_synthetic(const RealDataset& real, std::size_t ipc, InitMode mode, Rng& rng,
                                double alpha0 = 0.01);

}  // namespace satm
