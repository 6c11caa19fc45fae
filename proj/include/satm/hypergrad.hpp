#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "satm/inner_model.hpp"
#include "satm/trajectory.hpp"

// Unrolled inner-loop differentiation: full reverse mode over all N steps
// (the exact but memory-heavy oracle), the truncated variant that
// differentiates only the last N - iota steps, the second-pass trajectory
// reuse that restarts from a retained midpoint instead of re-unrolling, and
// the first-order step-size gradient that needs no second-order products.

namespace satm {

/// Per-step sample index lists into the synthetic dataset, fixed up front so
/// a second pass can replay exactly the same data selection.
struct BatchSchedule {
  std::size_t n_steps = 0;
  std::size_t dataset_size = 0;
  std::optional<std::size_t> batch_size;  // nullopt = full batch every step
  uint64_t seed = 0;

  /// Indices for inner step i+1 (i in [0, n_steps)).
  std::span<const uint32_t> step(std::size_t i) const;

  static BatchSchedule full(std::size_t n_steps, std::size_t dataset_size);
  static BatchSchedule minibatched(uint64_t seed, std::size_t n_steps, std::size_t dataset_size,
                                   std::size_t batch_size);

  std::vector<std::vector<uint32_t>> steps;  // single shared list when full batch
};

/// Tape of one unrolled run: theta_0 always, theta_i for i >= record_from,
/// plus the forward-pass gradient accumulations the step-size gradient needs.
struct InnerRunRecord {
  std::shared_ptr<const InnerModel> model;
  double alpha = 0.0;
  BatchSchedule schedule;
  std::size_t record_from = 0;  // iota for pass 1, tau for pass 2
  std::size_t n_steps = 0;
  ParamVector theta_initial;            // theta_0
  std::vector<ParamVector> tape;        // theta_{record_from} .. theta_N
  std::vector<double> per_step_grad_norms;  // ||g_i||, i = 0..N-1
  ParamVector grad_sum;                 // sum_{i=0}^{N-1} g_i
  ParamVector grad_prefix_pre_tape;     // sum_{i < record_from} g_i

  bool has_state(std::size_t i) const { return i == 0 || (i >= record_from && i <= n_steps); }
  const ParamVector& state(std::size_t i) const;
  std::size_t retained_state_count() const;  // N - record_from + 2 when record_from > 0
  /// sum_{i < k} g_i for any retained k; needs alpha > 0 when k > record_from.
  ParamVector grad_prefix(std::size_t k) const;
};

struct Hypergradient {
  Matrix d_phi;          // same shape as the synthetic images
  double d_alpha = 0.0;  // first-order (forward-accumulated) step-size gradient
  double d_alpha_exact = 0.0;  // reverse-mode step-size gradient over the differentiated steps
  double outer_loss = 0.0;
  double grad_norm = 0.0;  // ||d_phi||_2
};

struct TruncationErrorRow {
  std::size_t iota = 0;
  double err_l2 = 0.0;
  uint64_t seed = 0;
};

struct DivergenceRow {
  std::size_t tau = 0;
  double div_l2 = 0.0;
  double bound = 0.0;  // alpha * sum_{i<tau} ||grad-diff_i||
  double alpha = 0.0;
  double rho = 0.0;
  uint64_t seed = 0;
};

struct DiagnosticsReport {
  std::vector<TruncationErrorRow> truncation_errors;
  std::vector<DivergenceRow> divergence_probe;
  double sigma_hat = 0.0;  // max observed gradient-difference norm
  bool convergence_warning = false;

  /// CSV with columns: iota, err_l2, tau, div_l2, bound, alpha, rho, seed.
  std::string to_csv() const;
};

/// theta_i = theta_{i-1} - alpha * grad(theta_{i-1}, batch_i) for i = 1..N,
/// alpha taken from dataset.inner_lr. Throws NumericError naming the step on
/// divergence.
InnerRunRecord unroll_inner(std::shared_ptr<const InnerModel> model, const ParamVector& theta_init,
                            const SyntheticDataset& dataset, std::size_t n_steps,
                            const BatchSchedule& schedule, std::size_t record_from);
InnerRunRecord unroll_inner(const ModelSpec& spec, const ParamVector& theta_init,
                            const SyntheticDataset& dataset, std::size_t n_steps,
                            const BatchSchedule& schedule, std::size_t record_from);

/// ||theta_final - segment.theta_target||^2 / segment.delta
double outer_loss(const ParamVector& theta_final, const Segment& segment);

/// Reverse recursion from an arbitrary outer-gradient seed dL/dtheta_N,
/// differentiating steps start_step+1..N. Building block for everything
/// below; exposed so diagnostics and oracles can drive it directly.
Hypergradient hypergrad_from_seed(const InnerRunRecord& record, const SyntheticDataset& dataset,
                                  const ParamVector& seed_grad, std::size_t start_step);

/// Full reverse-mode hypergradient of the normalized matching loss
/// (requires record_from == 0).
Hypergradient rmd_hypergrad(const InnerRunRecord& record, const SyntheticDataset& dataset,
                            const Segment& segment);

/// Same recursion started at step N and stopped at record.record_from + 1;
/// equals rmd_hypergrad exactly when record_from == 0.
Hypergradient truncated_hypergrad(const InnerRunRecord& record, const SyntheticDataset& dataset,
                                  const Segment& segment);

/// Re-runs steps tau+1..N from the retained theta_tau on the perturbed
/// dataset, replaying the first pass's batch schedule, and differentiates
/// through all re-run steps. Requires tau retained in first_record; the
/// returned record's gradient accumulations splice the first pass's prefix
/// below tau with the re-run suffix.
std::pair<Hypergradient, InnerRunRecord> reuse_second_pass(const InnerRunRecord& first_record,
                                                           const SyntheticDataset& dataset_perturbed,
                                                           const Segment& segment, std::size_t tau);

/// d_alpha = dL/dtheta_N . ( - sum_{i=0}^{N-1} grad(theta_i, batch_{i+1}) ),
/// with the sum accumulated during the forward pass so truncation does not
/// change it.
double lr_first_order_grad(const InnerRunRecord& record, const Segment& segment);
double lr_first_order_grad_from_seed(const InnerRunRecord& record, const ParamVector& seed_grad);

/// Runs the ridge-regularized inner problem to (near) convergence with a full
/// tape, then reports ||rmd - truncated(iota)|| for each iota. Sets
/// convergence_warning if ||grad(theta_N)|| >= 1e-6.
DiagnosticsReport prop1_error_sweep(std::shared_ptr<const InnerModel> model,
                                    const SyntheticDataset& dataset, const Segment& segment,
                                    std::size_t n_steps, std::span<const std::size_t> iota_list,
                                    double ridge, uint64_t seed = 0);
DiagnosticsReport prop1_error_sweep(const ModelSpec& spec, const SyntheticDataset& dataset,
                                    const Segment& segment, std::size_t n_steps,
                                    std::span<const std::size_t> iota_list, double ridge,
                                    uint64_t seed = 0);

/// Two from-scratch unrolls (no reuse) with shared theta_0 and schedule, on
/// phi and phi + epsilon, for each alpha in alpha_list: rows
/// (tau, ||delta theta_tau||, alpha * sum_{i<tau} ||grad-diff_i||, alpha,
/// ||epsilon||) for each tau in tau_list.
DiagnosticsReport thm1_divergence_probe(std::shared_ptr<const InnerModel> model,
                                        const SyntheticDataset& dataset, const ParamVector& theta0,
                                        const Matrix& epsilon, std::span<const std::size_t> tau_list,
                                        std::span<const double> alpha_list, uint64_t seed = 0);
DiagnosticsReport thm1_divergence_probe(const ModelSpec& spec, const SyntheticDataset& dataset,
                                        const ParamVector& theta0, const Matrix& epsilon,
                                        std::span<const std::size_t> tau_list,
                                        std::span<const double> alpha_list, uint64_t seed = 0);

}  // namespace satm
