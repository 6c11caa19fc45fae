#include "satm/satm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "satm/errors.hpp"
#include "satm/kernels.hpp"

namespace satm {

void CondenseConfig::validate() const {
  if (inner_steps < 1) throw ContractViolation("CondenseConfig: inner_steps must be >= 1");
  if (expert_span < 1) throw ContractViolation("CondenseConfig: expert_span must be >= 1");
  if (truncate_index > reuse_index)
    throw ContractViolation("CondenseConfig: need truncate_index <= reuse_index");
  if (reuse_index > inner_steps)
    throw ContractViolation("CondenseConfig: need reuse_index <= inner_steps");
  if (rho < 0.0 || gamma < 0.0) throw ContractViolation("CondenseConfig: rho, gamma must be >= 0");
  if (outer_lr < 0.0) throw ContractViolation("CondenseConfig: outer_lr must be >= 0");
  if (lr_lr < 0.0) throw ContractViolation("CondenseConfig: lr_lr must be >= 0");
  if (ipc < 1) throw ContractViolation("CondenseConfig: ipc must be >= 1");
  if (!(alpha_min > 0.0)) throw ContractViolation("CondenseConfig: alpha_min must be positive");
}

std::string sharpness_csv(std::span<const SharpnessRecord> records) {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::string csv = "iter,loss_phi,loss_phi_eps,sharpness,hypergrad_norm,epsilon_norm,alpha\n";
  for (const auto& r : records) {
    csv += std::to_string(r.iteration) + "," + fmt(r.loss_phi) + "," + fmt(r.loss_phi_eps) + "," +
           fmt(r.sharpness) + "," + fmt(r.hypergrad_norm) + "," + fmt(r.epsilon_norm) + "," +
           fmt(r.alpha) + "\n";
  }
  return csv;
}

std::pair<SyntheticDataset, Matrix> smooth_perturb(const SyntheticDataset& dataset, double gamma,
                                                   Rng& rng) {
  if (gamma < 0.0) throw ContractViolation("smooth_perturb: gamma must be >= 0");
  Matrix noise(dataset.images.rows, dataset.images.cols, 0.0);
  SyntheticDataset out = dataset;
  if (gamma == 0.0) return {std::move(out), std::move(noise)};
  const std::size_t d = dataset.dim();
  for (std::size_t j = 0; j < dataset.size(); ++j) {
    const double* img = dataset.images.row(j);
    const double norm = std::sqrt(kernels::sq_norm(img, d));
    const double stddev = std::sqrt(gamma * norm);  // per-coordinate variance gamma*||phi_j||
    if (stddev == 0.0) continue;
    double* nrow = noise.row(j);
    double* orow = out.images.row(j);
    for (std::size_t k = 0; k < d; ++k) {
      nrow[k] = stddev * rng.normal();
      orow[k] += nrow[k];
    }
  }
  return {std::move(out), std::move(noise)};
}

EpsilonResult compute_epsilon(const Matrix& d_phi, double rho) {
  if (rho < 0.0) throw ContractViolation("compute_epsilon: rho must be >= 0");
  EpsilonResult res;
  res.epsilon = Matrix(d_phi.rows, d_phi.cols, 0.0);
  if (rho == 0.0) return res;
  const double norm = std::sqrt(kernels::sq_norm(d_phi.data.data(), d_phi.size()));
  if (norm <= 1e-12) {
    res.degenerate = true;
    return res;
  }
  res.epsilon = d_phi;
  kernels::scale(res.epsilon.data.data(), rho / norm, res.epsilon.size());
  return res;
}

std::pair<SyntheticDataset, SharpnessRecord> satm_step_on_segment(
    const SyntheticDataset& state, const Segment& segment,
    std::shared_ptr<const InnerModel> model, const CondenseConfig& config, Rng& rng) {
  config.validate();
  if (segment.theta_start.size() != model->param_count())
    throw ContractViolation("satm_step: segment does not match model");

  const std::size_t N = config.inner_steps;
  const BatchSchedule schedule =
      config.synthetic_batch_size
          ? BatchSchedule::minibatched(rng.next_u64(), N, state.size(), *config.synthetic_batch_size)
          : BatchSchedule::full(N, state.size());

  // Pass 1 on the noise-smoothed images, truncated at iota.
  auto [smoothed, noise] = smooth_perturb(state, config.gamma, rng);
  const InnerRunRecord rec1 = unroll_inner(model, segment.theta_start, smoothed, N, schedule,
                                           config.truncate_index);
  const Hypergradient hg1 = truncated_hypergrad(rec1, smoothed, segment);

  const EpsilonResult eps = compute_epsilon(hg1.d_phi, config.rho);

  // Noise removed: pass 2 sees the pristine phi plus epsilon, exactly.
  SyntheticDataset ascended = state;
  for (std::size_t k = 0; k < ascended.images.size(); ++k)
    ascended.images.data[k] += eps.epsilon.data[k];

  auto [hg2, rec2] = reuse_second_pass(rec1, ascended, segment, config.reuse_index);

  SyntheticDataset next = state;
  kernels::axpy(next.images.data.data(), -config.outer_lr, hg2.d_phi.data.data(),
                next.images.size());
  next.inner_lr = std::max(state.inner_lr - config.lr_lr * hg2.d_alpha, config.alpha_min);
  for (double v : next.images.data)
    if (!std::isfinite(v)) throw NumericError("satm_step: non-finite synthetic image after update");

  SharpnessRecord rec;
  rec.loss_phi = hg1.outer_loss;
  rec.loss_phi_eps = hg2.outer_loss;
  rec.sharpness = rec.loss_phi_eps - rec.loss_phi;
  rec.hypergrad_norm = hg2.grad_norm;
  rec.epsilon_norm = std::sqrt(kernels::sq_norm(eps.epsilon.data.data(), eps.epsilon.size()));
  rec.alpha = next.inner_lr;
  rec.pass1_grad_norm = hg1.grad_norm;
  rec.d_alpha_first_order = hg2.d_alpha;
  rec.d_alpha_exact = hg2.d_alpha_exact;
  rec.degenerate_gradient = eps.degenerate;
  rec.segment_start = segment.start_index;
  return {std::move(next), rec};
}

std::pair<SyntheticDataset, SharpnessRecord> satm_step(const SyntheticDataset& state,
                                                       std::span<const ExpertTrajectory> pool,
                                                       const CondenseConfig& config, Rng& rng) {
  if (pool.empty()) throw ContractViolation("satm_step: empty trajectory pool");
  const ExpertTrajectory& traj = pool[rng.below(pool.size())];
  if (traj.horizon() < config.max_start + config.expert_span)
    throw ContractViolation("satm_step: trajectory too short for max_start + expert_span");
  const Segment segment = sample_segment(traj, config.expert_span, config.max_start, rng);
  auto model = std::make_shared<CeInnerModel>(traj.spec);
  return satm_step_on_segment(state, segment, std::move(model), config, rng);
}

std::pair<SyntheticDataset, std::vector<SharpnessRecord>> condense(
    const CondenseConfig& config, std::span<const ExpertTrajectory> pool,
    const SyntheticDataset& init, Rng& rng) {
  config.validate();
  init.validate();
  SyntheticDataset state = init;
  std::vector<SharpnessRecord> log;
  log.reserve(config.outer_iterations);
  std::size_t consecutive_failures = 0;
  for (std::size_t it = 0; it < config.outer_iterations; ++it) {
    try {
      auto [next, rec] = satm_step(state, pool, config, rng);
      rec.iteration = it;
      state = std::move(next);
      log.push_back(rec);
      consecutive_failures = 0;
    } catch (const NumericError&) {
      if (++consecutive_failures > config.max_retries) throw;
      --it;  // retry the iteration with fresh draws
    }
  }
  return {std::move(state), std::move(log)};
}

SyntheticDataset init_synthetic(const RealDataset& real, std::size_t ipc, InitMode mode, Rng& rng,
                                double alpha0) {
  real.validate();
  if (ipc < 1) throw ContractViolation("init_synthetic: ipc must be >= 1");
  if (!(alpha0 > 0.0)) throw ContractViolation("init_synthetic: alpha0 must be positive");
  const std::size_t C = real.class_count, d = real.dim();

  SyntheticDataset ds;
  ds.class_count = C;
  ds.ipc = ipc;
  ds.inner_lr = alpha0;
  ds.images = Matrix(C * ipc, d);
  ds.labels.resize(C * ipc);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < ipc; ++k) ds.labels[c * ipc + k] = static_cast<int32_t>(c);

  if (mode == InitMode::gaussian_noise) {
    for (double& v : ds.images.data) v = rng.normal();
    return ds;
  }
  for (std::size_t c = 0; c < C; ++c) {
    auto idx = real.class_indices(static_cast<int32_t>(c));
    if (idx.size() < ipc)
      throw ContractViolation("init_synthetic: class " + std::to_string(c) + " has " +
                              std::to_string(idx.size()) + " samples, need ipc = " +
                              std::to_string(ipc));
    // sample without replacement
    for (std::size_t k = 0; k < ipc; ++k) {
      const std::size_t pick = k + static_cast<std::size_t>(rng.below(idx.size() - k));
      std::swap(idx[k], idx[pick]);
      const double* from = real.features.row(idx[k]);
      std::copy(from, from + d, ds.images.row(c * ipc + k));
    }
  }
  return ds;
}

}  // namespace satm
