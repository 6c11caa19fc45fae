#include "satm/hypergrad.hpp"

#include <cmath>
#include <cstdio>

#include "satm/errors.hpp"
#include "satm/kernels.hpp"

namespace satm {

// ---- BatchSchedule ----

BatchSchedule BatchSchedule::full(std::size_t n_steps, std::size_t dataset_size) {
  if (n_steps < 1 || dataset_size < 1) throw ContractViolation("BatchSchedule: empty schedule");
  BatchSchedule s;
  s.n_steps = n_steps;
  s.dataset_size = dataset_size;
  std::vector<uint32_t> all(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) all[i] = static_cast<uint32_t>(i);
  s.steps.push_back(std::move(all));  // shared by every step
  return s;
}

BatchSchedule BatchSchedule::minibatched(uint64_t seed, std::size_t n_steps, std::size_t dataset_size,
                                         std::size_t batch_size) {
  if (n_steps < 1 || dataset_size < 1) throw ContractViolation("BatchSchedule: empty schedule");
  if (batch_size < 1) throw ContractViolation("BatchSchedule: batch_size must be >= 1");
  if (batch_size >= dataset_size) return full(n_steps, dataset_size);
  BatchSchedule s;
  s.n_steps = n_steps;
  s.dataset_size = dataset_size;
  s.batch_size = batch_size;
  s.seed = seed;
  Rng rng(derive_seed(seed, "batch-schedule"));
  std::vector<uint32_t> perm = rng.permutation(dataset_size);
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < n_steps; ++i) {
    if (cursor + batch_size > dataset_size) {
      perm = rng.permutation(dataset_size);
      cursor = 0;
    }
    s.steps.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(cursor),
                         perm.begin() + static_cast<std::ptrdiff_t>(cursor + batch_size));
    cursor += batch_size;
  }
  return s;
}

std::span<const uint32_t> BatchSchedule::step(std::size_t i) const {
  if (i >= n_steps) throw ContractViolation("BatchSchedule: step index out of range");
  const auto& v = batch_size ? steps[i] : steps[0];
  return {v.data(), v.size()};
}

// ---- InnerRunRecord ----

const ParamVector& InnerRunRecord::state(std::size_t i) const {
  if (i == 0 && record_from > 0) return theta_initial;
  if (i >= record_from && i <= n_steps) return tape[i - record_from];
  throw ContractViolation("InnerRunRecord: state " + std::to_string(i) + " not retained");
}

std::size_t InnerRunRecord::retained_state_count() const {
  return record_from == 0 ? n_steps + 1 : (n_steps - record_from) + 2;
}

ParamVector InnerRunRecord::grad_prefix(std::size_t k) const {
  if (k < record_from) throw ContractViolation("InnerRunRecord: prefix below record_from unavailable");
  ParamVector prefix = grad_prefix_pre_tape;
  if (k == record_from) return prefix;
  if (k > n_steps) throw ContractViolation("InnerRunRecord: prefix index out of range");
  if (!(alpha > 0.0))
    throw ContractViolation("InnerRunRecord: prefix beyond record_from needs alpha > 0");
  // theta_k = theta_rf - alpha * sum_{i=rf}^{k-1} g_i, so the middle section
  // telescopes out of the retained states.
  const ParamVector& from = state(record_from);
  const ParamVector& to = state(k);
  const double inv = 1.0 / alpha;
  for (std::size_t j = 0; j < prefix.size(); ++j) prefix[j] += (from[j] - to[j]) * inv;
  return prefix;
}

// ---- unroll ----

InnerRunRecord unroll_inner(std::shared_ptr<const InnerModel> model, const ParamVector& theta_init,
                            const SyntheticDataset& dataset, std::size_t n_steps,
                            const BatchSchedule& schedule, std::size_t record_from) {
  if (!model) throw ContractViolation("unroll_inner: null model");
  if (n_steps < 1) throw ContractViolation("unroll_inner: n_steps must be >= 1");
  if (record_from > n_steps) throw ContractViolation("unroll_inner: record_from > n_steps");
  if (schedule.n_steps < n_steps) throw ContractViolation("unroll_inner: schedule too short");
  if (schedule.dataset_size != dataset.size())
    throw ContractViolation("unroll_inner: schedule/dataset size mismatch");
  if (theta_init.size() != model->param_count())
    throw ContractViolation("unroll_inner: theta length mismatch");
  const double alpha = dataset.inner_lr;
  if (!(alpha >= 0.0)) throw ContractViolation("unroll_inner: inner_lr must be >= 0");

  InnerRunRecord rec;
  rec.model = std::move(model);
  rec.alpha = alpha;
  rec.schedule = schedule;
  rec.record_from = record_from;
  rec.n_steps = n_steps;
  rec.theta_initial = theta_init;
  rec.grad_sum.assign(theta_init.size(), 0.0);
  rec.grad_prefix_pre_tape.assign(theta_init.size(), 0.0);
  rec.per_step_grad_norms.reserve(n_steps);
  rec.tape.reserve(n_steps - record_from + 1);

  ParamVector theta = theta_init;
  ParamVector g;
  if (record_from == 0) rec.tape.push_back(theta);
  for (std::size_t i = 0; i < n_steps; ++i) {
    rec.model->grad(theta, dataset, schedule.step(i), g);
    kernels::axpy(rec.grad_sum.data(), 1.0, g.data(), g.size());
    if (i < record_from) kernels::axpy(rec.grad_prefix_pre_tape.data(), 1.0, g.data(), g.size());
    rec.per_step_grad_norms.push_back(std::sqrt(kernels::sq_norm(g.data(), g.size())));
    kernels::axpy(theta.data(), -alpha, g.data(), theta.size());
    for (double t : theta)
      if (!std::isfinite(t))
        throw NumericError("unroll_inner: non-finite state at step " + std::to_string(i + 1));
    if (i + 1 >= record_from) rec.tape.push_back(theta);
  }
  return rec;
}

InnerRunRecord unroll_inner(const ModelSpec& spec, const ParamVector& theta_init,
                            const SyntheticDataset& dataset, std::size_t n_steps,
                            const BatchSchedule& schedule, std::size_t record_from) {
  return unroll_inner(std::make_shared<CeInnerModel>(spec), theta_init, dataset, n_steps, schedule,
                      record_from);
}

// ---- hypergradients ----

double outer_loss(const ParamVector& theta_final, const Segment& segment) {
  if (theta_final.size() != segment.theta_target.size())
    throw ContractViolation("outer_loss: parameter length mismatch");
  if (!(segment.delta > 0.0)) throw ContractViolation("outer_loss: segment delta must be positive");
  return kernels::sq_dist(theta_final.data(), segment.theta_target.data(), theta_final.size()) /
         segment.delta;
}

Hypergradient hypergrad_from_seed(const InnerRunRecord& record, const SyntheticDataset& dataset,
                                  const ParamVector& seed_grad, std::size_t start_step) {
  const std::size_t P = record.model->param_count();
  if (seed_grad.size() != P) throw ContractViolation("hypergrad: seed gradient length mismatch");
  if (start_step > record.n_steps) throw ContractViolation("hypergrad: start_step > n_steps");
  if (start_step < record.record_from)
    throw ContractViolation("hypergrad: tape incomplete for requested truncation");
  if (dataset.size() != record.schedule.dataset_size)
    throw ContractViolation("hypergrad: dataset/schedule size mismatch");

  Hypergradient hg;
  hg.d_phi = Matrix(dataset.size(), dataset.dim(), 0.0);
  ParamVector g = seed_grad;
  ParamVector step_grad, hv;
  Matrix rows;
  const double alpha = record.alpha;

  for (std::size_t i = record.n_steps; i > start_step; --i) {
    const ParamVector& theta_prev = record.state(i - 1);
    const auto idx = record.schedule.step(i - 1);

    record.model->grad(theta_prev, dataset, idx, step_grad);
    hg.d_alpha_exact -= kernels::dot(g.data(), step_grad.data(), P);

    record.model->mixed_vp(theta_prev, dataset, idx, g, rows);
    for (std::size_t k = 0; k < idx.size(); ++k)
      kernels::axpy(hg.d_phi.row(idx[k]), -alpha, rows.row(k), dataset.dim());

    record.model->hvp(theta_prev, dataset, idx, g, hv);
    kernels::axpy(g.data(), -alpha, hv.data(), P);
  }
  hg.grad_norm = std::sqrt(kernels::sq_norm(hg.d_phi.data.data(), hg.d_phi.size()));
  return hg;
}

namespace {

ParamVector matching_seed(const InnerRunRecord& record, const Segment& segment) {
  const ParamVector& theta_final = record.state(record.n_steps);
  if (!(segment.delta > 0.0)) throw ContractViolation("hypergrad: segment delta must be positive");
  if (segment.theta_target.size() != theta_final.size())
    throw ContractViolation("hypergrad: segment/parameter length mismatch");
  ParamVector seed(theta_final.size());
  const double scale = 2.0 / segment.delta;
  for (std::size_t j = 0; j < seed.size(); ++j)
    seed[j] = scale * (theta_final[j] - segment.theta_target[j]);
  return seed;
}

Hypergradient matching_hypergrad(const InnerRunRecord& record, const SyntheticDataset& dataset,
                                 const Segment& segment, std::size_t start_step) {
  Hypergradient hg = hypergrad_from_seed(record, dataset, matching_seed(record, segment), start_step);
  hg.outer_loss = outer_loss(record.state(record.n_steps), segment);
  hg.d_alpha = lr_first_order_grad(record, segment);
  return hg;
}

}  // namespace

Hypergradient rmd_hypergrad(const InnerRunRecord& record, const SyntheticDataset& dataset,
                            const Segment& segment) {
  if (record.record_from != 0)
    throw ContractViolation("rmd_hypergrad: full tape required (record_from must be 0)");
  return matching_hypergrad(record, dataset, segment, 0);
}

Hypergradient truncated_hypergrad(const InnerRunRecord& record, const SyntheticDataset& dataset,
                                  const Segment& segment) {
  return matching_hypergrad(record, dataset, segment, record.record_from);
}

std::pair<Hypergradient, InnerRunRecord> reuse_second_pass(const InnerRunRecord& first_record,
                                                           const SyntheticDataset& dataset_perturbed,
                                                           const Segment& segment, std::size_t tau) {
  if (!first_record.has_state(tau))
    throw ContractViolation("reuse_second_pass: theta_tau not retained in first record");
  if (dataset_perturbed.size() != first_record.schedule.dataset_size)
    throw ContractViolation("reuse_second_pass: dataset/schedule size mismatch");
  if (dataset_perturbed.inner_lr != first_record.alpha)
    throw ContractViolation("reuse_second_pass: inner_lr differs between passes");

  const std::size_t N = first_record.n_steps;
  InnerRunRecord rec;
  rec.model = first_record.model;
  rec.alpha = first_record.alpha;
  rec.schedule = first_record.schedule;
  rec.record_from = tau;
  rec.n_steps = N;
  rec.theta_initial = first_record.theta_initial;
  rec.grad_prefix_pre_tape = first_record.grad_prefix(tau);
  rec.grad_sum = rec.grad_prefix_pre_tape;
  rec.per_step_grad_norms.assign(first_record.per_step_grad_norms.begin(),
                                 first_record.per_step_grad_norms.begin() +
                                     static_cast<std::ptrdiff_t>(tau));

  // Replay steps tau+1..N from the reused midpoint on the perturbed data,
  // with the identical batch schedule.
  ParamVector theta = first_record.state(tau);
  ParamVector g;
  rec.tape.push_back(theta);
  for (std::size_t i = tau; i < N; ++i) {
    rec.model->grad(theta, dataset_perturbed, rec.schedule.step(i), g);
    kernels::axpy(rec.grad_sum.data(), 1.0, g.data(), g.size());
    rec.per_step_grad_norms.push_back(std::sqrt(kernels::sq_norm(g.data(), g.size())));
    kernels::axpy(theta.data(), -rec.alpha, g.data(), theta.size());
    for (double t : theta)
      if (!std::isfinite(t))
        throw NumericError("reuse_second_pass: non-finite state at step " + std::to_string(i + 1));
    rec.tape.push_back(theta);
  }

  Hypergradient hg = matching_hypergrad(rec, dataset_perturbed, segment, tau);
  return {std::move(hg), std::move(rec)};
}

double lr_first_order_grad_from_seed(const InnerRunRecord& record, const ParamVector& seed_grad) {
  if (seed_grad.size() != record.grad_sum.size())
    throw ContractViolation("lr_first_order_grad: seed length mismatch");
  return -kernels::dot(seed_grad.data(), record.grad_sum.data(), seed_grad.size());
}

double lr_first_order_grad(const InnerRunRecord& record, const Segment& segment) {
  return lr_first_order_grad_from_seed(record, matching_seed(record, segment));
}

// ---- diagnostics ----

DiagnosticsReport prop1_error_sweep(std::shared_ptr<const InnerModel> model,
                                    const SyntheticDataset& dataset, const Segment& segment,
                                    std::size_t n_steps, std::span<const std::size_t> iota_list,
                                    double ridge, uint64_t seed) {
  auto ridged = std::make_shared<RidgeInnerModel>(std::move(model), ridge);
  const BatchSchedule schedule = BatchSchedule::full(n_steps, dataset.size());
  InnerRunRecord record = unroll_inner(ridged, segment.theta_start, dataset, n_steps, schedule, 0);

  DiagnosticsReport report;
  ParamVector g_final;
  ridged->grad(record.state(n_steps), dataset, schedule.step(n_steps - 1), g_final);
  report.convergence_warning =
      std::sqrt(kernels::sq_norm(g_final.data(), g_final.size())) >= 1e-6;

  const ParamVector seed_grad = matching_seed(record, segment);
  const Hypergradient full = hypergrad_from_seed(record, dataset, seed_grad, 0);
  for (std::size_t iota : iota_list) {
    const Hypergradient trunc = hypergrad_from_seed(record, dataset, seed_grad, iota);
    const double err = std::sqrt(
        kernels::sq_dist(full.d_phi.data.data(), trunc.d_phi.data.data(), full.d_phi.size()));
    report.truncation_errors.push_back({iota, err, seed});
  }
  return report;
}

DiagnosticsReport prop1_error_sweep(const ModelSpec& spec, const SyntheticDataset& dataset,
                                    const Segment& segment, std::size_t n_steps,
                                    std::span<const std::size_t> iota_list, double ridge,
                                    uint64_t seed) {
  return prop1_error_sweep(std::make_shared<CeInnerModel>(spec), dataset, segment, n_steps,
                           iota_list, ridge, seed);
}

DiagnosticsReport thm1_divergence_probe(std::shared_ptr<const InnerModel> model,
                                        const SyntheticDataset& dataset, const ParamVector& theta0,
                                        const Matrix& epsilon, std::span<const std::size_t> tau_list,
                                        std::span<const double> alpha_list, uint64_t seed) {
  if (epsilon.rows != dataset.images.rows || epsilon.cols != dataset.images.cols)
    throw ContractViolation("thm1_divergence_probe: epsilon shape mismatch");
  std::size_t n_steps = 0;
  for (std::size_t t : tau_list) n_steps = std::max(n_steps, t);
  if (n_steps == 0) throw ContractViolation("thm1_divergence_probe: empty tau list");

  SyntheticDataset perturbed = dataset;
  for (std::size_t k = 0; k < epsilon.size(); ++k) perturbed.images.data[k] += epsilon.data[k];
  const double rho = std::sqrt(kernels::sq_norm(epsilon.data.data(), epsilon.size()));

  DiagnosticsReport report;
  const BatchSchedule schedule = BatchSchedule::full(n_steps, dataset.size());
  const std::size_t P = model->param_count();

  for (double alpha : alpha_list) {
    ParamVector a = theta0, b = theta0;
    ParamVector ga, gb;
    double diff_sum = 0.0;
    for (std::size_t i = 0; i < n_steps; ++i) {
      model->grad(a, dataset, schedule.step(i), ga);
      model->grad(b, perturbed, schedule.step(i), gb);
      const double diff = std::sqrt(kernels::sq_dist(ga.data(), gb.data(), P));
      diff_sum += diff;
      report.sigma_hat = std::max(report.sigma_hat, diff);
      kernels::axpy(a.data(), -alpha, ga.data(), P);
      kernels::axpy(b.data(), -alpha, gb.data(), P);
      const std::size_t tau = i + 1;
      for (std::size_t t : tau_list) {
        if (t == tau) {
          const double div = std::sqrt(kernels::sq_dist(a.data(), b.data(), P));
          report.divergence_probe.push_back({tau, div, alpha * diff_sum, alpha, rho, seed});
        }
      }
    }
  }
  return report;
}

DiagnosticsReport thm1_divergence_probe(const ModelSpec& spec, const SyntheticDataset& dataset,
                                        const ParamVector& theta0, const Matrix& epsilon,
                                        std::span<const std::size_t> tau_list,
                                        std::span<const double> alpha_list, uint64_t seed) {
  return thm1_divergence_probe(std::make_shared<CeInnerModel>(spec), dataset, theta0, epsilon,
                               tau_list, alpha_list, seed);
}

std::string DiagnosticsReport::to_csv() const {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::string csv = "iota,err_l2,tau,div_l2,bound,alpha,rho,seed\n";
  for (const auto& r : truncation_errors) {
    csv += std::to_string(r.iota) + "," + fmt(r.err_l2) + ",,,,,," + std::to_string(r.seed) + "\n";
  }
  for (const auto& r : divergence_probe) {
    csv += ",," + std::to_string(r.tau) + "," + fmt(r.div_l2) + "," + fmt(r.bound) + "," +
           fmt(r.alpha) + "," + fmt(r.rho) + "," + std::to_string(r.seed) + "\n";
  }
  return csv;
}

}  // namespace satm
