#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "satm/errors.hpp"
#include "satm/io.hpp"
#include "satm/kernels.hpp"
#include "satm/satm.hpp"
#include "support/oracles.hpp"

using namespace satm;
using oracles::QuadraticModel;
using oracles::quadratic_dataset;

namespace {

struct DeskProblem {
  RealDataset train = make_gaussian_mixture(4, 10, 4.0, 200, 11, "train");
  std::vector<ExpertTrajectory> pool;
  SyntheticDataset init;

  DeskProblem() {
    const ModelSpec spec = ModelSpec::softmax(10, 4);
    for (uint64_t s = 0; s < 3; ++s)
      pool.push_back(train_expert(spec, train, 8, 0.1, 32, 100 + s));
    Rng rng(derive_seed(0, "init-synthetic"));
    init = init_synthetic(train, 1, InitMode::real_samples, rng, 0.02);
  }

  CondenseConfig config() const {
    CondenseConfig cfg;
    cfg.inner_steps = 20;
    cfg.expert_span = 2;
    cfg.max_start = 2;
    cfg.truncate_index = 13;
    cfg.reuse_index = 13;
    cfg.rho = 0.05;
    cfg.gamma = 0.01;
    cfg.outer_lr = 10.0;
    cfg.lr_lr = 1e-5;
    cfg.outer_iterations = 20;
    cfg.ipc = 1;
    return cfg;
  }
};

uint64_t hash_images(const SyntheticDataset& ds) {
  std::string bytes;
  for (double v : ds.images.data) io::put_f64(bytes, v);
  return io::fnv1a64(bytes);
}

}  // namespace

TEST_CASE("smooth_perturb: gamma = 0 and zero images produce no noise") {
  SyntheticDataset ds = quadratic_dataset(2.0, 0.1);
  Rng rng(1);
  auto [unchanged, zero_noise] = smooth_perturb(ds, 0.0, rng);
  CHECK(unchanged.images.data == ds.images.data);
  CHECK(zero_noise.data == std::vector<double>{0.0});

  SyntheticDataset zds = quadratic_dataset(0.0, 0.1);
  auto [still_zero, n2] = smooth_perturb(zds, 0.5, rng);
  CHECK(still_zero.images.data[0] == 0.0);
  CHECK(n2.data[0] == 0.0);  // variance proportional to the image norm
}

TEST_CASE("smooth_perturb Monte Carlo variance is within 5% of gamma*||phi||") {
  SyntheticDataset ds;
  ds.class_count = 1;
  ds.ipc = 1;
  ds.inner_lr = 0.1;
  ds.images = Matrix(1, 5);
  ds.images.data = {0.5, -1.0, 2.0, 0.25, -0.75};
  ds.labels = {0};
  const double gamma = 0.3;
  const double norm = std::sqrt(kernels::sq_norm(ds.images.data.data(), 5));
  const double want = gamma * norm;

  Rng rng(99);
  const std::size_t draws = 10000;
  std::vector<double> per_coord_ss(5, 0.0);
  double pooled = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    auto [p, noise] = smooth_perturb(ds, gamma, rng);
    for (std::size_t j = 0; j < 5; ++j) {
      per_coord_ss[j] += noise.data[j] * noise.data[j];
      pooled += noise.data[j] * noise.data[j];
      CHECK(p.images.data[j] == ds.images.data[j] + noise.data[j]);
    }
  }
  pooled /= static_cast<double>(draws * 5);
  CHECK(std::abs(pooled - want) < 0.05 * want);
  for (std::size_t j = 0; j < 5; ++j) {
    const double var = per_coord_ss[j] / static_cast<double>(draws);
    CHECK(std::abs(var - want) < 0.05 * want);
  }
}

TEST_CASE("compute_epsilon normalization arithmetic") {
  Matrix g(1, 2);
  g.data = {3.0, 4.0};
  const EpsilonResult r = compute_epsilon(g, 0.1);
  CHECK(r.epsilon.data[0] == doctest::Approx(0.06).epsilon(1e-14));
  CHECK(r.epsilon.data[1] == doctest::Approx(0.08).epsilon(1e-14));
  CHECK_FALSE(r.degenerate);

  CHECK(compute_epsilon(g, 0.0).epsilon.data == std::vector<double>{0.0, 0.0});

  Matrix zero(1, 2, 0.0);
  const EpsilonResult z = compute_epsilon(zero, 0.1);
  CHECK(z.degenerate);
  CHECK(z.epsilon.data == std::vector<double>{0.0, 0.0});
}

TEST_CASE("satm step on the scalar quadratic applies the closed-form update") {
  SyntheticDataset state = quadratic_dataset(1.0, 0.5);
  Segment seg;
  seg.expert_span = 1;
  seg.theta_start = {0.0};
  seg.theta_target = {0.0};
  seg.delta = 1.0;
  CondenseConfig cfg;
  cfg.inner_steps = 4;
  cfg.truncate_index = 2;
  cfg.reuse_index = 2;
  cfg.rho = 0.0;
  cfg.gamma = 0.0;
  cfg.outer_lr = 1.0;
  cfg.lr_lr = 0.0;
  Rng rng(5);
  auto [next, rec] = satm_step_on_segment(state, seg, std::make_shared<QuadraticModel>(), cfg, rng);
  // applied gradient: (2/delta)*theta_4 * (1 - (1-alpha)^{N-iota}) = 2*0.9375*0.75
  CHECK(std::abs((state.images.data[0] - next.images.data[0]) - 1.40625) < 1e-12);
  CHECK(rec.epsilon_norm == 0.0);
  CHECK(rec.loss_phi == doctest::Approx(0.9375 * 0.9375).epsilon(1e-14));
  CHECK(rec.sharpness == 0.0);  // same point in both passes
}

TEST_CASE("rho = gamma = 0 with full tape reduces to plain reverse-mode matching") {
  DeskProblem p;
  CondenseConfig cfg = p.config();
  cfg.rho = 0.0;
  cfg.gamma = 0.0;
  cfg.truncate_index = 0;
  cfg.reuse_index = 0;
  CHECK(cfg.mtt_equivalent());

  Rng seg_rng(7);
  const Segment seg = sample_segment(p.pool[0], cfg.expert_span, cfg.max_start, seg_rng);
  auto model = std::make_shared<CeInnerModel>(p.pool[0].spec);
  Rng rng(8);
  auto [next, rec] = satm_step_on_segment(p.init, seg, model, cfg, rng);

  // reference: one full unroll + full reverse-mode on the pristine phi
  const BatchSchedule sched = BatchSchedule::full(cfg.inner_steps, p.init.size());
  const auto record = unroll_inner(model, seg.theta_start, p.init, cfg.inner_steps, sched, 0);
  const Hypergradient ref = rmd_hypergrad(record, p.init, seg);
  for (std::size_t k = 0; k < p.init.images.size(); ++k) {
    const double applied = (p.init.images.data[k] - next.images.data[k]) / cfg.outer_lr;
    CHECK(std::abs(applied - ref.d_phi.data[k]) <= 1e-12 * std::max(1.0, std::abs(ref.d_phi.data[k])));
  }
}

TEST_CASE("zero outer steps leave the dataset untouched but still emit a record") {
  DeskProblem p;
  CondenseConfig cfg = p.config();
  cfg.outer_lr = 0.0;
  cfg.lr_lr = 0.0;
  Rng rng(9);
  auto [next, rec] = satm_step(p.init, p.pool, cfg, rng);
  CHECK(next.images.data == p.init.images.data);
  CHECK(next.inner_lr == p.init.inner_lr);
  CHECK(rec.loss_phi > 0.0);
}

TEST_CASE("epsilon norm equals rho whenever the pass-1 gradient is alive") {
  DeskProblem p;
  CondenseConfig cfg = p.config();
  cfg.outer_iterations = 25;
  Rng rng(derive_seed(3, "condense"));
  auto [final_ds, log] = condense(cfg, p.pool, p.init, rng);
  REQUIRE(log.size() == 25);
  for (const auto& r : log) {
    if (r.pass1_grad_norm > 1e-12) {
      CHECK(std::abs(r.epsilon_norm - cfg.rho) <= 1e-12 * cfg.rho);
      CHECK_FALSE(r.degenerate_gradient);
    } else {
      CHECK(r.epsilon_norm == 0.0);
    }
    CHECK(r.alpha > 0.0);
  }
}

TEST_CASE("noise removal is exact: a manual replay reproduces the step bit-for-bit") {
  DeskProblem p;
  CondenseConfig cfg = p.config();
  Rng seg_rng(31);
  const Segment seg = sample_segment(p.pool[1], cfg.expert_span, cfg.max_start, seg_rng);
  auto model = std::make_shared<CeInnerModel>(p.pool[1].spec);

  Rng rng_a(77);
  auto [next, rec] = satm_step_on_segment(p.init, seg, model, cfg, rng_a);

  // Manual replay from a cloned rng: smooth, pass 1, epsilon, pass 2 built
  // from the pristine phi plus epsilon (not smoothed-minus-noise).
  Rng rng_b(77);
  auto [smoothed, noise] = smooth_perturb(p.init, cfg.gamma, rng_b);
  const BatchSchedule sched = BatchSchedule::full(cfg.inner_steps, p.init.size());
  const auto rec1 =
      unroll_inner(model, seg.theta_start, smoothed, cfg.inner_steps, sched, cfg.truncate_index);
  const Hypergradient hg1 = truncated_hypergrad(rec1, smoothed, seg);
  const EpsilonResult eps = compute_epsilon(hg1.d_phi, cfg.rho);
  SyntheticDataset ascended = p.init;
  for (std::size_t k = 0; k < ascended.images.size(); ++k)
    ascended.images.data[k] += eps.epsilon.data[k];
  auto [hg2, rec2] = reuse_second_pass(rec1, ascended, seg, cfg.reuse_index);
  SyntheticDataset manual = p.init;
  kernels::axpy(manual.images.data.data(), -cfg.outer_lr, hg2.d_phi.data.data(),
                manual.images.size());

  CHECK(manual.images.data == next.images.data);
  CHECK(rec.loss_phi == hg1.outer_loss);
  CHECK(rec.loss_phi_eps == hg2.outer_loss);
}

TEST_CASE("condense: zero iterations, determinism, label immutability, alpha clamp") {
  DeskProblem p;
  CondenseConfig cfg = p.config();

  cfg.outer_iterations = 0;
  Rng rng0(1);
  auto [same, empty_log] = condense(cfg, p.pool, p.init, rng0);
  CHECK(same.images.data == p.init.images.data);
  CHECK(empty_log.empty());

  cfg.outer_iterations = 30;
  Rng rng1(derive_seed(5, "condense"));
  Rng rng2(derive_seed(5, "condense"));
  auto [a, la] = condense(cfg, p.pool, p.init, rng1);
  auto [b, lb] = condense(cfg, p.pool, p.init, rng2);
  CHECK(hash_images(a) == hash_images(b));
  CHECK(a.inner_lr == b.inner_lr);
  CHECK(a.labels == p.init.labels);

  // a huge lr-lr drives alpha into the clamp, never below it
  CondenseConfig clamp_cfg = p.config();
  clamp_cfg.lr_lr = 1e9;
  clamp_cfg.outer_iterations = 5;
  Rng rng3(3);
  auto [c, lc] = condense(clamp_cfg, p.pool, p.init, rng3);
  CHECK(c.inner_lr >= clamp_cfg.alpha_min);
}

TEST_CASE("config validation rules") {
  CondenseConfig cfg;
  cfg.truncate_index = 5;
  cfg.reuse_index = 3;
  CHECK_THROWS_AS(cfg.validate(), ContractViolation);
  cfg.reuse_index = 25;
  cfg.truncate_index = 0;
  cfg.inner_steps = 20;
  CHECK_THROWS_AS(cfg.validate(), ContractViolation);
  cfg.reuse_index = 0;
  cfg.rho = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ContractViolation);
}

TEST_CASE("init_synthetic: modes, determinism, and class-count errors") {
  const RealDataset real = make_gaussian_mixture(3, 4, 2.0, 5, 2, "train");
  Rng rng(1);
  const SyntheticDataset ds = init_synthetic(real, 2, InitMode::real_samples, rng, 0.05);
  CHECK(ds.size() == 6);
  CHECK(ds.inner_lr == 0.05);
  // every synthetic image is one of the real rows of its class
  for (std::size_t i = 0; i < ds.size(); ++i) {
    bool found = false;
    for (std::size_t j = 0; j < real.size(); ++j) {
      if (real.labels[j] != ds.labels[i]) continue;
      bool equal = true;
      for (std::size_t k = 0; k < 4; ++k)
        if (real.features(j, k) != ds.images(i, k)) equal = false;
      if (equal) found = true;
    }
    CHECK(found);
  }

  Rng r2(9), r3(9);
  const SyntheticDataset g1 = init_synthetic(real, 2, InitMode::gaussian_noise, r2, 0.05);
  const SyntheticDataset g2 = init_synthetic(real, 2, InitMode::gaussian_noise, r3, 0.05);
  CHECK(g1.images.data == g2.images.data);

  Rng r4(1);
  CHECK_THROWS_AS(init_synthetic(real, 6, InitMode::real_samples, r4, 0.05), ContractViolation);
}

TEST_CASE("sharpness log serializes with the documented columns") {
  SharpnessRecord r;
  r.iteration = 2;
  r.loss_phi = 0.5;
  r.loss_phi_eps = 0.625;
  r.sharpness = 0.125;
  r.hypergrad_norm = 0.25;
  r.epsilon_norm = 0.0625;
  r.alpha = 0.015625;
  const std::string csv = sharpness_csv(std::vector<SharpnessRecord>{r});
  CHECK(csv.find("iter,loss_phi,loss_phi_eps,sharpness,hypergrad_norm,epsilon_norm,alpha") == 0);
  CHECK(csv.find("2,0.5,0.625,0.125,0.25,0.0625,0.015625") != std::string::npos);
}
