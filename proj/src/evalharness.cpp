#include "satm/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <thread>

#include "satm/errors.hpp"
#include "satm/kernels.hpp"
#include "satm/rng.hpp"

namespace satm {

double accuracy(const ModelSpec& spec, const ParamVector& theta, const Matrix& features,
                std::span<const int32_t> labels) {
  if (features.rows != labels.size()) throw ContractViolation("accuracy: row/label mismatch");
  if (features.rows == 0) return 0.0;
  std::vector<double> logits;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < features.rows; ++i) {
    model_logits(spec, theta, features.row(i), logits);
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    if (static_cast<int32_t>(best) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(features.rows);
}

namespace {

double train_once_and_score(const ModelSpec& spec, const SyntheticDataset& synthetic,
                            const RealDataset& test, std::size_t epochs, uint64_t repeat_seed) {
  ParamVector theta = init_params(spec, repeat_seed);
  const LabeledBatch batch = LabeledBatch::of(synthetic.images, synthetic.labels);
  ParamVector grad;
  for (std::size_t e = 0; e < epochs; ++e) {
    ce_grad(spec, theta, batch, grad);
    kernels::axpy(theta.data(), -synthetic.inner_lr, grad.data(), theta.size());
  }
  return accuracy(spec, theta, test.features, test.labels);
}

void aggregate(EvalReport& report) {
  const std::size_t n = report.per_seed.size();
  double mean = 0.0;
  for (double a : report.per_seed) mean += a;
  mean /= static_cast<double>(n);
  report.mean_accuracy = mean;
  if (n < 2) {
    report.std_accuracy = 0.0;
    return;
  }
  double ss = 0.0;
  for (double a : report.per_seed) ss += (a - mean) * (a - mean);
  report.std_accuracy = std::sqrt(ss / static_cast<double>(n - 1));
}

void run_indexed(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  const std::size_t n_workers = std::min(jobs, count);
  for (std::size_t w = 0; w < n_workers; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += n_workers) fn(i);
    });
  }
  for (auto& t : workers) t.join();
}

}  // namespace

EvalReport train_eval(const ModelSpec& spec, const SyntheticDataset& synthetic,
                      const RealDataset& test, std::size_t epochs, std::size_t repeats,
                      uint64_t seed, std::size_t jobs) {
  synthetic.validate();
  test.validate();
  if (repeats < 1) throw ContractViolation("train_eval: repeats must be >= 1");
  if (synthetic.dim() != test.dim()) throw ContractViolation("train_eval: feature dim mismatch");
  if (synthetic.class_count != test.class_count)
    throw ContractViolation("train_eval: class count mismatch");
  spec.validate();
  if (spec.input_dim != synthetic.dim() || spec.classes != synthetic.class_count)
    throw ContractViolation("train_eval: spec does not match datasets");

  EvalReport report;
  report.epochs = epochs;
  report.step_size = synthetic.inner_lr;
  report.model_desc = spec.describe();
  report.synthetic_id = synthetic.provenance;
  report.test_id = test.id;
  report.per_seed.assign(repeats, 0.0);
  report.seeds.resize(repeats);
  for (std::size_t r = 0; r < repeats; ++r) report.seeds[r] = derive_seed(seed, "eval-repeat", r);
  run_indexed(repeats, jobs, [&](std::size_t r) {
    report.per_seed[r] = train_once_and_score(spec, synthetic, test, epochs, report.seeds[r]);
  });
  aggregate(report);
  return report;
}

std::vector<EvalReport> cross_arch_eval(std::span<const ModelSpec> specs,
                                        const SyntheticDataset& synthetic, const RealDataset& test,
                                        std::size_t epochs, std::size_t repeats, uint64_t seed,
                                        std::size_t jobs) {
  std::vector<EvalReport> reports;
  reports.reserve(specs.size());
  for (const ModelSpec& spec : specs)
    reports.push_back(train_eval(spec, synthetic, test, epochs, repeats, seed, jobs));
  return reports;
}

std::string eval_reports_csv(std::span<const EvalReport> reports) {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::string csv = "model,synthetic_id,test_id,epochs,step_size,repeats,acc_mean,acc_std\n";
  for (const auto& r : reports) {
    csv += r.model_desc + "," + r.synthetic_id + "," + r.test_id + "," + std::to_string(r.epochs) +
           "," + fmt(r.step_size) + "," + std::to_string(r.per_seed.size()) + "," +
           fmt(r.mean_accuracy) + "," + fmt(r.std_accuracy) + "\n";
  }
  return csv;
}

ContinualProtocol continual_eval(std::span<const ContinualTask> tasks, const RealDataset& test,
                                 Arch arch, std::size_t hidden, std::size_t epochs, uint64_t seed) {
  if (tasks.empty()) throw ContractViolation("continual_eval: no tasks");
  test.validate();
  const std::size_t d = test.dim();
  std::set<int32_t> seen_check;
  for (const auto& task : tasks) {
    if (task.classes.size() != task.memory.class_count)
      throw ContractViolation("continual_eval: memory class count does not match task classes");
    if (task.memory.dim() != d) throw ContractViolation("continual_eval: memory dim mismatch");
    for (int32_t c : task.classes)
      if (!seen_check.insert(c).second)
        throw ContractViolation("continual_eval: task class partitions overlap");
  }

  ContinualProtocol proto;
  proto.ipc = tasks[0].memory.ipc;
  for (const auto& task : tasks) proto.task_splits.push_back(task.classes);

  for (std::size_t stage = 1; stage <= tasks.size(); ++stage) {
    // Global-to-stage label map in task order.
    std::vector<int32_t> seen;
    for (std::size_t k = 0; k < stage; ++k)
      seen.insert(seen.end(), tasks[k].classes.begin(), tasks[k].classes.end());
    const std::size_t C = seen.size();
    std::vector<int32_t> remap(test.class_count, -1);
    for (std::size_t j = 0; j < C; ++j) remap[static_cast<std::size_t>(seen[j])] = static_cast<int32_t>(j);

    // Union of memories 1..stage; mean of their learned step sizes.
    std::size_t rows = 0;
    for (std::size_t k = 0; k < stage; ++k) rows += tasks[k].memory.size();
    Matrix x(rows, d);
    std::vector<int32_t> y(rows);
    double alpha = 0.0;
    std::size_t out = 0;
    int32_t base = 0;
    for (std::size_t k = 0; k < stage; ++k) {
      const SyntheticDataset& mem = tasks[k].memory;
      alpha += mem.inner_lr;
      for (std::size_t i = 0; i < mem.size(); ++i, ++out) {
        const double* from = mem.images.row(i);
        std::copy(from, from + d, x.row(out));
        y[out] = base + mem.labels[i];
      }
      base += static_cast<int32_t>(mem.class_count);
    }
    alpha /= static_cast<double>(stage);

    const ModelSpec spec =
        arch == Arch::softmax_regression ? ModelSpec::softmax(d, C) : ModelSpec::mlp(d, hidden, C);
    // Stage k trains with the k-th evaluation repeat seed, so a single-task
    // protocol reproduces train_eval exactly.
    ParamVector theta = init_params(spec, derive_seed(seed, "eval-repeat", stage - 1));
    const LabeledBatch batch = LabeledBatch::of(x, y);
    ParamVector grad;
    for (std::size_t e = 0; e < epochs; ++e) {
      ce_grad(spec, theta, batch, grad);
      kernels::axpy(theta.data(), -alpha, grad.data(), theta.size());
    }

    // Per-task and union accuracy over the test rows of seen classes.
    std::vector<double> per_task(stage, 0.0);
    std::vector<std::size_t> per_task_n(stage, 0);
    std::size_t union_correct = 0, union_n = 0;
    std::vector<double> logits;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const int32_t g = test.labels[i];
      const int32_t local = remap[static_cast<std::size_t>(g)];
      if (local < 0) continue;
      model_logits(spec, theta, test.features.row(i), logits);
      const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
      const bool ok = static_cast<int32_t>(best) == local;
      std::size_t owner = 0;
      for (std::size_t k = 0; k < stage; ++k)
        if (std::find(tasks[k].classes.begin(), tasks[k].classes.end(), g) != tasks[k].classes.end())
          owner = k;
      per_task[owner] += ok ? 1.0 : 0.0;
      ++per_task_n[owner];
      union_correct += ok ? 1 : 0;
      ++union_n;
    }
    for (std::size_t k = 0; k < stage; ++k)
      per_task[k] = per_task_n[k] ? per_task[k] / static_cast<double>(per_task_n[k]) : 0.0;
    proto.stage_task_accuracy.push_back(std::move(per_task));
    proto.stage_accuracy.push_back(union_n ? static_cast<double>(union_correct) /
                                                 static_cast<double>(union_n)
                                           : 0.0);
  }
  return proto;
}

std::string ContinualProtocol::to_csv(uint64_t seed) const {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  std::string csv = "stage,classes_seen,acc_mean,acc_std,seed\n";
  for (std::size_t k = 0; k < stage_accuracy.size(); ++k) {
    std::size_t seen = 0;
    for (std::size_t j = 0; j <= k; ++j) seen += task_splits[j].size();
    const auto& per_task = stage_task_accuracy[k];
    double mean = 0.0;
    for (double a : per_task) mean += a;
    mean /= static_cast<double>(per_task.size());
    double ss = 0.0;
    for (double a : per_task) ss += (a - mean) * (a - mean);
    const double sd = per_task.size() > 1 ? std::sqrt(ss / static_cast<double>(per_task.size() - 1)) : 0.0;
    csv += std::to_string(k + 1) + "," + std::to_string(seen) + "," + fmt(stage_accuracy[k]) + "," +
           fmt(sd) + "," + std::to_string(seed) + "\n";
  }
  return csv;
}

}  // namespace satm
