#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "satm/data.hpp"
#include "satm/models.hpp"

// Synthetic-dataset quality measurement: fresh models trained on the
// synthetic set (full-batch gradient descent with the dataset's learned step
// size) and scored on held-out real data; cross-architecture transfer; and a
// class-incremental protocol that retrains from the stored memories at each
// stage.

namespace satm {

struct EvalReport {
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // (n-1) divisor; 0 when repeats == 1
  std::vector<double> per_seed;
  std::vector<uint64_t> seeds;
  std::size_t epochs = 0;
  double step_size = 0.0;
  std::string model_desc;
  std::string synthetic_id;
  std::string test_id;
};

std::string eval_reports_csv(std::span<const EvalReport> reports);

double accuracy(const ModelSpec& spec, const ParamVector& theta, const Matrix& features,
                std::span<const int32_t> labels);

/// Per repeat r: fresh init_params(spec, derive(seed, r)), `epochs` full-batch
/// GD steps on the synthetic set at its learned inner_lr, accuracy on test.
EvalReport train_eval(const ModelSpec& spec, const SyntheticDataset& synthetic,
                      const RealDataset& test, std::size_t epochs, std::size_t repeats,
                      uint64_t seed, std::size_t jobs = 1);

std::vector<EvalReport> cross_arch_eval(std::span<const ModelSpec> specs,
                                        const SyntheticDataset& synthetic, const RealDataset& test,
                                        std::size_t epochs, std::size_t repeats, uint64_t seed,
                                        std::size_t jobs = 1);

/// One class-incremental task: the global class ids it owns and a memory
/// dataset condensed over those classes (labels local to the task).
struct ContinualTask {
  std::vector<int32_t> classes;
  SyntheticDataset memory;
};

struct ContinualProtocol {
  std::vector<std::vector<int32_t>> task_splits;
  std::size_t ipc = 0;
  /// Row k (stage k+1) holds k+1 entries: accuracy on each seen task's
  /// classes after training on memories 1..k+1.
  std::vector<std::vector<double>> stage_task_accuracy;
  /// Accuracy over the union of classes seen through each stage.
  std::vector<double> stage_accuracy;

  std::string to_csv(uint64_t seed) const;  // stage, classes_seen, acc_mean, acc_std, seed
};

/// Stage k trains a fresh model from scratch on the union of memories 1..k
/// (classes remapped in task order) and evaluates on all classes seen so
/// far. Task class sets must be disjoint.
ContinualProtocol continual_eval(std::span<const ContinualTask> tasks, const RealDataset& test,
                                 Arch arch, std::size_t hidden, std::size_t epochs, uint64_t seed);

}  // namespace satm
