#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "satm/data.hpp"
#include "satm/models.hpp"
#include "satm/rng.hpp"

namespace satm {

struct TrainConfig {
  double step_size = 0.1;
  std::size_t batch_size = 32;
  std::size_t epochs = 8;
};

/// Checkpoints theta_0..theta_T of a model trained on real data; index 0 is
/// the initialization, one checkpoint per epoch.
struct ExpertTrajectory {
  ModelSpec spec;
  std::vector<ParamVector> checkpoints;
  std::size_t epochs_per_checkpoint = 1;
  std::string dataset_id;
  uint64_t seed = 0;
  TrainConfig train_config;
  double loss_initial = 0.0;  // full-set loss at checkpoints[0] / [T]
  double loss_final = 0.0;

  std::size_t horizon() const { return checkpoints.empty() ? 0 : checkpoints.size() - 1; }  // T
  void validate() const;
};

/// A matching target: start/end checkpoints of an expert sub-trajectory and
/// the normalizer delta = ||theta_start - theta_target||^2.
struct Segment {
  std::size_t start_index = 0;  // t
  std::size_t expert_span = 0;  // M
  ParamVector theta_start;
  ParamVector theta_target;
  double delta = 0.0;
};

/// Mini-batch SGD with a seeded per-epoch shuffle; records a checkpoint after
/// each full epoch. Throws NumericError naming the epoch if training
/// diverges, or if the full-set loss fails to improve end to end.
ExpertTrajectory train_expert(const ModelSpec& spec, const RealDataset& data, std::size_t epochs,
                              double step_size, std::size_t batch_size, uint64_t seed);

void save_trajectory(const ExpertTrajectory& traj, const std::filesystem::path& path);
ExpertTrajectory load_trajectory(const std::filesystem::path& path);

inline constexpr double kSegmentDeltaMin = 1e-12;

/// t uniform over {0..max_start}; resamples (bounded) while delta <=
/// kSegmentDeltaMin, then fails with NumericError("degenerate trajectory").
Segment sample_segment(const ExpertTrajectory& traj, std::size_t expert_span, std::size_t max_start,
                       Rng& rng);

}  // namespace satm
