#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "satm/matrix.hpp"

namespace satm {

struct RealDataset {
  Matrix features;              // n x d
  std::vector<int32_t> labels;  // in [0, class_count)
  std::size_t class_count = 0;
  std::string split;  // "train" | "test"
  std::string id;

  std::size_t size() const { return features.rows; }
  std::size_t dim() const { return features.cols; }
  void validate() const;
  std::vector<std::size_t> class_indices(int32_t cls) const;
};

/// The learnable dataset: C*ipc feature rows in class-major order (rows
/// [c*ipc, (c+1)*ipc) belong to class c; labels are fixed) plus the learnable
/// inner step size.
struct SyntheticDataset {
  Matrix images;  // (class_count * ipc) x d
  std::vector<int32_t> labels;
  std::size_t class_count = 0;
  std::size_t ipc = 0;
  double inner_lr = 0.01;
  std::string provenance;  // config hash of the producing run

  std::size_t size() const { return images.rows; }
  std::size_t dim() const { return images.cols; }
  void validate() const;
};

struct ZcaTransform {
  std::vector<double> mean;
  Matrix whitening;  // d x d, symmetric positive definite
  double eps = 0.0;
  std::vector<double> eigenvalues;  // of the centered train covariance, ascending
  bool underdetermined = false;     // fit saw n <= d
};

/// Gaussian mixture with unit covariance and class means on a centered
/// regular simplex with edge length `mean_separation` (so every pair of class
/// means is exactly that far apart). Requires classes - 1 <= d. Train/test
/// splits draw from disjoint streams derived from (seed, split).
RealDataset make_gaussian_mixture(std::size_t classes, std::size_t d, double mean_separation,
                                  std::size_t n_per_class, uint64_t seed, const std::string& split);

/// IDX (big-endian) digit data. Features scaled to [0,1]; optional block-mean
/// downscale to side length `downscale_to` (blocks follow floor(i*R/S)
/// boundaries, so non-divisible sizes get near-equal blocks). Samples are
/// regrouped class-major, keeping file order within each class, truncated to
/// limit_per_class when given.
RealDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                     std::optional<std::size_t> limit_per_class = std::nullopt,
                     std::optional<std::size_t> downscale_to = std::nullopt);

/// W = U (Lambda + eps I)^(-1/2) U^T from the eigendecomposition of the
/// centered covariance of dataset.features.
ZcaTransform fit_zca(const RealDataset& dataset, double eps);
Matrix apply_zca(const ZcaTransform& t, const Matrix& features);
Matrix unapply_zca(const ZcaTransform& t, const Matrix& features);

// File formats (bit-exact round trips; see README for byte layouts).
void save_real(const RealDataset& ds, const std::filesystem::path& path);
RealDataset load_real(const std::filesystem::path& path);
void save_synthetic(const SyntheticDataset& ds, const std::filesystem::path& path);
SyntheticDataset load_synthetic(const std::filesystem::path& path);

}  // namespace satm
