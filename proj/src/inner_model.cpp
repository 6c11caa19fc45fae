#include "satm/inner_model.hpp"

#include <algorithm>

#include "satm/errors.hpp"
#include "satm/kernels.hpp"

namespace satm {

namespace {

bool is_identity(std::span<const uint32_t> idx, std::size_t n) {
  if (idx.size() != n) return false;
  for (std::size_t i = 0; i < n; ++i)
    if (idx[i] != i) return false;
  return true;
}

// Full-batch schedules select all rows in order; serve a view straight into
// the dataset then, and gather otherwise.
struct GatheredBatch {
  Matrix storage_x;
  std::vector<int32_t> storage_y;
  LabeledBatch batch;

  GatheredBatch(const SyntheticDataset& ds, std::span<const uint32_t> idx) {
    if (idx.empty()) throw ContractViolation("inner batch: empty index list");
    if (is_identity(idx, ds.size())) {
      batch = LabeledBatch::of(ds.images, ds.labels);
      return;
    }
    storage_x = Matrix(idx.size(), ds.dim());
    storage_y.resize(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= ds.size()) throw ContractViolation("inner batch: index out of range");
      const double* from = ds.images.row(idx[k]);
      std::copy(from, from + ds.dim(), storage_x.row(k));
      storage_y[k] = ds.labels[idx[k]];
    }
    batch = LabeledBatch::of(storage_x, storage_y);
  }
};

}  // namespace

CeInnerModel::CeInnerModel(const ModelSpec& spec) : spec_(spec) { spec_.validate(); }

double CeInnerModel::loss(const ParamVector& theta, const SyntheticDataset& ds,
                          std::span<const uint32_t> idx) const {
  GatheredBatch g(ds, idx);
  return ce_loss(spec_, theta, g.batch);
}

void CeInnerModel::grad(const ParamVector& theta, const SyntheticDataset& ds,
                        std::span<const uint32_t> idx, ParamVector& out) const {
  GatheredBatch g(ds, idx);
  ce_grad(spec_, theta, g.batch, out);
}

void CeInnerModel::hvp(const ParamVector& theta, const SyntheticDataset& ds,
                       std::span<const uint32_t> idx, const ParamVector& v, ParamVector& out) const {
  GatheredBatch g(ds, idx);
  ce_hvp(spec_, theta, g.batch, v, out);
}

void CeInnerModel::mixed_vp(const ParamVector& theta, const SyntheticDataset& ds,
                            std::span<const uint32_t> idx, const ParamVector& v, Matrix& out) const {
  GatheredBatch g(ds, idx);
  ce_mixed_vp(spec_, theta, g.batch, v, out);
}

RidgeInnerModel::RidgeInnerModel(std::shared_ptr<const InnerModel> base, double ridge)
    : base_(std::move(base)), ridge_(ridge) {
  if (!base_) throw ContractViolation("RidgeInnerModel: null base model");
  if (ridge_ < 0.0) throw ContractViolation("RidgeInnerModel: ridge must be >= 0");
}

double RidgeInnerModel::loss(const ParamVector& theta, const SyntheticDataset& ds,
                             std::span<const uint32_t> idx) const {
  return base_->loss(theta, ds, idx) +
         0.5 * ridge_ * kernels::sq_norm(theta.data(), theta.size());
}

void RidgeInnerModel::grad(const ParamVector& theta, const SyntheticDataset& ds,
                           std::span<const uint32_t> idx, ParamVector& out) const {
  base_->grad(theta, ds, idx, out);
  kernels::axpy(out.data(), ridge_, theta.data(), out.size());
}

void RidgeInnerModel::hvp(const ParamVector& theta, const SyntheticDataset& ds,
                          std::span<const uint32_t> idx, const ParamVector& v, ParamVector& out) const {
  base_->hvp(theta, ds, idx, v, out);
  kernels::axpy(out.data(), ridge_, v.data(), out.size());
}

void RidgeInnerModel::mixed_vp(const ParamVector& theta, const SyntheticDataset& ds,
                               std::span<const uint32_t> idx, const ParamVector& v, Matrix& out) const {
  base_->mixed_vp(theta, ds, idx, v, out);  // ridge term has no data dependence
}

}  // namespace satm
