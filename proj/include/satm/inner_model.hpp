#pragma once

#include <memory>
#include <span>

#include "satm/data.hpp"
#include "satm/models.hpp"

namespace satm {

/// Derivative products of the inner objective L(theta, batch(phi)) evaluated
/// on rows of a synthetic dataset selected by index. The unroll and the
/// hypergradient recursion are written against this interface so the
/// production cross-entropy models and test surrogates share one code path.
class InnerModel {
 public:
  virtual ~InnerModel() = default;

  virtual std::size_t param_count() const = 0;

  virtual double loss(const ParamVector& theta, const SyntheticDataset& ds,
                      std::span<const uint32_t> idx) const = 0;
  virtual void grad(const ParamVector& theta, const SyntheticDataset& ds,
                    std::span<const uint32_t> idx, ParamVector& out) const = 0;
  virtual void hvp(const ParamVector& theta, const SyntheticDataset& ds,
                   std::span<const uint32_t> idx, const ParamVector& v, ParamVector& out) const = 0;
  /// Rows follow idx order; row k is the feature gradient of v . grad for
  /// synthetic image idx[k].
  virtual void mixed_vp(const ParamVector& theta, const SyntheticDataset& ds,
                        std::span<const uint32_t> idx, const ParamVector& v, Matrix& out) const = 0;
};

/// Cross-entropy classifier inner objective (the production case).
class CeInnerModel final : public InnerModel {
 public:
  explicit CeInnerModel(const ModelSpec& spec);

  std::size_t param_count() const override { return spec_.param_count(); }
  const ModelSpec& spec() const { return spec_; }

  double loss(const ParamVector&, const SyntheticDataset&, std::span<const uint32_t>) const override;
  void grad(const ParamVector&, const SyntheticDataset&, std::span<const uint32_t>,
            ParamVector&) const override;
  void hvp(const ParamVector&, const SyntheticDataset&, std::span<const uint32_t>,
           const ParamVector&, ParamVector&) const override;
  void mixed_vp(const ParamVector&, const SyntheticDataset&, std::span<const uint32_t>,
                const ParamVector&, Matrix&) const override;

 private:
  ModelSpec spec_;
};

/// base loss + ridge/2 * ||theta||^2; used by the truncation-error probe to
/// make the inner problem locally strongly convex.
class RidgeInnerModel final : public InnerModel {
 public:
  RidgeInnerModel(std::shared_ptr<const InnerModel> base, double ridge);

  std::size_t param_count() const override { return base_->param_count(); }

  double loss(const ParamVector&, const SyntheticDataset&, std::span<const uint32_t>) const override;
  void grad(const ParamVector&, const SyntheticDataset&, std::span<const uint32_t>,
            ParamVector&) const override;
  void hvp(const ParamVector&, const SyntheticDataset&, std::span<const uint32_t>,
           const ParamVector&, ParamVector&) const override;
  void mixed_vp(const ParamVector&, const SyntheticDataset&, std::span<const uint32_t>,
                const ParamVector&, Matrix&) const override;

 private:
  std::shared_ptr<const InnerModel> base_;
  double ridge_;
};

}  // namespace satm
