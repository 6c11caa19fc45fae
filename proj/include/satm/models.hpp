#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "satm/matrix.hpp"

// Small dense classifiers with exact analytic derivative products: loss,
// parameter gradient, Hessian-vector product, and the mixed second
// derivative against the batch features. These four products are all the
// unrolled hypergradient recursion consumes.

namespace satm {

enum class Arch { softmax_regression, mlp1 };

enum class Activation { tanh_act };  // must be twice differentiable everywhere

struct ModelSpec {
  Arch arch = Arch::softmax_regression;
  std::size_t input_dim = 0;   // d
  std::size_t classes = 0;     // C
  std::size_t hidden = 0;      // h, mlp1 only
  Activation activation = Activation::tanh_act;

  static ModelSpec softmax(std::size_t d, std::size_t C);
  static ModelSpec mlp(std::size_t d, std::size_t h, std::size_t C,
                       Activation act = Activation::tanh_act);

  // softmax_regression: C*d + C; mlp1: h*d + h + C*h + C
  std::size_t param_count() const;
  void validate() const;
  std::string describe() const;

  bool operator==(const ModelSpec&) const = default;
};

using ParamVector = std::vector<double>;

/// Non-owning view of a labeled batch. `weights`, when present, holds n
/// positive reals; the loss is the weighted mean sum(w_i l_i) / sum(w_i).
struct LabeledBatch {
  const double* features = nullptr;  // n x dim, row-major
  std::size_t n = 0;
  std::size_t dim = 0;
  const int32_t* labels = nullptr;
  const double* weights = nullptr;

  static LabeledBatch of(const Matrix& x, const std::vector<int32_t>& y,
                         const std::vector<double>* w = nullptr);
};

double ce_loss(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch);

void ce_grad(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
             ParamVector& out);
ParamVector ce_grad(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch);

/// out = grad^2_theta L_CE(theta, batch) . v
void ce_hvp(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
            const ParamVector& v, ParamVector& out);
ParamVector ce_hvp(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
                   const ParamVector& v);

/// Gradient w.r.t. batch.features of the scalar v . grad_theta L_CE.
/// Row i corresponds to batch sample i.
void ce_mixed_vp(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
                 const ParamVector& v, Matrix& out);
Matrix ce_mixed_vp(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
                   const ParamVector& v);

enum class InitScheme { scaled_uniform, zeros };

/// Deterministic init: weights uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases zero.
ParamVector init_params(const ModelSpec& spec, uint64_t seed,
                        InitScheme scheme = InitScheme::scaled_uniform);

/// Class logits for a single feature row (length spec.classes).
void model_logits(const ModelSpec& spec, const ParamVector& theta, const double* x,
                  std::vector<double>& out);

}  // namespace satm
