#include "satm/models.hpp"

#include <cmath>
#include <limits>

#include "satm/errors.hpp"
#include "satm/kernels.hpp"
#include "satm/rng.hpp"

namespace satm {

ModelSpec ModelSpec::softmax(std::size_t d, std::size_t C) {
  ModelSpec s;
  s.arch = Arch::softmax_regression;
  s.input_dim = d;
  s.classes = C;
  s.validate();
  return s;
}

ModelSpec ModelSpec::mlp(std::size_t d, std::size_t h, std::size_t C, Activation act) {
  ModelSpec s;
  s.arch = Arch::mlp1;
  s.input_dim = d;
  s.classes = C;
  s.hidden = h;
  s.activation = act;
  s.validate();
  return s;
}

std::size_t ModelSpec::param_count() const {
  if (arch == Arch::softmax_regression) return classes * input_dim + classes;
  return hidden * input_dim + hidden + classes * hidden + classes;
}

void ModelSpec::validate() const {
  if (input_dim < 1 || classes < 2) throw ContractViolation("ModelSpec: need input_dim >= 1, classes >= 2");
  if (arch == Arch::mlp1 && hidden < 1) throw ContractViolation("ModelSpec: mlp1 needs hidden >= 1");
  if (activation != Activation::tanh_act)
    throw ContractViolation("ModelSpec: activation must be twice differentiable (tanh)");
}

std::string ModelSpec::describe() const {
  if (arch == Arch::softmax_regression)
    return "softmax_regression(d=" + std::to_string(input_dim) + ",C=" + std::to_string(classes) + ")";
  return "mlp1(d=" + std::to_string(input_dim) + ",h=" + std::to_string(hidden) +
         ",C=" + std::to_string(classes) + ")";
}

LabeledBatch LabeledBatch::of(const Matrix& x, const std::vector<int32_t>& y,
                              const std::vector<double>* w) {
  LabeledBatch b;
  b.features = x.data.data();
  b.n = x.rows;
  b.dim = x.cols;
  b.labels = y.data();
  b.weights = (w && !w->empty()) ? w->data() : nullptr;
  return b;
}

namespace {

void check_inputs(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch) {
  spec.validate();
  if (theta.size() != spec.param_count())
    throw ContractViolation("parameter vector length " + std::to_string(theta.size()) +
                            " does not match spec param_count " + std::to_string(spec.param_count()));
  if (batch.n < 1) throw ContractViolation("batch must contain at least one sample");
  if (batch.dim != spec.input_dim) throw ContractViolation("batch feature dim does not match spec");
  for (std::size_t i = 0; i < batch.n; ++i) {
    const int32_t y = batch.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= spec.classes)
      throw ContractViolation("label out of class range");
  }
  for (double t : theta)
    if (!std::isfinite(t)) throw NumericError("non-finite parameter value");
  if (batch.weights) {
    for (std::size_t i = 0; i < batch.n; ++i)
      if (!(batch.weights[i] > 0.0) || !std::isfinite(batch.weights[i]))
        throw ContractViolation("sample weights must be positive and finite");
  }
}

double weight_total(const LabeledBatch& batch) {
  if (!batch.weights) return static_cast<double>(batch.n);
  double s = 0.0;
  for (std::size_t i = 0; i < batch.n; ++i) s += batch.weights[i];
  return s;
}

double sample_weight(const LabeledBatch& batch, std::size_t i, double total) {
  return batch.weights ? batch.weights[i] / total : 1.0 / total;
}

// Softmax with max subtraction; p sized C. Returns the per-sample CE loss,
// computed as log1p(S-1) - (a_y - m) which stays exact in the saturated
// regime (loss ~ exp(-margin)).
double softmax_and_loss(const std::vector<double>& logits, int32_t y, std::vector<double>& p) {
  const std::size_t C = logits.size();
  double m = logits[0];
  for (std::size_t c = 1; c < C; ++c) m = std::max(m, logits[c]);
  double S = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    p[c] = std::exp(logits[c] - m);
    S += p[c];
  }
  for (std::size_t c = 0; c < C; ++c) p[c] /= S;
  return std::log1p(S - 1.0) - (logits[static_cast<std::size_t>(y)] - m);
}

struct SoftmaxViews {
  const double* W;  // C x d
  const double* b;  // C
  static SoftmaxViews of(const ModelSpec& s, const double* theta) {
    return {theta, theta + s.classes * s.input_dim};
  }
};

struct MlpViews {
  const double* W1;  // h x d
  const double* b1;  // h
  const double* W2;  // C x h
  const double* b2;  // C
  static MlpViews of(const ModelSpec& s, const double* theta) {
    const double* w1 = theta;
    const double* b1 = w1 + s.hidden * s.input_dim;
    const double* w2 = b1 + s.hidden;
    const double* b2 = w2 + s.classes * s.hidden;
    return {w1, b1, w2, b2};
  }
};

enum ProductMask { kLoss = 1, kGrad = 2, kHvp = 4, kMixed = 8 };

// One fused pass computing any subset of {loss, grad, hvp, mixed} for a
// batch. grad/hvp outputs are accumulated with per-sample weights already
// applied; mixed rows follow the batch order.
void softmax_products(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
                      const ParamVector* v, unsigned mask, double* loss_out, ParamVector* grad_out,
                      ParamVector* hvp_out, Matrix* mixed_out) {
  const std::size_t d = spec.input_dim, C = spec.classes;
  const auto th = SoftmaxViews::of(spec, theta.data());
  const double total = weight_total(batch);
  const SoftmaxViews vv = v ? SoftmaxViews::of(spec, v->data()) : SoftmaxViews{nullptr, nullptr};

  std::vector<double> logits(C), p(C), u(C);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.n; ++i) {
    const double* x = batch.features + i * d;
    const int32_t y = batch.labels[i];
    const double w = sample_weight(batch, i, total);
    for (std::size_t c = 0; c < C; ++c) logits[c] = kernels::dot(th.W + c * d, x, d) + th.b[c];
    loss += w * softmax_and_loss(logits, y, p);

    if (mask & (kHvp | kMixed)) {
      // u = (diag(p) - p p^T) s with s = V x + vb: the softmax tangent.
      double pdots = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        u[c] = kernels::dot(vv.W + c * d, x, d) + vv.b[c];
        pdots += p[c] * u[c];
      }
      for (std::size_t c = 0; c < C; ++c) u[c] = p[c] * (u[c] - pdots);
    }
    if (mask & kGrad) {
      double* gW = grad_out->data();
      double* gb = gW + C * d;
      for (std::size_t c = 0; c < C; ++c) {
        const double r = w * (p[c] - (static_cast<int32_t>(c) == y ? 1.0 : 0.0));
        kernels::axpy(gW + c * d, r, x, d);
        gb[c] += r;
      }
    }
    if (mask & kHvp) {
      double* hW = hvp_out->data();
      double* hb = hW + C * d;
      for (std::size_t c = 0; c < C; ++c) {
        kernels::axpy(hW + c * d, w * u[c], x, d);
        hb[c] += w * u[c];
      }
    }
    if (mask & kMixed) {
      double* row = mixed_out->row(i);
      for (std::size_t c = 0; c < C; ++c) {
        const double r = p[c] - (static_cast<int32_t>(c) == y ? 1.0 : 0.0);
        kernels::axpy(row, w * r, vv.W + c * d, d);
        kernels::axpy(row, w * u[c], th.W + c * d, d);
      }
    }
  }
  if (loss_out) *loss_out = loss;
}

void mlp_products(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
                  const ParamVector* v, unsigned mask, double* loss_out, ParamVector* grad_out,
                  ParamVector* hvp_out, Matrix* mixed_out) {
  const std::size_t d = spec.input_dim, h = spec.hidden, C = spec.classes;
  const auto th = MlpViews::of(spec, theta.data());
  const double total = weight_total(batch);
  const MlpViews vv = v ? MlpViews::of(spec, v->data()) : MlpViews{nullptr, nullptr, nullptr, nullptr};

  std::vector<double> a(h), z(h), zp(h), s(h), q(h);
  std::vector<double> logits(C), p(C), r(C);
  std::vector<double> adot(h), zdot(h), sdot(h), qdot(h), ldot(C), rdot(C);
  double loss = 0.0;

  for (std::size_t i = 0; i < batch.n; ++i) {
    const double* x = batch.features + i * d;
    const int32_t y = batch.labels[i];
    const double w = sample_weight(batch, i, total);

    for (std::size_t j = 0; j < h; ++j) {
      a[j] = kernels::dot(th.W1 + j * d, x, d) + th.b1[j];
      z[j] = std::tanh(a[j]);
      zp[j] = 1.0 - z[j] * z[j];
    }
    for (std::size_t c = 0; c < C; ++c) logits[c] = kernels::dot(th.W2 + c * h, z.data(), h) + th.b2[c];
    loss += w * softmax_and_loss(logits, y, p);
    for (std::size_t c = 0; c < C; ++c) r[c] = p[c] - (static_cast<int32_t>(c) == y ? 1.0 : 0.0);

    const bool need_back = mask & (kGrad | kHvp | kMixed);
    if (need_back) {
      for (std::size_t j = 0; j < h; ++j) s[j] = 0.0;
      for (std::size_t c = 0; c < C; ++c) kernels::axpy(s.data(), r[c], th.W2 + c * h, h);
      for (std::size_t j = 0; j < h; ++j) q[j] = s[j] * zp[j];
    }
    if (mask & (kHvp | kMixed)) {
      // Forward tangent along v, then the tangent of the backward pass.
      for (std::size_t j = 0; j < h; ++j) {
        adot[j] = kernels::dot(vv.W1 + j * d, x, d) + vv.b1[j];
        zdot[j] = zp[j] * adot[j];
      }
      double pdots = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        ldot[c] = kernels::dot(vv.W2 + c * h, z.data(), h) + vv.b2[c] +
                  kernels::dot(th.W2 + c * h, zdot.data(), h);
        pdots += p[c] * ldot[c];
      }
      for (std::size_t c = 0; c < C; ++c) rdot[c] = p[c] * (ldot[c] - pdots);
      for (std::size_t j = 0; j < h; ++j) sdot[j] = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        kernels::axpy(sdot.data(), r[c], vv.W2 + c * h, h);
        kernels::axpy(sdot.data(), rdot[c], th.W2 + c * h, h);
      }
      for (std::size_t j = 0; j < h; ++j)
        qdot[j] = sdot[j] * zp[j] - 2.0 * s[j] * z[j] * zdot[j];
    }
    if (mask & kGrad) {
      double* gW1 = grad_out->data();
      double* gb1 = gW1 + h * d;
      double* gW2 = gb1 + h;
      double* gb2 = gW2 + C * h;
      for (std::size_t j = 0; j < h; ++j) {
        kernels::axpy(gW1 + j * d, w * q[j], x, d);
        gb1[j] += w * q[j];
      }
      for (std::size_t c = 0; c < C; ++c) {
        kernels::axpy(gW2 + c * h, w * r[c], z.data(), h);
        gb2[c] += w * r[c];
      }
    }
    if (mask & kHvp) {
      double* hW1 = hvp_out->data();
      double* hb1 = hW1 + h * d;
      double* hW2 = hb1 + h;
      double* hb2 = hW2 + C * h;
      for (std::size_t j = 0; j < h; ++j) {
        kernels::axpy(hW1 + j * d, w * qdot[j], x, d);
        hb1[j] += w * qdot[j];
      }
      for (std::size_t c = 0; c < C; ++c) {
        kernels::axpy(hW2 + c * h, w * rdot[c], z.data(), h);
        kernels::axpy(hW2 + c * h, w * r[c], zdot.data(), h);
        hb2[c] += w * rdot[c];
      }
    }
    if (mask & kMixed) {
      // d/dx of v . grad = V1^T q + W1^T qdot, per sample.
      double* row = mixed_out->row(i);
      for (std::size_t j = 0; j < h; ++j) {
        kernels::axpy(row, w * q[j], vv.W1 + j * d, d);
        kernels::axpy(row, w * qdot[j], th.W1 + j * d, d);
      }
    }
  }
  if (loss_out) *loss_out = loss;
}

void products(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
              const ParamVector* v, unsigned mask, double* loss_out, ParamVector* grad_out,
              ParamVector* hvp_out, Matrix* mixed_out) {
  check_inputs(spec, theta, batch);
  if ((mask & (kHvp | kMixed)) && (!v || v->size() != spec.param_count()))
    throw ContractViolation("direction vector length does not match spec param_count");
  if (grad_out) grad_out->assign(spec.param_count(), 0.0);
  if (hvp_out) hvp_out->assign(spec.param_count(), 0.0);
  if (mixed_out) *mixed_out = Matrix(batch.n, spec.input_dim, 0.0);
  if (spec.arch == Arch::softmax_regression)
    softmax_products(spec, theta, batch, v, mask, loss_out, grad_out, hvp_out, mixed_out);
  else
    mlp_products(spec, theta, batch, v, mask, loss_out, grad_out, hvp_out, mixed_out);
  if (loss_out && !std::isfinite(*loss_out)) throw NumericError("non-finite loss");
}

}  // namespace

double ce_loss(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch) {
  double loss = 0.0;
  products(spec, theta, batch, nullptr, kLoss, &loss, nullptr, nullptr, nullptr);
  return loss;
}

void ce_grad(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
             ParamVector& out) {
  products(spec, theta, batch, nullptr, kGrad, nullptr, &out, nullptr, nullptr);
}

ParamVector ce_grad(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch) {
  ParamVector out;
  ce_grad(spec, theta, batch, out);
  return out;
}

void ce_hvp(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
            const ParamVector& v, ParamVector& out) {
  products(spec, theta, batch, &v, kHvp, nullptr, nullptr, &out, nullptr);
}

ParamVector ce_hvp(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
                   const ParamVector& v) {
  ParamVector out;
  ce_hvp(spec, theta, batch, v, out);
  return out;
}

void ce_mixed_vp(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
                 const ParamVector& v, Matrix& out) {
  products(spec, theta, batch, &v, kMixed, nullptr, nullptr, nullptr, &out);
}

Matrix ce_mixed_vp(const ModelSpec& spec, const ParamVector& theta, const LabeledBatch& batch,
                   const ParamVector& v) {
  Matrix out;
  ce_mixed_vp(spec, theta, batch, v, out);
  return out;
}

ParamVector init_params(const ModelSpec& spec, uint64_t seed, InitScheme scheme) {
  spec.validate();
  ParamVector theta(spec.param_count(), 0.0);
  if (scheme == InitScheme::zeros) return theta;
  Rng rng(derive_seed(seed, "init-params"));
  const std::size_t d = spec.input_dim, h = spec.hidden, C = spec.classes;
  if (spec.arch == Arch::softmax_regression) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t k = 0; k < C * d; ++k) theta[k] = rng.uniform(-s, s);
  } else {
    const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(h));
    std::size_t k = 0;
    for (std::size_t j = 0; j < h * d; ++j) theta[k++] = rng.uniform(-s1, s1);
    k += h;  // b1 stays zero
    for (std::size_t j = 0; j < C * h; ++j) theta[k++] = rng.uniform(-s2, s2);
  }
  return theta;
}

void model_logits(const ModelSpec& spec, const ParamVector& theta, const double* x,
                  std::vector<double>& out) {
  const std::size_t d = spec.input_dim, h = spec.hidden, C = spec.classes;
  out.resize(C);
  if (spec.arch == Arch::softmax_regression) {
    const auto th = SoftmaxViews::of(spec, theta.data());
    for (std::size_t c = 0; c < C; ++c) out[c] = kernels::dot(th.W + c * d, x, d) + th.b[c];
  } else {
    const auto th = MlpViews::of(spec, theta.data());
    std::vector<double> z(h);
    for (std::size_t j = 0; j < h; ++j)
      z[j] = std::tanh(kernels::dot(th.W1 + j * d, x, d) + th.b1[j]);
    for (std::size_t c = 0; c < C; ++c) out[c] = kernels::dot(th.W2 + c * h, z.data(), h) + th.b2[c];
  }
}

}  // namespace satm
