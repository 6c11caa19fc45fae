#include "satm/kernels.hpp"

namespace satm::kernels {

namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double sq_norm_scalar(const double* a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * a[i];
  return acc;
}

double sq_dist_scalar(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

void axpy_scalar(double* y, double a, const double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scale_scalar(double* y, double a, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] *= a;
}

constexpr Ops kScalarOps{dot_scalar, sq_norm_scalar, sq_dist_scalar, axpy_scalar, scale_scalar};

struct Dispatch {
  const Ops* ops = &kScalarOps;
  Backend backend = Backend::scalar;
};

Dispatch detect();

Dispatch& dispatch() {
  static Dispatch d = detect();
  return d;
}

}  // namespace

#if defined(SATM_BUILD_AVX2)
const Ops& avx2_ops();  // kernels_avx2.cpp
#endif
#if defined(SATM_BUILD_NEON)
const Ops& neon_ops();  // kernels_neon.cpp
#endif

namespace {

bool backend_available(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
#if defined(SATM_BUILD_AVX2)
      return __builtin_cpu_supports("avx2");
#else
      return false;
#endif
    case Backend::neon:
#if defined(SATM_BUILD_NEON)
      return true;  // baseline on aarch64
#else
      return false;
#endif
  }
  return false;
}

const Ops* ops_for(Backend b) {
  switch (b) {
    case Backend::scalar:
      return &kScalarOps;
#if defined(SATM_BUILD_AVX2)
    case Backend::avx2:
      return &avx2_ops();
#endif
#if defined(SATM_BUILD_NEON)
    case Backend::neon:
      return &neon_ops();
#endif
    default:
      return nullptr;
  }
}

Dispatch detect() {
  Dispatch d;
  if (backend_available(Backend::avx2)) {
    d.ops = ops_for(Backend::avx2);
    d.backend = Backend::avx2;
  } else if (backend_available(Backend::neon)) {
    d.ops = ops_for(Backend::neon);
    d.backend = Backend::neon;
  }
  return d;
}

}  // namespace

const Ops& active() { return *dispatch().ops; }

Backend active_backend() { return dispatch().backend; }

const char* backend_name() {
  switch (dispatch().backend) {
    case Backend::avx2:
      return "avx2";
    case Backend::neon:
      return "neon";
    default:
      return "scalar";
  }
}

bool set_backend(Backend b) {
  if (!backend_available(b)) return false;
  dispatch().ops = ops_for(b);
  dispatch().backend = b;
  return true;
}

const Ops& scalar_ops() { return kScalarOps; }

}  // namespace satm::kernels
