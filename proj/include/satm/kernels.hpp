#pragma once

#include <cstddef>

// Vector arithmetic kernels used by every numeric module. A scalar reference
// implementation always exists; an AVX2 (x86-64) or NEON (aarch64) variant is
// selected once at runtime when the CPU supports it. Element-wise kernels
// (axpy, scale) are bit-identical across backends; reductions (dot, sq_norm,
// sq_dist) may differ by accumulation order within ~1e-13 relative.

namespace satm::kernels {

enum class Backend { scalar, avx2, neon };

struct Ops {
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sq_norm)(const double* a, std::size_t n);
  double (*sq_dist)(const double* a, const double* b, std::size_t n);
  void (*axpy)(double* y, double a, const double* x, std::size_t n);  // y += a*x
  void (*scale)(double* y, double a, std::size_t n);                  // y *= a
};

const Ops& active();
Backend active_backend();
const char* backend_name();

/// Force a specific backend (tests). Returns false if unavailable on this CPU.
bool set_backend(Backend b);

/// The scalar reference implementations, always available.
const Ops& scalar_ops();

inline double dot(const double* a, const double* b, std::size_t n) { return active().dot(a, b, n); }
inline double sq_norm(const double* a, std::size_t n) { return active().sq_norm(a, n); }
inline double sq_dist(const double* a, const double* b, std::size_t n) { return active().sq_dist(a, b, n); }
inline void axpy(double* y, double a, const double* x, std::size_t n) { active().axpy(y, a, x, n); }
inline void scale(double* y, double a, std::size_t n) { active().scale(y, a, n); }

}  // namespace satm::kernels
