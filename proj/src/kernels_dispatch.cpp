#include <cstdlib>
#include <cstring>

#include "mematch/error.hpp"
#include "mematch/kernels.hpp"
#include "mematch/log.hpp"

namespace mematch::kernels {

extern const Kernels<float> kScalarKernelsF32;
extern const Kernels<double> kScalarKernelsF64;

#ifdef MEMATCH_BUILD_AVX2
extern const Kernels<float> kAvx2KernelsF32;
extern const Kernels<double> kAvx2KernelsF64;
#endif

namespace {

bool cpu_has_avx2() {
#if defined(MEMATCH_BUILD_AVX2) && (defined(__x86_64__) || defined(_M_X64))
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Lane pick_initial_lane() {
  Lane lane = cpu_has_avx2() ? Lane::avx2 : Lane::scalar;
  const char* env = std::getenv("MEMATCH_SIMD");
  if (env != nullptr) {
    if (std::strcmp(env, "scalar") == 0) {
      lane = Lane::scalar;
    } else if (std::strcmp(env, "avx2") == 0) {
      if (!cpu_has_avx2()) {
        log::warn("MEMATCH_SIMD=avx2 requested but unsupported; using scalar lane");
        lane = Lane::scalar;
      } else {
        lane = Lane::avx2;
      }
    } else {
      log::warn(concat("unknown MEMATCH_SIMD value '", env, "'; using ", lane_name(lane)));
    }
  }
  return lane;
}

Lane g_lane = pick_initial_lane();

}  // namespace

const char* lane_name(Lane lane) {
  return lane == Lane::avx2 ? "avx2" : "scalar";
}

bool lane_supported(Lane lane) {
  return lane == Lane::scalar || cpu_has_avx2();
}

Lane active_lane() { return g_lane; }

void set_active_lane(Lane lane) {
  if (!lane_supported(lane)) {
    throw ValueError(concat("kernel lane '", lane_name(lane), "' not supported on this CPU"));
  }
  g_lane = lane;
}

template <>
const Kernels<float>& table_for<float>(Lane lane) {
#ifdef MEMATCH_BUILD_AVX2
  if (lane == Lane::avx2) return kAvx2KernelsF32;
#endif
  (void)lane;
  return kScalarKernelsF32;
}

template <>
const Kernels<double>& table_for<double>(Lane lane) {
#ifdef MEMATCH_BUILD_AVX2
  if (lane == Lane::avx2) return kAvx2KernelsF64;
#endif
  (void)lane;
  return kScalarKernelsF64;
}

template <>
const Kernels<float>& active<float>() {
  return table_for<float>(g_lane);
}

template <>
const Kernels<double>& active<double>() {
  return table_for<double>(g_lane);
}

}  // namespace mematch::kernels
