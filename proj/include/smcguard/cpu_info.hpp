#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#if defined(__x86_64__)
#include <cpuid.h>
#endif

namespace smcguard {

enum class Vendor { intel, amd, other };

struct CpuInfo {
  std::string manufacturer;
  unsigned display_family = 0;
  unsigned display_model = 0;
  unsigned pmu_version = 0;
  unsigned pmu_counters = 0;
  unsigned pmu_width = 0;
  bool rdtscp = false;
  bool invariant_tsc = false;

  Vendor vendor() const {
    if (manufacturer == "GenuineIntel") return Vendor::intel;
    if (manufacturer == "AuthenticAMD") return Vendor::amd;
    return Vendor::other;
  }
};

inline CpuInfo query_cpu() {
  CpuInfo info;
#if defined(__x86_64__)
  unsigned a = 0, b = 0, c = 0, d = 0;
  __cpuid(0, a, b, c, d);
  const unsigned max_leaf = a;
  char vendor[13] = {};
  std::memcpy(vendor, &b, 4);
  std::memcpy(vendor + 4, &d, 4);
  std::memcpy(vendor + 8, &c, 4);
  info.manufacturer = vendor;

  __cpuid(1, a, b, c, d);
  const unsigned family = (a >> 8) & 0xF;
  const unsigned model = (a >> 4) & 0xF;
  info.display_family = family == 0xF ? family + ((a >> 20) & 0xFF) : family;
  info.display_model = (family == 0x6 || family == 0xF) ? model + (((a >> 16) & 0xF) << 4) : model;

  if (max_leaf >= 0xA) {
    __cpuid_count(0xA, 0, a, b, c, d);
    info.pmu_version = a & 0xFF;
    info.pmu_counters = (a >> 8) & 0xFF;
    info.pmu_width = (a >> 16) & 0xFF;
  }

  __cpuid(0x80000000, a, b, c, d);
  const unsigned max_ext = a;
  if (max_ext >= 0x80000001) {
    __cpuid(0x80000001, a, b, c, d);
    info.rdtscp = (d >> 27) & 1U;
  }
  if (max_ext >= 0x80000007) {
    __cpuid(0x80000007, a, b, c, d);
    info.invariant_tsc = (d >> 8) & 1U;
  }
#else
  info.manufacturer = "unknown";
#endif
  return info;
}

}  // namespace smcguard
