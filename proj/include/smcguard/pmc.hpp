#pragma once

// Self-modifying-code machine-clear counter through perf_event_open. Measurement only; the
// guard never depends on it.

#include <linux/perf_event.h>
#include <sys/ioctl.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "smcguard/cpu_info.hpp"
#include "smcguard/error.hpp"

namespace smcguard {

struct SmcEventSpec {
  Vendor vendor = Vendor::intel;
  std::uint8_t event_code = 0;
  std::uint8_t umask = 0;
  std::string name;
  // Reference MSR addresses for direct programming; documentation only.
  std::uint32_t msr_global_ctrl = 0;
  std::uint32_t msr_event_select = 0;
  std::uint32_t msr_counter = 0;

  /// Raw config for PERF_TYPE_RAW on x86: event | umask << 8.
  std::uint64_t raw_config() const { return event_code | (std::uint64_t{umask} << 8); }
};

inline SmcEventSpec event_spec(Vendor vendor) {
  switch (vendor) {
    case Vendor::intel: return {vendor, 0xC3, 0x04, "MACHINE_CLEARS.SMC", 0x38F, 0x186, 0xC1};
    case Vendor::amd: return {vendor, 0x21, 0x00, "PIPELINE_RESTART_DUE_TO_SELF_MODIFYING_CODE", 0xC0000301, 0xC0010000, 0xC0010004};
    case Vendor::other: break;
  }
  throw Error(Errc::unknown_vendor, "no machine-clear event is known for this processor vendor");
}

namespace detail {

inline int perf_paranoid_level() {
  std::ifstream in("/proc/sys/kernel/perf_event_paranoid");
  int level = 2;
  in >> level;
  return level;
}

}  // namespace detail

/// Counts events of the calling thread in user mode.
class Counter {
 public:
  Counter() = default;
  Counter(const Counter&) = delete;
  Counter& operator=(const Counter&) = delete;
  Counter(Counter&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Counter& operator=(Counter&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }
  ~Counter() { close(); }

  bool open() const noexcept { return fd_ >= 0; }

  std::uint64_t read() const {
    if (fd_ < 0) {
      throw Error(Errc::invalid_argument, "read on a closed counter");
    }
    std::uint64_t value = 0;
    if (::read(fd_, &value, sizeof value) != static_cast<ssize_t>(sizeof value)) {
      throw Error(Errc::unsupported, std::string("counter read failed: ") + std::strerror(errno));
    }
    return value;
  }

  void close() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  friend Counter open_counter(const SmcEventSpec&);
  explicit Counter(int fd) : fd_(fd) {}
  int fd_ = -1;
};

inline Counter open_counter(const SmcEventSpec& spec) {
  perf_event_attr attr{};
  attr.size = sizeof attr;
  attr.type = PERF_TYPE_RAW;
  attr.config = spec.raw_config();
  attr.exclude_kernel = 1;
  attr.exclude_hv = 1;
  const long fd = ::syscall(SYS_perf_event_open, &attr, 0, -1, -1, 0);
  if (fd < 0) {
    const int err = errno;
    if (err == EACCES || err == EPERM) {
      throw Error(Errc::permission_denied,
                  "perf_event_open denied (kernel.perf_event_paranoid=" + std::to_string(detail::perf_paranoid_level()) +
                      "); lower it with `sysctl kernel.perf_event_paranoid=1` or grant CAP_PERFMON");
    }
    throw Error(Errc::unsupported, std::string("perf_event_open failed for ") + spec.name + ": " + std::strerror(err) +
                                       " (no PMU exposed, e.g. inside a VM)");
  }
  return Counter(static_cast<int>(fd));
}

inline void close(Counter& counter) { counter.close(); }

/// Events counted while `fn` runs.
template <class F>
std::uint64_t count_events(Counter& counter, F&& fn) {
  const std::uint64_t before = counter.read();
  fn();
  return counter.read() - before;
}

}  // namespace smcguard
