#pragma once

// Timer suite: cycle counters and POSIX clocks behind one TimerId, calibration statistics
// and the per-query timer selection used by the guard.

#include <sched.h>
#include <time.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#if defined(__x86_64__)
#include <x86intrin.h>
#endif

#include "smcguard/cpu_info.hpp"
#include "smcguard/error.hpp"

namespace smcguard {

enum class TimerId : std::uint8_t { tsc, tscp, monotonic, boottime, realtime_utc, coarse_tick };

inline constexpr std::array<TimerId, 6> kAllTimers = {TimerId::tsc,      TimerId::tscp,         TimerId::monotonic,
                                                      TimerId::boottime, TimerId::realtime_utc, TimerId::coarse_tick};

inline constexpr std::string_view timer_name(TimerId t) {
  switch (t) {
    case TimerId::tsc: return "TSC";
    case TimerId::tscp: return "TSCP";
    case TimerId::monotonic: return "MONOTONIC";
    case TimerId::boottime: return "BOOTTIME";
    case TimerId::realtime_utc: return "REALTIME_UTC";
    case TimerId::coarse_tick: return "COARSE_TICK";
  }
  return "?";
}

inline TimerId parse_timer(std::string_view name) {
  for (TimerId t : kAllTimers) {
    if (timer_name(t) == name) return t;
  }
  throw Error(Errc::unavailable_timer, "unknown timer '" + std::string(name) + "'");
}

enum class TimeUnit { cycles, nanoseconds };

constexpr TimeUnit timer_unit(TimerId t) {
  return (t == TimerId::tsc || t == TimerId::tscp) ? TimeUnit::cycles : TimeUnit::nanoseconds;
}

/// Counter-style timers with sub-microsecond resolution.
constexpr bool fine_grained(TimerId t) { return t != TimerId::coarse_tick; }

struct TimerSample {
  TimerId timer = TimerId::monotonic;
  std::uint64_t value = 0;
  TimeUnit unit = TimeUnit::nanoseconds;
  std::uint64_t resolution = 1;  // in `unit`
};

namespace detail {

inline clockid_t posix_clock(TimerId t) {
  switch (t) {
    case TimerId::monotonic: return CLOCK_MONOTONIC;
    case TimerId::boottime: return CLOCK_BOOTTIME;
    case TimerId::realtime_utc: return CLOCK_REALTIME;
    case TimerId::coarse_tick: return CLOCK_MONOTONIC_COARSE;
    default: return CLOCK_MONOTONIC;
  }
}

inline std::uint64_t clock_ns(clockid_t id) {
  timespec ts{};
  ::clock_gettime(id, &ts);
  return static_cast<std::uint64_t>(ts.tv_sec) * 1'000'000'000ULL + static_cast<std::uint64_t>(ts.tv_nsec);
}

}  // namespace detail

/// TSC read that waits for all earlier instructions to execute (RDTSCP) and keeps later
/// ones from starting before it (LFENCE).
inline std::uint64_t serialized_cycles() {
#if defined(__x86_64__)
  unsigned aux = 0;
  const std::uint64_t v = __rdtscp(&aux);
  _mm_lfence();
  return v;
#else
  throw Error(Errc::unsupported, "cycle counter needs x86-64; use MONOTONIC");
#endif
}

/// Availability of each TimerId on this host, probed once.
struct TimerAvailability {
  std::array<bool, kAllTimers.size()> present{};

  bool operator[](TimerId t) const { return present[static_cast<std::size_t>(t)]; }
  void set(TimerId t, bool v) { present[static_cast<std::size_t>(t)] = v; }

  static TimerAvailability all() {
    TimerAvailability a;
    a.present.fill(true);
    return a;
  }
};

inline const TimerAvailability& probe_timers() {
  static const TimerAvailability avail = [] {
    TimerAvailability a;
#if defined(__x86_64__)
    a.set(TimerId::tsc, true);
    a.set(TimerId::tscp, query_cpu().rdtscp);
#endif
    for (TimerId t : {TimerId::monotonic, TimerId::boottime, TimerId::realtime_utc, TimerId::coarse_tick}) {
      timespec res{};
      a.set(t, ::clock_getres(detail::posix_clock(t), &res) == 0);
    }
    return a;
  }();
  return avail;
}

inline std::uint64_t timer_resolution(TimerId t) {
  if (timer_unit(t) == TimeUnit::cycles) {
    return 1;
  }
  timespec res{};
  ::clock_getres(detail::posix_clock(t), &res);
  return static_cast<std::uint64_t>(res.tv_sec) * 1'000'000'000ULL + static_cast<std::uint64_t>(res.tv_nsec);
}

/// Raw reading in the timer's native unit, without availability checks.
inline std::uint64_t read_value(TimerId t) {
  switch (t) {
#if defined(__x86_64__)
    case TimerId::tsc: return __rdtsc();
    case TimerId::tscp: return serialized_cycles();
#else
    case TimerId::tsc:
    case TimerId::tscp: throw Error(Errc::unavailable_timer, "no cycle counter on this ISA");
#endif
    default: return detail::clock_ns(detail::posix_clock(t));
  }
}

inline TimerSample read(TimerId t) {
  if (!probe_timers()[t]) {
    throw Error(Errc::unavailable_timer, std::string(timer_name(t)) + " is not available on this host");
  }
  return {t, read_value(t), timer_unit(t), timer_resolution(t)};
}

/// Elapsed native units for one call of `fn`.
template <class F>
std::uint64_t time_once(TimerId t, F&& fn) {
  const std::uint64_t begin = read_value(t);
  fn();
  const std::uint64_t end = read_value(t);
  return end >= begin ? end - begin : 0;
}

// ---------------------------------------------------------------------------

/// Pins the calling thread to the CPU it is running on for the guard's lifetime.
class PinGuard {
 public:
  explicit PinGuard(bool enabled = true, int cpu = -1) {
    if (!enabled) return;
    if (::sched_getaffinity(0, sizeof saved_, &saved_) != 0) return;
    const int target = cpu >= 0 ? cpu : ::sched_getcpu();
    if (target < 0) return;
    cpu_set_t one;
    CPU_ZERO(&one);
    CPU_SET(target, &one);
    active_ = ::sched_setaffinity(0, sizeof one, &one) == 0;
  }
  PinGuard(const PinGuard&) = delete;
  PinGuard& operator=(const PinGuard&) = delete;
  ~PinGuard() {
    if (active_) ::sched_setaffinity(0, sizeof saved_, &saved_);
  }
  bool active() const noexcept { return active_; }

 private:
  cpu_set_t saved_{};
  bool active_ = false;
};

struct CalibrationStats {
  TimerId timer = TimerId::monotonic;
  std::size_t runs = 0;
  std::uint64_t min = 0;
  double avg = 0;
  std::uint64_t max = 0;
  std::uint64_t q01 = 0;
  std::uint64_t q50 = 0;
  std::uint64_t q99 = 0;

  bool operator==(const CalibrationStats&) const = default;
};

/// Nearest-rank quantile of sorted data: the smallest value with at least p*N samples at
/// or below it.
inline std::uint64_t nearest_rank(std::span<const std::uint64_t> sorted, double p) {
  if (sorted.empty()) {
    throw Error(Errc::invalid_argument, "quantile of no samples");
  }
  const auto n = static_cast<double>(sorted.size());
  const auto rank = static_cast<std::size_t>(std::ceil(p * n));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

inline CalibrationStats summarize(TimerId t, std::vector<std::uint64_t> samples) {
  if (samples.empty()) {
    throw Error(Errc::invalid_argument, "calibration needs at least one run");
  }
  std::sort(samples.begin(), samples.end());
  CalibrationStats s;
  s.timer = t;
  s.runs = samples.size();
  s.min = samples.front();
  s.max = samples.back();
  long double total = 0;
  for (auto v : samples) total += v;
  s.avg = static_cast<double>(total / samples.size());
  s.q01 = nearest_rank(samples, 0.01);
  s.q50 = nearest_rank(samples, 0.50);
  s.q99 = nearest_rank(samples, 0.99);
  return s;
}

/// Times `runs` executions of `workload` with `timer`. Exceptions from the workload abort
/// calibration and propagate.
template <class F>
CalibrationStats calibrate(TimerId timer, F&& workload, std::size_t runs, bool pin = true) {
  if (runs == 0) {
    throw Error(Errc::invalid_argument, "calibration needs at least one run");
  }
  if (!probe_timers()[timer]) {
    throw Error(Errc::unavailable_timer, std::string(timer_name(timer)) + " is not available on this host");
  }
  PinGuard pinned(pin);
  std::vector<std::uint64_t> samples;
  samples.reserve(runs);
  for (std::size_t i = 0; i < runs; ++i) {
    samples.push_back(time_once(timer, workload));
  }
  return summarize(timer, std::move(samples));
}

/// Line form: `timer=TSCP runs=3 min=1 avg=2.000 max=3 q01=1 q50=2 q99=3`.
inline std::string to_line(const CalibrationStats& s) {
  char avg[64];
  std::snprintf(avg, sizeof avg, "%.3f", s.avg);
  std::ostringstream os;
  os << "timer=" << timer_name(s.timer) << " runs=" << s.runs << " min=" << s.min << " avg=" << avg
     << " max=" << s.max << " q01=" << s.q01 << " q50=" << s.q50 << " q99=" << s.q99;
  return os.str();
}

inline CalibrationStats parse_stats_line(std::string_view line) {
  CalibrationStats s;
  std::istringstream is{std::string(line)};
  std::string tok;
  unsigned seen = 0;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = tok.substr(0, eq);
    const std::string val = tok.substr(eq + 1);
    try {
      if (key == "timer") s.timer = parse_timer(val), seen |= 1;
      else if (key == "runs") s.runs = std::stoull(val), seen |= 2;
      else if (key == "min") s.min = std::stoull(val), seen |= 4;
      else if (key == "avg") s.avg = std::stod(val), seen |= 8;
      else if (key == "max") s.max = std::stoull(val), seen |= 16;
      else if (key == "q01") s.q01 = std::stoull(val), seen |= 32;
      else if (key == "q50") s.q50 = std::stoull(val), seen |= 64;
      else if (key == "q99") s.q99 = std::stoull(val), seen |= 128;
    } catch (const std::logic_error&) {
      throw Error(Errc::invalid_argument, "bad value for '" + key + "' in stats line");
    }
  }
  if (seen != 255) {
    throw Error(Errc::invalid_argument, "stats line is missing fields");
  }
  return s;
}

// ---------------------------------------------------------------------------

struct TimerPolicy {
  std::vector<TimerId> preference = {TimerId::tscp, TimerId::monotonic, TimerId::realtime_utc};
  /// Rotate query by query among the available fine-grained timers of `preference`.
  bool rotate = false;
};

inline TimerId timer_for_query(std::size_t t, const TimerPolicy& policy, const TimerAvailability& avail) {
  if (policy.preference.empty()) {
    throw Error(Errc::invalid_argument, "timer policy has no preferences");
  }
  std::vector<TimerId> usable;
  for (TimerId id : policy.preference) {
    if (avail[id]) usable.push_back(id);
  }
  if (usable.empty()) {
    throw Error(Errc::no_timer_available, "none of the preferred timers is available");
  }
  if (policy.rotate) {
    std::vector<TimerId> fine;
    std::copy_if(usable.begin(), usable.end(), std::back_inserter(fine), fine_grained);
    if (!fine.empty()) {
      return fine[t % fine.size()];
    }
  }
  return usable.front();
}

inline TimerId timer_for_query(std::size_t t, const TimerPolicy& policy = {}) {
  return timer_for_query(t, policy, probe_timers());
}

struct Disturbance {
  double runs = 0;
  double fraction = 0;
};

/// Rough count of perturbed runs, runs * (avg - min) / max.
inline Disturbance disturbance_estimate(double avg, double min, double max, std::size_t runs) {
  if (!(max > 0)) {
    throw Error(Errc::invalid_argument, "disturbance estimate needs max > 0");
  }
  Disturbance d;
  d.runs = static_cast<double>(runs) * (avg - min) / max;
  d.fraction = d.runs / static_cast<double>(runs);
  return d;
}

inline Disturbance disturbance_estimate(const CalibrationStats& s, std::size_t runs) {
  return disturbance_estimate(s.avg, static_cast<double>(s.min), static_cast<double>(s.max), runs);
}

}  // namespace smcguard
