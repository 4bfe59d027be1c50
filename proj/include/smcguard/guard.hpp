#pragma once

// Tamper-proofing predicate over registered checksum units.
//
// A unit is a protected region plus a loaded kernel. precompute_states() stores the
// oracle's expected final state for each initial selector and a timing window per timer;
// verify() runs the native kernel for every selector in the table, scores the run time and
// combines both checks into a verdict. Kernel crashes and hangs are contained and count as
// tamper evidence.

#include <asm/prctl.h>
#include <pthread.h>
#include <sys/auxv.h>
#include <signal.h>
#include <sys/syscall.h>
#include <time.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <csetjmp>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "smcguard/checksum_oracle.hpp"
#include "smcguard/clocks.hpp"
#include "smcguard/error.hpp"
#include "smcguard/exec_memory.hpp"
#include "smcguard/kernel.hpp"
#include "smcguard/x64_encoder.hpp"

#ifndef sigev_notify_thread_id
#define sigev_notify_thread_id _sigev_un._tid
#endif

namespace smcguard {

enum class Action { proceed, warn, fatal, recover };

inline const char* action_name(Action a) {
  switch (a) {
    case Action::proceed: return "continue";
    case Action::warn: return "warn";
    case Action::fatal: return "fatal";
    case Action::recover: return "recover";
  }
  return "?";
}

struct GuardPolicy {
  /// Consecutive failed verifies that escalate from warn to `action`.
  unsigned K = 3;
  Action action = Action::fatal;
  /// Operating range the thresholds were calibrated for. Recorded, not enforced.
  std::string cpu_usage_band = "uncontended, pinned";
  /// Accepted score window as multiples of the calibration q01 and q99.
  double window_low = 0.8;
  double window_high = 1.5;
  std::size_t calibration_runs = 200;
  /// Timed runs per selector in one verify; the score is the minimum.
  std::size_t repeats = 3;
  TimerPolicy timers;
  std::chrono::milliseconds watchdog{2000};

  void validate() const {
    if (K < 1) throw Error(Errc::invalid_argument, "K must be at least 1");
    if (!(window_low > 0) || !(window_low < window_high)) {
      throw Error(Errc::invalid_argument, "timing window needs 0 < low < high");
    }
    if (action == Action::proceed) throw Error(Errc::invalid_argument, "escalation action cannot be continue");
    if (calibration_runs < 1 || repeats < 1) throw Error(Errc::invalid_argument, "runs must be positive");
  }
};

struct TimingWindow {
  std::uint64_t lower = 1;
  std::uint64_t upper = 1;
  CalibrationStats stats;

  bool contains(std::uint64_t score) const { return score >= lower && score <= upper; }
};

struct ValidationTable {
  std::map<Selector, ChecksumState> entries;
  std::map<TimerId, TimingWindow> timing;
};

struct PredicateResult {
  bool checksum_ok = false;
  bool timing_ok = false;
  bool verdict = false;
  std::uint64_t score = 0;
  TimerId timer = TimerId::monotonic;
  std::size_t consecutive_failures = 0;
  /// Signal that stopped the kernel (SIGALRM for the watchdog), 0 if it returned.
  int fault = 0;
};

using UnitId = std::size_t;

/// Opcode-byte bits a legitimate toggle can change (field bits 0 and 2).
inline constexpr std::uint8_t kSiteFieldMask = 5U << 3;

inline Action policy_update(const PredicateResult& result, const GuardPolicy& policy) {
  if (result.verdict) return Action::proceed;
  return result.consecutive_failures >= policy.K ? policy.action : Action::warn;
}

namespace detail {

using Trampoline = std::uint64_t (*)(const std::byte*, const std::byte*, std::uint64_t, KernelFn, void* stack_top);

/// Calls the kernel on a private stack with every callee-saved register zeroed, so a
/// derailed kernel finds no pointers into the caller's frames.
inline std::vector<std::uint8_t> trampoline_code() {
  using namespace x64;
  CodeBuffer cb;
  constexpr Reg saved[] = {Reg::rbx, Reg::rbp, Reg::r12, Reg::r13, Reg::r14, Reg::r15};
  for (Reg r : saved) cb.emit(ins::push(r));
  cb.emit(ins::mov(Reg::rbp, Reg::rsp));
  cb.emit(ins::mov(Reg::rsp, Reg::r8));
  cb.emit(ins::mov(Reg::rax, Reg::rcx));
  for (Reg r : {Reg::rbx, Reg::rcx, Reg::r8, Reg::r9, Reg::r10, Reg::r11, Reg::r12, Reg::r13, Reg::r14, Reg::r15}) {
    cb.emit(ins::zero(r));
  }
  cb.emit(ins::call(Reg::rax));
  cb.emit(ins::mov(Reg::rsp, Reg::rbp));
  for (auto it = std::rbegin(saved); it != std::rend(saved); ++it) cb.emit(ins::pop(*it));
  cb.emit(ins::ret());
  return std::move(cb).take();
}

// A derailed kernel can change thread state without faulting: a null selector popped into
// FS clears the thread pointer (and with it TLS, errno and the glibc pointer guard), and a
// stray std, ldmxcsr or fldcw leaks out through DF, MXCSR or the x87 control word. The thread
// pointer is repaired with raw syscalls or rd/wrfsbase, neither of which touches TLS.

#if defined(__has_attribute) && __has_attribute(no_stack_protector)
#define SMCGUARD_NO_CANARY __attribute__((no_stack_protector))
#else
#define SMCGUARD_NO_CANARY
#endif

inline long raw_syscall(long n, long a = 0, long b = 0) {
  long r;
  asm volatile("syscall" : "=a"(r) : "a"(n), "D"(a), "S"(b) : "rcx", "r11", "memory");
  return r;
}

inline bool has_fsgsbase() {
  static const bool yes = (::getauxval(AT_HWCAP2) & 2) != 0;
  return yes;
}

inline std::uintptr_t read_fs_base() {
  std::uintptr_t v = 0;
  raw_syscall(SYS_arch_prctl, ARCH_GET_FS, reinterpret_cast<long>(&v));
  return v;
}

inline void repair_fs_base(std::uintptr_t want, bool fast) {
  if (fast) {
    std::uintptr_t cur;
    asm volatile("rdfsbase %0" : "=r"(cur));
    if (cur != want) asm volatile("wrfsbase %0" : : "r"(want) : "memory");
    return;
  }
  raw_syscall(SYS_arch_prctl, ARCH_SET_FS, static_cast<long>(want));
}

struct FloatControl {
  std::uint32_t mxcsr = 0;
  std::uint16_t fpu_cw = 0;

  static FloatControl save() {
    FloatControl f;
    asm volatile("stmxcsr %0" : "=m"(f.mxcsr));
    asm volatile("fnstcw %0" : "=m"(f.fpu_cw));
    return f;
  }
  void restore() const {
    asm volatile("cld" ::: "cc");
    asm volatile("ldmxcsr %0" : : "m"(mxcsr));
    asm volatile("fldcw %0" : : "m"(fpu_cw));
  }
};

// Thread pointers by tid, readable from the signal handler while FS is broken.
struct ThreadPointerTable {
  static constexpr std::size_t kSlots = 256;
  std::array<std::atomic<long>, kSlots> tids{};
  std::array<std::atomic<std::uintptr_t>, kSlots> bases{};

  void add(long tid, std::uintptr_t base) {
    for (std::size_t i = 0; i < kSlots; ++i) {
      long empty = 0;
      if (tids[i].compare_exchange_strong(empty, tid)) {
        bases[i].store(base);
        return;
      }
    }
  }
  void remove(long tid) {
    for (auto& t : tids) {
      long mine = tid;
      if (t.compare_exchange_strong(mine, 0)) return;
    }
  }
  SMCGUARD_NO_CANARY void repair_current() {
    const long tid = raw_syscall(SYS_gettid);
    for (std::size_t i = 0; i < kSlots; ++i) {
      if (tids[i].load() == tid) {
        raw_syscall(SYS_arch_prctl, ARCH_SET_FS, static_cast<long>(bases[i].load()));
        return;
      }
    }
  }
};

inline ThreadPointerTable& thread_pointers() {
  static ThreadPointerTable table;
  return table;
}

inline constexpr int kContainedSignals[] = {SIGSEGV, SIGBUS, SIGILL, SIGTRAP, SIGFPE, SIGALRM};
inline constexpr std::size_t kPrivateStack = 64 * 1024;

struct ThreadContext {
  sigjmp_buf env;
  volatile sig_atomic_t armed = 0;
  std::vector<std::uint8_t> altstack;
  ExecRegion stack;
  std::optional<timer_t> watchdog;
  long tid = raw_syscall(SYS_gettid);
  std::uintptr_t fs_base = read_fs_base();

  ThreadContext() : altstack(std::max<std::size_t>(SIGSTKSZ, 64 * 1024)) {
    thread_pointers().add(tid, fs_base);
    stack_t ss{};
    ss.ss_sp = altstack.data();
    ss.ss_size = altstack.size();
    ::sigaltstack(&ss, nullptr);
    stack = alloc_exec(kPrivateStack, Placement::fenced, Access::rw);

    sigevent sev{};
    sev.sigev_notify = SIGEV_THREAD_ID;
    sev.sigev_signo = SIGALRM;
    sev.sigev_notify_thread_id = static_cast<pid_t>(::syscall(SYS_gettid));
    timer_t id;
    if (::timer_create(CLOCK_MONOTONIC, &sev, &id) == 0) watchdog = id;
  }
  ThreadContext(const ThreadContext&) = delete;
  ThreadContext& operator=(const ThreadContext&) = delete;
  ~ThreadContext() {
    thread_pointers().remove(tid);
    if (watchdog) ::timer_delete(*watchdog);
    stack_t ss{};
    ss.ss_flags = SS_DISABLE;
    ::sigaltstack(&ss, nullptr);
  }

  void* stack_top() const { return stack.base() + stack.size() - 64; }

  void arm(std::chrono::milliseconds ms) {
    if (!watchdog) return;
    itimerspec its{};
    its.it_value.tv_sec = static_cast<time_t>(ms.count() / 1000);
    its.it_value.tv_nsec = static_cast<long>(ms.count() % 1000) * 1'000'000L;
    ::timer_settime(*watchdog, 0, &its, nullptr);
  }
  void disarm() {
    if (!watchdog) return;
    itimerspec its{};
    ::timer_settime(*watchdog, 0, &its, nullptr);
  }
};

inline thread_local ThreadContext* t_context = nullptr;

struct SignalTable {
  struct sigaction previous[NSIG] = {};
};

inline SignalTable& signal_table() {
  static SignalTable table;
  return table;
}

SMCGUARD_NO_CANARY inline void on_contained_signal(int sig, siginfo_t* info, void*) {
  thread_pointers().repair_current();
  ThreadContext* ctx = t_context;
  if (ctx != nullptr && ctx->armed) {
    ctx->armed = 0;
    siglongjmp(ctx->env, sig);
  }
  if (sig == SIGALRM && info != nullptr && info->si_code == SI_TIMER) {
    return;  // watchdog expiring just after the kernel returned
  }
  // Not ours: fall back to the previous disposition and redeliver.
  ::sigaction(sig, &signal_table().previous[sig], nullptr);
  ::raise(sig);
}

inline void install_handlers() {
  static std::once_flag once;
  std::call_once(once, [] {
    struct sigaction sa {};
    sa.sa_sigaction = on_contained_signal;
    sa.sa_flags = SA_SIGINFO | SA_ONSTACK;
    sigemptyset(&sa.sa_mask);
    for (int sig : kContainedSignals) {
      ::sigaction(sig, &sa, &signal_table().previous[sig]);
    }
  });
}

inline ThreadContext& thread_context() {
  thread_local ThreadContext ctx;
  t_context = &ctx;
  return ctx;
}

struct ContainedRun {
  std::uint64_t value = 0;
  std::uint64_t elapsed = 0;
  int fault = 0;
};

/// Runs `fn` through the trampoline under the fault handlers and watchdog, timing the call
/// (and the optional injected delay) with `timer`.
inline ContainedRun run_contained(Trampoline tramp, KernelFn fn, const std::byte* begin, const std::byte* end,
                                  std::uint64_t sum, TimerId timer, std::chrono::milliseconds watchdog,
                                  const std::function<void()>* delay) {
  install_handlers();
  ThreadContext& ctx = thread_context();
  ContainedRun out;
  const bool fast_fs = has_fsgsbase();
  const FloatControl fc = FloatControl::save();
  ctx.arm(watchdog);
  const int sig = sigsetjmp(ctx.env, 1);
  if (sig == 0) {
    ctx.armed = 1;
    const std::uint64_t t0 = read_value(timer);
    if (delay != nullptr && *delay) (*delay)();
    const std::uint64_t value = tramp(begin, end, sum, fn, ctx.stack_top());
    repair_fs_base(ctx.fs_base, fast_fs);
    const std::uint64_t t1 = read_value(timer);
    ctx.armed = 0;
    out.value = value;
    out.elapsed = t1 >= t0 ? t1 - t0 : 0;
  } else {
    out.fault = sig;
  }
  fc.restore();
  ctx.disarm();
  return out;
}

}  // namespace detail

/// Registry of checksum units and their validation data.
///
/// Registration is serialized; verify() on one unit is mutually exclusive, distinct units
/// may be verified from different threads.
class Guard {
 public:
  explicit Guard(GuardPolicy policy = {}) : policy_(std::move(policy)) {
    policy_.validate();
    const auto code = detail::trampoline_code();
    trampoline_mem_ = alloc_exec(code.size());
    std::copy(code.begin(), code.end(), trampoline_mem_.base());
    trampoline_ = reinterpret_cast<detail::Trampoline>(trampoline_mem_.base());
  }

  const GuardPolicy& policy() const noexcept { return policy_; }

  /// Code executed inside every timed interval; tests use it to simulate a slowed kernel.
  void set_delay_hook(std::function<void()> hook) {
    std::lock_guard lock(registry_mutex_);
    delay_ = std::move(hook);
  }

  UnitId register_unit(std::span<const std::byte> region, LoadedKernel& kernel) {
    if (region.empty() || region.size() % 8 != 0 || region.data() == nullptr) {
      throw Error(Errc::invalid_region, "protected region must be a nonempty multiple of 8 bytes");
    }
    std::lock_guard lock(registry_mutex_);
    auto unit = std::make_unique<Unit>();
    unit->region = region;
    unit->kernel = &kernel;
    units_.push_back(std::move(unit));
    return units_.size() - 1;
  }

  std::size_t unit_count() const {
    std::lock_guard lock(registry_mutex_);
    return units_.size();
  }

  /// Expected final states for `inits` (oracle), checked against one dry native run each,
  /// plus a calibrated timing window for every timer the policy can select.
  const ValidationTable& precompute_states(UnitId id, std::span<const Selector> inits) {
    if (inits.empty()) {
      throw Error(Errc::invalid_argument, "at least one initial selector is required");
    }
    Unit& u = unit(id);
    std::lock_guard lock(u.mutex);
    ValidationTable table;
    for (Selector init : inits) {
      const ChecksumState expected = oracle_state(u, init);
      const auto native = native_run(u, init, TimerId::monotonic);
      if (native.fault != 0 || native.state != expected) {
        throw Error(Errc::oracle_mismatch, "dry native run for selector " + std::to_string(to_underlying(init)) +
                                               " disagrees with the oracle");
      }
      table.entries.emplace(init, expected);
    }
    for (TimerId t : candidate_timers()) {
      table.timing.emplace(t, calibrate_window(u, table, t));
    }
    u.table = std::move(table);
    u.failures = 0;
    return *u.table;
  }

  PredicateResult verify(UnitId id, std::size_t t) {
    Unit& u = unit(id);
    std::lock_guard lock(u.mutex);
    if (!u.table) {
      throw Error(Errc::invalid_argument, "verify before precompute_states");
    }
    PredicateResult r;
    r.timer = timer_for_query(t, policy_.timers);
    const auto window = u.table->timing.find(r.timer);
    if (window == u.table->timing.end()) {
      throw Error(Errc::unavailable_timer, std::string(timer_name(r.timer)) + " was not calibrated");
    }

    const Scored scored = score(u, *u.table, r.timer);
    r.checksum_ok = scored.checksum_ok;
    r.score = scored.score;
    r.fault = scored.fault;
    r.timing_ok = r.fault == 0 && window->second.contains(r.score);
    r.verdict = r.checksum_ok && r.timing_ok;
    u.failures = r.verdict ? 0 : u.failures + 1;
    r.consecutive_failures = u.failures;
    return r;
  }

  /// Canonical kernel bytes back in place; failure count cleared. The table is kept.
  void reset(UnitId id) {
    Unit& u = unit(id);
    std::lock_guard lock(u.mutex);
    u.kernel->reset();
    u.failures = 0;
  }

  const ValidationTable* table(UnitId id) {
    Unit& u = unit(id);
    std::lock_guard lock(u.mutex);
    return u.table ? &*u.table : nullptr;
  }

  LoadedKernel& kernel(UnitId id) { return *unit(id).kernel; }
  std::span<const std::byte> region(UnitId id) { return unit(id).region; }

  /// Region byte offsets that legitimate runs may rewrite: the field bits of each
  /// modification site (as masks) and, for unrolled kernels, the run-patch spans.
  std::vector<std::pair<std::size_t, std::uint8_t>> mutable_bytes(UnitId id) {
    Unit& u = unit(id);
    std::lock_guard lock(u.mutex);
    std::vector<std::pair<std::size_t, std::uint8_t>> out;
    const KernelLayout layout = u.kernel->layout_for(u.region);
    for (const auto& site : layout.site_offsets) {
      if (site) out.emplace_back(*site, kSiteFieldMask);
    }
    const auto code_at = reinterpret_cast<std::intptr_t>(u.kernel->base()) - reinterpret_cast<std::intptr_t>(u.region.data());
    u.kernel->prepare(u.kernel->image().init, u.region.size() / 8);
    for (const auto& [at, len] : u.kernel->patch_spans()) {
      for (std::size_t i = 0; i < len; ++i) {
        const std::intptr_t off = code_at + static_cast<std::intptr_t>(at + i);
        if (off >= 0 && static_cast<std::size_t>(off) < u.region.size()) {
          out.emplace_back(static_cast<std::size_t>(off), std::uint8_t{0xFF});
        }
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  struct Unit {
    std::span<const std::byte> region;
    LoadedKernel* kernel = nullptr;
    std::optional<ValidationTable> table;
    std::size_t failures = 0;
    std::mutex mutex;
  };

  struct NativeRun {
    ChecksumState state;
    std::uint64_t elapsed = 0;
    int fault = 0;
  };

  Unit& unit(UnitId id) {
    std::lock_guard lock(registry_mutex_);
    if (id >= units_.size()) {
      throw Error(Errc::invalid_argument, "unknown unit " + std::to_string(id));
    }
    return *units_[id];
  }

  std::vector<TimerId> candidate_timers() const {
    std::set<TimerId> seen;
    for (std::size_t t = 0; t < policy_.timers.preference.size(); ++t) {
      seen.insert(timer_for_query(t, policy_.timers));
    }
    return {seen.begin(), seen.end()};
  }

  ChecksumState oracle_state(Unit& u, Selector init) {
    const ChecksumState start{0, init, 0};
    u.kernel->prepare(init, u.region.size() / 8);
    if (u.kernel->unrolled()) {
      return emulate_unrolled(u.region, u.kernel->layout_for(u.region), start).state;
    }
    return checksum_region(u.region, u.kernel->site_in(u.region), start);
  }

  NativeRun native_run(Unit& u, Selector init, TimerId timer) {
    u.kernel->prepare(init, u.region.size() / 8);
    const auto* begin = u.region.data();
    const auto run = detail::run_contained(trampoline_, u.kernel->entry(), begin, begin + u.region.size(), 0, timer,
                                           policy_.watchdog, &delay_);
    NativeRun out;
    out.fault = run.fault;
    out.elapsed = run.elapsed;
    if (run.fault == 0) {
      out.state = {run.value, u.kernel->final_op(), u.region.size()};
    }
    return out;
  }

  struct Scored {
    bool checksum_ok = true;
    std::uint64_t score = UINT64_MAX;
    int fault = 0;
  };

  /// One verify's worth of timed runs: every init `repeats` times, score = fastest run.
  Scored score(Unit& u, const ValidationTable& table, TimerId timer) {
    Scored out;
    for (const auto& [init, expected] : table.entries) {
      for (std::size_t rep = 0; rep < policy_.repeats; ++rep) {
        const auto run = native_run(u, init, timer);
        if (run.fault != 0) {
          return {false, 0, run.fault};
        }
        out.checksum_ok = out.checksum_ok && run.state == expected;
        out.score = std::min(out.score, run.elapsed);
      }
    }
    return out;
  }

  /// Window over `calibration_runs` scores computed exactly as verify() computes them,
  /// after a warm-up long enough for the core to reach a steady clock.
  TimingWindow calibrate_window(Unit& u, const ValidationTable& table, TimerId timer) {
    PinGuard pin;
    const auto warm_until = std::chrono::steady_clock::now() + kWarmup;
    for (std::size_t i = 0; i < 4 || std::chrono::steady_clock::now() < warm_until; ++i) score(u, table, timer);
    std::vector<std::uint64_t> samples;
    for (std::size_t i = 0; i < policy_.calibration_runs; ++i) {
      const Scored s = score(u, table, timer);
      if (s.fault != 0) {
        throw Error(Errc::oracle_mismatch, "kernel faulted during calibration");
      }
      samples.push_back(s.score);
    }
    TimingWindow w;
    w.stats = summarize(timer, std::move(samples));
    w.lower = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(policy_.window_low * static_cast<double>(w.stats.q01)));
    w.upper = std::max<std::uint64_t>(w.lower, static_cast<std::uint64_t>(policy_.window_high * static_cast<double>(w.stats.q99)));
    return w;
  }

  static constexpr std::chrono::milliseconds kWarmup{50};

  GuardPolicy policy_;
  ExecRegion trampoline_mem_;
  detail::Trampoline trampoline_ = nullptr;
  std::function<void()> delay_;
  mutable std::mutex registry_mutex_;
  std::vector<std::unique_ptr<Unit>> units_;
};

/// `unit=0 t=5 timer=TSCP score=1234 checksum=ok timing=ok verdict=pass failures=0`
inline std::string verdict_line(UnitId unit, std::size_t t, const PredicateResult& r) {
  std::ostringstream os;
  os << "unit=" << unit << " t=" << t << " timer=" << timer_name(r.timer) << " score=" << r.score
     << " checksum=" << (r.checksum_ok ? "ok" : "bad") << " timing=" << (r.timing_ok ? "ok" : "bad")
     << " verdict=" << (r.verdict ? "pass" : "fail") << " failures=" << r.consecutive_failures;
  if (r.fault != 0) os << " fault=" << r.fault;
  return os.str();
}

}  // namespace smcguard
