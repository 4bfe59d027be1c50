#pragma once

// Measurement matrix behind the smcbench tool: kernels over a seeded region, per-cell
// timing statistics, ratio checks, machine-clear counts and tamper experiments.

#include <sys/resource.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "smcguard/checksum_oracle.hpp"
#include "smcguard/clocks.hpp"
#include "smcguard/codegen.hpp"
#include "smcguard/cpu_info.hpp"
#include "smcguard/error.hpp"
#include "smcguard/exec_memory.hpp"
#include "smcguard/guard.hpp"
#include "smcguard/kernel.hpp"
#include "smcguard/pmc.hpp"

namespace smcguard::bench {

enum class BenchVariant { oracle, oracle_unrolled, smc_static, smc_static_unrolled, smc_dynamic };

inline constexpr BenchVariant kAllVariants[] = {BenchVariant::oracle, BenchVariant::oracle_unrolled,
                                                BenchVariant::smc_static, BenchVariant::smc_static_unrolled,
                                                BenchVariant::smc_dynamic};

inline std::string_view variant_name(BenchVariant v) {
  switch (v) {
    case BenchVariant::oracle: return "oracle";
    case BenchVariant::oracle_unrolled: return "oracle-unrolled";
    case BenchVariant::smc_static: return "smc-static";
    case BenchVariant::smc_static_unrolled: return "smc-static-unrolled";
    case BenchVariant::smc_dynamic: return "smc-dynamic";
  }
  return "?";
}

inline BenchVariant parse_variant(std::string_view name) {
  for (BenchVariant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  throw Error(Errc::invalid_argument, "unknown variant '" + std::string(name) + "'");
}

/// Kernel generator behind each variant; the oracles run over the image of their SMC
/// counterpart.
inline Variant kernel_variant(BenchVariant v) {
  switch (v) {
    case BenchVariant::oracle:
    case BenchVariant::smc_static: return Variant::static_loop;
    case BenchVariant::smc_static_unrolled: return Variant::static_unrolled;
    case BenchVariant::oracle_unrolled:
    case BenchVariant::smc_dynamic: return Variant::dynamic_unrolled;
  }
  return Variant::static_loop;
}

constexpr bool is_native(BenchVariant v) { return v != BenchVariant::oracle && v != BenchVariant::oracle_unrolled; }

enum class ReportFormat { text, json_lines };

struct BenchConfig {
  std::vector<BenchVariant> variants{std::begin(kAllVariants), std::end(kAllVariants)};
  std::size_t region_size = 225'280;
  std::size_t runs = 10'000;
  std::vector<TimerId> timers{TimerId::tscp};
  bool pmc = false;
  std::uint64_t seed = 1;
  bool quick = false;
  int pin_core = -1;  // -1: the current core
  bool raise_priority = false;

  /// Quick mode: 200 runs and every ratio threshold halved.
  static constexpr std::size_t kQuickRuns = 200;

  void validate() const {
    if (runs < 1) throw Error(Errc::invalid_argument, "runs must be at least 1");
    if (region_size == 0 || region_size % 8 != 0) {
      throw Error(Errc::unaligned_region, "region size must be a positive multiple of 8");
    }
    if (variants.empty()) throw Error(Errc::invalid_argument, "no variants selected");
    if (timers.empty()) throw Error(Errc::invalid_argument, "no timers selected");
  }
};

// ---------------------------------------------------------------------------
// Synthetic region with an embedded kernel

/// Seeded region content; the same seed always yields the same bytes.
inline void fill_region(std::span<std::uint8_t> bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < bytes.size(); i += 8) {
    const std::uint64_t v = rng();
    std::memcpy(bytes.data() + i, &v, std::min<std::size_t>(8, bytes.size() - i));
  }
}

/// A kernel loaded into executable memory together with the region it checksums. When the
/// region is at least as large as the kernel, the kernel sits at its start (the checksum
/// covers its own code); otherwise the kernel lives in a separate mapping.
class Workbench {
 public:
  Workbench(Variant variant, std::size_t region_size, std::uint64_t seed) {
    KernelConfig cfg;
    cfg.variant = variant;
    cfg.region_len = region_size;
    KernelImage image = variant == Variant::static_loop ? build_static_kernel(cfg).image : build_unrolled_kernel(cfg).image;

    data_ = alloc_exec(region_size, Placement::fenced);
    fill_region(data_.bytes().first(region_size), seed);
    introspective_ = region_size >= image.size();
    if (introspective_) {
      kernel_ = std::make_unique<LoadedKernel>(data_.bytes(), std::move(image));
    } else {
      code_ = alloc_exec(image.size(), Placement::fenced);
      kernel_ = std::make_unique<LoadedKernel>(code_.bytes(), std::move(image));
    }
    region_ = {reinterpret_cast<const std::byte*>(data_.base()), region_size};
  }

  LoadedKernel& kernel() { return *kernel_; }
  const LoadedKernel& kernel() const { return *kernel_; }
  std::span<const std::byte> region() const { return region_; }
  std::span<std::uint8_t> region_bytes() { return data_.bytes().first(region_.size()); }
  bool introspective() const { return introspective_; }
  std::size_t qwords() const { return region_.size() / 8; }

  /// Native run with the kernel armed for the whole region.
  ChecksumState run_native(Selector init = Selector::adc) { return kernel_->run(region_, {0, init, 0}); }

  /// Oracle counterpart over the current code state; the caller arms the kernel first.
  UnrolledState run_oracle(Selector init = Selector::adc) const {
    const ChecksumState start{0, init, 0};
    if (kernel_->unrolled()) {
      return emulate_unrolled(region_, kernel_->layout_for(region_), start);
    }
    return {checksum_region(region_, kernel_->site_in(region_), start), {}};
  }

 private:
  ExecRegion data_;
  ExecRegion code_;
  std::unique_ptr<LoadedKernel> kernel_;
  std::span<const std::byte> region_;
  bool introspective_ = false;
};

/// Native result equals the oracle's (sum, final selector and, for unrolled kernels, every
/// unit's selector) for each initial selector.
inline bool gate(Workbench& wb) {
  for (Selector init : kAllSelectors) {
    wb.kernel().prepare(init, wb.qwords());
    const UnrolledState expected = wb.run_oracle(init);
    const ChecksumState native = wb.run_native(init);
    if (native != expected.state) return false;
    if (wb.kernel().unrolled() && wb.kernel().unit_ops() != expected.unit_ops) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Report

struct Cell {
  BenchVariant variant;
  CalibrationStats stats;
};

struct PmcCount {
  BenchVariant variant;
  std::string event;
  std::uint64_t count = 0;
};

struct Ratio {
  std::string name;  // "slower/faster"
  TimerId timer = TimerId::tscp;
  double value = 0;
  double threshold = 0;
  bool ok() const { return value >= threshold; }
};

struct DisturbanceLine {
  BenchVariant variant;
  TimerId timer;
  Disturbance estimate;
};

struct BenchReport {
  std::string environment;
  std::vector<Cell> cells;
  std::optional<std::vector<PmcCount>> pmc;  // nullopt: counting was off or unavailable
  std::vector<Ratio> ratios;
  std::vector<DisturbanceLine> disturbances;
  std::vector<std::string> notices;

  const Cell* cell(BenchVariant v, TimerId t) const {
    for (const auto& c : cells) {
      if (c.variant == v && c.stats.timer == t) return &c;
    }
    return nullptr;
  }
  std::optional<std::uint64_t> pmc_count(BenchVariant v) const {
    if (!pmc) return std::nullopt;
    for (const auto& p : *pmc) {
      if (p.variant == v) return p.count;
    }
    return std::nullopt;
  }
};

struct RatioSpec {
  BenchVariant slower;
  BenchVariant faster;
  double threshold;
};

/// Minimum-runtime ratios checked at desk scale.
inline constexpr RatioSpec kRatioSpecs[] = {
    {BenchVariant::smc_static, BenchVariant::oracle, 3.0},
    {BenchVariant::oracle_unrolled, BenchVariant::smc_dynamic, 10.0},
    {BenchVariant::smc_static, BenchVariant::smc_dynamic, 1.5},
};

inline std::vector<Ratio> compute_ratios(const std::vector<Cell>& cells, TimerId timer, bool quick) {
  std::vector<Ratio> out;
  auto find = [&](BenchVariant v) -> const Cell* {
    for (const auto& c : cells) {
      if (c.variant == v && c.stats.timer == timer) return &c;
    }
    return nullptr;
  };
  for (const auto& spec : kRatioSpecs) {
    const Cell* slow = find(spec.slower);
    const Cell* fast = find(spec.faster);
    if (slow == nullptr || fast == nullptr || fast->stats.min == 0) continue;
    Ratio r;
    r.name = std::string(variant_name(spec.slower)) + "/" + std::string(variant_name(spec.faster));
    r.timer = timer;
    r.value = static_cast<double>(slow->stats.min) / static_cast<double>(fast->stats.min);
    r.threshold = quick ? spec.threshold / 2 : spec.threshold;
    out.push_back(r);
  }
  return out;
}

inline std::string environment_block(const Workbench& dynamic) {
  ReportContext ctx;
  ctx.cpu = query_cpu();
  ctx.page_size = page_size();
  ctx.code_base = reinterpret_cast<std::uintptr_t>(dynamic.kernel().base());
  ctx.code_size = dynamic.kernel().image().size();
  std::string out = layout_report(dynamic.kernel().image().layout, ctx);
  out += "Invariant TSC: " + std::string(ctx.cpu.invariant_tsc ? "yes" : "no") + "\n";
  out += "Timers available:";
  for (TimerId t : kAllTimers) {
    if (probe_timers()[t]) out += " " + std::string(timer_name(t));
  }
  out += "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Suite

namespace detail {

struct PriorityGuard {
  explicit PriorityGuard(bool enabled, std::vector<std::string>& notices) {
    if (!enabled) return;
    errno = 0;
    saved_ = ::getpriority(PRIO_PROCESS, 0);
    if (::setpriority(PRIO_PROCESS, 0, -10) == 0) {
      active_ = true;
    } else {
      notices.push_back(std::string("priority elevation failed: ") + std::strerror(errno));
    }
  }
  ~PriorityGuard() {
    if (active_) ::setpriority(PRIO_PROCESS, 0, saved_);
  }
  PriorityGuard(const PriorityGuard&) = delete;
  PriorityGuard& operator=(const PriorityGuard&) = delete;

  int saved_ = 0;
  bool active_ = false;
};

/// One repetition of `v` over its workbench.
inline void run_once(BenchVariant v, Workbench& wb, const KernelLayout* layout, std::optional<ModificationSite> site,
                     volatile std::uint64_t& sink) {
  switch (v) {
    case BenchVariant::oracle:
      sink = checksum_region(wb.region(), site, {}).sum;
      break;
    case BenchVariant::oracle_unrolled:
      sink = emulate_unrolled(wb.region(), *layout, {}).state.sum;
      break;
    default: {
      const auto* begin = wb.region().data();
      sink = wb.kernel().invoke(begin, begin + wb.region().size(), 0);
      break;
    }
  }
}

}  // namespace detail

inline BenchReport run_suite(BenchConfig cfg) {
  if (cfg.quick) cfg.runs = BenchConfig::kQuickRuns;
  cfg.validate();
  BenchReport report;

#if !defined(__x86_64__)
  for (BenchVariant v : cfg.variants) {
    if (is_native(v)) report.notices.push_back(std::string(variant_name(v)) + ": skipped, needs x86-64");
  }
  std::erase_if(cfg.variants, is_native);
#endif

  std::map<Variant, std::unique_ptr<Workbench>> benches;
  auto bench_for = [&](Variant k) -> Workbench& {
    auto& slot = benches[k];
    if (!slot) slot = std::make_unique<Workbench>(k, cfg.region_size, cfg.seed);
    return *slot;
  };
  report.environment = environment_block(bench_for(Variant::dynamic_unrolled));

  // Correctness gate: no timing for a kernel that disagrees with its oracle.
  std::set<Variant> kernels;
  for (BenchVariant v : cfg.variants) kernels.insert(kernel_variant(v));
  for (Variant k : kernels) {
    if (!gate(bench_for(k))) {
      throw Error(Errc::checksum_mismatch, std::string(variant_name(k)) + " kernel disagrees with its oracle");
    }
  }

  detail::PriorityGuard priority(cfg.raise_priority, report.notices);
  PinGuard pin(true, cfg.pin_core);
  if (!pin.active()) report.notices.push_back("thread pinning unavailable");

  std::optional<SmcEventSpec> event;
  std::optional<Counter> counter;
  if (cfg.pmc) {
    try {
      event = event_spec(query_cpu().vendor());
      counter = open_counter(*event);
      report.pmc.emplace();
    } catch (const Error& e) {
      report.notices.push_back(std::string("pmc: ") + e.what());
    }
  }

  volatile std::uint64_t sink = 0;
  for (BenchVariant v : cfg.variants) {
    Workbench& wb = bench_for(kernel_variant(v));
    wb.kernel().prepare(Selector::adc, wb.qwords());
    const KernelLayout layout = wb.kernel().layout_for(wb.region());
    const auto site = wb.kernel().site_in(wb.region());
    auto once = [&] {
      if (is_native(v)) wb.kernel().prepare(Selector::adc, wb.qwords());
    };

    for (TimerId t : cfg.timers) {
      if (!probe_timers()[t]) {
        report.notices.push_back(std::string(timer_name(t)) + ": unavailable, cells skipped");
        continue;
      }
      std::vector<std::uint64_t> samples;
      samples.reserve(cfg.runs);
      for (std::size_t i = 0; i < cfg.runs; ++i) {
        once();
        samples.push_back(time_once(t, [&] { detail::run_once(v, wb, &layout, site, sink); }));
      }
      Cell cell{v, summarize(t, std::move(samples))};
      if (cell.stats.max > 0) {
        report.disturbances.push_back({v, t, disturbance_estimate(cell.stats, cfg.runs)});
      }
      report.cells.push_back(cell);
    }

    if (counter) {
      std::uint64_t total = 0;
      for (std::size_t i = 0; i < cfg.runs; ++i) {
        once();
        total += count_events(*counter, [&] { detail::run_once(v, wb, &layout, site, sink); });
      }
      report.pmc->push_back({v, event->name, total});
    }
  }

  report.ratios = compute_ratios(report.cells, cfg.timers.front(), cfg.quick);
  return report;
}

// ---------------------------------------------------------------------------
// Tamper experiment

struct TamperStats {
  std::size_t flips = 0;
  std::size_t detected = 0;
  std::size_t faults = 0;
  /// Draws that only touched legitimately mutable bits; not applied, not counted.
  std::size_t aliases = 0;
  bool clean_verdict = false;
  std::vector<std::pair<std::size_t, std::uint8_t>> false_accepts;  // (offset, xor mask)

  double rate() const { return flips == 0 ? 1.0 : static_cast<double>(detected) / static_cast<double>(flips); }
};

struct TamperConfig {
  BenchVariant variant = BenchVariant::smc_dynamic;
  std::size_t region_size = 32 * 1024;
  std::uint64_t seed = 1;
  GuardPolicy policy = [] {
    GuardPolicy p;
    p.watchdog = std::chrono::milliseconds(200);
    return p;
  }();
};

/// Applies `flips` seeded single-byte XOR flips to the region, one at a time, and records
/// whether verify() rejects each one. Region and kernel are restored between flips.
inline TamperStats tamper_experiment(const TamperConfig& cfg, std::size_t flips) {
  if (!is_native(cfg.variant)) {
    throw Error(Errc::invalid_argument, "tamper experiments need a native kernel variant");
  }
  Workbench wb(kernel_variant(cfg.variant), cfg.region_size, cfg.seed);
  Guard guard(cfg.policy);
  const UnitId unit = guard.register_unit(wb.region(), wb.kernel());
  guard.precompute_states(unit, kAllSelectors);

  std::map<std::size_t, std::uint8_t> mutable_bits;
  for (const auto& [offset, mask] : guard.mutable_bytes(unit)) mutable_bits[offset] |= mask;

  TamperStats stats;
  std::size_t t = 0;
  stats.clean_verdict = guard.verify(unit, t++).verdict;

  auto bytes = wb.region_bytes();
  guard.reset(unit);
  const std::vector<std::uint8_t> snapshot(bytes.begin(), bytes.end());
  std::mt19937_64 rng(cfg.seed ^ 0x7A3B'5EED'0000'0001ULL);
  std::uniform_int_distribution<std::size_t> pick_offset(0, bytes.size() - 1);
  std::uniform_int_distribution<unsigned> pick_mask(1, 255);

  while (stats.flips < flips) {
    const std::size_t offset = pick_offset(rng);
    std::uint8_t mask = static_cast<std::uint8_t>(pick_mask(rng));
    if (const auto it = mutable_bits.find(offset); it != mutable_bits.end()) {
      mask = static_cast<std::uint8_t>(mask & ~it->second);
      if (mask == 0) {
        ++stats.aliases;
        continue;
      }
    }
    bytes[offset] ^= mask;
    const PredicateResult r = guard.verify(unit, t++);
    ++stats.flips;
    if (r.fault != 0) ++stats.faults;
    if (!r.verdict) {
      ++stats.detected;
    } else {
      stats.false_accepts.emplace_back(offset, mask);
    }
    std::copy(snapshot.begin(), snapshot.end(), bytes.begin());
    guard.reset(unit);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Output

inline std::string format_avg(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

inline std::string emit_text(const BenchReport& r) {
  std::ostringstream os;
  os << r.environment << "\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-20s %-13s %7s %14s %16s %14s %14s %14s %14s\n", "variant", "timer", "runs", "min",
                "avg", "max", "q01", "q50", "q99");
  os << line;
  for (const auto& c : r.cells) {
    const auto& s = c.stats;
    std::snprintf(line, sizeof line, "%-20s %-13s %7zu %14llu %16s %14llu %14llu %14llu %14llu\n",
                  std::string(variant_name(c.variant)).c_str(), std::string(timer_name(s.timer)).c_str(), s.runs,
                  static_cast<unsigned long long>(s.min), format_avg(s.avg).c_str(),
                  static_cast<unsigned long long>(s.max), static_cast<unsigned long long>(s.q01),
                  static_cast<unsigned long long>(s.q50), static_cast<unsigned long long>(s.q99));
    os << line;
  }
  if (r.pmc) {
    os << "\nmachine clears\n";
    for (const auto& p : *r.pmc) {
      std::snprintf(line, sizeof line, "%-20s %-45s %14llu\n", std::string(variant_name(p.variant)).c_str(),
                    p.event.c_str(), static_cast<unsigned long long>(p.count));
      os << line;
    }
  }
  if (!r.ratios.empty()) {
    os << "\n";
    for (const auto& q : r.ratios) {
      std::snprintf(line, sizeof line, "ratio %s (%s, min) = %.2f, need >= %.2f: %s\n", q.name.c_str(),
                    std::string(timer_name(q.timer)).c_str(), q.value, q.threshold, q.ok() ? "ok" : "below");
      os << line;
    }
  }
  if (!r.disturbances.empty()) {
    os << "\n";
    for (const auto& d : r.disturbances) {
      std::snprintf(line, sizeof line, "disturbance %s (%s): %.1f runs, %.2f%%\n",
                    std::string(variant_name(d.variant)).c_str(), std::string(timer_name(d.timer)).c_str(),
                    d.estimate.runs, 100.0 * d.estimate.fraction);
      os << line;
    }
  }
  if (!r.notices.empty()) {
    os << "\n";
    for (const auto& n : r.notices) os << "note: " << n << "\n";
  }
  return os.str();
}

inline std::string emit_json_lines(const BenchReport& r) {
  using nlohmann::ordered_json;
  std::ostringstream os;
  ordered_json env = ordered_json::object();
  std::istringstream lines(r.environment);
  for (std::string l; std::getline(lines, l);) {
    if (const auto colon = l.find(": "); colon != std::string::npos) {
      env[l.substr(0, colon)] = l.substr(colon + 2);
    } else if (!l.empty()) {
      env["note"] = l;
    }
  }
  os << ordered_json{{"environment", env}}.dump() << "\n";
  for (const auto& c : r.cells) {
    const auto& s = c.stats;
    ordered_json j;
    j["variant"] = variant_name(c.variant);
    j["timer"] = timer_name(s.timer);
    j["runs"] = s.runs;
    j["min"] = s.min;
    j["avg"] = s.avg;
    j["max"] = s.max;
    j["q01"] = s.q01;
    j["q50"] = s.q50;
    j["q99"] = s.q99;
    os << j.dump() << "\n";
  }
  if (r.pmc) {
    for (const auto& p : *r.pmc) {
      ordered_json j;
      j["variant"] = variant_name(p.variant);
      j["event"] = p.event;
      j["count"] = p.count;
      os << j.dump() << "\n";
    }
  }
  for (const auto& q : r.ratios) {
    ordered_json j;
    j["ratio"] = q.name;
    j["timer"] = timer_name(q.timer);
    j["value"] = q.value;
    j["threshold"] = q.threshold;
    j["ok"] = q.ok();
    os << j.dump() << "\n";
  }
  for (const auto& d : r.disturbances) {
    ordered_json j;
    j["disturbance"] = variant_name(d.variant);
    j["timer"] = timer_name(d.timer);
    j["count"] = d.estimate.runs;
    j["fraction"] = d.estimate.fraction;
    os << j.dump() << "\n";
  }
  for (const auto& n : r.notices) {
    os << ordered_json{{"notice", n}}.dump() << "\n";
  }
  return os.str();
}

inline std::string emit_report(const BenchReport& r, ReportFormat format) {
  return format == ReportFormat::text ? emit_text(r) : emit_json_lines(r);
}

inline std::string emit_tamper(const TamperStats& s, ReportFormat format) {
  if (format == ReportFormat::json_lines) {
    nlohmann::ordered_json j;
    j["flips"] = s.flips;
    j["detected"] = s.detected;
    j["rate"] = s.rate();
    j["faults"] = s.faults;
    j["aliases"] = s.aliases;
    j["clean_verdict"] = s.clean_verdict;
    j["false_accepts"] = nlohmann::ordered_json::array();
    for (const auto& [offset, mask] : s.false_accepts) j["false_accepts"].push_back({offset, mask});
    return j.dump() + "\n";
  }
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "flips %zu detected %zu rate %.4f faults %zu aliases %zu clean %s\n", s.flips,
                s.detected, s.rate(), s.faults, s.aliases, s.clean_verdict ? "pass" : "fail");
  os << buf;
  for (const auto& [offset, mask] : s.false_accepts) {
    std::snprintf(buf, sizeof buf, "false accept: offset 0x%zX mask 0x%02X\n", offset, mask);
    os << buf;
  }
  return os.str();
}

}  // namespace smcguard::bench
