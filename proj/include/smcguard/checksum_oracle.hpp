#pragma once

// Portable reference semantics of the self-modifying checksum kernels.
//
// The native kernels compute with an ADC-family instruction whose opcode bits [3:5] are
// toggled after every step by the sign and parity of the result. Selectors name the
// reachable field values with bit 1 removed: field = selector | 2, so
// 0 -> ADC, 1 -> SBB, 4 -> XOR, 5 -> CMP. Carry is always clear on entry to the
// arithmetic instruction, which makes ADC/SBB plain wrapping add/subtract.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smcguard/error.hpp"
#include "smcguard/layout.hpp"

namespace smcguard {

enum class Selector : std::uint8_t { adc = 0, sbb = 1, xor_ = 4, cmp = 5 };

inline constexpr Selector kAllSelectors[] = {Selector::adc, Selector::sbb, Selector::xor_, Selector::cmp};

constexpr bool is_valid_selector(unsigned value) noexcept { return (value & ~5U) == 0; }

inline Selector to_selector(unsigned value) {
  if (!is_valid_selector(value)) {
    throw Error(Errc::invalid_selector, "selector " + std::to_string(value) + " is not in {0,1,4,5}");
  }
  return static_cast<Selector>(value);
}

constexpr unsigned to_underlying(Selector s) noexcept { return static_cast<unsigned>(s); }

/// Opcode field (bits [3:5] of the opcode byte) for a selector.
constexpr unsigned selector_field(Selector s) noexcept { return to_underlying(s) | 2U; }

/// Selector encoded in an ADC-family opcode byte, ignoring field bit 1.
constexpr Selector selector_of_opcode(std::uint8_t opcode) noexcept {
  return static_cast<Selector>((opcode >> 3) & 5U);
}

struct ChecksumState {
  std::uint64_t sum = 0;
  Selector op = Selector::adc;
  std::size_t cursor = 0;

  bool operator==(const ChecksumState&) const = default;
};

/// The 8-byte word holding a mutable opcode byte and the position of its 3-bit field.
struct ModificationSite {
  std::size_t qword_offset = 0;
  unsigned bit_offset = 3;
  std::uint64_t preserve_mask = ~(std::uint64_t{5} << 3);

  /// Site for an opcode byte at region-relative `byte_offset`.
  static constexpr ModificationSite at_byte(std::size_t byte_offset) noexcept {
    const unsigned bit = static_cast<unsigned>(byte_offset % 8) * 8 + 3;
    return {byte_offset - byte_offset % 8, bit, ~(std::uint64_t{5} << bit)};
  }

  bool operator==(const ModificationSite&) const = default;
};

/// x86 PF: 1 iff the low byte has an even number of set bits.
constexpr bool parity8(std::uint8_t b) noexcept { return (std::popcount(b) & 1) == 0; }

constexpr std::uint64_t substitute(std::uint64_t qword, const ModificationSite& site, Selector op) noexcept {
  return (qword & site.preserve_mask) | (std::uint64_t{to_underlying(op)} << site.bit_offset);
}

constexpr ChecksumState step(ChecksumState state, std::uint64_t value) noexcept {
  std::uint64_t res = 0;
  switch (state.op) {
    case Selector::adc: res = state.sum += value; break;
    case Selector::sbb: res = state.sum -= value; break;
    case Selector::xor_: res = state.sum ^= value; break;
    case Selector::cmp: res = state.sum - value; break;
  }
  unsigned toggle = (parity8(static_cast<std::uint8_t>(res)) ? 4U : 0U) | static_cast<unsigned>(res >> 63);
  state.op = static_cast<Selector>(to_underlying(state.op) ^ toggle);
  state.cursor += 8;
  return state;
}

/// Little-endian load of the qword at `offset`, independent of host byte order.
inline std::uint64_t load_qword(std::span<const std::byte> bytes, std::size_t offset) noexcept {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    v |= std::uint64_t{std::to_integer<std::uint8_t>(bytes[offset + i])} << (8 * i);
  }
  return v;
}

inline void require_aligned(std::span<const std::byte> region) {
  if (region.size() % 8 != 0) {
    throw Error(Errc::unaligned_region, "region length " + std::to_string(region.size()) + " is not a multiple of 8");
  }
}

/// Checksum of a region by a single-site kernel. When `site` is set, the word containing
/// the kernel's own opcode byte is read as it stands in memory at that moment, i.e. with
/// the field carrying the current selector.
inline ChecksumState checksum_region(std::span<const std::byte> region, std::optional<ModificationSite> site,
                                     ChecksumState init = {}) {
  require_aligned(region);
  if (site && site->qword_offset >= region.size()) {
    throw Error(Errc::invalid_argument, "modification site lies outside the region");
  }
  ChecksumState state = init;
  state.cursor = 0;
  const std::size_t site_word = site ? site->qword_offset : region.size();
  for (std::size_t off = 0; off < region.size(); off += 8) {
    std::uint64_t value = load_qword(region, off);
    if (off == site_word) {
      value = substitute(value, *site, state.op);
    }
    state = step(state, value);
  }
  return state;
}

struct UnrolledState {
  ChecksumState state;
  std::vector<Selector> unit_ops;

  bool operator==(const UnrolledState&) const = default;
};

/// Non-self-modifying emulation of an unrolled kernel. Every unit carries its own opcode
/// field; a unit toggles the field of `layout.targets[u]`. Each read is checked against
/// every tracked modification site, which is what makes this the slow competitor.
///
/// The returned `state.op` is the field of the unit toggled last, the analogue of the
/// single-site kernel's final selector.
inline UnrolledState emulate_unrolled(std::span<const std::byte> region, const KernelLayout& layout,
                                      ChecksumState init = {}) {
  require_aligned(region);
  const std::size_t units = layout.unit_count();
  if (units == 0 || layout.targets.size() != units || layout.site_offsets.size() != units) {
    throw Error(Errc::layout_mismatch, "layout unit, target and site tables disagree");
  }

  struct Tracked {
    std::size_t unit;
    ModificationSite site;
  };
  std::vector<Tracked> tracked;
  for (std::size_t u = 0; u < units; ++u) {
    if (layout.targets[u] >= units) {
      throw Error(Errc::layout_mismatch, "unit target out of range");
    }
    if (const auto& s = layout.site_offsets[u]) {
      if (*s >= region.size()) {
        throw Error(Errc::layout_mismatch, "site offset beyond region");
      }
      tracked.push_back({u, ModificationSite::at_byte(*s)});
    }
  }

  UnrolledState out;
  out.unit_ops.assign(units, init.op);
  std::uint64_t sum = init.sum;
  const std::size_t qwords = region.size() / 8;
  const RunSchedule plan = plan_schedule(qwords, units);

  std::size_t unit = plan.entry_unit;
  for (std::size_t i = 0; i < qwords; ++i) {
    const std::size_t off = i * 8;
    std::uint64_t value = load_qword(region, off);
    for (const Tracked& t : tracked) {
      if (t.site.qword_offset == off) {
        value = substitute(value, t.site, out.unit_ops[t.unit]);
      }
    }
    ChecksumState s{sum, out.unit_ops[unit], 0};
    s = step(s, value);
    sum = s.sum;
    const unsigned toggle = to_underlying(s.op) ^ to_underlying(out.unit_ops[unit]);
    Selector& target = out.unit_ops[layout.targets[unit]];
    target = static_cast<Selector>(to_underlying(target) ^ toggle);
    if (++unit == units) {
      unit = 0;
    }
  }

  out.state.sum = sum;
  out.state.cursor = region.size();
  if (qwords == 0) {
    out.state.op = init.op;
  } else {
    const std::size_t last = (plan.exit_unit + units - 1) % units;
    out.state.op = out.unit_ops[layout.targets[last]];
  }
  return out;
}

/// Closure of `init` under toggling selector bits 0 and 2.
inline std::vector<Selector> reachable_ops(unsigned init) {
  const unsigned start = to_underlying(to_selector(init));
  std::vector<Selector> out;
  for (unsigned mask : {0U, 1U, 4U, 5U}) {
    out.push_back(static_cast<Selector>(start ^ mask));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace smcguard
