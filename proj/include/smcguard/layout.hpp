#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "smcguard/error.hpp"

namespace smcguard {

/// Byte offset of the arithmetic opcode inside a unit (the REX.W prefix comes first).
inline constexpr std::size_t kOpcodeByteInUnit = 1;

/// Every page of a paged layout ends in a `jmp rel32` to the next page's first unit.
inline constexpr std::size_t kPageLinkLen = 5;

/// Placement of an unrolled kernel's units and the modification graph between them.
///
/// Offsets in `unit_offsets` are relative to the first byte of emitted code. `targets[u]`
/// is the unit whose opcode field unit `u` toggles. `site_offsets` is filled by
/// `bind_sites` once the kernel's position relative to a protected region is known.
struct KernelLayout {
  std::size_t page_size = 0;
  std::size_t page_count = 0;
  std::size_t prologue_len = 0;
  std::size_t unit_len = 0;
  std::size_t units_per_page = 0;
  std::size_t epilogue_offset = 0;
  std::vector<std::size_t> unit_offsets;
  std::vector<std::uint32_t> targets;
  std::vector<std::optional<std::size_t>> site_offsets;

  std::size_t unit_count() const noexcept { return unit_offsets.size(); }
  std::size_t opcode_offset(std::size_t unit) const { return unit_offsets.at(unit) + kOpcodeByteInUnit; }
};

/// Page whose units a page modifies: pages are paired (0,1), (2,3), ... and an odd last
/// page pairs with its predecessor, so targets always sit exactly one page away.
constexpr std::size_t partner_page(std::size_t page, std::size_t page_count) noexcept {
  const std::size_t mate = page ^ 1U;
  return mate < page_count ? mate : page - 1;
}

/// Dual-page (or wider) packing: every page holds the same number of units at the same
/// intra-page offsets, page 0 additionally carries the prologue, and the epilogue starts
/// on the page following the last unit page.
inline KernelLayout plan_layout(std::size_t page_size, std::size_t unit_len, std::size_t prologue_len,
                                std::size_t page_count = 2) {
  if (unit_len == 0) {
    throw Error(Errc::invalid_argument, "unit length must be positive");
  }
  if (page_count < 2) {
    throw Error(Errc::invalid_argument, "paged layouts need at least two pages");
  }
  if (unit_len > page_size) {
    throw Error(Errc::unit_too_large, "unit does not fit in a page");
  }
  if (prologue_len + kPageLinkLen + unit_len > page_size) {
    throw Error(Errc::unit_too_large, "prologue leaves no room for a unit");
  }

  KernelLayout layout;
  layout.page_size = page_size;
  layout.page_count = page_count;
  layout.prologue_len = prologue_len;
  layout.unit_len = unit_len;
  layout.units_per_page = (page_size - prologue_len - kPageLinkLen) / unit_len;
  layout.epilogue_offset = page_count * page_size;

  const std::size_t per_page = layout.units_per_page;
  layout.unit_offsets.reserve(per_page * page_count);
  layout.targets.reserve(per_page * page_count);
  for (std::size_t p = 0; p < page_count; ++p) {
    const std::size_t mate = partner_page(p, page_count);
    for (std::size_t u = 0; u < per_page; ++u) {
      layout.unit_offsets.push_back(p * page_size + prologue_len + u * unit_len);
      layout.targets.push_back(static_cast<std::uint32_t>(mate * per_page + u));
    }
  }
  return layout;
}

/// Contiguous unrolled loop body (the static-unrolled variant): `depth` units back to back
/// after the prologue, each toggling the unit `stride` positions ahead (mod depth).
inline KernelLayout plan_compact_layout(std::size_t unit_len, std::size_t prologue_len, std::size_t depth,
                                        std::size_t stride, std::size_t page_size) {
  if (unit_len == 0 || depth == 0) {
    throw Error(Errc::invalid_argument, "compact layout needs a positive unit length and depth");
  }
  KernelLayout layout;
  layout.page_size = page_size;
  layout.page_count = 1;
  layout.prologue_len = prologue_len;
  layout.unit_len = unit_len;
  layout.units_per_page = depth;
  layout.epilogue_offset = prologue_len + depth * unit_len;
  for (std::size_t u = 0; u < depth; ++u) {
    layout.unit_offsets.push_back(prologue_len + u * unit_len);
    layout.targets.push_back(static_cast<std::uint32_t>((u + stride) % depth));
  }
  return layout;
}

/// Records, for each unit, where its opcode byte falls inside a protected region of
/// `region_len` bytes. `code_offset` is (code base - region base) and may be negative.
inline void bind_sites(KernelLayout& layout, std::int64_t code_offset, std::size_t region_len) {
  layout.site_offsets.assign(layout.unit_count(), std::nullopt);
  for (std::size_t u = 0; u < layout.unit_count(); ++u) {
    const std::int64_t site = code_offset + static_cast<std::int64_t>(layout.opcode_offset(u));
    if (site >= 0 && static_cast<std::uint64_t>(site) < region_len) {
      layout.site_offsets[u] = static_cast<std::size_t>(site);
    }
  }
}

/// How a run over `qwords` data words maps onto a chain of `units` units.
///
/// The chain is traversed in laps. A run that fits in one lap starts at unit 0 and stops
/// at `exit_unit` through the termination patch; a longer run enters the first lap late so
/// that the final lap ends exactly at the chain end.
struct RunSchedule {
  std::size_t entry_unit = 0;
  std::size_t exit_unit = 0;
  std::size_t laps = 0;

  bool operator==(const RunSchedule&) const = default;
};

inline RunSchedule plan_schedule(std::size_t qwords, std::size_t units) {
  if (units == 0) {
    throw Error(Errc::layout_mismatch, "chain has no units");
  }
  if (qwords == 0) {
    return {0, 0, 0};
  }
  if (qwords <= units) {
    return {0, qwords, 1};
  }
  const std::size_t rem = qwords % units;
  return {rem == 0 ? 0 : units - rem, units, (qwords + units - 1) / units};
}

}  // namespace smcguard
