#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "smcguard/checksum_oracle.hpp"
#include "smcguard/codegen.hpp"
#include "smcguard/error.hpp"
#include "smcguard/layout.hpp"

namespace smcguard {

using KernelFn = std::uint64_t (*)(const std::byte* begin, const std::byte* end, std::uint64_t sum);

/// A kernel image copied into executable memory the caller owns.
///
/// Not thread-safe: a kernel rewrites itself while it runs, so one thread at a time may
/// prepare or execute it.
class LoadedKernel {
 public:
  LoadedKernel(std::span<std::uint8_t> code, KernelImage image) : code_(code), image_(std::move(image)) {
    if (code_.size() < image_.size()) {
      throw Error(Errc::invalid_argument, "code span smaller than the kernel image");
    }
    reset();
  }

  const KernelImage& image() const noexcept { return image_; }
  std::span<std::uint8_t> code() const noexcept { return code_.first(image_.size()); }
  const std::uint8_t* base() const noexcept { return code_.data(); }
  KernelFn entry() const noexcept { return reinterpret_cast<KernelFn>(code_.data()); }
  bool unrolled() const noexcept { return image_.entry_jump != kNoOffset; }

  /// Restores the canonical emission: initial selector in every field, no run patches.
  void reset() {
    std::memcpy(code_.data(), image_.bytes.data(), image_.size());
    patched_at_ = kNoOffset;
    qwords_ = 0;
  }

  /// Sets every opcode field to `init` and arms the entry/termination patches for a run
  /// over `qwords` data words. Only the bytes touched by the previous run are restored.
  void prepare(Selector init, std::size_t qwords) {
    set_selector(code_, image_, init);
    init_ = init;
    qwords_ = qwords;
    if (!unrolled()) {
      return;
    }
    restore(image_.entry_jump, 5);
    if (patched_at_ != kNoOffset) {
      restore(patched_at_, 5);
    }
    const RunSchedule plan = arm_schedule(code_, image_, qwords);
    patched_at_ = qwords == 0 ? kNoOffset : termination_patch_offset(image_, plan.exit_unit).value_or(kNoOffset);
  }

  std::uint64_t invoke(const std::byte* begin, const std::byte* end, std::uint64_t sum) const {
    return entry()(begin, end, sum);
  }

  /// Selector the most recent run left behind (see emulate_unrolled for the unrolled
  /// convention). Valid after prepare() + invoke().
  Selector final_op() const {
    if (qwords_ == 0) {
      return init_;
    }
    const std::size_t units = image_.layout.unit_count();
    std::size_t last = 0;
    if (unrolled()) {
      const RunSchedule plan = plan_schedule(qwords_, units);
      last = (plan.exit_unit + units - 1) % units;
    }
    return selector_of_opcode(code_[image_.layout.opcode_offset(image_.layout.targets[last])]);
  }

  std::vector<Selector> unit_ops() const {
    std::vector<Selector> ops;
    for (std::size_t u = 0; u < image_.layout.unit_count(); ++u) {
      ops.push_back(selector_of_opcode(code_[image_.layout.opcode_offset(u)]));
    }
    return ops;
  }

  /// prepare + invoke over `region`. Empty regions return `init` without executing the
  /// static loop, whose body always runs at least once.
  ChecksumState run(std::span<const std::byte> region, ChecksumState init = {}) {
    require_aligned(region);
    prepare(init.op, region.size() / 8);
    ChecksumState out = init;
    out.cursor = region.size();
    if (region.empty() && !unrolled()) {
      return out;
    }
    out.sum = invoke(region.data(), region.data() + region.size(), init.sum);
    out.op = final_op();
    return out;
  }

  /// Byte spans (offset, length) that prepare() rewrites from the golden image: the entry
  /// jump and the termination patch. Empty for the static loop.
  std::vector<std::pair<std::size_t, std::size_t>> patch_spans() const {
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    if (unrolled()) {
      spans.emplace_back(image_.entry_jump, 5);
    }
    if (patched_at_ != kNoOffset) {
      spans.emplace_back(patched_at_, 5);
    }
    return spans;
  }

  /// Layout with modification sites expressed relative to `region` (for the oracles).
  KernelLayout layout_for(std::span<const std::byte> region) const {
    KernelLayout layout = image_.layout;
    const auto code_offset = reinterpret_cast<std::intptr_t>(code_.data()) - reinterpret_cast<std::intptr_t>(region.data());
    bind_sites(layout, code_offset, region.size());
    return layout;
  }

  /// Site of the static loop's opcode byte inside `region`, if it lies there.
  std::optional<ModificationSite> site_in(std::span<const std::byte> region) const {
    const KernelLayout layout = layout_for(region);
    if (layout.site_offsets.empty() || !layout.site_offsets[0]) {
      return std::nullopt;
    }
    return ModificationSite::at_byte(*layout.site_offsets[0]);
  }

 private:
  void restore(std::size_t at, std::size_t len) { std::memcpy(code_.data() + at, image_.bytes.data() + at, len); }

  std::span<std::uint8_t> code_;
  KernelImage image_;
  std::size_t patched_at_ = kNoOffset;
  std::size_t qwords_ = 0;
  Selector init_ = Selector::adc;
};

}  // namespace smcguard
