#pragma once

// Generators for the self-modifying checksum kernels.
//
// All kernels share the calling convention
//   uint64_t kernel(const std::byte* begin, const std::byte* end, uint64_t sum)
// and return the final accumulator. The selector state lives in the code itself: each
// checksum unit's ADC-family opcode byte is toggled by the XOR of some unit.
//
// Register use inside a kernel: RBX accumulator, RSI or RCX cursor, RDI end, AL/DL
// scratch. Every other general register is saved (if callee-saved) and zeroed in the
// prologue so that corrupted code has no stray pointers to write through.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smcguard/checksum_oracle.hpp"
#include "smcguard/cpu_info.hpp"
#include "smcguard/error.hpp"
#include "smcguard/exec_memory.hpp"
#include "smcguard/layout.hpp"
#include "smcguard/x64_encoder.hpp"

namespace smcguard {

enum class Variant { static_loop, static_unrolled, dynamic_unrolled };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::static_loop: return "static";
    case Variant::static_unrolled: return "static-unrolled";
    case Variant::dynamic_unrolled: return "dynamic-unrolled";
  }
  return "?";
}

struct KernelConfig {
  Variant variant = Variant::dynamic_unrolled;
  /// Length in bytes of the region the kernel is meant to cover; must be a multiple of 8.
  std::size_t region_len = 0;
  /// Selector baked into the canonical emission (what reset() restores).
  Selector init = Selector::adc;
  std::size_t page_count = 2;
  std::size_t page_size = 0;  // 0: the OS page size
  /// static-unrolled only: number of units in the loop body and how far ahead each unit's
  /// modification target sits.
  std::size_t unroll_depth = 16;
  std::size_t modification_stride = 8;
};

inline constexpr std::size_t kNoOffset = static_cast<std::size_t>(-1);

/// A generated kernel before it is placed in executable memory.
struct KernelImage {
  Variant variant = Variant::static_loop;
  std::vector<std::uint8_t> bytes;  // canonical emission
  KernelLayout layout;              // the static loop is a single unit that targets itself
  std::size_t entry_jump = kNoOffset;
  std::size_t lap_tail = kNoOffset;
  std::size_t epilogue = 0;
  Selector init = Selector::adc;
  std::vector<std::pair<std::size_t, x64::Kind>> listing;  // instruction starts, address order

  std::size_t size() const noexcept { return bytes.size(); }
};

struct StaticKernel {
  KernelImage image;
  ModificationSite site;  // relative to the kernel's first byte
};

struct UnrolledKernel {
  KernelImage image;
  std::vector<ModificationSite> sites;  // one per unit, relative to the kernel's first byte
};

namespace detail {

using x64::Reg;
using x64::Reg8;

inline constexpr Reg kSavedRegs[] = {Reg::rbx, Reg::rbp, Reg::r12, Reg::r13, Reg::r14, Reg::r15};

class Emitter {
 public:
  explicit Emitter(x64::CodeBuffer& cb) : cb_(cb) {}

  std::size_t operator()(const x64::Instr& in) { return note(cb_.emit(in), in.kind); }
  std::size_t operator()(const x64::Instr& in, x64::Label l, std::int64_t addend = 0) {
    return note(cb_.emit(in, l, addend), in.kind);
  }

  x64::CodeBuffer& buffer() { return cb_; }
  std::vector<std::pair<std::size_t, x64::Kind>> take_listing() { return std::move(listing_); }

 private:
  std::size_t note(std::size_t at, x64::Kind k) {
    listing_.emplace_back(at, k);
    return at;
  }

  x64::CodeBuffer& cb_;
  std::vector<std::pair<std::size_t, x64::Kind>> listing_;
};

inline void emit_prologue(Emitter& e, Reg cursor) {
  for (Reg r : kSavedRegs) {
    e(x64::ins::push(r));
  }
  e(x64::ins::mov(Reg::rbx, Reg::rdx));
  if (cursor == Reg::rsi) {
    e(x64::ins::mov(Reg::rax, Reg::rdi));
    e(x64::ins::mov(Reg::rdi, Reg::rsi));
    e(x64::ins::mov(Reg::rsi, Reg::rax));
  } else {
    e(x64::ins::mov(Reg::rcx, Reg::rdi));
    e(x64::ins::mov(Reg::rdi, Reg::rsi));
  }
  for (Reg r : {Reg::rax, Reg::rdx, Reg::rbp, Reg::r8, Reg::r9, Reg::r10, Reg::r11, Reg::r12, Reg::r13, Reg::r14,
                Reg::r15}) {
    e(x64::ins::zero(r));
  }
  e(x64::ins::zero(cursor == Reg::rsi ? Reg::rcx : Reg::rsi));
  e(x64::ins::clc());
}

inline void emit_epilogue(Emitter& e) {
  e(x64::ins::mov(Reg::rax, Reg::rbx));
  for (auto it = std::rbegin(kSavedRegs); it != std::rend(kSavedRegs); ++it) {
    e(x64::ins::pop(*it));
  }
  e(x64::ins::ret());
}

/// The checksum body shared by all kernels up to (and including) the self-patching XOR.
inline void emit_body(Emitter& e, Reg cursor, x64::Label target) {
  e(x64::ins::adc(Reg::rbx, cursor));
  e(x64::ins::sets(Reg8::dl));
  e(x64::ins::setp(Reg8::al));
  e(x64::ins::shl(Reg8::al, 2));
  e(x64::ins::or_(Reg8::dl, Reg8::al));
  e(x64::ins::shl(Reg8::dl, 3));
  // +1 skips the REX.W prefix and lands on the opcode byte.
  e(x64::ins::xor_rip(0, Reg8::dl), target, static_cast<std::int64_t>(kOpcodeByteInUnit));
}

inline void emit_unit(Emitter& e, x64::Label target) {
  emit_body(e, Reg::rcx, target);
  e(x64::ins::lea(Reg::rcx, Reg::rcx, 8));
}

/// Writes `op` into the toggled field bits of every unit's opcode byte. Other bits are left
/// alone, so tampering with them persists across runs.
inline void set_fields(std::span<std::uint8_t> code, const KernelLayout& layout, Selector op) {
  constexpr std::uint8_t kToggled = 5U << 3;
  const std::uint8_t bits = x64::arith_opcode(selector_field(op)) & kToggled;
  for (std::size_t u = 0; u < layout.unit_count(); ++u) {
    std::uint8_t& b = code[layout.opcode_offset(u)];
    b = static_cast<std::uint8_t>((b & ~kToggled) | bits);
  }
}

inline void check_config(const KernelConfig& cfg) {
  if (cfg.region_len % 8 != 0) {
    throw Error(Errc::unaligned_region, "kernel region length must be a multiple of 8");
  }
}

}  // namespace detail

/// The simple single-site loop: one ADC-family instruction patched by the XOR ten
/// instructions later, looping with JG while end > cursor.
inline StaticKernel build_static_kernel(const KernelConfig& cfg) {
  using namespace detail;
  if (cfg.variant != Variant::static_loop) {
    throw Error(Errc::invalid_argument, "build_static_kernel needs the static variant");
  }
  check_config(cfg);

  x64::CodeBuffer cb;
  Emitter e(cb);
  const x64::Label loop = cb.new_label();

  emit_prologue(e, Reg::rsi);
  cb.bind(loop);
  const std::size_t loop_at = cb.size();
  emit_body(e, Reg::rsi, loop);
  e(x64::ins::lea(Reg::rsi, Reg::rsi, 8));
  e(x64::ins::cmp(Reg::rdi, Reg::rsi));
  e(x64::ins::jcc(x64::Cond::g, x64::Width::rel8), loop);
  const std::size_t epilogue = cb.size();
  emit_epilogue(e);
  cb.resolve_fixups();

  StaticKernel out;
  out.image.variant = Variant::static_loop;
  out.image.init = cfg.init;
  out.image.epilogue = epilogue;
  out.image.listing = e.take_listing();
  out.image.bytes = std::move(cb).take();

  KernelLayout& layout = out.image.layout;
  layout.page_size = cfg.page_size ? cfg.page_size : page_size();
  layout.page_count = 1;
  layout.prologue_len = loop_at;
  layout.unit_len = epilogue - loop_at;
  layout.units_per_page = 1;
  layout.epilogue_offset = epilogue;
  layout.unit_offsets = {loop_at};
  layout.targets = {0};

  set_fields(out.image.bytes, layout, cfg.init);
  out.site = ModificationSite::at_byte(layout.opcode_offset(0));
  return out;
}

namespace detail {

struct Measured {
  std::size_t prologue_len;
  std::size_t unit_len;
};

/// First pass: emit the prologue and one unit against placeholder targets to learn sizes.
inline Measured measure_unrolled() {
  x64::CodeBuffer cb;
  Emitter e(cb);
  const x64::Label placeholder = cb.new_label();
  emit_prologue(e, Reg::rcx);
  e(x64::ins::jmp(x64::Width::rel32), placeholder);
  const std::size_t prologue_len = cb.size();
  cb.bind(placeholder);
  emit_unit(e, placeholder);
  return {prologue_len, cb.size() - prologue_len};
}

inline KernelLayout plan_for(const KernelConfig& cfg, const Measured& m) {
  const std::size_t ps = cfg.page_size ? cfg.page_size : page_size();
  if (cfg.variant == Variant::dynamic_unrolled) {
    return plan_layout(ps, m.unit_len, m.prologue_len, cfg.page_count);
  }
  return plan_compact_layout(m.unit_len, m.prologue_len, cfg.unroll_depth, cfg.modification_stride, ps);
}

}  // namespace detail

/// Unrolled kernel (dual-page dynamic, or compact static-unrolled), emitted in two passes:
/// sizes first, then the final code at the offsets `layout` prescribes.
inline UnrolledKernel build_unrolled_kernel(const KernelConfig& cfg, const KernelLayout& layout) {
  using namespace detail;
  if (cfg.variant == Variant::static_loop) {
    throw Error(Errc::invalid_argument, "build_unrolled_kernel needs an unrolled variant");
  }
  check_config(cfg);
  const Measured m = measure_unrolled();
  if (m.unit_len != layout.unit_len || m.prologue_len != layout.prologue_len) {
    throw Error(Errc::layout_mismatch, "measured unit " + std::to_string(m.unit_len) + "/prologue " +
                                           std::to_string(m.prologue_len) + " bytes differ from layout");
  }
  const std::size_t units = layout.unit_count();
  if (units == 0 || layout.targets.size() != units) {
    throw Error(Errc::layout_mismatch, "layout has no units or a bad target table");
  }

  x64::CodeBuffer cb;
  Emitter e(cb);
  std::vector<x64::Label> unit_labels;
  unit_labels.reserve(units);
  for (std::size_t u = 0; u < units; ++u) {
    unit_labels.push_back(cb.new_label());
  }
  const x64::Label lap_tail = cb.new_label();
  const x64::Label epilogue = cb.new_label();

  emit_prologue(e, Reg::rcx);
  const std::size_t entry_jump = e(x64::ins::jmp(x64::Width::rel32), unit_labels[0]);

  for (std::size_t u = 0; u < units; ++u) {
    cb.pad_to(layout.unit_offsets[u]);
    cb.bind(unit_labels[u]);
    emit_unit(e, unit_labels[layout.targets[u]]);
    const bool last = u + 1 == units;
    const std::size_t next_at = last ? layout.epilogue_offset : layout.unit_offsets[u + 1];
    if (next_at != cb.size()) {
      e(x64::ins::jmp(x64::Width::rel32), last ? lap_tail : unit_labels[u + 1]);
    }
  }

  cb.pad_to(layout.epilogue_offset);
  cb.bind(lap_tail);
  e(x64::ins::cmp(Reg::rdi, Reg::rcx));
  e(x64::ins::jcc(x64::Cond::g, x64::Width::rel32), unit_labels[0]);
  cb.bind(epilogue);
  const std::size_t epilogue_at = cb.size();
  emit_epilogue(e);
  cb.resolve_fixups();

  UnrolledKernel out;
  out.image.variant = cfg.variant;
  out.image.init = cfg.init;
  out.image.layout = layout;
  out.image.entry_jump = entry_jump;
  out.image.lap_tail = layout.epilogue_offset;
  out.image.epilogue = epilogue_at;
  out.image.listing = e.take_listing();
  out.image.bytes = std::move(cb).take();
  set_fields(out.image.bytes, layout, cfg.init);
  for (std::size_t u = 0; u < units; ++u) {
    out.sites.push_back(ModificationSite::at_byte(layout.opcode_offset(u)));
  }
  return out;
}

inline UnrolledKernel build_unrolled_kernel(const KernelConfig& cfg) {
  return build_unrolled_kernel(cfg, detail::plan_for(cfg, detail::measure_unrolled()));
}

/// Measured (prologue, unit) sizes of the unrolled generator.
inline std::pair<std::size_t, std::size_t> unrolled_sizes() {
  const auto m = detail::measure_unrolled();
  return {m.prologue_len, m.unit_len};
}

// ---------------------------------------------------------------------------
// Run-time patches. Both are applied before execution and undone by restoring the
// canonical bytes.

/// Byte range a termination patch for `iterations` occupies, or nullopt when none is needed.
inline std::optional<std::size_t> termination_patch_offset(const KernelImage& image, std::size_t iterations) {
  const std::size_t units = image.layout.unit_count();
  if (iterations == 0 || iterations >= units) {
    return std::nullopt;
  }
  // The cursor advance (last 4 bytes) of the final unit becomes `jmp epilogue`; the jump's
  // last byte spills onto the REX prefix of the first unit that must not run. No opcode
  // field lies in that span, so no in-flight toggle can corrupt the jump.
  return image.layout.unit_offsets[iterations - 1] + image.layout.unit_len - 4;
}

/// Stops an unrolled chain after `iterations` units. iterations == 0 redirects the entry
/// jump straight to the epilogue; iterations == unit count needs no patch.
inline void patch_termination(std::span<std::uint8_t> code, const KernelImage& image, std::size_t iterations) {
  if (image.entry_jump == kNoOffset) {
    throw Error(Errc::invalid_argument, "termination patches apply to unrolled kernels only");
  }
  if (iterations > image.layout.unit_count()) {
    throw Error(Errc::iteration_out_of_range, std::to_string(iterations) + " exceeds the unit chain");
  }
  if (iterations == 0) {
    x64::write_rel32(code, image.entry_jump + 1,
                     static_cast<std::int64_t>(image.epilogue) - static_cast<std::int64_t>(image.entry_jump + 5));
    return;
  }
  if (const auto at = termination_patch_offset(image, iterations)) {
    code[*at] = 0xE9;
    x64::write_rel32(code, *at + 1, static_cast<std::int64_t>(image.epilogue) - static_cast<std::int64_t>(*at + 5));
  }
}

/// Points the prologue's jump at the unit that processes the first data word.
inline void patch_entry(std::span<std::uint8_t> code, const KernelImage& image, std::size_t unit) {
  const std::size_t target = image.layout.unit_offsets.at(unit);
  x64::write_rel32(code, image.entry_jump + 1,
                   static_cast<std::int64_t>(target) - static_cast<std::int64_t>(image.entry_jump + 5));
}

/// Applies entry and termination patches for a run over `qwords` data words.
inline RunSchedule arm_schedule(std::span<std::uint8_t> code, const KernelImage& image, std::size_t qwords) {
  const RunSchedule plan = plan_schedule(qwords, image.layout.unit_count());
  if (qwords == 0) {
    patch_termination(code, image, 0);
  } else {
    patch_entry(code, image, plan.entry_unit);
    patch_termination(code, image, plan.exit_unit);
  }
  return plan;
}

inline void set_selector(std::span<std::uint8_t> code, const KernelImage& image, Selector op) {
  detail::set_fields(code, image.layout, op);
}

// ---------------------------------------------------------------------------

struct ReportContext {
  CpuInfo cpu;
  std::size_t page_size = 0;
  std::uintptr_t code_base = 0;
  std::size_t code_size = 0;
};

namespace detail {
inline std::string hex(std::uintmax_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%jX", v);
  return buf;
}
}  // namespace detail

/// Processor, page and layout details, one `key: value` per line.
inline std::string layout_report(const KernelLayout& layout, const ReportContext& ctx) {
  using detail::hex;
  std::string out;
  auto line = [&out](const std::string& s) {
    out += s;
    out += '\n';
  };
  line("Manufacturer: " + ctx.cpu.manufacturer);
  line("DisplayModel: " + hex(ctx.cpu.display_model));
  line("DisplayFamily: " + hex(ctx.cpu.display_family));
  line("Architecture Performance Monitoring Version: " + std::to_string(ctx.cpu.pmu_version));
  line("Number of Performance Counters per Logical Processor: " + std::to_string(ctx.cpu.pmu_counters));
  line("PMC bit width: " + std::to_string(ctx.cpu.pmu_width));
  line("The page size for this system is " + std::to_string(ctx.page_size) + " bytes.");
  line("Code segment base: " + hex(ctx.code_base));
  line("Code segment size: " + hex(ctx.code_size));
  line("End address: " + hex(ctx.code_base + ctx.code_size));
  line("Number of pages: " + std::to_string(layout.page_count));
  line("Unrolled loop size per page: " + std::to_string(layout.units_per_page));
  line("Intro bytes: " + hex(layout.prologue_len));
  line("Code size: " + hex(layout.unit_len));
  return out;
}

}  // namespace smcguard
