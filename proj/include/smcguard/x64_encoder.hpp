#pragma once

// Byte-exact encoder for the handful of x86-64 instruction forms the checksum kernels use.
// This is deliberately not an assembler: each kind has one encoding, branch widths are
// chosen by the caller and never relaxed.

#include <array>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smcguard/error.hpp"

namespace smcguard::x64 {

enum class Reg : std::uint8_t { rax, rcx, rdx, rbx, rsp, rbp, rsi, rdi, r8, r9, r10, r11, r12, r13, r14, r15 };

/// Byte registers reachable without a REX prefix.
enum class Reg8 : std::uint8_t { al, cl, dl, bl };

enum class Cond : std::uint8_t { o, no, b, ae, e, ne, be, a, s, ns, p, np, l, ge, le, g };

enum class Width : std::uint8_t { rel8, rel32 };

constexpr unsigned code(Reg r) noexcept { return static_cast<unsigned>(r); }
constexpr unsigned code(Reg8 r) noexcept { return static_cast<unsigned>(r); }

// ---------------------------------------------------------------------------
// ADD/OR/ADC/SBB/AND/SUB/XOR/CMP r64, r/m64 share opcode 0x03 + (field << 3).

struct ArithOp {
  unsigned field;
  std::string_view mnemonic;
};

inline constexpr std::array<ArithOp, 8> kArithOps = {{
    {0, "add"}, {1, "or"}, {2, "adc"}, {3, "sbb"}, {4, "and"}, {5, "sub"}, {6, "xor"}, {7, "cmp"},
}};

inline std::uint8_t arith_opcode(unsigned field) {
  if (field > 7) {
    throw Error(Errc::unsupported_operand, "arith field must be 0-7");
  }
  return static_cast<std::uint8_t>(0x03 + (field << 3));
}

inline unsigned decode_field(std::uint8_t opcode) {
  if ((opcode & 0xC7) != 0x03) {
    throw Error(Errc::unknown_opcode, "byte is not an arith r64, r/m64 opcode");
  }
  return (opcode >> 3) & 7U;
}

// ---------------------------------------------------------------------------

enum class Kind : std::uint8_t {
  arith_reg_mem,  // <arith> r64, [r64]
  setcc,          // SETcc r8
  shl_imm,        // SHL r8, imm8
  or_reg8,        // OR r8, r8
  xor_rip_mem8,   // XOR BYTE PTR [rip + disp32], r8
  lea_disp8,      // LEA r64, [r64 + disp8]
  cmp_reg,        // CMP r64, r64
  jcc,
  jmp,
  call_reg,       // CALL r64
  ret,
  clc,
  push,
  pop,
  mov_reg,        // MOV r64, r64
  zero_reg,       // XOR r32, r32
  int3,
};

/// One instruction. Branch and RIP-relative forms carry an absolute `target` offset within
/// the code buffer; encode() turns it into a displacement from the instruction's end.
struct Instr {
  Kind kind = Kind::int3;
  unsigned field = 0;
  Reg dst = Reg::rax;
  Reg src = Reg::rax;
  Reg8 dst8 = Reg8::al;
  Reg8 src8 = Reg8::al;
  Cond cond = Cond::o;
  Width width = Width::rel32;
  std::int64_t imm = 0;
  std::int64_t target = 0;
};

namespace ins {
inline Instr arith(unsigned field, Reg dst, Reg base) { return {.kind = Kind::arith_reg_mem, .field = field, .dst = dst, .src = base}; }
inline Instr adc(Reg dst, Reg base) { return arith(2, dst, base); }
inline Instr setcc(Cond c, Reg8 r) { return {.kind = Kind::setcc, .dst8 = r, .cond = c}; }
inline Instr sets(Reg8 r) { return setcc(Cond::s, r); }
inline Instr setp(Reg8 r) { return setcc(Cond::p, r); }
inline Instr shl(Reg8 r, std::int64_t n) { return {.kind = Kind::shl_imm, .dst8 = r, .imm = n}; }
inline Instr or_(Reg8 d, Reg8 s) { return {.kind = Kind::or_reg8, .dst8 = d, .src8 = s}; }
inline Instr xor_rip(std::int64_t target, Reg8 s) { return {.kind = Kind::xor_rip_mem8, .src8 = s, .target = target}; }
inline Instr lea(Reg d, Reg base, std::int64_t disp) { return {.kind = Kind::lea_disp8, .dst = d, .src = base, .imm = disp}; }
inline Instr cmp(Reg a, Reg b) { return {.kind = Kind::cmp_reg, .dst = a, .src = b}; }
inline Instr jcc(Cond c, Width w, std::int64_t target = 0) { return {.kind = Kind::jcc, .cond = c, .width = w, .target = target}; }
inline Instr jmp(Width w, std::int64_t target = 0) { return {.kind = Kind::jmp, .width = w, .target = target}; }
inline Instr call(Reg r) { return {.kind = Kind::call_reg, .dst = r}; }
inline Instr ret() { return {.kind = Kind::ret}; }
inline Instr clc() { return {.kind = Kind::clc}; }
inline Instr push(Reg r) { return {.kind = Kind::push, .dst = r}; }
inline Instr pop(Reg r) { return {.kind = Kind::pop, .dst = r}; }
inline Instr mov(Reg d, Reg s) { return {.kind = Kind::mov_reg, .dst = d, .src = s}; }
inline Instr zero(Reg r) { return {.kind = Kind::zero_reg, .dst = r}; }
inline Instr int3() { return {.kind = Kind::int3}; }
}  // namespace ins

/// Fixed encoded length of an instruction; depends only on kind, width and whether the
/// register operands need a REX prefix.
inline std::size_t encoded_length(const Instr& in) {
  const bool ext = code(in.dst) >= 8;
  switch (in.kind) {
    case Kind::arith_reg_mem: return 3;
    case Kind::setcc: return 3;
    case Kind::shl_imm: return 3;
    case Kind::or_reg8: return 2;
    case Kind::xor_rip_mem8: return 6;
    case Kind::lea_disp8: return 4;
    case Kind::cmp_reg: return 3;
    case Kind::jcc: return in.width == Width::rel8 ? 2 : 6;
    case Kind::jmp: return in.width == Width::rel8 ? 2 : 5;
    case Kind::call_reg: return ext ? 3 : 2;
    case Kind::ret:
    case Kind::clc:
    case Kind::int3: return 1;
    case Kind::push:
    case Kind::pop: return ext ? 2 : 1;
    case Kind::mov_reg: return 3;
    case Kind::zero_reg: return ext ? 3 : 2;
  }
  return 0;
}

namespace detail {

inline std::uint8_t rex_w(Reg reg, Reg rm) {
  return static_cast<std::uint8_t>(0x48 | ((code(reg) >> 3) << 2) | (code(rm) >> 3));
}

inline std::uint8_t modrm(unsigned mod, unsigned reg, unsigned rm) {
  return static_cast<std::uint8_t>((mod << 6) | ((reg & 7) << 3) | (rm & 7));
}

inline void put_le(std::vector<std::uint8_t>& out, std::int64_t v, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
  }
}

inline std::int64_t checked_disp(std::int64_t disp, Width w) {
  const bool fits = w == Width::rel8
                        ? disp >= std::numeric_limits<std::int8_t>::min() && disp <= std::numeric_limits<std::int8_t>::max()
                        : disp >= std::numeric_limits<std::int32_t>::min() && disp <= std::numeric_limits<std::int32_t>::max();
  if (!fits) {
    throw Error(Errc::displacement_out_of_range, "displacement " + std::to_string(disp) + " does not fit");
  }
  return disp;
}

inline void require_plain_base(Reg base) {
  // rsp/r12 need a SIB byte and rbp/r13 with mod=00 mean RIP-relative.
  if ((code(base) & 7) == 4 || (code(base) & 7) == 5) {
    throw Error(Errc::unsupported_operand, "base register needs SIB or displacement form");
  }
}

}  // namespace detail

/// Encodes `in` as if placed at buffer offset `at`.
inline std::vector<std::uint8_t> encode(const Instr& in, std::int64_t at = 0) {
  using namespace detail;
  std::vector<std::uint8_t> out;
  out.reserve(8);
  const std::int64_t end = at + static_cast<std::int64_t>(encoded_length(in));
  switch (in.kind) {
    case Kind::arith_reg_mem:
      require_plain_base(in.src);
      out = {rex_w(in.dst, in.src), arith_opcode(in.field), modrm(0, code(in.dst), code(in.src))};
      break;
    case Kind::setcc:
      out = {0x0F, static_cast<std::uint8_t>(0x90 | static_cast<unsigned>(in.cond)), modrm(3, 0, code(in.dst8))};
      break;
    case Kind::shl_imm:
      if (in.imm < 0 || in.imm > 63) {
        throw Error(Errc::unsupported_operand, "shift count out of range");
      }
      out = {0xC0, modrm(3, 4, code(in.dst8)), static_cast<std::uint8_t>(in.imm)};
      break;
    case Kind::or_reg8:
      out = {0x0A, modrm(3, code(in.dst8), code(in.src8))};
      break;
    case Kind::xor_rip_mem8:
      out = {0x30, modrm(0, code(in.src8), 5)};
      put_le(out, checked_disp(in.target - end, Width::rel32), 4);
      break;
    case Kind::lea_disp8:
      if ((code(in.src) & 7) == 4) {
        throw Error(Errc::unsupported_operand, "LEA base needs SIB");
      }
      out = {rex_w(in.dst, in.src), 0x8D, modrm(1, code(in.dst), code(in.src))};
      put_le(out, checked_disp(in.imm, Width::rel8), 1);
      break;
    case Kind::cmp_reg:
      out = {rex_w(in.src, in.dst), 0x39, modrm(3, code(in.src), code(in.dst))};
      break;
    case Kind::jcc:
      if (in.width == Width::rel8) {
        out = {static_cast<std::uint8_t>(0x70 | static_cast<unsigned>(in.cond))};
        put_le(out, checked_disp(in.target - end, Width::rel8), 1);
      } else {
        out = {0x0F, static_cast<std::uint8_t>(0x80 | static_cast<unsigned>(in.cond))};
        put_le(out, checked_disp(in.target - end, Width::rel32), 4);
      }
      break;
    case Kind::jmp:
      if (in.width == Width::rel8) {
        out = {0xEB};
        put_le(out, checked_disp(in.target - end, Width::rel8), 1);
      } else {
        out = {0xE9};
        put_le(out, checked_disp(in.target - end, Width::rel32), 4);
      }
      break;
    case Kind::call_reg:
      if (code(in.dst) >= 8) out.push_back(0x41);
      out.push_back(0xFF);
      out.push_back(modrm(3, 2, code(in.dst)));
      break;
    case Kind::ret: out = {0xC3}; break;
    case Kind::clc: out = {0xF8}; break;
    case Kind::int3: out = {0xCC}; break;
    case Kind::push:
    case Kind::pop:
      if (code(in.dst) >= 8) out.push_back(0x41);
      out.push_back(static_cast<std::uint8_t>((in.kind == Kind::push ? 0x50 : 0x58) + (code(in.dst) & 7)));
      break;
    case Kind::mov_reg:
      out = {rex_w(in.src, in.dst), 0x89, modrm(3, code(in.src), code(in.dst))};
      break;
    case Kind::zero_reg:
      if (code(in.dst) >= 8) out.push_back(0x45);
      out.push_back(0x31);
      out.push_back(modrm(3, code(in.dst), code(in.dst)));
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------

struct Label {
  std::uint32_t id;
  bool operator==(const Label&) const = default;
};

/// Growable code image with labels and pending relative-displacement patches.
class CodeBuffer {
 public:
  Label new_label() {
    labels_.emplace_back();
    return Label{static_cast<std::uint32_t>(labels_.size() - 1)};
  }

  void bind(Label l) { bind_at(l, bytes_.size()); }

  void bind_at(Label l, std::size_t offset) { labels_.at(l.id) = offset; }

  std::optional<std::size_t> label_offset(Label l) const { return labels_.at(l.id); }

  /// Appends `in` (whose `target` is already absolute) and returns its start offset.
  std::size_t emit(const Instr& in) {
    const std::size_t at = bytes_.size();
    const auto enc = encode(in, static_cast<std::int64_t>(at));
    bytes_.insert(bytes_.end(), enc.begin(), enc.end());
    return at;
  }

  /// Appends a branch or RIP-relative instruction aimed at `target + addend`, resolved later.
  std::size_t emit(Instr in, Label target, std::int64_t addend = 0) {
    const std::size_t at = bytes_.size();
    in.target = static_cast<std::int64_t>(at + encoded_length(in));
    const auto enc = encode(in, static_cast<std::int64_t>(at));
    const std::size_t width = in.kind == Kind::xor_rip_mem8 || in.width == Width::rel32 ? 4 : 1;
    fixups_.push_back({at + enc.size() - width, width, at + enc.size(), target, addend});
    bytes_.insert(bytes_.end(), enc.begin(), enc.end());
    return at;
  }

  /// Fills with `fill` up to `offset`; emitting past a requested position is a layout bug.
  void pad_to(std::size_t offset, std::uint8_t fill = 0xCC) {
    if (offset < bytes_.size()) {
      throw Error(Errc::encoding_error, "pad_to target " + std::to_string(offset) + " already passed");
    }
    bytes_.resize(offset, fill);
  }

  void resolve_fixups() {
    for (const Fixup& f : fixups_) {
      const auto& target = labels_.at(f.label.id);
      if (!target) {
        throw Error(Errc::unbound_label, "label " + std::to_string(f.label.id) + " referenced but never bound");
      }
      const std::int64_t disp = static_cast<std::int64_t>(*target) + f.addend - static_cast<std::int64_t>(f.end);
      detail::checked_disp(disp, f.width == 1 ? Width::rel8 : Width::rel32);
      for (std::size_t i = 0; i < f.width; ++i) {
        bytes_[f.pos + i] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(disp) >> (8 * i));
      }
    }
    fixups_.clear();
  }

  std::size_t size() const noexcept { return bytes_.size(); }
  std::size_t pending_fixups() const noexcept { return fixups_.size(); }
  std::span<const std::uint8_t> bytes() const noexcept { return bytes_; }
  std::vector<std::uint8_t> take() && { return std::move(bytes_); }

 private:
  struct Fixup {
    std::size_t pos;
    std::size_t width;
    std::size_t end;
    Label label;
    std::int64_t addend;
  };

  std::vector<std::uint8_t> bytes_;
  std::vector<std::optional<std::size_t>> labels_;
  std::vector<Fixup> fixups_;
};

/// Little-endian rel32 write for patching already-emitted jumps in place.
inline void write_rel32(std::span<std::uint8_t> code, std::size_t pos, std::int64_t disp) {
  detail::checked_disp(disp, Width::rel32);
  const auto v = static_cast<std::int32_t>(disp);
  std::memcpy(code.data() + pos, &v, sizeof v);
}

}  // namespace smcguard::x64
