#include <gtest/gtest.h>

#include <cstring>
#include <vector>

#include "smcguard/x64_encoder.hpp"
#include "support/objdump.hpp"

namespace smcguard::x64 {
namespace {

using Bytes = std::vector<std::uint8_t>;

TEST(Encode, StaticLoopListingBytes) {
  EXPECT_EQ(encode(ins::adc(Reg::rbx, Reg::rsi)), (Bytes{0x48, 0x13, 0x1E}));
  EXPECT_EQ(encode(ins::sets(Reg8::dl)), (Bytes{0x0F, 0x98, 0xC2}));
  EXPECT_EQ(encode(ins::setp(Reg8::al)), (Bytes{0x0F, 0x9A, 0xC0}));
  EXPECT_EQ(encode(ins::shl(Reg8::al, 2)), (Bytes{0xC0, 0xE0, 0x02}));
  EXPECT_EQ(encode(ins::or_(Reg8::dl, Reg8::al)), (Bytes{0x0A, 0xD0}));
  EXPECT_EQ(encode(ins::shl(Reg8::dl, 3)), (Bytes{0xC0, 0xE2, 0x03}));
}

TEST(Encode, XorFieldGivesXorOpcode) {
  EXPECT_EQ(encode(ins::arith(6, Reg::rbx, Reg::rsi)), (Bytes{0x48, 0x33, 0x1E}));
}

TEST(Encode, UnitFormsWithRcxCursor) {
  EXPECT_EQ(encode(ins::adc(Reg::rbx, Reg::rcx)), (Bytes{0x48, 0x13, 0x19}));
  EXPECT_EQ(encode(ins::lea(Reg::rcx, Reg::rcx, 8)), (Bytes{0x48, 0x8D, 0x49, 0x08}));
  EXPECT_EQ(encode(ins::lea(Reg::rsi, Reg::rsi, 8)), (Bytes{0x48, 0x8D, 0x76, 0x08}));
  EXPECT_EQ(encode(ins::cmp(Reg::rdi, Reg::rsi)), (Bytes{0x48, 0x39, 0xF7}));
}

TEST(Encode, RipRelativeDisplacementIsFromInstructionEnd) {
  // XOR at offset 17 aimed at offset 1: disp = 1 - 23.
  EXPECT_EQ(encode(ins::xor_rip(1, Reg8::dl), 17), (Bytes{0x30, 0x15, 0xEA, 0xFF, 0xFF, 0xFF}));
  // Backward by 16 from the instruction's end.
  EXPECT_EQ(encode(ins::xor_rip(84, Reg8::dl), 94), (Bytes{0x30, 0x15, 0xF0, 0xFF, 0xFF, 0xFF}));
}

TEST(Encode, BranchesAndMisc) {
  EXPECT_EQ(encode(ins::jcc(Cond::g, Width::rel8, 0), 30), (Bytes{0x7F, 0xE0}));
  EXPECT_EQ(encode(ins::jcc(Cond::g, Width::rel32, 100), 0), (Bytes{0x0F, 0x8F, 94, 0, 0, 0}));
  EXPECT_EQ(encode(ins::jmp(Width::rel8, 7), 0), (Bytes{0xEB, 0x05}));
  EXPECT_EQ(encode(ins::jmp(Width::rel32, 0), 0), (Bytes{0xE9, 0xFB, 0xFF, 0xFF, 0xFF}));
  EXPECT_EQ(encode(ins::ret()), (Bytes{0xC3}));
  EXPECT_EQ(encode(ins::clc()), (Bytes{0xF8}));
  EXPECT_EQ(encode(ins::push(Reg::rbx)), (Bytes{0x53}));
  EXPECT_EQ(encode(ins::push(Reg::r15)), (Bytes{0x41, 0x57}));
  EXPECT_EQ(encode(ins::pop(Reg::r12)), (Bytes{0x41, 0x5C}));
  EXPECT_EQ(encode(ins::mov(Reg::rbx, Reg::rdx)), (Bytes{0x48, 0x89, 0xD3}));
  EXPECT_EQ(encode(ins::zero(Reg::rax)), (Bytes{0x31, 0xC0}));
  EXPECT_EQ(encode(ins::zero(Reg::r9)), (Bytes{0x45, 0x31, 0xC9}));
  EXPECT_EQ(encode(ins::call(Reg::rax)), (Bytes{0xFF, 0xD0}));
  EXPECT_EQ(encode(ins::call(Reg::r8)), (Bytes{0x41, 0xFF, 0xD0}));
}

TEST(Encode, DisplacementOutOfRange) {
  try {
    encode(ins::jcc(Cond::g, Width::rel8, 200), 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::displacement_out_of_range);
  }
  EXPECT_THROW(encode(ins::jmp(Width::rel32, std::int64_t{1} << 33), 0), Error);
  EXPECT_THROW(encode(ins::lea(Reg::rcx, Reg::rcx, 300)), Error);
}

TEST(Encode, UnsupportedOperands) {
  for (Reg base : {Reg::rsp, Reg::rbp, Reg::r12, Reg::r13}) {
    try {
      encode(ins::adc(Reg::rbx, base));
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::unsupported_operand);
    }
  }
  EXPECT_THROW(encode(ins::shl(Reg8::al, 64)), Error);
  EXPECT_THROW(arith_opcode(8), Error);
}

TEST(Encode, LengthLawMatchesEncoding) {
  const std::vector<Instr> all = {
      ins::adc(Reg::rbx, Reg::rsi), ins::sets(Reg8::dl),        ins::setp(Reg8::al),
      ins::shl(Reg8::al, 2),        ins::or_(Reg8::dl, Reg8::al), ins::xor_rip(0, Reg8::dl),
      ins::lea(Reg::rcx, Reg::rcx, 8), ins::cmp(Reg::rdi, Reg::rcx), ins::jcc(Cond::g, Width::rel8, 0),
      ins::jcc(Cond::g, Width::rel32, 0), ins::jmp(Width::rel8, 0), ins::jmp(Width::rel32, 0),
      ins::call(Reg::r11),          ins::ret(),                  ins::clc(),
      ins::push(Reg::r13),          ins::pop(Reg::rbp),          ins::mov(Reg::rsp, Reg::r8),
      ins::zero(Reg::r14),          ins::int3()};
  for (const auto& in : all) {
    EXPECT_EQ(encode(in, 10).size(), encoded_length(in));
    EXPECT_EQ(encode(in, 10), encode(in, 10));
  }
}

TEST(ArithOpcode, TableRows) {
  const std::pair<unsigned, std::uint8_t> rows[] = {{2, 0x13}, {0, 0x03}, {4, 0x23}, {7, 0x3B},
                                                    {1, 0x0B}, {3, 0x1B}, {5, 0x2B}, {6, 0x33}};
  for (const auto& [field, opcode] : rows) {
    EXPECT_EQ(arith_opcode(field), opcode);
    EXPECT_EQ(decode_field(opcode), field);
  }
}

TEST(ArithOpcode, RoundTripAndRejects) {
  for (unsigned f = 0; f < 8; ++f) EXPECT_EQ(decode_field(arith_opcode(f)), f);
  int accepted = 0;
  for (unsigned b = 0; b < 256; ++b) {
    try {
      decode_field(static_cast<std::uint8_t>(b));
      ++accepted;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::unknown_opcode);
    }
  }
  EXPECT_EQ(accepted, 8);
}

TEST(CodeBuffer, ForwardBranchToLabel) {
  CodeBuffer cb;
  const Label l = cb.new_label();
  cb.emit(ins::jcc(Cond::g, Width::rel8), l);
  cb.pad_to(7, 0x90);
  cb.bind(l);
  cb.resolve_fixups();
  EXPECT_EQ(cb.bytes()[1], 5);
  EXPECT_EQ(cb.pending_fixups(), 0u);
}

TEST(CodeBuffer, BackwardRipRelativeWithAddend) {
  CodeBuffer cb;
  const Label l = cb.new_label();
  cb.bind(l);
  cb.emit(ins::adc(Reg::rbx, Reg::rsi));
  cb.emit(ins::sets(Reg8::dl));
  cb.emit(ins::setp(Reg8::al));
  cb.emit(ins::shl(Reg8::al, 2));
  cb.emit(ins::or_(Reg8::dl, Reg8::al));
  cb.emit(ins::shl(Reg8::dl, 3));
  const std::size_t size_before = cb.size();
  const std::size_t at = cb.emit(ins::xor_rip(0, Reg8::dl), l, 1);
  cb.resolve_fixups();
  EXPECT_EQ(cb.size(), size_before + 6);
  // "$-2-3-3-3-2-3": the target is 16 bytes before the XOR's first byte.
  EXPECT_EQ(at - (2 + 3 + 3 + 3 + 2 + 3), 1u);
  std::int32_t disp = 0;
  std::memcpy(&disp, cb.bytes().data() + at + 2, 4);
  EXPECT_EQ(disp, -22);
}

TEST(CodeBuffer, ResolveKeepsLength) {
  CodeBuffer cb;
  const Label a = cb.new_label();
  const Label b = cb.new_label();
  cb.emit(ins::jmp(Width::rel32), b);
  cb.bind(a);
  cb.emit(ins::ret());
  cb.bind(b);
  cb.emit(ins::jmp(Width::rel8), a);
  const std::size_t len = cb.size();
  cb.resolve_fixups();
  EXPECT_EQ(cb.size(), len);
  EXPECT_EQ(cb.bytes()[7], static_cast<std::uint8_t>(-3));
}

TEST(CodeBuffer, UnboundLabel) {
  CodeBuffer cb;
  const Label l = cb.new_label();
  cb.emit(ins::jmp(Width::rel32), l);
  try {
    cb.resolve_fixups();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::unbound_label);
  }
}

TEST(CodeBuffer, Rel8OverflowAtResolve) {
  CodeBuffer cb;
  const Label l = cb.new_label();
  cb.emit(ins::jmp(Width::rel8), l);
  cb.pad_to(400);
  cb.bind(l);
  EXPECT_THROW(cb.resolve_fixups(), Error);
}

TEST(CodeBuffer, PadBackwardsIsAnError) {
  CodeBuffer cb;
  cb.emit(ins::clc());
  cb.emit(ins::clc());
  EXPECT_THROW(cb.pad_to(1), Error);
}

TEST(Disassembler, StaticLoopMnemonics) {
  if (!objdump::available()) GTEST_SKIP() << "objdump not found";
  CodeBuffer cb;
  const Label loop = cb.new_label();
  cb.bind(loop);
  cb.emit(ins::adc(Reg::rbx, Reg::rsi));
  cb.emit(ins::sets(Reg8::dl));
  cb.emit(ins::setp(Reg8::al));
  cb.emit(ins::shl(Reg8::al, 2));
  cb.emit(ins::or_(Reg8::dl, Reg8::al));
  cb.emit(ins::shl(Reg8::dl, 3));
  cb.emit(ins::xor_rip(0, Reg8::dl), loop, 1);
  cb.emit(ins::lea(Reg::rsi, Reg::rsi, 8));
  cb.emit(ins::cmp(Reg::rdi, Reg::rsi));
  cb.emit(ins::jcc(Cond::g, Width::rel8), loop);
  cb.resolve_fixups();
  const auto lines = objdump::disassemble(cb.bytes());
  const std::vector<std::string> expected = {
      "adc rbx,QWORD PTR [rsi]", "sets dl", "setp al", "shl al,0x2", "or dl,al", "shl dl,0x3",
      "xor BYTE PTR [rip+0xffffffffffffffea],dl", "lea rsi,[rsi+0x8]", "cmp rdi,rsi", "jg 0x0"};
  ASSERT_EQ(lines.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(lines[i].text, expected[i]);
}

TEST(Disassembler, EveryArithFieldAndRegister) {
  if (!objdump::available()) GTEST_SKIP() << "objdump not found";
  static constexpr const char* kNames[] = {"rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
                                           "r8",  "r9",  "r10", "r11", "r12", "r13", "r14", "r15"};
  CodeBuffer cb;
  std::vector<std::string> expected;
  for (const auto& op : kArithOps) {
    for (unsigned d = 0; d < 16; ++d) {
      for (unsigned b : {0U, 1U, 2U, 3U, 6U, 7U, 8U, 9U, 14U, 15U}) {
        cb.emit(ins::arith(op.field, static_cast<Reg>(d), static_cast<Reg>(b)));
        expected.push_back(std::string(op.mnemonic) + " " + kNames[d] + ",QWORD PTR [" + kNames[b] + "]");
      }
    }
  }
  for (unsigned r = 0; r < 16; ++r) {
    cb.emit(ins::push(static_cast<Reg>(r)));
    expected.push_back(std::string("push ") + kNames[r]);
    cb.emit(ins::zero(static_cast<Reg>(r)));
    const std::string r32 = r < 8 ? std::string("e") + (kNames[r] + 1) : std::string(kNames[r]) + "d";
    expected.push_back("xor " + r32 + "," + r32);
  }
  const auto lines = objdump::disassemble(cb.bytes());
  ASSERT_EQ(lines.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(lines[i].text, expected[i]) << i;
}

}  // namespace
}  // namespace smcguard::x64
