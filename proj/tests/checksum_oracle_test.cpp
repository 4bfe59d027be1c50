#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <vector>

#include "smcguard/checksum_oracle.hpp"
#include "smcguard/layout.hpp"
#include "support/loop_interpreter.hpp"

namespace smcguard {
namespace {

std::vector<std::byte> bytes_of(std::initializer_list<std::uint64_t> qwords) {
  std::vector<std::byte> out;
  for (std::uint64_t q : qwords) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>(q >> (8 * i)));
  }
  return out;
}

std::vector<std::byte> random_region(std::mt19937_64& rng, std::size_t qwords) {
  std::vector<std::byte> out(qwords * 8);
  for (auto& b : out) b = static_cast<std::byte>(rng());
  return out;
}

TEST(Parity, FollowsX86EvenConvention) {
  EXPECT_TRUE(parity8(0x00));
  EXPECT_TRUE(parity8(0xFF));
  EXPECT_FALSE(parity8(0x01));
  EXPECT_TRUE(parity8(0x03));
  EXPECT_FALSE(parity8(0x80));
}

TEST(Substitute, ZeroWordTakesSelector) {
  EXPECT_EQ(substitute(0, ModificationSite::at_byte(0), Selector::cmp), 0x28u);
}

TEST(Substitute, AllOnesLosesExactlyFieldBitsZeroAndTwo) {
  EXPECT_EQ(substitute(~0ULL, ModificationSite::at_byte(0), Selector::adc), 0xFFFFFFFFFFFFFFD7ULL);
}

// Hand evaluation of (q & ~(5 << bit)) | (op << bit).
TEST(Substitute, AdcBytesBecomeXorFamily) {
  // Full encoding 48 13 1E: the opcode is byte 1 of the word.
  EXPECT_EQ(substitute(0x1E1348, ModificationSite::at_byte(1), Selector::xor_), 0x1E3348u);
  // The truncated word 0x1E13 carries the opcode in byte 0.
  EXPECT_EQ(substitute(0x1E13, ModificationSite::at_byte(0), Selector::xor_), 0x1E33u);
  // The same word with the field placed in byte 1 rewrites the ModRM byte instead.
  EXPECT_EQ(substitute(0x1E13, ModificationSite::at_byte(1), Selector::xor_), 0x3613u);
}

TEST(Substitute, IsIdempotent) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const std::uint64_t q = rng();
    const auto site = ModificationSite::at_byte(rng() % 8);
    for (Selector op : kAllSelectors) {
      EXPECT_EQ(substitute(substitute(q, site, op), site, op), substitute(q, site, op));
    }
  }
}

TEST(ModificationSiteTest, MaskAndOffsetInvariants) {
  for (std::size_t b = 0; b < 64; ++b) {
    const auto s = ModificationSite::at_byte(b);
    EXPECT_EQ(s.bit_offset % 8, 3u);
    EXPECT_EQ(s.qword_offset, b / 8 * 8);
    EXPECT_EQ(s.preserve_mask, ~(5ULL << s.bit_offset));
  }
}

TEST(Step, ZeroWordTogglesParityBit) {
  const auto s = step({0, Selector::adc, 0}, 0);
  EXPECT_EQ(s.sum, 0u);
  EXPECT_EQ(s.op, Selector::xor_);
  EXPECT_EQ(s.cursor, 8u);
}

TEST(Step, SignBitTogglesBitZero) {
  const auto s = step({0, Selector::adc, 0}, 0x8000000000000000ULL);
  EXPECT_EQ(s.sum, 0x8000000000000000ULL);
  EXPECT_EQ(s.op, Selector::cmp);
}

TEST(Step, CompareKeepsSum) {
  // res = 3 - 1 = 2: one bit set (odd, no parity toggle), sign clear.
  const auto s = step({3, Selector::cmp, 0}, 1);
  EXPECT_EQ(s.sum, 3u);
  EXPECT_EQ(s.op, Selector::cmp);
}

TEST(Step, OpChangesOnlyInBitsZeroAndTwo) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 10000; ++i) {
    const Selector before = kAllSelectors[rng() % 4];
    const auto s = step({rng(), before, 0}, rng());
    EXPECT_EQ((to_underlying(s.op) ^ to_underlying(before)) & ~5U, 0u);
    EXPECT_TRUE(is_valid_selector(to_underlying(s.op)));
  }
}

TEST(ChecksumRegion, EmptyRegionKeepsInit) {
  const ChecksumState init{42, Selector::sbb, 0};
  const auto s = checksum_region({}, std::nullopt, init);
  EXPECT_EQ(s.sum, 42u);
  EXPECT_EQ(s.op, Selector::sbb);
}

TEST(ChecksumRegion, ZeroWordsAlternateParityToggle) {
  for (std::size_t n = 0; n < 9; ++n) {
    const std::vector<std::byte> region(n * 8);
    const auto s = checksum_region(region, std::nullopt, {});
    EXPECT_EQ(s.sum, 0u);
    EXPECT_EQ(s.op, n % 2 == 0 ? Selector::adc : Selector::xor_) << n;
  }
}

// Traced by hand: add 1 (res 0x01, odd) -> adc; add 2 (res 0x03, even) -> xor;
// xor 3 (res 0, even) -> adc.
TEST(ChecksumRegion, ThreeWordGolden) {
  const auto region = bytes_of({1, 2, 3});
  const auto s = checksum_region(region, std::nullopt, {});
  EXPECT_EQ(s.sum, 0u);
  EXPECT_EQ(s.op, Selector::adc);
  EXPECT_EQ(s.cursor, 24u);
}

TEST(ChecksumRegion, RejectsUnalignedLength) {
  const std::vector<std::byte> region(12);
  try {
    checksum_region(region, std::nullopt, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::unaligned_region);
  }
}

TEST(ChecksumRegion, Deterministic) {
  std::mt19937_64 rng(3);
  const auto region = random_region(rng, 500);
  const auto site = ModificationSite::at_byte(77);
  EXPECT_EQ(checksum_region(region, site, {9, Selector::sbb, 0}), checksum_region(region, site, {9, Selector::sbb, 0}));
}

TEST(ChecksumRegion, XorFoldTwiceIsIdentity) {
  std::mt19937_64 rng(5);
  const auto region = random_region(rng, 64);
  ChecksumState s{0xABCDEF, Selector::xor_, 0};
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t off = 0; off < region.size(); off += 8) {
      s = step({s.sum, Selector::xor_, 0}, load_qword(region, off));
    }
  }
  EXPECT_EQ(s.sum, 0xABCDEFu);
}

TEST(ChecksumRegion, MatchesLiteralTransliteration) {
  // Straight transliteration of the loop semantics with the odd-parity helper negated.
  auto paritybyte = [](unsigned char c) {
    int n = 0;
    for (int i = 0; i < 8; ++i) n ^= (c >> i) & 1;
    return n;  // 1 iff odd
  };
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    const auto region = random_region(rng, n);
    const std::size_t site_byte = rng() % (n * 8);
    const auto site = ModificationSite::at_byte(site_byte);
    unsigned op = to_underlying(kAllSelectors[rng() % 4]);
    std::uint64_t sum = rng();
    const auto init = ChecksumState{sum, to_selector(op), 0};
    for (std::size_t off = 0; off < region.size(); off += 8) {
      std::uint64_t v = 0;
      std::memcpy(&v, region.data() + off, 8);
      if (off == site_byte / 8 * 8) {
        const unsigned shift = static_cast<unsigned>(site_byte % 8) * 8 + 3;
        v = (v & ~(5ULL << shift)) | (static_cast<std::uint64_t>(op) << shift);
      }
      std::uint64_t res = 0;
      switch (op) {
        case 0: res = sum += v; break;
        case 1: res = sum -= v; break;
        case 4: res = sum ^= v; break;
        case 5: res = sum - v; break;
      }
      op ^= (!paritybyte(static_cast<unsigned char>(res)) << 2) | ((res & 0x8000000000000000ULL) != 0);
    }
    const auto s = checksum_region(region, site, init);
    ASSERT_EQ(s.sum, sum);
    ASSERT_EQ(to_underlying(s.op), op);
  }
}

TEST(ChecksumRegion, MatchesInstructionInterpreter) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng() % 64;
    std::vector<std::uint8_t> raw(n * 8);
    for (auto& b : raw) b = static_cast<std::uint8_t>(rng());
    const bool inside = n >= 5 && rng() % 2 == 0;
    const std::size_t code_at = inside ? rng() % (n * 8 - 4) : n * 8;
    const unsigned sel = to_underlying(kAllSelectors[rng() % 4]);
    const std::uint64_t sum = rng();
    std::vector<std::uint8_t> image;
    const auto r = loop_listing::run(raw, code_at, sel, sum, &image);
    ASSERT_TRUE(r.carry_clear_at_every_arith);
    ASSERT_EQ(r.iterations, n);

    std::vector<std::byte> region(image.size());
    std::memcpy(region.data(), image.data(), image.size());
    std::optional<ModificationSite> site;
    if (code_at + loop_listing::kOpcodeAt < region.size()) site = ModificationSite::at_byte(code_at + loop_listing::kOpcodeAt);
    const auto s = checksum_region(region, site, {sum, to_selector(sel), 0});
    ASSERT_EQ(s.sum, r.sum) << "trial " << trial;
    ASSERT_EQ(to_underlying(s.op), r.op) << "trial " << trial;
  }
}

TEST(Selectors, ValidSetAndErrors) {
  for (unsigned v = 0; v < 8; ++v) {
    EXPECT_EQ(is_valid_selector(v), v == 0 || v == 1 || v == 4 || v == 5);
  }
  EXPECT_THROW(to_selector(2), Error);
  EXPECT_EQ(selector_field(Selector::adc), 2u);
  EXPECT_EQ(selector_field(Selector::sbb), 3u);
  EXPECT_EQ(selector_field(Selector::xor_), 6u);
  EXPECT_EQ(selector_field(Selector::cmp), 7u);
  EXPECT_EQ(selector_of_opcode(0x13), Selector::adc);
  EXPECT_EQ(selector_of_opcode(0x3B), Selector::cmp);
}

TEST(ReachableOps, ClosureIsFullSet) {
  const std::vector<Selector> all(std::begin(kAllSelectors), std::end(kAllSelectors));
  EXPECT_EQ(reachable_ops(0), all);
  EXPECT_EQ(reachable_ops(5), all);
  try {
    reachable_ops(2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_selector);
  }
}

KernelLayout two_unit_layout(std::optional<std::size_t> s0, std::optional<std::size_t> s1) {
  KernelLayout l;
  l.unit_len = 27;
  l.unit_offsets = {0, 4096};
  l.targets = {1, 0};
  l.site_offsets = {s0, s1};
  return l;
}

TEST(EmulateUnrolled, SingleUnitWithoutSiteEqualsPlainChecksum) {
  std::mt19937_64 rng(19);
  KernelLayout l;
  l.unit_offsets = {0};
  l.targets = {0};
  l.site_offsets = {std::nullopt};
  for (int i = 0; i < 50; ++i) {
    const auto region = random_region(rng, rng() % 100);
    const ChecksumState init{rng(), kAllSelectors[rng() % 4], 0};
    EXPECT_EQ(emulate_unrolled(region, l, init).state, checksum_region(region, std::nullopt, init));
  }
}

TEST(EmulateUnrolled, SelfTargetingUnitWithSiteEqualsSingleSiteChecksum) {
  std::mt19937_64 rng(23);
  for (int i = 0; i < 50; ++i) {
    const std::size_t n = 1 + rng() % 100;
    const auto region = random_region(rng, n);
    const std::size_t site = rng() % (n * 8);
    KernelLayout l;
    l.unit_offsets = {0};
    l.targets = {0};
    l.site_offsets = {site};
    const ChecksumState init{rng(), kAllSelectors[rng() % 4], 0};
    EXPECT_EQ(emulate_unrolled(region, l, init).state, checksum_region(region, ModificationSite::at_byte(site), init));
  }
}

TEST(EmulateUnrolled, TwoUnitsAlternateSelectors) {
  // Unit 0 toggles unit 1 and vice versa; with zero data every step toggles the parity bit
  // of the partner, so after four words both units are back to adc.
  const std::vector<std::byte> region(32);
  const auto out = emulate_unrolled(region, two_unit_layout(std::nullopt, std::nullopt), {});
  EXPECT_EQ(out.unit_ops, (std::vector<Selector>{Selector::adc, Selector::adc}));
  const auto three = emulate_unrolled(std::span(region).first(24), two_unit_layout(std::nullopt, std::nullopt), {});
  // Schedule for 3 words over 2 units enters at unit 1: toggles u0, u1, u0.
  EXPECT_EQ(three.unit_ops, (std::vector<Selector>{Selector::adc, Selector::xor_}));
}

TEST(EmulateUnrolled, RejectsInconsistentLayout) {
  const std::vector<std::byte> region(16);
  KernelLayout l = two_unit_layout(std::nullopt, std::nullopt);
  l.targets = {5, 0};
  EXPECT_THROW(emulate_unrolled(region, l, {}), Error);
  l = two_unit_layout(std::size_t{99}, std::nullopt);
  EXPECT_THROW(emulate_unrolled(region, l, {}), Error);
  l.site_offsets.pop_back();
  EXPECT_THROW(emulate_unrolled(region, l, {}), Error);
}

}  // namespace
}  // namespace smcguard
