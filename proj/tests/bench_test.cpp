#include <gtest/gtest.h>

#include <sstream>

#include "smcguard/bench.hpp"

namespace smcguard::bench {
namespace {

BenchConfig small_config() {
  BenchConfig cfg;
  cfg.region_size = 32 * 1024;
  cfg.runs = 3;
  cfg.timers = {TimerId::monotonic};
  return cfg;
}

std::vector<nlohmann::json> parse_lines(const std::string& text) {
  std::vector<nlohmann::json> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) out.push_back(nlohmann::json::parse(line));
  return out;
}

TEST(Variants, NamesAndMapping) {
  for (BenchVariant v : kAllVariants) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("smc-fast"), Error);
  EXPECT_EQ(kernel_variant(BenchVariant::oracle_unrolled), Variant::dynamic_unrolled);
  EXPECT_FALSE(is_native(BenchVariant::oracle));
  EXPECT_TRUE(is_native(BenchVariant::smc_static_unrolled));
}

TEST(Config, Validation) {
  BenchConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.runs = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.region_size = 100;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.timers.clear();
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(FillRegion, SeedDeterminesBytes) {
  std::vector<std::uint8_t> a(1000), b(1000), c(1000);
  fill_region(a, 1);
  fill_region(b, 1);
  fill_region(c, 2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Workbench, IntrospectiveWhenRegionHoldsKernel) {
  Workbench big(Variant::dynamic_unrolled, 32 * 1024, 1);
  EXPECT_TRUE(big.introspective());
  EXPECT_EQ(reinterpret_cast<const std::byte*>(big.kernel().base()), big.region().data());
  Workbench small(Variant::dynamic_unrolled, 1024, 1);
  EXPECT_FALSE(small.introspective());
}

TEST(Workbench, GatePassesForEveryKernel) {
  for (Variant v : {Variant::static_loop, Variant::static_unrolled, Variant::dynamic_unrolled}) {
    for (std::size_t len : {8u, 1024u, 32u * 1024}) {
      Workbench wb(v, len, 4);
      EXPECT_TRUE(gate(wb)) << variant_name(v) << " " << len;
    }
  }
}

TEST(Ratios, ThresholdsAndQuickMode) {
  std::vector<Cell> cells;
  auto add = [&](BenchVariant v, std::uint64_t min) {
    CalibrationStats s;
    s.timer = TimerId::tscp;
    s.min = min;
    cells.push_back({v, s});
  };
  add(BenchVariant::oracle, 100);
  add(BenchVariant::smc_static, 400);
  add(BenchVariant::oracle_unrolled, 900);
  add(BenchVariant::smc_dynamic, 100);
  const auto full = compute_ratios(cells, TimerId::tscp, false);
  ASSERT_EQ(full.size(), 3u);
  EXPECT_EQ(full[0].name, "smc-static/oracle");
  EXPECT_DOUBLE_EQ(full[0].value, 4.0);
  EXPECT_TRUE(full[0].ok());
  EXPECT_FALSE(full[1].ok());
  EXPECT_TRUE(full[2].ok());
  const auto quick = compute_ratios(cells, TimerId::tscp, true);
  EXPECT_DOUBLE_EQ(quick[1].threshold, 5.0);
  EXPECT_TRUE(quick[1].ok());
  EXPECT_TRUE(compute_ratios(cells, TimerId::monotonic, false).empty());
}

TEST(Suite, JsonLinesCarryEveryCellField) {
  const BenchReport r = run_suite(small_config());
  const auto lines = parse_lines(emit_json_lines(r));
  ASSERT_FALSE(lines.empty());
  ASSERT_TRUE(lines[0].contains("environment"));
  EXPECT_EQ(lines[0]["environment"]["Number of pages"], "2");
  std::size_t cells = 0;
  for (const auto& j : lines) {
    if (!j.contains("variant") || j.contains("event")) continue;
    ++cells;
    for (const char* key : {"variant", "timer", "runs", "min", "avg", "max", "q01", "q50", "q99"}) {
      EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_EQ(j["runs"], 3);
    EXPECT_EQ(j["timer"], "MONOTONIC");
    EXPECT_LE(j["min"].get<std::uint64_t>(), j["q50"].get<std::uint64_t>());
    EXPECT_LE(j["q50"].get<std::uint64_t>(), j["max"].get<std::uint64_t>());
  }
  EXPECT_EQ(cells, std::size(kAllVariants));
}

TEST(Suite, StructureIsDeterministicForASeed) {
  const BenchReport a = run_suite(small_config());
  const BenchReport b = run_suite(small_config());
  ASSERT_EQ(a.cells.size(), b.cells.size());
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    EXPECT_EQ(a.cells[i].variant, b.cells[i].variant);
    EXPECT_EQ(a.cells[i].stats.timer, b.cells[i].stats.timer);
    EXPECT_EQ(a.cells[i].stats.runs, b.cells[i].stats.runs);
  }
  ASSERT_EQ(a.ratios.size(), b.ratios.size());
  for (std::size_t i = 0; i < a.ratios.size(); ++i) EXPECT_EQ(a.ratios[i].name, b.ratios[i].name);
}

TEST(Suite, PmcSectionOmittedWhenOffOrUnavailable) {
  BenchConfig cfg = small_config();
  cfg.variants = {BenchVariant::smc_static};
  const BenchReport off = run_suite(cfg);
  EXPECT_FALSE(off.pmc);
  EXPECT_EQ(emit_text(off).find("machine clears"), std::string::npos);
  cfg.pmc = true;
  const BenchReport on = run_suite(cfg);
  if (!on.pmc) {
    ASSERT_FALSE(on.notices.empty());
    EXPECT_EQ(on.notices.front().rfind("pmc: ", 0), 0u);
    EXPECT_EQ(emit_json_lines(on).find("\"event\""), std::string::npos);
  } else {
    EXPECT_EQ(on.pmc->size(), 1u);
  }
}

TEST(Suite, QuickModeUsesFewerRuns) {
  BenchConfig cfg = small_config();
  cfg.variants = {BenchVariant::smc_dynamic};
  cfg.quick = true;
  const BenchReport r = run_suite(cfg);
  ASSERT_EQ(r.cells.size(), 1u);
  EXPECT_EQ(r.cells[0].stats.runs, BenchConfig::kQuickRuns);
}

TEST(Suite, TextReportHasEnvironmentAndTable) {
  BenchConfig cfg = small_config();
  cfg.variants = {BenchVariant::oracle, BenchVariant::smc_static};
  const std::string text = emit_text(run_suite(cfg));
  EXPECT_NE(text.find("The page size for this system is"), std::string::npos);
  EXPECT_NE(text.find("Timers available:"), std::string::npos);
  EXPECT_NE(text.find("smc-static"), std::string::npos);
  EXPECT_NE(text.find("ratio smc-static/oracle"), std::string::npos);
}

TEST(Tamper, SmallExperimentDetectsFlips) {
  TamperConfig cfg;
  cfg.policy.calibration_runs = 50;
  const TamperStats s = tamper_experiment(cfg, 100);
  EXPECT_TRUE(s.clean_verdict);
  EXPECT_EQ(s.flips, 100u);
  EXPECT_GE(s.rate(), 0.95);
  const auto j = nlohmann::json::parse(emit_tamper(s, ReportFormat::json_lines));
  EXPECT_EQ(j["flips"], 100);
  EXPECT_NE(emit_tamper(s, ReportFormat::text).find("flips 100"), std::string::npos);
}

TEST(Tamper, RejectsOracleVariant) {
  TamperConfig cfg;
  cfg.variant = BenchVariant::oracle;
  EXPECT_THROW(tamper_experiment(cfg, 1), Error);
}

}  // namespace
}  // namespace smcguard::bench
