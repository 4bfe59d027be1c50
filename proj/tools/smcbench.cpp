// smcbench: timing matrix, tamper experiment and layout report for the SMC kernels.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "smcguard/bench.hpp"

using namespace smcguard;
using namespace smcguard::bench;

namespace {

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = s.find(',', start);
    const std::string item = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

ReportFormat parse_format(const std::string& s) {
  if (s == "text") return ReportFormat::text;
  if (s == "json-lines" || s == "jsonl") return ReportFormat::json_lines;
  throw Error(Errc::invalid_argument, "unknown report format '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-modifying checksum kernels: benchmark, tamper test and layout report"};
  app.require_subcommand(1);

  std::string variants = "oracle,oracle-unrolled,smc-static,smc-static-unrolled,smc-dynamic";
  std::string timers = "TSCP";
  std::string format = "text";
  BenchConfig cfg;

  auto* run = app.add_subcommand("run", "time every variant over a seeded region");
  run->add_option("--variants", variants, "comma-separated variant list")->capture_default_str();
  run->add_option("--size", cfg.region_size, "region size in bytes (multiple of 8)")->capture_default_str();
  run->add_option("--runs", cfg.runs, "timed runs per cell")->capture_default_str();
  run->add_option("--timers", timers, "comma-separated timers: TSC,TSCP,MONOTONIC,BOOTTIME,REALTIME_UTC,COARSE_TICK")
      ->capture_default_str();
  run->add_flag("--pmc", cfg.pmc, "count machine clears per variant");
  run->add_option("--seed", cfg.seed, "region content seed")->capture_default_str();
  run->add_flag("--quick", cfg.quick, "200 runs, halved ratio thresholds");
  run->add_option("--report-format", format, "text or json-lines")->capture_default_str();
  run->add_option("--pin-core", cfg.pin_core, "CPU to pin to (-1: current)")->capture_default_str();
  run->add_flag("--priority", cfg.raise_priority, "raise scheduling priority while timing");

  TamperConfig tcfg;
  std::size_t flips = 10'000;
  std::string tvariant = "smc-dynamic";
  auto* tamper = app.add_subcommand("tamper", "seeded byte flips against the guard");
  tamper->add_option("--variant", tvariant, "native variant")->capture_default_str();
  tamper->add_option("--size", tcfg.region_size, "region size in bytes")->capture_default_str();
  tamper->add_option("--flips", flips, "number of flips")->capture_default_str();
  tamper->add_option("--seed", tcfg.seed, "region and flip seed")->capture_default_str();
  tamper->add_option("--report-format", format, "text or json-lines")->capture_default_str();

  std::size_t layout_size = 225'280;
  auto* layout = app.add_subcommand("layout", "print the environment and dynamic-kernel layout");
  layout->add_option("--size", layout_size, "region size in bytes")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    const ReportFormat fmt = parse_format(format);
    if (run->parsed()) {
      cfg.variants.clear();
      for (const auto& v : split(variants)) cfg.variants.push_back(parse_variant(v));
      cfg.timers.clear();
      for (const auto& t : split(timers)) cfg.timers.push_back(parse_timer(t));
      const BenchReport report = run_suite(cfg);
      std::cout << emit_report(report, fmt);
      return 0;
    }
    if (tamper->parsed()) {
      tcfg.variant = parse_variant(tvariant);
      Workbench env(Variant::dynamic_unrolled, tcfg.region_size, tcfg.seed);
      if (fmt == ReportFormat::text) std::cout << environment_block(env) << "\n";
      std::cout << emit_tamper(tamper_experiment(tcfg, flips), fmt);
      return 0;
    }
    if (layout->parsed()) {
      Workbench wb(Variant::dynamic_unrolled, layout_size, 1);
      std::cout << environment_block(wb);
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "smcbench: %s\n", e.what());
    return 2;
  }
  return 0;
}
