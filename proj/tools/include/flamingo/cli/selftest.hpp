#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flamingo/lm.hpp"

namespace flamingo::cli {

struct SuiteResult {
  std::string name;
  bool ok = false;
  double worst = 0.0;  // largest error seen
  std::string detail;
};

struct SelftestOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 20;
  std::size_t probes = 200;
  double tolerance = 1e-10;  // identity, mask and accumulation suites
  double grad_rtol = 1e-4;
  MaskBuilder mask_builder;  // empty: the model's own rule
};

// Small model used by the suites, with every gate opened to a non-zero value
// when `open_gates` is set.
FlamingoModel selftest_model(Rng& rng, bool open_gates);

SuiteResult gradcheck_suite(const SelftestOptions& opts);
SuiteResult gate_identity_suite(const SelftestOptions& opts);
SuiteResult mask_invariance_suite(const SelftestOptions& opts);
SuiteResult accumulation_suite(const SelftestOptions& opts);
std::vector<SuiteResult> run_selftest(const SelftestOptions& opts);

}  // namespace flamingo::cli
