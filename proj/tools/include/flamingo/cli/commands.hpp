#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "flamingo/cli/config.hpp"
#include "flamingo/cli/selftest.hpp"

namespace flamingo::cli {

inline constexpr const char* kOutRootEnv = "FLAMINGO_OUT_ROOT";

struct Context {
  std::filesystem::path out_root;  // runs land in <out_root>/<config name>
  std::ostream* log = nullptr;     // progress lines; null for silence
  std::size_t log_every = 100;
};

// $FLAMINGO_OUT_ROOT, else "runs".
std::filesystem::path default_out_root();
std::filesystem::path run_dir(const Context& ctx, const RunConfig& cfg);

struct ContrastiveReport {
  std::string strategy;
  double final_loss = 0.0;
  double recall_at_1 = 0.0;  // mean of image->text and text->image
  double i2t_at_1 = 0.0, t2i_at_1 = 0.0, i2t_at_5 = 0.0, t2i_at_5 = 0.0;
  std::filesystem::path checkpoint;
};
// Writes vision.ckpt, contrastive_metrics.csv, contrastive_recall.csv.
ContrastiveReport cmd_pretrain_contrastive(const RunConfig& cfg, const Context& ctx);

struct LMReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::filesystem::path checkpoint;
};
// Writes lm.ckpt, vocab.txt and lm_metrics.csv.
LMReport cmd_pretrain_lm(const RunConfig& cfg, const Context& ctx);

struct TrainFlags {
  bool pretrain_lm = false;      // produce a missing LM checkpoint first
  bool pretrain_vision = false;  // produce a missing vision checkpoint first
};

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double gate_identity_error = 0.0;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
};
// Checks gate identity before the first update, then writes model.ckpt and
// metrics.csv.
TrainReport cmd_train(const RunConfig& cfg, const Context& ctx, const TrainFlags& flags = {});

struct TaskAccuracy {
  std::string task;
  std::size_t shots = 0;
  std::size_t queries = 0;
  double accuracy = 0.0;
};
struct EvalSummary {
  std::vector<TaskAccuracy> rows;
  std::filesystem::path predictions;
};
// Writes eval.csv and predictions.jsonl.
EvalSummary cmd_eval(const RunConfig& cfg, const Context& ctx);

struct Generation {
  std::string text;
  double log_likelihood = 0.0;
  bool finished = false;
};
// One completion per prompt line; also written to generations.jsonl.
std::vector<Generation> cmd_generate(const RunConfig& cfg, const Context& ctx, const std::filesystem::path& prompts);

std::vector<SuiteResult> cmd_selftest(const SelftestOptions& opts, std::ostream& out);

}  // namespace flamingo::cli
