#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "flamingo/cli/commands.hpp"
#include "flamingo/io.hpp"

using namespace flamingo;
using namespace flamingo::cli;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::string out;
  bool quiet = false;
  std::size_t log_every = 100;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_file, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override a field, e.g. --set train.steps=50 (repeatable)");
  cmd->add_option("-o,--out", c.out, std::string("Output root (default $") + kOutRootEnv + " or ./runs)");
  cmd->add_flag("-q,--quiet", c.quiet, "No progress lines");
  cmd->add_option("--log-every", c.log_every, "Progress line interval in steps");
}

// Typed shortcut flags are stored as overrides so the file/flag precedence
// and validation stay in one place.
template <class T>
void shortcut(CLI::App* cmd, const std::string& flag, const std::string& key, std::vector<std::string>& sets,
              const std::string& help) {
  cmd->add_option_function<T>(
      flag,
      [&sets, key](const T& v) {
        std::ostringstream os;
        if constexpr (std::is_same_v<T, std::string>) os << '"' << v << '"';
        else if constexpr (std::is_same_v<T, bool>) os << (v ? "true" : "false");
        else os << v;
        sets.push_back(key + "=" + os.str());
      },
      help);
}

RunConfig resolve(const Common& c) {
  const std::string text = c.config_file.empty() ? std::string("{}") : io::read_file(c.config_file);
  return parse_config(apply_overrides(text, c.sets));
}

Context context(const Common& c) {
  Context ctx;
  ctx.out_root = c.out.empty() ? default_out_root() : std::filesystem::path(c.out);
  ctx.log = c.quiet ? nullptr : &std::cerr;
  ctx.log_every = c.log_every;
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale few-shot visual language model: pretraining, training, evaluation"};
  app.require_subcommand(1);
  Common common;
  TrainFlags train_flags;
  std::string prompt_file;
  std::vector<std::size_t> shots;
  SelftestOptions self;

  auto* contrastive = app.add_subcommand("pretrain-contrastive", "Contrastive dual-encoder pretraining; exports vision weights");
  add_common(contrastive, common);
  shortcut<std::string>(contrastive, "--strategy", "contrastive.strategy", common.sets, "accumulation, round_robin or merged");
  shortcut<std::size_t>(contrastive, "--steps", "contrastive.steps", common.sets, "Update steps");

  auto* lm = app.add_subcommand("pretrain-lm", "Text-only language model pretraining");
  add_common(lm, common);
  shortcut<std::size_t>(lm, "--steps", "lm_pretrain.steps", common.sets, "Update steps");

  auto* train = app.add_subcommand("train", "Multimodal training on the dataset mixture");
  add_common(train, common);
  shortcut<std::string>(train, "--strategy", "train.strategy", common.sets, "accumulation, round_robin or merged");
  shortcut<std::size_t>(train, "--steps", "train.steps", common.sets, "Update steps");
  shortcut<bool>(train, "--freeze-lm", "train.freeze_lm", common.sets, "Keep language-model weights fixed");
  shortcut<bool>(train, "--freeze-vision", "train.freeze_vision", common.sets, "Keep vision weights fixed");
  train->add_flag("--pretrain-lm", train_flags.pretrain_lm, "Produce a missing LM checkpoint first");
  train->add_flag("--pretrain-vision", train_flags.pretrain_vision, "Produce a missing vision checkpoint first");

  auto* eval = app.add_subcommand("eval", "Few-shot evaluation of a trained model");
  add_common(eval, common);
  eval->add_option("--shots", shots, "Shot counts, e.g. --shots 0 4 8");
  shortcut<bool>(eval, "--rices", "eval.rices", common.sets, "Retrieval-based shot selection");
  shortcut<std::size_t>(eval, "--ensemble", "eval.ensemble", common.sets, "Shot orderings averaged per query");
  shortcut<std::string>(eval, "--mode", "eval.mode", common.sets, "close_ended or open_ended");
  shortcut<std::string>(eval, "--task-file", "eval.task_file", common.sets, "JSONL task instead of synthetic tasks");

  auto* generate = app.add_subcommand("generate", "Complete interleaved prompts from a JSONL file");
  add_common(generate, common);
  generate->add_option("prompts", prompt_file, "JSONL prompts: {\"text\": \"...<image>...\", \"images\": [...]}")
      ->required()
      ->check(CLI::ExistingFile);
  shortcut<std::string>(generate, "--decode", "eval.decode", common.sets, "greedy or beam");
  shortcut<std::size_t>(generate, "--max-len", "eval.max_len", common.sets, "Maximum generated tokens");

  auto* selftest = app.add_subcommand("selftest", "Gradient, gate-identity, mask and accumulation checks");
  selftest->add_option("--seed", self.seed, "Seed");
  selftest->add_option("--instances", self.instances, "Random instances per suite");
  selftest->add_option("--probes", self.probes, "Finite-difference probes");

  auto* config = app.add_subcommand("config", "Print the fully resolved configuration");
  add_common(config, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (!shots.empty()) {
      std::string list = "[";
      for (std::size_t i = 0; i < shots.size(); ++i) list += (i ? "," : "") + std::to_string(shots[i]);
      common.sets.push_back("eval.shots=" + list + "]");
    }
    if (*selftest) {
      const auto results = cmd_selftest(self, std::cout);
      for (const auto& r : results)
        if (!r.ok) return 1;
      return 0;
    }
    const RunConfig cfg = resolve(common);
    const Context ctx = context(common);
    if (*config) {
      std::cout << resolved_json(cfg);
    } else if (*contrastive) {
      const auto r = cmd_pretrain_contrastive(cfg, ctx);
      std::cout << "strategy " << r.strategy << " final_loss " << r.final_loss << " held_out_r1 " << r.recall_at_1
                << "\n";
    } else if (*lm) {
      const auto r = cmd_pretrain_lm(cfg, ctx);
      std::cout << "initial_loss " << r.initial_loss << " final_loss " << r.final_loss << "\n";
    } else if (*train) {
      const auto r = cmd_train(cfg, ctx, train_flags);
      std::cout << "initial_loss " << r.initial_loss << " final_loss " << r.final_loss << " metrics "
                << r.metrics.string() << "\n";
    } else if (*eval) {
      for (const auto& row : cmd_eval(cfg, ctx).rows)
        std::cout << row.task << " shots=" << row.shots << " accuracy " << row.accuracy << "\n";
    } else if (*generate) {
      for (const auto& g : cmd_generate(cfg, ctx, prompt_file)) std::cout << g.text << "\n";
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
