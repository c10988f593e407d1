#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flamingo/lm.hpp"
#include "flamingo/synth.hpp"

namespace flamingo::cli {

// Bad or unknown configuration field; the message names the field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelSpec {
  std::string preset = "desk";
  FlamingoConfig flamingo;
  // Empty paths resolve inside the run directory.
  std::string vocab;
  std::string lm_checkpoint;
  std::string vision_checkpoint;
  std::string checkpoint;  // trained multimodal model
};

// source "synthetic": task is a glyph task; source "jsonl": task is
// "paired" or "interleaved" and path points at the file.
struct DatasetSpec {
  std::string name;
  std::string source = "synthetic";
  std::string task = "glyph_caption";
  std::string path;
  std::size_t size = 2000;
  double weight = 1.0;
  std::size_t batch_size = 8;
  std::size_t length = 16;
};

struct DataSpec {
  synth::SynthConfig synth;
  std::vector<DatasetSpec> datasets;
};

struct TrainSpec {
  std::size_t steps = 1000;
  double peak_lr = 1e-3;
  std::size_t warmup = 100;
  double weight_decay = 0.1;
  std::string clip = "global_norm";
  double clip_threshold = 1.0;
  std::string strategy = "accumulation";
  bool freeze_vision = true;
  bool freeze_lm = true;
  double lm_lr_multiplier = 0.1;
  double p_next = 0.0;
  double space_prob = 0.5;
  std::size_t max_images = 5;
};

struct LMPretrainSpec {
  std::size_t steps = 1500;
  std::size_t batch_size = 16;
  double peak_lr = 1e-3;
  std::size_t warmup = 100;
  std::size_t length = 40;
};

struct ContrastiveDatasetSpec {
  std::string name;
  std::size_t size = 2000;
  double weight = 1.0;
  std::size_t batch_size = 32;
  double noise = 0.03;
  std::array<double, 3> background{0.08, 0.08, 0.08};
  double mismatch = 0.0;  // fraction of pairs with a random caption
};

struct ContrastiveSpec {
  std::size_t steps = 400;
  double peak_lr = 1e-3;
  std::size_t warmup = 20;
  double smoothing = 0.1;
  std::string strategy = "accumulation";
  std::size_t text_width = 32;
  std::size_t text_layers = 1;
  std::size_t text_heads = 2;
  std::size_t text_max_len = 16;
  std::size_t joint = 32;
  double init_beta = 10.0;
  std::vector<ContrastiveDatasetSpec> datasets;
};

struct EvalSpec {
  std::vector<std::size_t> shots{0, 4};
  std::vector<std::string> tasks{"color", "shape"};  // synthetic tasks
  std::string task_file;                             // JSONL task; replaces `tasks`
  std::string mode = "close_ended";
  std::size_t queries = 200;
  std::size_t pool = 64;     // synthetic support pool size
  std::size_t classes = 32;  // classes of the synthetic caption task
  std::string decode = "beam";
  std::size_t beam_width = 3;
  std::size_t max_len = 12;
  bool rices = false;
  std::size_t ensemble = 1;
};

struct RunConfig {
  std::string name = "default";
  std::uint64_t seed = 0;
  ModelSpec model;
  DataSpec data;
  TrainSpec train;
  LMPretrainSpec lm_pretrain;
  ContrastiveSpec contrastive;
  EvalSpec eval;

  void validate() const;
};

std::vector<std::string> preset_names();
// Defaults for a model preset ("tiny", "desk").
RunConfig preset_config(const std::string& preset);

// Overlays `json_text` on the preset it names (default "desk"). Unknown keys
// and wrong types raise ConfigError naming the field.
RunConfig parse_config(const std::string& json_text);
// Applies "a.b.c=value" overrides to a JSON document before parsing; the
// value is read as JSON when it parses, as a string otherwise.
std::string apply_overrides(const std::string& json_text, std::span<const std::string> overrides);
// Every field, pretty-printed.
std::string resolved_json(const RunConfig& cfg);

}  // namespace flamingo::cli
