#include "flamingo/cli/config.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "flamingo/optim.hpp"
#include "flamingo/train.hpp"

namespace flamingo::cli {
namespace {

using nlohmann::json;

struct Writer {
  json& j;

  template <class T>
  void field(const char* key, T& value) {
    j[key] = value;
  }
  template <class F>
  void object(const char* key, F&& fn) {
    j[key] = json::object();
    Writer w{j[key]};
    fn(w);
  }
  template <class T, class F>
  void list(const char* key, std::vector<T>& values, F&& fn) {
    json arr = json::array();
    for (auto& v : values) {
      json o = json::object();
      Writer w{o};
      fn(w, v);
      arr.push_back(std::move(o));
    }
    j[key] = std::move(arr);
  }
};

[[noreturn]] void type_error(const std::string& path, const char* expected) {
  throw ConfigError("config field '" + path + "': expected " + expected);
}

void read_value(const json& j, std::size_t& out, const std::string& path) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) type_error(path, "a non-negative integer");
  out = j.get<std::size_t>();
}
void read_value(const json& j, double& out, const std::string& path) {
  if (!j.is_number()) type_error(path, "a number");
  out = j.get<double>();
}
void read_value(const json& j, bool& out, const std::string& path) {
  if (!j.is_boolean()) type_error(path, "true or false");
  out = j.get<bool>();
}
void read_value(const json& j, std::string& out, const std::string& path) {
  if (!j.is_string()) type_error(path, "a string");
  out = j.get<std::string>();
}
template <class T>
void read_value(const json& j, std::vector<T>& out, const std::string& path) {
  if (!j.is_array()) type_error(path, "an array");
  out.assign(j.size(), T{});
  for (std::size_t i = 0; i < j.size(); ++i) read_value(j[i], out[i], path + "[" + std::to_string(i) + "]");
}
void read_value(const json& j, std::array<double, 3>& out, const std::string& path) {
  if (!j.is_array() || j.size() != 3) type_error(path, "an array of 3 numbers");
  for (std::size_t i = 0; i < 3; ++i) read_value(j[i], out[i], path + "[" + std::to_string(i) + "]");
}

struct Reader {
  const json& j;
  std::string path;
  std::set<std::string> known{};

  template <class T>
  void field(const char* key, T& value) {
    known.insert(key);
    if (j.contains(key)) read_value(j.at(key), value, path + key);
  }
  template <class F>
  void object(const char* key, F&& fn) {
    known.insert(key);
    if (!j.contains(key)) return;
    if (!j.at(key).is_object()) type_error(path + key, "an object");
    Reader r{j.at(key), path + key + "."};
    fn(r);
    r.finish();
  }
  template <class T, class F>
  void list(const char* key, std::vector<T>& values, F&& fn) {
    known.insert(key);
    if (!j.contains(key)) return;
    const json& arr = j.at(key);
    if (!arr.is_array()) type_error(path + key, "an array");
    values.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string at = path + key + "[" + std::to_string(i) + "]";
      if (!arr[i].is_object()) type_error(at, "an object");
      T v{};
      Reader r{arr[i], at + "."};
      fn(r, v);
      r.finish();
      values.push_back(std::move(v));
    }
  }
  void finish() const {
    for (const auto& [key, _] : j.items())
      if (!known.count(key)) throw ConfigError("unknown config field '" + path + key + "'");
  }
};

template <class V>
void visit(V& v, RunConfig& c) {
  v.field("name", c.name);
  v.field("seed", c.seed);
  v.object("model", [&](auto& m) {
    auto& f = c.model.flamingo;
    m.field("preset", c.model.preset);
    m.object("vision", [&](auto& s) {
      s.field("resolution", f.vision.resolution);
      s.field("patch", f.vision.patch);
      s.field("width", f.vision.width);
      s.field("blocks", f.vision.blocks);
      s.field("kernel", f.vision.kernel);
      s.field("hidden", f.vision.hidden);
    });
    m.object("resampler", [&](auto& s) {
      s.field("latents", f.resampler.latents);
      s.field("layers", f.resampler.layers);
      s.field("heads", f.resampler.heads);
      s.field("ffw_mult", f.resampler.ffw_mult);
      s.field("max_frames", f.resampler.max_frames);
    });
    m.object("lm", [&](auto& s) {
      s.field("vocab", f.lm.vocab);
      s.field("width", f.lm.width);
      s.field("layers", f.lm.layers);
      s.field("heads", f.lm.heads);
      s.field("ffw_mult", f.lm.ffw_mult);
      s.field("max_len", f.lm.max_len);
      s.field("tied_head", f.lm.tied_head);
    });
    m.object("gated", [&](auto& s) {
      s.field("heads", f.gated.heads);
      s.field("ffw_mult", f.gated.ffw_mult);
      s.field("vanilla_xattn", f.gated.vanilla_xattn);
      s.field("tanh_gating", f.gated.tanh_gating);
    });
    m.field("xattn_every", f.xattn_every);
    m.field("xattn_middle_only", f.xattn_middle_only);
    m.field("all_previous", f.all_previous);
    m.field("vocab_file", c.model.vocab);
    m.field("lm_checkpoint", c.model.lm_checkpoint);
    m.field("vision_checkpoint", c.model.vision_checkpoint);
    m.field("checkpoint", c.model.checkpoint);
  });
  v.object("data", [&](auto& d) {
    d.object("synth", [&](auto& s) {
      auto& y = c.data.synth;
      s.field("resolution", y.resolution);
      s.field("colors", y.colors);
      s.field("shapes", y.shapes);
      s.field("noise", y.noise);
      s.field("jitter", y.jitter);
      s.field("min_size", y.min_size);
      s.field("max_size", y.max_size);
      s.field("min_chunks", y.min_chunks);
      s.field("max_chunks", y.max_chunks);
      s.field("intro_prob", y.intro_prob);
      s.field("shape_question_prob", y.shape_question_prob);
      s.field("background", y.background);
    });
    d.list("datasets", c.data.datasets, [](auto& s, DatasetSpec& e) {
      s.field("name", e.name);
      s.field("source", e.source);
      s.field("task", e.task);
      s.field("path", e.path);
      s.field("size", e.size);
      s.field("weight", e.weight);
      s.field("batch_size", e.batch_size);
      s.field("length", e.length);
    });
  });
  v.object("train", [&](auto& s) {
    auto& t = c.train;
    s.field("steps", t.steps);
    s.field("peak_lr", t.peak_lr);
    s.field("warmup", t.warmup);
    s.field("weight_decay", t.weight_decay);
    s.field("clip", t.clip);
    s.field("clip_threshold", t.clip_threshold);
    s.field("strategy", t.strategy);
    s.field("freeze_vision", t.freeze_vision);
    s.field("freeze_lm", t.freeze_lm);
    s.field("lm_lr_multiplier", t.lm_lr_multiplier);
    s.field("p_next", t.p_next);
    s.field("space_prob", t.space_prob);
    s.field("max_images", t.max_images);
  });
  v.object("lm_pretrain", [&](auto& s) {
    auto& t = c.lm_pretrain;
    s.field("steps", t.steps);
    s.field("batch_size", t.batch_size);
    s.field("peak_lr", t.peak_lr);
    s.field("warmup", t.warmup);
    s.field("length", t.length);
  });
  v.object("contrastive", [&](auto& s) {
    auto& t = c.contrastive;
    s.field("steps", t.steps);
    s.field("peak_lr", t.peak_lr);
    s.field("warmup", t.warmup);
    s.field("smoothing", t.smoothing);
    s.field("strategy", t.strategy);
    s.field("text_width", t.text_width);
    s.field("text_layers", t.text_layers);
    s.field("text_heads", t.text_heads);
    s.field("text_max_len", t.text_max_len);
    s.field("joint", t.joint);
    s.field("init_beta", t.init_beta);
    s.list("datasets", t.datasets, [](auto& r, ContrastiveDatasetSpec& e) {
      r.field("name", e.name);
      r.field("size", e.size);
      r.field("weight", e.weight);
      r.field("batch_size", e.batch_size);
      r.field("noise", e.noise);
      r.field("background", e.background);
      r.field("mismatch", e.mismatch);
    });
  });
  v.object("eval", [&](auto& s) {
    auto& e = c.eval;
    s.field("shots", e.shots);
    s.field("tasks", e.tasks);
    s.field("task_file", e.task_file);
    s.field("mode", e.mode);
    s.field("queries", e.queries);
    s.field("pool", e.pool);
    s.field("classes", e.classes);
    s.field("decode", e.decode);
    s.field("beam_width", e.beam_width);
    s.field("max_len", e.max_len);
    s.field("rices", e.rices);
    s.field("ensemble", e.ensemble);
  });
}

[[noreturn]] void fail(const std::string& field, const std::string& msg) {
  throw ConfigError("config field '" + field + "': " + msg);
}

void require(bool ok, const std::string& field, const std::string& msg) {
  if (!ok) fail(field, msg);
}

bool finite_positive(double x) { return std::isfinite(x) && x > 0.0; }
bool unit_interval(double x) { return x >= 0.0 && x <= 1.0; }

template <class F>
void wrap(const std::string& field, F&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    fail(field, e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  require(!name.empty() && name.find('/') == std::string::npos && name != "." && name != "..", "name",
          "must be a non-empty single path component");
  const auto presets = preset_names();
  require(std::find(presets.begin(), presets.end(), model.preset) != presets.end(), "model.preset", "unknown preset");
  wrap("model", [&] {
    FlamingoConfig f = model.flamingo;
    f.resolve().validate();
  });
  const std::size_t max_len = model.flamingo.lm.max_len;
  wrap("data.synth", [&] { data.synth.validate(); });
  require(!data.datasets.empty(), "data.datasets", "needs at least one dataset");
  std::set<std::string> names;
  for (std::size_t i = 0; i < data.datasets.size(); ++i) {
    const auto& d = data.datasets[i];
    const std::string at = "data.datasets[" + std::to_string(i) + "].";
    require(!d.name.empty(), at + "name", "must be non-empty");
    require(names.insert(d.name).second, at + "name", "duplicate dataset name '" + d.name + "'");
    if (d.source == "synthetic") {
      wrap(at + "task", [&] { synth::parse_task(d.task); });
      require(d.size >= 1, at + "size", "must be >= 1");
    } else if (d.source == "jsonl") {
      require(d.task == "paired" || d.task == "interleaved", at + "task", "jsonl datasets are 'paired' or 'interleaved'");
      require(!d.path.empty(), at + "path", "required for jsonl datasets");
    } else {
      fail(at + "source", "unknown source '" + d.source + "' (synthetic, jsonl)");
    }
    require(finite_positive(d.weight), at + "weight", "must be finite and > 0");
    require(d.batch_size >= 1, at + "batch_size", "must be >= 1");
    require(d.length >= 2 && d.length <= max_len, at + "length", "must be in [2, model.lm.max_len]");
  }

  require(train.steps >= 1, "train.steps", "must be >= 1");
  require(finite_positive(train.peak_lr), "train.peak_lr", "must be finite and > 0");
  require(train.weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
  wrap("train.clip", [&] { parse_clip_mode(train.clip); });
  require(finite_positive(train.clip_threshold), "train.clip_threshold", "must be finite and > 0");
  wrap("train.strategy", [&] { parse_strategy(train.strategy); });
  require(finite_positive(train.lm_lr_multiplier), "train.lm_lr_multiplier", "must be finite and > 0");
  require(unit_interval(train.p_next), "train.p_next", "must be in [0, 1]");
  require(unit_interval(train.space_prob), "train.space_prob", "must be in [0, 1]");
  require(train.max_images >= 1, "train.max_images", "must be >= 1");

  require(lm_pretrain.steps >= 1, "lm_pretrain.steps", "must be >= 1");
  require(lm_pretrain.batch_size >= 1, "lm_pretrain.batch_size", "must be >= 1");
  require(finite_positive(lm_pretrain.peak_lr), "lm_pretrain.peak_lr", "must be finite and > 0");
  require(lm_pretrain.length >= 2 && lm_pretrain.length <= max_len, "lm_pretrain.length",
          "must be in [2, model.lm.max_len]");

  const auto& c = contrastive;
  require(c.steps >= 1, "contrastive.steps", "must be >= 1");
  require(finite_positive(c.peak_lr), "contrastive.peak_lr", "must be finite and > 0");
  require(c.smoothing >= 0.0 && c.smoothing < 1.0, "contrastive.smoothing", "must be in [0, 1)");
  wrap("contrastive.strategy", [&] { parse_strategy(c.strategy); });
  require(c.text_width >= 1 && c.text_heads >= 1 && c.text_width % c.text_heads == 0, "contrastive.text_heads",
          "must divide contrastive.text_width");
  require(c.text_layers >= 1, "contrastive.text_layers", "must be >= 1");
  require(c.text_max_len >= 2, "contrastive.text_max_len", "must be >= 2");
  require(c.joint >= 1, "contrastive.joint", "must be >= 1");
  require(finite_positive(c.init_beta), "contrastive.init_beta", "must be finite and > 0");
  require(!c.datasets.empty(), "contrastive.datasets", "needs at least one dataset");
  names.clear();
  for (std::size_t i = 0; i < c.datasets.size(); ++i) {
    const auto& d = c.datasets[i];
    const std::string at = "contrastive.datasets[" + std::to_string(i) + "].";
    require(!d.name.empty(), at + "name", "must be non-empty");
    require(names.insert(d.name).second, at + "name", "duplicate dataset name '" + d.name + "'");
    require(d.size >= 2, at + "size", "must be >= 2");
    require(finite_positive(d.weight), at + "weight", "must be finite and > 0");
    require(d.batch_size >= 2, at + "batch_size", "must be >= 2");
    require(d.noise >= 0.0, at + "noise", "must be >= 0");
    require(unit_interval(d.mismatch), at + "mismatch", "must be in [0, 1]");
  }

  const auto& e = eval;
  require(!e.shots.empty(), "eval.shots", "needs at least one shot count");
  if (e.task_file.empty()) {
    require(!e.tasks.empty(), "eval.tasks", "needs a task (color, shape, caption) or eval.task_file");
    for (std::size_t i = 0; i < e.tasks.size(); ++i) {
      require(e.tasks[i] == "color" || e.tasks[i] == "shape" || e.tasks[i] == "caption",
              "eval.tasks[" + std::to_string(i) + "]", "unknown task '" + e.tasks[i] + "' (color, shape, caption)");
    }
    require(e.pool >= *std::max_element(e.shots.begin(), e.shots.end()) && e.pool >= 2, "eval.pool",
            "must be >= 2 and >= the largest shot count");
  }
  require(e.mode == "close_ended" || e.mode == "open_ended", "eval.mode", "must be close_ended or open_ended");
  require(e.queries >= 1, "eval.queries", "must be >= 1");
  require(e.classes >= 1 && e.classes <= data.synth.colors * data.synth.shapes, "eval.classes",
          "must be in [1, colors * shapes]");
  require(e.decode == "greedy" || e.decode == "beam", "eval.decode", "must be greedy or beam");
  require(e.beam_width >= 1, "eval.beam_width", "must be >= 1");
  require(e.max_len >= 1, "eval.max_len", "must be >= 1");
  require(e.ensemble >= 1, "eval.ensemble", "must be >= 1");
}

std::vector<std::string> preset_names() { return {"tiny", "desk"}; }

RunConfig preset_config(const std::string& preset) {
  RunConfig c;
  c.model.preset = preset;
  c.data.datasets = {{"glyph_caption", "synthetic", "glyph_caption", "", 2000, 1.0, 8, 12},
                     {"glyph_vqa", "synthetic", "glyph_vqa", "", 2000, 1.0, 8, 16},
                     {"interleaved_pages", "synthetic", "interleaved_pages", "", 2000, 1.0, 8, 32}};
  c.contrastive.datasets = {ContrastiveDatasetSpec{"glyph_pairs"}};
  if (preset == "desk") return c;
  if (preset != "tiny") throw ConfigError("config field 'model.preset': unknown preset '" + preset + "' (tiny, desk)");
  auto& f = c.model.flamingo;
  f.vision.width = 8;
  f.vision.blocks = 1;
  f.vision.hidden = 16;
  f.resampler.latents = 4;
  f.resampler.layers = 1;
  f.lm.width = 16;
  f.lm.layers = 1;
  for (auto& d : c.data.datasets) {
    d.size = 64;
    d.batch_size = 2;
  }
  c.train.steps = 20;
  c.train.warmup = 5;
  c.lm_pretrain.steps = 20;
  c.lm_pretrain.batch_size = 4;
  c.lm_pretrain.warmup = 5;
  c.contrastive.steps = 10;
  c.contrastive.warmup = 2;
  c.contrastive.text_width = 16;
  c.contrastive.joint = 16;
  c.contrastive.datasets[0].size = 64;
  c.contrastive.datasets[0].batch_size = 8;
  c.eval.queries = 8;
  c.eval.pool = 16;
  return c;
}

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text.empty() ? std::string("{}") : json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::string preset = "desk";
  if (j.contains("model") && j["model"].is_object() && j["model"].contains("preset")) {
    read_value(j["model"]["preset"], preset, "model.preset");
  }
  RunConfig c = preset_config(preset);
  Reader r{j, ""};
  visit(r, c);
  r.finish();
  c.model.flamingo.resolve();
  c.validate();
  return c;
}

std::string apply_overrides(const std::string& json_text, std::span<const std::string> overrides) {
  json j;
  try {
    j = json::parse(json_text.empty() ? std::string("{}") : json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw ConfigError("override '" + o + "' has an empty key segment");
      if (!node->is_object()) throw ConfigError("override '" + o + "': '" + key.substr(0, start) + "' is not an object");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      if (!node->contains(part)) (*node)[part] = json::object();
      node = &(*node)[part];
      start = dot + 1;
    }
  }
  return j.dump();
}

std::string resolved_json(const RunConfig& cfg) {
  RunConfig copy = cfg;
  json j = json::object();
  Writer w{j};
  visit(w, copy);
  return j.dump(2) + "\n";
}

}  // namespace flamingo::cli
