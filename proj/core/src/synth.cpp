#include "flamingo/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace flamingo::synth {
namespace {

constexpr std::array<std::array<double, 3>, 8> kRgb = {{{0.92, 0.10, 0.10},
                                                        {0.10, 0.80, 0.15},
                                                        {0.15, 0.25, 0.95},
                                                        {0.95, 0.90, 0.10},
                                                        {0.10, 0.85, 0.90},
                                                        {0.90, 0.15, 0.85},
                                                        {0.95, 0.95, 0.95},
                                                        {1.00, 0.55, 0.05}}};

constexpr std::array<std::string_view, 3> kIntros = {"Glyphs:", "My page:", "Some shapes:"};

bool inside(int shape, double u, double v) {
  const double r2 = u * u + v * v;
  switch (shape) {
    case 0: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 1: return r2 <= 0.9 * 0.9;
    case 2: return v >= -0.85 && v <= 0.85 && std::abs(u) <= 0.9 * (v + 0.85) / 1.7;
    case 3: return std::abs(u) + std::abs(v) <= 1.0;
    case 4: return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case 5: return r2 <= 0.95 * 0.95 && r2 >= 0.5 * 0.5;
    case 6: return std::abs(u) <= 0.95 && std::abs(v) <= 0.3;
    case 7:
      return std::abs(u) <= 0.95 && std::abs(v) <= 0.95 && (std::abs(u - v) <= 0.4 || std::abs(u + v) <= 0.4);
    default: throw std::out_of_range("glyph: unknown shape " + std::to_string(shape));
  }
}

enum class PageFormat { both, color, shape };

std::string chunk_text(const GlyphSpec& g, PageFormat f) {
  switch (f) {
    case PageFormat::both: return caption_text(g);
    case PageFormat::color: return "Output: " + std::string(kColors[static_cast<std::size_t>(g.color)]);
    case PageFormat::shape: return "Output: " + std::string(kShapes[static_cast<std::size_t>(g.shape)]);
  }
  return {};
}

}  // namespace

void SynthConfig::validate() const {
  if (resolution == 0) throw std::invalid_argument("synth: resolution must be positive");
  if (colors == 0 || colors > kColors.size()) throw std::invalid_argument("synth: colors must be in [1, 8]");
  if (shapes == 0 || shapes > kShapes.size()) throw std::invalid_argument("synth: shapes must be in [1, 8]");
  if (min_chunks == 0 || min_chunks > max_chunks) throw std::invalid_argument("synth: need 1 <= min_chunks <= max_chunks");
  if (!(min_size > 0.0) || min_size > max_size) throw std::invalid_argument("synth: bad glyph size range");
}

GlyphSpec random_glyph(Rng& rng, const SynthConfig& cfg, int color, int shape) {
  GlyphSpec g;
  g.color = color >= 0 ? color : static_cast<int>(uniform_index(rng, cfg.colors));
  g.shape = shape >= 0 ? shape : static_cast<int>(uniform_index(rng, cfg.shapes));
  g.cx = 0.5 + cfg.jitter * (2.0 * uniform01(rng) - 1.0);
  g.cy = 0.5 + cfg.jitter * (2.0 * uniform01(rng) - 1.0);
  g.size = cfg.min_size + (cfg.max_size - cfg.min_size) * uniform01(rng);
  g.brightness = 0.8 + 0.2 * uniform01(rng);
  g.noise_seed = rng();
  return g;
}

Tensor render_glyph(const GlyphSpec& glyph, const SynthConfig& cfg) {
  const std::size_t res = cfg.resolution;
  constexpr int kSuper = 4;
  Tensor img({res, res, 3});
  Rng noise_rng(glyph.noise_seed);
  std::normal_distribution<double> noise(0.0, cfg.noise);
  const auto& rgb = kRgb.at(static_cast<std::size_t>(glyph.color));
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = (static_cast<double>(x) + (sx + 0.5) / kSuper) / static_cast<double>(res);
          const double py = (static_cast<double>(y) + (sy + 0.5) / kSuper) / static_cast<double>(res);
          hits += inside(glyph.shape, (px - glyph.cx) / glyph.size, (py - glyph.cy) / glyph.size);
        }
      const double cover = hits / static_cast<double>(kSuper * kSuper);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = cover * rgb[c] * glyph.brightness + (1.0 - cover) * cfg.background[c] + noise(noise_rng);
        img[(y * res + x) * 3 + c] = std::clamp(v, 0.0, 1.0);
      }
    }
  return img;
}

VisualInput glyph_input(const GlyphSpec& glyph, const SynthConfig& cfg, const VisionConfig& vision) {
  return preprocess_image(render_glyph(glyph, cfg), vision);
}

std::string caption_text(const GlyphSpec& g) {
  return "Output: " + std::string(kColors.at(static_cast<std::size_t>(g.color))) + " " +
         std::string(kShapes.at(static_cast<std::size_t>(g.shape)));
}

std::string color_question(const GlyphSpec& g) {
  return "Question: what color? Answer: " + std::string(kColors.at(static_cast<std::size_t>(g.color)));
}

std::string shape_question(const GlyphSpec& g) {
  return "Question: what shape? Answer: " + std::string(kShapes.at(static_cast<std::size_t>(g.shape)));
}

Task parse_task(std::string_view name) {
  if (name == "glyph_caption") return Task::glyph_caption;
  if (name == "glyph_vqa") return Task::glyph_vqa;
  if (name == "interleaved_pages") return Task::interleaved_pages;
  throw std::invalid_argument("unknown synthetic task '" + std::string(name) + "'");
}

std::string_view task_name(Task task) {
  switch (task) {
    case Task::glyph_caption: return "glyph_caption";
    case Task::glyph_vqa: return "glyph_vqa";
    case Task::interleaved_pages: return "interleaved_pages";
  }
  return "";
}

Dataset::Dataset(Task task, SynthConfig cfg, VisionConfig vision, std::vector<Item> items)
    : task_(task), cfg_(std::move(cfg)), vision_(std::move(vision)), items_(std::move(items)) {}

InterleavedDocument Dataset::document(std::size_t i) const {
  InterleavedDocument doc;
  for (const auto& seg : items_.at(i)) {
    if (const auto* text = std::get_if<std::string>(&seg)) doc.segments.emplace_back(*text);
    else doc.segments.emplace_back(glyph_input(std::get<GlyphSpec>(seg), cfg_, vision_));
  }
  return doc;
}

std::pair<std::string, VisualInput> Dataset::pair(std::size_t i) const {
  const auto& item = items_.at(i);
  if (item.size() != 2 || !std::holds_alternative<GlyphSpec>(item[0])) {
    throw std::logic_error("synthetic item " + std::to_string(i) + " is not a glyph/text pair");
  }
  return {std::get<std::string>(item[1]), glyph_input(std::get<GlyphSpec>(item[0]), cfg_, vision_)};
}

std::string Dataset::to_jsonl() const {
  std::string out;
  for (const auto& item : items_) {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& seg : item) {
      if (const auto* text = std::get_if<std::string>(&seg)) {
        segs.push_back({{"text", *text}});
      } else {
        const auto& g = std::get<GlyphSpec>(seg);
        segs.push_back({{"glyph",
                         {{"color", kColors[static_cast<std::size_t>(g.color)]},
                          {"shape", kShapes[static_cast<std::size_t>(g.shape)]},
                          {"cx", g.cx},
                          {"cy", g.cy},
                          {"size", g.size},
                          {"brightness", g.brightness},
                          {"seed", g.noise_seed}}}});
      }
    }
    out += nlohmann::json{{"task", task_name(task_)}, {"segments", segs}}.dump();
    out += '\n';
  }
  return out;
}

Dataset make_corpus(Task task, std::size_t size, Rng& rng, const SynthConfig& cfg, const VisionConfig& vision) {
  if (size == 0) throw std::invalid_argument("synth_corpus: size must be >= 1");
  cfg.validate();
  std::vector<Item> items;
  items.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    Item item;
    switch (task) {
      case Task::glyph_caption: {
        auto g = random_glyph(rng, cfg);
        item = {g, caption_text(g)};
        break;
      }
      case Task::glyph_vqa: {
        auto g = random_glyph(rng, cfg);
        item = {g, bernoulli(rng, cfg.shape_question_prob) ? shape_question(g) : color_question(g)};
        break;
      }
      case Task::interleaved_pages: {
        const auto fmt = static_cast<PageFormat>(uniform_index(rng, 3));
        if (bernoulli(rng, cfg.intro_prob)) item.emplace_back(std::string(kIntros[uniform_index(rng, kIntros.size())]));
        const std::size_t chunks = cfg.min_chunks + uniform_index(rng, cfg.max_chunks - cfg.min_chunks + 1);
        for (std::size_t c = 0; c < chunks; ++c) {
          auto g = random_glyph(rng, cfg);
          item.emplace_back(g);
          item.emplace_back(chunk_text(g, fmt));
        }
        break;
      }
    }
    items.push_back(std::move(item));
  }
  return Dataset(task, cfg, vision, std::move(items));
}

std::vector<std::string> text_only(const Dataset& data) {
  std::vector<std::string> out;
  for (const auto& item : data.items()) {
    std::string s;
    for (const auto& seg : item) {
      if (const auto* text = std::get_if<std::string>(&seg)) s += *text;
      else s += "<image>";
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::string> grammar_texts(const SynthConfig& cfg) {
  std::vector<std::string> base;
  for (std::size_t c = 0; c < cfg.colors; ++c)
    for (std::size_t s = 0; s < cfg.shapes; ++s) {
      GlyphSpec g;
      g.color = static_cast<int>(c);
      g.shape = static_cast<int>(s);
      base.push_back(caption_text(g));
      base.push_back(color_question(g));
      base.push_back(shape_question(g));
      base.push_back(chunk_text(g, PageFormat::color));
      base.push_back(chunk_text(g, PageFormat::shape));
    }
  for (auto intro : kIntros) base.emplace_back(intro);
  std::vector<std::string> out;
  for (const auto& b : base) {
    out.push_back(b);
    out.push_back(" " + b);
  }
  return out;
}

Vocab build_vocab(const SynthConfig& cfg) { return Vocab::build(grammar_texts(cfg)); }

}  // namespace flamingo::synth
