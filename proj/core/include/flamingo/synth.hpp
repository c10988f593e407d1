#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "flamingo/datapipe.hpp"
#include "flamingo/rng.hpp"
#include "flamingo/tokenizer.hpp"
#include "flamingo/vision.hpp"

// Procedural glyph corpora: coloured shapes on a dark background with
// captions, questions and multi-glyph pages generated by fixed grammars.
namespace flamingo::synth {

inline constexpr std::array<std::string_view, 8> kColors = {"red",  "green",   "blue",  "yellow",
                                                            "cyan", "magenta", "white", "orange"};
inline constexpr std::array<std::string_view, 8> kShapes = {"square", "circle", "triangle", "diamond",
                                                            "cross",  "ring",   "bar",      "x"};

struct SynthConfig {
  std::size_t resolution = 16;
  std::size_t colors = 8;  // first n of kColors
  std::size_t shapes = 8;  // first n of kShapes
  double noise = 0.03;     // per-pixel gaussian noise
  double jitter = 0.08;    // centre offset, fraction of the image
  double min_size = 0.30;  // half-extent, fraction of the image
  double max_size = 0.42;
  std::size_t min_chunks = 2;
  std::size_t max_chunks = 6;
  double intro_prob = 0.3;
  double shape_question_prob = 0.5;
  // Optional dataset-wide tint of the background, for domain-shifted sets.
  std::array<double, 3> background{0.08, 0.08, 0.08};

  void validate() const;
};

struct GlyphSpec {
  int color = 0;
  int shape = 0;
  double cx = 0.5;
  double cy = 0.5;
  double size = 0.35;
  double brightness = 1.0;
  std::uint64_t noise_seed = 0;
};

GlyphSpec random_glyph(Rng& rng, const SynthConfig& cfg, int color = -1, int shape = -1);
// Pixels [res, res, 3] in [0, 1].
Tensor render_glyph(const GlyphSpec& glyph, const SynthConfig& cfg);
VisualInput glyph_input(const GlyphSpec& glyph, const SynthConfig& cfg, const VisionConfig& vision);

std::string caption_text(const GlyphSpec& glyph);  // "Output: red square"
std::string color_question(const GlyphSpec& glyph);  // "Question: what color? Answer: red"
std::string shape_question(const GlyphSpec& glyph);

enum class Task { glyph_caption, glyph_vqa, interleaved_pages };
Task parse_task(std::string_view name);
std::string_view task_name(Task task);

using Item = std::vector<std::variant<std::string, GlyphSpec>>;

class Dataset : public DocumentCollection, public PairCollection {
 public:
  Dataset(Task task, SynthConfig cfg, VisionConfig vision, std::vector<Item> items);

  Task task() const { return task_; }
  const SynthConfig& config() const { return cfg_; }
  const std::vector<Item>& items() const { return items_; }

  std::size_t size() const override { return items_.size(); }
  InterleavedDocument document(std::size_t i) const override;
  std::pair<std::string, VisualInput> pair(std::size_t i) const override;

  // One JSON object per item; byte-identical for identical seeds.
  std::string to_jsonl() const;

 private:
  Task task_;
  SynthConfig cfg_;
  VisionConfig vision_;
  std::vector<Item> items_;
};

Dataset make_corpus(Task task, std::size_t size, Rng& rng, const SynthConfig& cfg, const VisionConfig& vision);

// Text-only view of a corpus for language-model pretraining: tags kept as
// "<image>" literals, no <EOC>.
std::vector<std::string> text_only(const Dataset& data);

// Every string the grammars can produce (with and without a leading space).
std::vector<std::string> grammar_texts(const SynthConfig& cfg);
Vocab build_vocab(const SynthConfig& cfg);

}  // namespace flamingo::synth
