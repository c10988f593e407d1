#pragma once

#include <vector>

#include "flamingo/tokenizer.hpp"
#include "flamingo/vision.hpp"

namespace flamingo {

enum class PhiDirection { previous, next };

// One (images, text, indices) training or evaluation sequence. `images` has
// the configured N slots; slots at or beyond `real_images` are zero padding
// and are never referenced by `indices` (values in [0, real_images]).
struct TrainingInstance {
  std::vector<VisualInput> images;
  std::size_t real_images = 0;
  std::vector<TokenId> text;
  std::vector<int> indices;
  PhiDirection direction = PhiDirection::previous;

  std::size_t length() const { return text.size(); }
  std::size_t max_index() const;
};

}  // namespace flamingo
