#include "flamingo/vision.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "flamingo/layers.hpp"
#include "flamingo/ops.hpp"

namespace flamingo {

void VisionConfig::validate() const {
  if (resolution == 0 || patch == 0) throw std::invalid_argument("vision: resolution and patch must be positive");
  if (resolution % patch != 0) {
    throw std::invalid_argument("vision: resolution " + std::to_string(resolution) +
                                " not divisible by patch " + std::to_string(patch));
  }
  if (channels != 3) throw std::invalid_argument("vision: expects 3 channels");
  if (width == 0) throw std::invalid_argument("vision: width must be positive");
  if (kernel % 2 == 0) throw std::invalid_argument("vision: kernel must be odd");
  for (double s : pixel_std)
    if (!(s > 0.0)) throw std::invalid_argument("vision: pixel_std must be positive");
}

Tensor resize_with_pad(const Tensor& raw, std::size_t target) {
  if (target == 0) throw std::invalid_argument("resize_with_pad: target must be positive");
  if (raw.rank() != 3 || raw.dim(2) != 3 || raw.dim(0) == 0 || raw.dim(1) == 0) {
    throw std::invalid_argument("resize_with_pad: expects [h, w, 3], got " + shape_to_string(raw.shape()));
  }
  const std::size_t h = raw.dim(0), w = raw.dim(1);
  std::array<double, 3> mean{};
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) mean[c] += raw[i * 3 + c];
  for (auto& m : mean) m /= static_cast<double>(h * w);

  const double s = static_cast<double>(target) / static_cast<double>(std::max(h, w));
  const auto nh = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(h * s)), 1, target);
  const auto nw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(w * s)), 1, target);

  Tensor out({target, target, 3});
  for (std::size_t y = 0; y < target; ++y)
    for (std::size_t x = 0; x < target; ++x)
      for (std::size_t c = 0; c < 3; ++c) out[(y * target + x) * 3 + c] = mean[c];

  // Half-pixel-centre sampling, so equal sizes reproduce the input.
  auto source = [](std::size_t i, std::size_t n_out, std::size_t n_in, std::size_t& i0, std::size_t& i1,
                   double& f) {
    double pos = (static_cast<double>(i) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(n_in - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, n_in - 1);
    f = pos - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < nh; ++y) {
    std::size_t y0, y1;
    double fy;
    source(y, nh, h, y0, y1, fy);
    for (std::size_t x = 0; x < nw; ++x) {
      std::size_t x0, x1;
      double fx;
      source(x, nw, w, x0, x1, fx);
      for (std::size_t c = 0; c < 3; ++c) {
        auto px = [&](std::size_t yy, std::size_t xx) { return raw[(yy * w + xx) * 3 + c]; };
        const double top = px(y0, x0) + fx * (px(y0, x1) - px(y0, x0));
        const double bot = px(y1, x0) + fx * (px(y1, x1) - px(y1, x0));
        out[(y * target + x) * 3 + c] = top + fy * (bot - top);
      }
    }
  }
  return out;
}

Tensor standardize(const Tensor& image, const VisionConfig& cfg) {
  Tensor out = image;
  const std::size_t c = image.cols();
  if (c != 3) throw std::invalid_argument("standardize: expects 3 channels");
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = (out[i] - cfg.pixel_mean[i % 3]) / cfg.pixel_std[i % 3];
  }
  return out;
}

VisualInput preprocess_image(const Tensor& raw, const VisionConfig& cfg) {
  auto img = standardize(resize_with_pad(raw, cfg.resolution), cfg);
  return {img.reshaped({1, cfg.resolution, cfg.resolution, 3}), VisualKind::image};
}

VisualInput preprocess_video(std::span<const Tensor> frames, const VisionConfig& cfg) {
  if (frames.empty()) throw std::invalid_argument("preprocess_video: no frames");
  const std::size_t r = cfg.resolution, per = r * r * 3;
  Tensor pixels({frames.size(), r, r, 3});
  for (std::size_t t = 0; t < frames.size(); ++t) {
    auto img = standardize(resize_with_pad(frames[t], r), cfg);
    std::copy_n(img.ptr(), per, pixels.ptr() + t * per);
  }
  return {std::move(pixels), VisualKind::video};
}

Tensor temporal_weights(std::size_t t_train, std::size_t t_eval) {
  if (t_train == 0) throw std::invalid_argument("temporal_embed: empty table");
  if (t_eval == 0) throw std::invalid_argument("temporal_embed: no frames");
  Tensor w({t_eval, t_train}, 0.0);
  for (std::size_t t = 0; t < t_eval; ++t) {
    if (t_eval == t_train) {
      w.at(t, t) = 1.0;
      continue;
    }
    if (t_eval == 1 || t_train == 1) {
      w.at(t, 0) = 1.0;
      continue;
    }
    const double pos = static_cast<double>(t) * static_cast<double>(t_train - 1) / static_cast<double>(t_eval - 1);
    const auto lo = std::min(static_cast<std::size_t>(std::floor(pos)), t_train - 1);
    const double f = pos - static_cast<double>(lo);
    w.at(t, lo) += 1.0 - f;
    if (f > 0.0) w.at(t, lo + 1) += f;
  }
  return w;
}

VisualFeatureGrid temporal_embed(const VisualFeatureGrid& grid, Var table) {
  Graph& g = *table.graph;
  if (table.rows() == 0) throw std::invalid_argument("temporal_embed: empty table");
  if (table.cols() != grid.features.cols()) {
    throw std::invalid_argument("temporal_embed: table width " + std::to_string(table.cols()) +
                                " != feature width " + std::to_string(grid.features.cols()));
  }
  auto per_frame = ops::matmul(g.constant(temporal_weights(table.rows(), grid.frames)), table);
  std::vector<long> index(grid.frames * grid.spatial);
  for (std::size_t i = 0; i < index.size(); ++i) index[i] = static_cast<long>(i / grid.spatial);
  return {ops::add(grid.features, ops::gather_rows(per_frame, index)), grid.frames, grid.spatial};
}

VisionEncoder::VisionEncoder(VisionConfig cfg, std::string prefix)
    : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
  cfg_.validate();
}

void VisionEncoder::init(ParamStore& store, Rng& rng) const {
  const std::size_t d = cfg_.width, k2 = cfg_.kernel * cfg_.kernel;
  layers::add_linear(store, rng, prefix_ + ".patch", cfg_.patch * cfg_.patch * cfg_.channels, d, true);
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    const std::string p = prefix_ + ".block" + std::to_string(b);
    layers::add_layer_norm(store, p + ".ln", d);
    layers::add_linear(store, rng, p + ".conv", k2 * d, cfg_.hidden, true);
    layers::add_linear(store, rng, p + ".proj", cfg_.hidden, d, true, 0.5);
  }
  layers::add_layer_norm(store, prefix_ + ".ln_out", d);
}

Var VisionEncoder::encode_pixels(Graph& g, const Tensor& pixels, std::size_t frames) const {
  const std::size_t r = cfg_.resolution, p = cfg_.patch, gs = cfg_.grid(), c = cfg_.channels;
  const std::size_t patch_len = p * p * c;
  Tensor patches({frames * gs * gs, patch_len});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t gy = 0; gy < gs; ++gy)
      for (std::size_t gx = 0; gx < gs; ++gx) {
        double* dst = patches.ptr() + ((t * gs + gy) * gs + gx) * patch_len;
        for (std::size_t py = 0; py < p; ++py) {
          const double* src = pixels.ptr() + ((t * r + gy * p + py) * r + gx * p) * c;
          std::copy_n(src, p * c, dst + py * p * c);
        }
      }
  Var x = layers::linear(g, prefix_ + ".patch", g.constant(std::move(patches)), true);
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    const std::string pre = prefix_ + ".block" + std::to_string(b);
    auto h = layers::layer_norm(g, pre + ".ln", x);
    if (cfg_.kernel > 1) h = ops::grid_neighbourhood(h, frames, gs, gs, cfg_.kernel);
    h = ops::activation(layers::linear(g, pre + ".conv", h, true), ops::Activation::gelu);
    x = ops::add(x, layers::linear(g, pre + ".proj", h, true));
  }
  return layers::layer_norm(g, prefix_ + ".ln_out", x);
}

VisualFeatureGrid VisionEncoder::encode_frames(Graph& g, const VisualInput& v) const {
  const std::size_t r = cfg_.resolution;
  if (v.pixels.rank() != 4 || v.pixels.dim(1) != r || v.pixels.dim(2) != r || v.pixels.dim(3) != cfg_.channels) {
    throw std::invalid_argument("encode_frames: expected [T, " + std::to_string(r) + ", " + std::to_string(r) +
                                ", 3] pixels, got " + shape_to_string(v.pixels.shape()));
  }
  if (v.frames() == 0) throw std::invalid_argument("encode_frames: no frames");
  return {encode_pixels(g, v.pixels, v.frames()), v.frames(), cfg_.spatial()};
}

Var VisionEncoder::encode_stack(Graph& g, std::span<const VisualInput> inputs) const {
  std::size_t frames = 0;
  for (const auto& v : inputs) frames += v.frames();
  const std::size_t per = cfg_.resolution * cfg_.resolution * cfg_.channels;
  Tensor pixels({frames, cfg_.resolution, cfg_.resolution, cfg_.channels});
  std::size_t at = 0;
  for (const auto& v : inputs) {
    if (v.pixels.numel() != v.frames() * per) throw std::invalid_argument("encode_stack: bad pixel shape");
    std::copy_n(v.pixels.ptr(), v.pixels.numel(), pixels.ptr() + at * per);
    at += v.frames();
  }
  return encode_pixels(g, pixels, frames);
}

Tensor VisionEncoder::pooled(const ParamStore& params, const VisualInput& v) const {
  Graph g(&params, GradMode::none);
  const Tensor& f = ops::mean_rows(encode_frames(g, v).features).value();
  return f.reshaped({f.numel()});
}

}  // namespace flamingo
