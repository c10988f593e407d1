#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "flamingo/tensor.hpp"

namespace flamingo::io {

// Writes to `<path>.tmp` then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

// Image [H, W, 3] with values in [0, 1]. PPM (P3/P6) always; PNG when built
// with libpng.
Tensor read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& image);

// Inline tensor: base64 of little-endian float64 values.
Tensor decode_inline_tensor(const Shape& shape, std::string_view base64);
std::string encode_inline_tensor(const Tensor& t);

}  // namespace flamingo::io
