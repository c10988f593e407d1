#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "flamingo/io.hpp"
#include "flamingo/tensor.hpp"

namespace flamingo::detail {

// Calls fn on every non-blank line; errors are rethrown as "path:line: msg".
inline void for_each_jsonl(const std::filesystem::path& path, const std::function<void(const nlohmann::json&)>& fn) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

// A file path (relative to `base`) or {"shape": [...], "data": "<base64>"}.
inline Tensor read_json_image(const nlohmann::json& img, const std::filesystem::path& base) {
  if (img.is_string()) {
    std::filesystem::path p = img.get<std::string>();
    if (p.is_relative()) p = base / p;
    return io::read_image(p);
  }
  return io::decode_inline_tensor(img.at("shape").get<Shape>(), img.at("data").get<std::string>());
}

}  // namespace flamingo::detail
