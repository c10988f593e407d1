#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "flamingo/graph.hpp"

namespace flamingo::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

// Component of a parameter name: the text before the first '.'.
std::string component_of(const std::string& name);

// Archive layout (all integers little-endian):
//   magic "FLMCKPT1", u32 version, u32 component count,
//   per component: u32 len, bytes, u32 entry count        (the manifest)
//   u32 entry count,
//   per entry: u32 len, name bytes, u8 frozen, u32 rank, u64 extents[rank],
//              f64 values[numel]
// Written to a temporary file and renamed into place.
void save(const ParamStore& params, const std::filesystem::path& path);

// Loads entries whose component is in `components` (all when empty).
ParamStore load(const std::filesystem::path& path, const std::set<std::string>& components = {});

// Overwrites matching entries of `params` (shapes must agree); adds missing
// ones. Frozen flags in `params` are kept for existing entries.
std::size_t load_into(ParamStore& params, const std::filesystem::path& path,
                      const std::set<std::string>& components = {});

// Component name -> entry count, read from the manifest only.
std::map<std::string, std::uint32_t> manifest(const std::filesystem::path& path);

}  // namespace flamingo::checkpoint
