#include "flamingo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "flamingo/io.hpp"

namespace flamingo::checkpoint {
namespace {

constexpr char kMagic[8] = {'F', 'L', 'M', 'C', 'K', 'P', 'T', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw std::runtime_error("checkpoint: truncated archive");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void magic() {
    need(sizeof(kMagic));
    if (std::memcmp(data_.data(), kMagic, sizeof(kMagic)) != 0)
      throw std::runtime_error("checkpoint: bad magic");
    pos_ += sizeof(kMagic);
  }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::uint32_t> read_header(Reader& r) {
  r.magic();
  const auto version = r.u32();
  if (version != kFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  std::map<std::string, std::uint32_t> man;
  const auto ncomp = r.u32();
  for (std::uint32_t i = 0; i < ncomp; ++i) {
    auto name = r.str();
    man[name] = r.u32();
  }
  return man;
}

}  // namespace

std::string component_of(const std::string& name) { return name.substr(0, name.find('.')); }

void save(const ParamStore& params, const std::filesystem::path& path) {
  std::map<std::string, std::uint32_t> man;
  for (const auto& [name, _] : params.entries()) ++man[component_of(name)];
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(man.size()));
  for (const auto& [comp, n] : man) {
    w.str(comp);
    w.u32(n);
  }
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, e] : params.entries()) {
    w.str(name);
    w.u8(e.frozen ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) w.u64(d);
    for (double v : e.value.data()) w.f64(v);
  }
  io::write_file_atomic(path, w.buffer());
}

ParamStore load(const std::filesystem::path& path, const std::set<std::string>& components) {
  Reader r(read_file(path));
  read_header(r);
  ParamStore out;
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = r.str();
    const bool frozen = r.u8() != 0;
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = r.f64();
    if (components.empty() || components.count(component_of(name))) {
      out.add(name, Tensor(std::move(shape), std::move(data)), frozen);
    }
  }
  return out;
}

std::size_t load_into(ParamStore& params, const std::filesystem::path& path,
                      const std::set<std::string>& components) {
  ParamStore loaded = load(path, components);
  std::size_t n = 0;
  for (const auto& [name, e] : loaded.entries()) {
    if (params.contains(name)) {
      if (!params.get(name).same_shape(e.value)) {
        throw std::runtime_error("checkpoint: shape of " + name + " is " +
                                 shape_to_string(e.value.shape()) + ", expected " +
                                 shape_to_string(params.get(name).shape()));
      }
      params.get_mutable(name) = e.value;
    } else {
      params.add(name, e.value, e.frozen);
    }
    ++n;
  }
  return n;
}

std::map<std::string, std::uint32_t> manifest(const std::filesystem::path& path) {
  Reader r(read_file(path));
  return read_header(r);
}

}  // namespace flamingo::checkpoint
