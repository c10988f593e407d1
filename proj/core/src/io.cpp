#include "flamingo/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

#ifdef FLAMINGO_HAVE_PNG
#include <png.h>
#endif

namespace flamingo::io {

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}
}  // namespace

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (static_cast<std::uint8_t>(bytes[i]) << 16) |
                            (static_cast<std::uint8_t>(bytes[i + 1]) << 8) |
                            static_cast<std::uint8_t>(bytes[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest) {
    std::uint32_t v = static_cast<std::uint8_t>(bytes[i]) << 16;
    if (rest == 2) v |= static_cast<std::uint8_t>(bytes[i + 1]) << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += rest == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::string base64_decode(std::string_view text) {
  std::string out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=' ) break;
    if (std::isspace(static_cast<unsigned char>(c))) continue;
    const int v = b64_value(c);
    if (v < 0) throw std::invalid_argument("base64: invalid character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out += static_cast<char>((acc >> bits) & 0xFF);
    }
  }
  return out;
}

Tensor decode_inline_tensor(const Shape& shape, std::string_view base64) {
  const std::string raw = base64_decode(base64);
  const std::size_t n = shape_numel(shape);
  if (raw.size() != n * 8) {
    throw std::invalid_argument("inline tensor: " + std::to_string(raw.size()) +
                                " bytes for shape " + shape_to_string(shape));
  }
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b)
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(raw[i * 8 + b])) << (8 * b);
    data[i] = std::bit_cast<double>(v);
  }
  return Tensor(shape, std::move(data));
}

std::string encode_inline_tensor(const Tensor& t) {
  std::string raw;
  raw.reserve(t.numel() * 8);
  for (double d : t.data()) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int b = 0; b < 8; ++b) raw += static_cast<char>((v >> (8 * b)) & 0xFF);
  }
  return base64_encode(raw);
}

namespace {

Tensor read_ppm(const std::string& data, const std::filesystem::path& path) {
  std::istringstream in(data);
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P3") throw std::runtime_error("not a PPM file: " + path.string());
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    if (!in || v < 0) throw std::runtime_error("bad PPM header: " + path.string());
    return static_cast<std::size_t>(v);
  };
  const std::size_t w = next_int(), h = next_int(), maxval = next_int();
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
    throw std::runtime_error("unsupported PPM geometry: " + path.string());
  }
  Tensor img({h, w, 3});
  if (magic == "P6") {
    in.get();
    for (std::size_t i = 0; i < img.numel(); ++i) {
      const int c = in.get();
      if (c == EOF) throw std::runtime_error("truncated PPM: " + path.string());
      img[i] = static_cast<double>(c) / static_cast<double>(maxval);
    }
  } else {
    for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>(next_int()) / static_cast<double>(maxval);
  }
  return img;
}

#ifdef FLAMINGO_HAVE_PNG
Tensor read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw std::runtime_error("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + image.message);
  }
  Tensor img({image.height, image.width, 3});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = buf[i] / 255.0;
  png_image_free(&image);
  return img;
}
#endif

}  // namespace

Tensor read_image(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  if (data.size() >= 8 && static_cast<unsigned char>(data[0]) == 0x89 && data.compare(1, 3, "PNG") == 0) {
#ifdef FLAMINGO_HAVE_PNG
    return read_png(path);
#else
    throw std::runtime_error("PNG support not built in: " + path.string());
#endif
  }
  return read_ppm(data, path);
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw std::invalid_argument("write_ppm: expects [H, W, 3]");
  std::string out = "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
  for (double v : image.data()) {
    const double c = std::clamp(v, 0.0, 1.0);
    out += static_cast<char>(static_cast<int>(c * 255.0 + 0.5));
  }
  write_file_atomic(path, out);
}

}  // namespace flamingo::io
