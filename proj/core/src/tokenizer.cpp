#include "flamingo/tokenizer.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

#include "flamingo/io.hpp"

namespace flamingo {
namespace {

constexpr std::string_view kHeader = "#flamingo-vocab 1";
constexpr std::string_view kEnd = "#end";
// Specials recognised inside raw text; <BOS>/<EOS>/<pad> are only ever
// inserted by sequence packing.
constexpr std::array<std::string_view, 2> kInlineSpecials = {"<image>", "<EOC>"};

std::size_t inline_special_at(std::string_view text, std::size_t pos) {
  for (auto s : kInlineSpecials)
    if (text.substr(pos, s.size()) == s) return s.size();
  return 0;
}

}  // namespace

Vocab::Vocab() {
  for (auto s : kSpecials) add(std::string(s));
}

std::vector<std::string> Vocab::split_pieces(std::string_view text) {
  std::vector<std::string> pieces;
  std::size_t i = 0;
  while (i < text.size()) {
    if (auto n = inline_special_at(text, i)) {
      pieces.emplace_back(text.substr(i, n));
      i += n;
      continue;
    }
    std::size_t start = i;
    if (text[i] == ' ') ++i;
    while (i < text.size() && text[i] != ' ' && !inline_special_at(text, i)) ++i;
    pieces.emplace_back(text.substr(start, i - start));
  }
  return pieces;
}

Vocab Vocab::build(std::span<const std::string> texts) {
  std::set<std::string> words;
  for (const auto& t : texts)
    for (auto& p : split_pieces(t)) words.insert(std::move(p));
  Vocab v;
  for (const auto& w : words)
    if (!v.contains(w)) v.add(w);
  return v;
}

TokenId Vocab::add(const std::string& token) {
  if (token.empty() || token.find('\n') != std::string::npos) {
    throw std::invalid_argument("vocab: token must be non-empty and single-line");
  }
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

TokenId Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? unk() : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("vocab: id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (const auto& p : split_pieces(text)) {
    const TokenId t = id(p);
    // Sequence-level specials typed into text are not honoured.
    out.push_back(is_special(t) && t != eoc() && t != image() ? unk() : t);
  }
  return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto i : ids) out += token(i);
  return out;
}

std::string Vocab::serialize() const {
  std::string out(kHeader);
  out += "\n#specials";
  for (auto s : kSpecials) {
    out += ' ';
    out += s;
  }
  out += '\n';
  out += kEnd;
  out += '\n';
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocab Vocab::parse(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    lines.emplace_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  if (lines.empty() || lines[0] != kHeader) throw std::runtime_error("vocab: missing header line");
  std::size_t i = 1;
  std::vector<std::string> specials;
  for (; i < lines.size() && lines[i] != kEnd; ++i) {
    std::istringstream is(lines[i]);
    std::string key;
    is >> key;
    if (key == "#specials") {
      std::string s;
      while (is >> s) specials.push_back(s);
    }
  }
  if (i == lines.size()) throw std::runtime_error("vocab: unterminated header block");
  ++i;
  if (specials.size() != kSpecials.size() ||
      !std::equal(specials.begin(), specials.end(), kSpecials.begin())) {
    throw std::runtime_error("vocab: header declares unexpected specials");
  }
  Vocab v;
  std::size_t id = 0;
  for (; i < lines.size(); ++i, ++id) {
    if (id < kSpecials.size()) {
      if (lines[i] != kSpecials[id]) throw std::runtime_error("vocab: special ids out of order");
      continue;
    }
    if (v.contains(lines[i])) throw std::runtime_error("vocab: duplicate token '" + lines[i] + "'");
    v.add(lines[i]);
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

Vocab Vocab::load(const std::filesystem::path& path) { return parse(io::read_file(path)); }

}  // namespace flamingo
