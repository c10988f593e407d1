#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace flamingo {

using TokenId = int;

// Word-level reversible vocabulary. A piece is an optional single leading
// space followed by a run of non-space characters; a space that is not
// followed by a word is a piece of its own. The literals "<image>" and
// "<EOC>" inside text map to their special ids.
class Vocab {
 public:
  static constexpr std::array<std::string_view, 6> kSpecials = {
      "<pad>", "<unk>", "<BOS>", "<EOS>", "<EOC>", "<image>"};

  Vocab();

  // Specials followed by every distinct piece of `texts`, sorted.
  static Vocab build(std::span<const std::string> texts);
  static std::vector<std::string> split_pieces(std::string_view text);

  TokenId add(const std::string& token);
  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  TokenId id(const std::string& token) const;  // unk when absent
  const std::string& token(TokenId id) const;

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  static constexpr TokenId pad() { return 0; }
  static constexpr TokenId unk() { return 1; }
  static constexpr TokenId bos() { return 2; }
  static constexpr TokenId eos() { return 3; }
  static constexpr TokenId eoc() { return 4; }
  static constexpr TokenId image() { return 5; }
  bool is_special(TokenId id) const { return id >= 0 && id < static_cast<TokenId>(kSpecials.size()); }

  // Rows that get a fresh learned embedding in the multimodal model.
  std::vector<TokenId> trainable_embedding_rows() const { return {eoc()}; }

  // Newline-delimited token list (id = index after the header block).
  std::string serialize() const;
  static Vocab parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace flamingo
