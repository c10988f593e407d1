#include <doctest.h>

#include "flamingo/rng.hpp"
#include "flamingo/tokenizer.hpp"

using namespace flamingo;

TEST_SUITE("tokenizer") {

TEST_CASE("encode and decode examples") {
  const std::vector<std::string> corpus = {"a cat", "dog runs", "Output: red square"};
  auto v = Vocab::build(corpus);
  CHECK(v.encode("").empty());
  CHECK(v.encode("<image>") == std::vector<TokenId>{v.image()});
  CHECK(v.decode(v.encode("a cat")) == "a cat");
  CHECK(v.decode({}).empty());
  const TokenId eoc[] = {v.eoc()};
  CHECK(v.decode(eoc) == "<EOC>");
  CHECK(v.decode(v.encode("dog runs")) == "dog runs");
}

TEST_CASE("special ids are fixed and never emitted for bos/eos") {
  Vocab v;
  CHECK(v.token(v.pad()) == "<pad>");
  CHECK(v.token(v.bos()) == "<BOS>");
  CHECK(v.token(v.eos()) == "<EOS>");
  CHECK(v.token(v.eoc()) == "<EOC>");
  CHECK(v.token(v.image()) == "<image>");
  CHECK(v.trainable_embedding_rows() == std::vector<TokenId>{v.eoc()});
  auto ids = v.encode("<BOS> x <EOS>");
  for (auto id : ids) {
    CHECK(id != v.bos());
    CHECK(id != v.eos());
  }
}

TEST_CASE("unknown words map to unk and out of range ids throw") {
  auto v = Vocab::build(std::vector<std::string>{"red"});
  auto ids = v.encode("blue");
  REQUIRE(ids.size() == 1);
  CHECK(ids[0] == v.unk());
  const TokenId bad[] = {static_cast<TokenId>(v.size())};
  CHECK_THROWS_AS(v.decode(bad), std::out_of_range);
}

TEST_CASE("inline specials split words") {
  auto v = Vocab::build(std::vector<std::string>{"x.<EOC><image>y"});
  auto ids = v.encode("x.<EOC><image>y");
  REQUIRE(ids.size() == 4);
  CHECK(ids[1] == v.eoc());
  CHECK(ids[2] == v.image());
}

TEST_CASE("round trip on random strings over the corpus alphabet") {
  const std::string alphabet = "abc :?<>";
  const std::string words[] = {"<image>", "<EOC>", "Output:", "red", " "};
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    std::string s;
    const std::size_t n = uniform_index(rng, 12);
    for (std::size_t i = 0; i < n; ++i) {
      if (bernoulli(rng, 0.2)) s += words[uniform_index(rng, 5)];
      else s += alphabet[uniform_index(rng, alphabet.size())];
    }
    const std::vector<std::string> corpus = {s};
    auto v = Vocab::build(corpus);
    CAPTURE(s);
    CHECK(v.decode(v.encode(s)) == s);
  }
}

TEST_CASE("serialization round trip") {
  auto v = Vocab::build(std::vector<std::string>{"Question: what color? Answer: red", " leading", "a  b"});
  auto text = v.serialize();
  CHECK(text.rfind("#flamingo-vocab 1\n#specials <pad>", 0) == 0);
  auto back = Vocab::parse(text);
  CHECK(back == v);
  CHECK(back.encode(" leading") == v.encode(" leading"));
  CHECK_THROWS(Vocab::parse("nonsense"));
}

}  // TEST_SUITE
