#include <doctest.h>

#include <fstream>
#include <map>

#include "flamingo/datapipe.hpp"
#include "flamingo/io.hpp"
#include "flamingo/ops.hpp"
#include "flamingo/synth.hpp"

using namespace flamingo;

namespace {

VisualInput img(double v = 0.0) { return {Tensor({1, 16, 16, 3}, v)}; }

std::string render(const std::vector<TokenId>& ids, const Vocab& v) {
  std::string s;
  for (auto id : ids) {
    if (!s.empty()) s += ' ';
    s += v.token(id);
  }
  return s;
}

// Independent reference: build the tag string directly from the segment list.
std::string reference_tags(const std::vector<std::string>& segs) {
  std::string out = "<BOS>";
  bool any = false;
  for (const auto& s : segs) {
    if (s == "#img") {
      if (any) out += " <EOC>";
      out += " <image>";
    } else {
      out += " " + s;
    }
    any = true;
  }
  return out + " <EOC> <EOS>";
}

// Definitional phi: scan for the nearest tag in the given direction.
std::vector<int> reference_phi(const std::vector<bool>& is_tag, PhiDirection d) {
  std::vector<int> out(is_tag.size(), 0);
  for (std::size_t l = 0; l < is_tag.size(); ++l) {
    int count = 0;
    for (std::size_t j = 0; j < is_tag.size(); ++j) {
      if (!is_tag[j]) continue;
      ++count;
      if (d == PhiDirection::previous && j <= l) out[l] = count;
      if (d == PhiDirection::next && j >= l) {
        out[l] = count;
        break;
      }
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("datapipe") {

TEST_CASE("tag_document examples") {
  auto v = Vocab::build(std::vector<std::string>{"A cat", "x", "y", "intro", "body"});
  auto tags = [&](std::vector<Segment> segs) { return render(tag_document({std::move(segs)}, v).tokens, v); };
  CHECK(tags({img(), std::string("A cat")}) == "<BOS> <image> A  cat <EOC> <EOS>");
  CHECK(tags({img(), std::string("x"), img(), std::string("y")}) == reference_tags({"#img", "x", "#img", "y"}));
  CHECK(tags({std::string("intro"), img(), std::string("body")}) == reference_tags({"intro", "#img", "body"}));
  CHECK(tags({std::string("intro"), img(), std::string("body")}) == "<BOS> intro <EOC> <image> body <EOC> <EOS>");
  auto t = tag_document({{std::string("x"), img(), img()}}, v);
  CHECK(t.image_positions == std::vector<std::size_t>{3, 5});
  CHECK(t.images.size() == 2);
}

TEST_CASE("compute_phi examples") {
  const std::size_t pos[] = {0, 3};
  CHECK(compute_phi(5, pos, PhiDirection::previous) == std::vector<int>{1, 1, 1, 2, 2});
  CHECK(compute_phi(5, pos, PhiDirection::next) == std::vector<int>{1, 2, 2, 2, 0});
  CHECK(compute_phi(4, {}, PhiDirection::previous) == std::vector<int>{0, 0, 0, 0});
  CHECK(compute_phi(4, {}, PhiDirection::next) == std::vector<int>{0, 0, 0, 0});
}

TEST_CASE("compute_phi matches the definitional reference") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t L = 1 + uniform_index(rng, 20);
    std::vector<bool> tag(L);
    std::vector<std::size_t> pos;
    for (std::size_t l = 0; l < L; ++l)
      if ((tag[l] = bernoulli(rng, 0.25))) pos.push_back(l);
    for (auto d : {PhiDirection::previous, PhiDirection::next}) CHECK(compute_phi(L, pos, d) == reference_phi(tag, d));
  }
}

TEST_CASE("sample_instance keeps the first N images") {
  auto v = Vocab::build(std::vector<std::string>{"w"});
  InterleavedDocument doc;
  for (int i = 0; i < 7; ++i) {
    doc.segments.emplace_back(img(i + 1.0));
    doc.segments.emplace_back(std::string("w"));
  }
  Rng rng(2);
  WindowOptions opts{64, 5, 0.0};
  auto inst = sample_instance(tag_document(doc, v), rng, opts, v);
  REQUIRE(inst.images.size() == 5);
  CHECK(inst.real_images == 5);
  for (int i = 0; i < 5; ++i) CHECK(inst.images[static_cast<std::size_t>(i)].pixels[0] == i + 1.0);
  CHECK(inst.max_index() == 5);
  CHECK(inst.direction == PhiDirection::previous);
  // Tokens after the sixth tag point at a dropped image.
  CHECK(inst.indices.size() == 64);
  std::size_t tags = 0;
  for (std::size_t l = 0; l < inst.text.size(); ++l) {
    if (inst.text[l] == v.image()) ++tags;
    if (tags > 5) CHECK(inst.indices[l] == 0);
  }
}

TEST_CASE("sample_instance is seeded and pads short documents") {
  auto v = Vocab::build(std::vector<std::string>{"a b c"});
  InterleavedDocument doc{{std::string("a b"), img(1), std::string("c")}};
  auto tagged = tag_document(doc, v);
  WindowOptions opts{12, 3, 0.5};
  Rng r1(9), r2(9);
  auto a = sample_instance(tagged, r1, opts, v);
  auto b = sample_instance(tagged, r2, opts, v);
  CHECK(a.text == b.text);
  CHECK(a.indices == b.indices);
  CHECK(a.direction == b.direction);
  CHECK(a.text.back() == v.pad());
  CHECK(a.images.size() == 3);
  CHECK(a.images[1].pixels == Tensor({1, 16, 16, 3}, 0.0));
}

TEST_CASE("windows always contain an image") {
  auto v = Vocab::build(std::vector<std::string>{"w"});
  InterleavedDocument doc;
  for (int i = 0; i < 40; ++i) doc.segments.emplace_back(std::string("w"));
  doc.segments.emplace_back(img());
  for (int i = 0; i < 40; ++i) doc.segments.emplace_back(std::string("w"));
  auto tagged = tag_document(doc, v);
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto inst = sample_instance(tagged, rng, {10, 2, 0.5}, v);
    CHECK(std::count(inst.text.begin(), inst.text.end(), v.image()) == 1);
  }
}

TEST_CASE("format_paired examples") {
  auto v = Vocab::build(std::vector<std::string>{"a dog", " a dog"});
  Rng rng(4);
  PairedOptions always{10, 1.0};
  auto inst = format_paired("a dog", img(), rng, always, v);
  CHECK(v.decode(std::span(inst.text).subspan(0, 4)) == "<BOS><image> a dog");
  PairedOptions never{10, 0.0};
  for (int i = 0; i < 20; ++i) {
    auto p = format_paired("a dog", img(), rng, never, v);
    CHECK(v.decode(std::span(p.text).subspan(0, 6)) == "<BOS><image>a dog<EOC><EOS>");
    CHECK(p.indices == std::vector<int>{0, 1, 1, 1, 1, 1, 0, 0, 0, 0});
    const std::size_t pos[] = {1};
    auto phi = compute_phi(6, pos, PhiDirection::previous);
    CHECK(std::equal(phi.begin(), phi.end(), p.indices.begin()));
  }
  CHECK_THROWS(format_paired("", img(), rng, never, v));
}

TEST_CASE("instance invariants over synthetic pages") {
  synth::SynthConfig cfg;
  VisionConfig vis;
  Rng rng(5);
  auto data = std::make_shared<synth::Dataset>(synth::make_corpus(synth::Task::interleaved_pages, 40, rng, cfg, vis));
  auto v = synth::build_vocab(cfg);
  InterleavedSource src(data, v, {20, 3, 0.5});
  for (std::size_t i = 0; i < 40; ++i) {
    auto inst = src.make(i, rng);
    CHECK(inst.text.size() == 20);
    CHECK(inst.images.size() == 3);
    CHECK(inst.max_index() <= inst.real_images);
    CHECK(inst.real_images >= 1);
    for (std::size_t l = 0; l < 20; ++l) {
      if (inst.direction == PhiDirection::previous && l > 0 && inst.indices[l] > 0)
        CHECK(inst.indices[l] >= inst.indices[l - 1]);
      if (inst.indices[l] == 0) continue;
      // The referenced tag sits at or before l (previous) / at or after l (next).
      std::size_t seen = 0, tag_pos = 0;
      for (std::size_t j = 0; j < 20; ++j)
        if (inst.text[j] == v.image() && ++seen == static_cast<std::size_t>(inst.indices[l])) tag_pos = j;
      if (inst.direction == PhiDirection::previous) CHECK(tag_pos <= l);
      else CHECK(tag_pos >= l);
    }
  }
}

TEST_CASE("pad targets receive zero loss gradient") {
  auto v = Vocab::build(std::vector<std::string>{"a dog"});
  Rng rng(6);
  auto inst = format_paired("a dog", img(), rng, {10, 0.0}, v);
  auto w = target_weights(inst, v);
  ParamStore p;
  std::normal_distribution<double> n;
  Tensor logits({9, v.size()});
  for (auto& x : logits.data()) x = n(rng);
  p.add("logits", logits);
  Graph g(&p);
  std::vector<int> targets(inst.text.begin() + 1, inst.text.end());
  auto grads = g.backward(ops::nll_loss(g.param("logits"), targets, w));
  for (std::size_t l = 0; l < 9; ++l) {
    if (inst.text[l + 1] != v.pad()) continue;
    for (std::size_t c = 0; c < v.size(); ++c) CHECK(grads.at("logits").at(l, c) == 0.0);
  }
}

namespace {
class Offset : public InstanceSource {
 public:
  Offset(std::size_t n, int base) : n_(n), base_(base) {}
  std::size_t size() const override { return n_; }
  TrainingInstance make(std::size_t item, Rng&) const override {
    TrainingInstance t;
    t.text = {static_cast<TokenId>(item) + base_};
    t.indices = {0};
    return t;
  }

 private:
  std::size_t n_;
  int base_;
};

class Counter : public InstanceSource {
 public:
  explicit Counter(std::size_t n) : n_(n) {}
  std::size_t size() const override { return n_; }
  TrainingInstance make(std::size_t item, Rng&) const override {
    TrainingInstance t;
    t.text = {static_cast<TokenId>(item)};
    t.indices = {0};
    return t;
  }

 private:
  std::size_t n_;
};
}  // namespace

TEST_CASE("mixture batches") {
  MixtureSpec spec;
  spec.datasets.push_back({"a", 1.0, 3, std::make_shared<Counter>(100)});
  spec.datasets.push_back({"b", 0.2, 5, std::make_shared<Counter>(100)});
  Rng r1(7), r2(7);
  auto x = next_mixture_batches(spec, r1);
  auto y = next_mixture_batches(spec, r2);
  REQUIRE(x.size() == 2);
  CHECK(x[0].size() == 3);
  CHECK(x[1].size() == 5);
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t i = 0; i < x[m].size(); ++i) CHECK(x[m][i].text == y[m][i].text);
  auto reweighted = spec;
  reweighted.datasets[1].weight = 7.0;
  Rng r3(7);
  auto z = next_mixture_batches(reweighted, r3);
  for (std::size_t i = 0; i < 5; ++i) CHECK(z[1][i].text == x[1][i].text);
  spec.datasets.push_back({"empty", 1.0, 1, std::make_shared<Counter>(0)});
  CHECK_THROWS(next_mixture_batches(spec, r1));
  spec.datasets.pop_back();
  spec.datasets[0].weight = 0.0;
  CHECK_THROWS(next_mixture_batches(spec, r1));
}

TEST_CASE("pooled batches follow dataset sizes") {
  MixtureSpec spec;
  spec.datasets.push_back({"small", 1.0, 4, std::make_shared<Counter>(100)});
  spec.datasets.push_back({"large", 1.0, 4, std::make_shared<Counter>(300)});
  Rng r1(3), r2(3);
  auto first = next_pooled_batch(spec, r1), again = next_pooled_batch(spec, r2);
  REQUIRE(first.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(first[i].text == again[i].text);
  // Counter items only encode their local index; tag the large set by offset.
  spec.datasets[1].source = std::make_shared<Offset>(300, 1000);
  Rng r3(3);
  std::size_t large = 0, n = 0;
  for (int step = 0; step < 2000; ++step)
    for (const auto& inst : next_pooled_batch(spec, r3)) {
      large += inst.text[0] >= 1000;
      ++n;
    }
  CHECK(static_cast<double>(large) / static_cast<double>(n) == doctest::Approx(0.75).epsilon(0.03));
}

TEST_CASE("synthetic corpus grammar and determinism") {
  synth::SynthConfig cfg;
  VisionConfig vis;
  synth::GlyphSpec g;
  g.color = 0;
  g.shape = 0;
  CHECK(synth::caption_text(g) == "Output: red square");
  CHECK(synth::color_question(g) == "Question: what color? Answer: red");
  for (auto task : {synth::Task::glyph_caption, synth::Task::glyph_vqa, synth::Task::interleaved_pages}) {
    Rng a(11), b(11);
    auto x = synth::make_corpus(task, 30, a, cfg, vis);
    auto y = synth::make_corpus(task, 30, b, cfg, vis);
    CHECK(x.to_jsonl() == y.to_jsonl());
    CHECK(bitwise_equal(x.document(3).segments.size() ? std::get<VisualInput>(
                                                            x.document(3).segments[task == synth::Task::interleaved_pages &&
                                                                                           std::holds_alternative<std::string>(x.document(3).segments[0])
                                                                                       ? 1
                                                                                       : 0])
                                                            .pixels
                                                      : Tensor(),
                        std::get<VisualInput>(y.document(3).segments[task == synth::Task::interleaved_pages &&
                                                                             std::holds_alternative<std::string>(y.document(3).segments[0])
                                                                         ? 1
                                                                         : 0])
                            .pixels));
  }
  Rng r(12);
  auto cap = synth::make_corpus(synth::Task::glyph_caption, 5, r, cfg, vis);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& gs = std::get<synth::GlyphSpec>(cap.items()[i][0]);
    CHECK(cap.pair(i).first == synth::caption_text(gs));
  }
  CHECK_THROWS(synth::make_corpus(synth::Task::glyph_caption, 0, r, cfg, vis));
}

TEST_CASE("attribute marginals are uniform") {
  synth::SynthConfig cfg;
  VisionConfig vis;
  Rng rng(13);
  auto data = synth::make_corpus(synth::Task::glyph_caption, 10000, rng, cfg, vis);
  std::map<int, int> colors, shapes;
  for (const auto& item : data.items()) {
    const auto& g = std::get<synth::GlyphSpec>(item[0]);
    ++colors[g.color];
    ++shapes[g.shape];
  }
  for (int k = 0; k < 8; ++k) {
    CHECK(std::abs(colors[k] / 10000.0 - 0.125) <= 0.05 * 0.125);
    CHECK(std::abs(shapes[k] / 10000.0 - 0.125) <= 0.05 * 0.125);
  }
}

TEST_CASE("grammar vocabulary covers every corpus") {
  synth::SynthConfig cfg;
  VisionConfig vis;
  auto v = synth::build_vocab(cfg);
  Rng rng(14);
  for (auto task : {synth::Task::glyph_caption, synth::Task::glyph_vqa, synth::Task::interleaved_pages}) {
    auto data = synth::make_corpus(task, 200, rng, cfg, vis);
    for (const auto& t : synth::text_only(data))
      for (auto id : v.encode(t)) CHECK(id != v.unk());
    if (task == synth::Task::interleaved_pages) continue;
    for (std::size_t i = 0; i < data.size(); ++i)
      for (auto id : v.encode(" " + data.pair(i).first)) CHECK(id != v.unk());
  }
}

TEST_CASE("jsonl ingestion") {
  const auto dir = std::filesystem::temp_directory_path() / "flamingo_jsonl_test";
  std::filesystem::create_directories(dir);
  Tensor raw({4, 8, 3}, 0.25);
  io::write_ppm(dir / "a.ppm", raw);
  {
    std::ofstream f(dir / "data.jsonl");
    f << R"({"text": "<image>a dog", "images": ["a.ppm"]})" << "\n\n";
    f << R"({"text": "no pictures here", "images": []})" << "\n";
    f << R"({"text": "intro <image> x <image>", "images": [{"shape": [2, 2, 3], "data": ")"
      << io::encode_inline_tensor(Tensor({2, 2, 3}, 1.0)) << R"("}, "a.ppm"]})" << "\n";
  }
  VisionConfig vis;
  auto docs = load_jsonl_documents(dir / "data.jsonl", vis);
  REQUIRE(docs.size() == 2);
  CHECK(docs[0].visual_count() == 1);
  CHECK(docs[1].segments.size() == 4);
  CHECK(std::get<VisualInput>(docs[0].segments[0]).pixels.shape() == Shape{1, 16, 16, 3});
  VectorDocuments vd(docs);
  CHECK(vd.pair(0).first == "a dog");
  CHECK_THROWS(vd.pair(1));
  {
    std::ofstream f(dir / "bad.jsonl");
    f << R"({"text": "<image>", "images": []})" << "\n";
    f << "{not json" << "\n";
  }
  try {
    load_jsonl_documents(dir / "bad.jsonl", vis);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("bad.jsonl:1:") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
