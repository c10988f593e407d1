#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "flamingo/checkpoint.hpp"
#include "flamingo/contrastive.hpp"
#include "flamingo/gradcheck.hpp"
#include "flamingo/ops.hpp"
#include "flamingo/synth.hpp"

using namespace flamingo;
using namespace fixtures;

namespace {

DualEncoderConfig small_dual(std::size_t vocab = 20) {
  DualEncoderConfig c;
  c.vision.width = 8;
  c.vision.hidden = 8;
  c.vision.blocks = 1;
  c.vocab = vocab;
  c.text_width = 8;
  c.joint = 6;
  c.text_max_len = 8;
  return c;
}

Tensor random_unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  std::normal_distribution<double> nd;
  Tensor t({n, d});
  for (auto& x : t.data()) x = nd(rng);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (double x : t.row(r)) s += x * x;
    for (auto& x : t.row(r)) x /= std::sqrt(s);
  }
  return t;
}

double loss_value(const Tensor& v, const Tensor& l, double beta, double smoothing) {
  Graph g;
  return contrastive_loss(g.constant(v), g.constant(l), g.constant(Tensor({1}, std::log(beta))), smoothing).value()[0];
}

// Direct evaluation of both smoothed cross-entropies.
double reference_loss(const Tensor& v, const Tensor& l, double beta, double s) {
  const std::size_t n = v.rows();
  auto sim = [&](std::size_t i, std::size_t j) {
    double d = 0;
    for (std::size_t k = 0; k < v.cols(); ++k) d += v.at(i, k) * l.at(j, k);
    return beta * d;
  };
  double total = 0;
  for (int dir = 0; dir < 2; ++dir)
    for (std::size_t i = 0; i < n; ++i) {
      double z = 0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(dir ? sim(j, i) : sim(i, j));
      for (std::size_t j = 0; j < n; ++j) {
        const double target = (i == j ? 1 - s : 0.0) + s / static_cast<double>(n);
        total -= target * std::log(std::exp(dir ? sim(j, i) : sim(i, j)) / z);
      }
    }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_SUITE("contrastive") {

TEST_CASE("identical embeddings give twice log N") {
  for (std::size_t n : {2, 5, 16}) {
    Tensor v({n, 4}, 0.5);
    CHECK(std::abs(loss_value(v, v, 7.0, 0.0) - 2 * std::log(static_cast<double>(n))) <= 1e-9);
  }
}

TEST_CASE("perfect separation drives the loss to zero") {
  Tensor basis({2, 2}, std::vector<double>{1, 0, 0, 1});
  CHECK(loss_value(basis, basis, 1e3, 0.0) < 1e-12);
  CHECK(loss_value(basis, basis, 10.0, 0.0) < loss_value(basis, basis, 1.0, 0.0));
}

TEST_CASE("loss matches the direct softmax cross-entropy") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    auto v = random_unit_rows(rng, 3, 5), l = random_unit_rows(rng, 3, 5);
    CHECK(loss_value(v, l, 1.0, 0.1) == doctest::Approx(reference_loss(v, l, 1.0, 0.1)).epsilon(1e-12));
    CHECK(loss_value(v, l, 4.0, 0.0) == doctest::Approx(reference_loss(v, l, 4.0, 0.0)).epsilon(1e-12));
  }
  Graph g;
  Tensor one({1, 3}, 1.0);
  CHECK_THROWS(contrastive_loss(g.constant(one), g.constant(one), g.constant(Tensor({1}, 0.0)), 0.0));
}

TEST_CASE("loss is symmetric under joint row permutation") {
  Rng rng(2);
  auto v = random_unit_rows(rng, 6, 4), l = random_unit_rows(rng, 6, 4);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor pv(v.shape()), pl(l.shape());
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      pv.at(i, k) = v.at(perm[i], k);
      pl.at(i, k) = l.at(perm[i], k);
    }
  CHECK(loss_value(pv, pl, 3.0, 0.1) == doctest::Approx(loss_value(v, l, 3.0, 0.1)).epsilon(1e-13));
}

TEST_CASE("sharper temperature helps a separable batch") {
  Rng rng(3);
  auto v = random_unit_rows(rng, 4, 4);
  ParamStore p;
  p.add("log_beta", Tensor({1}, 0.0));
  Graph g(&p);
  auto grads = g.backward(contrastive_loss(g.constant(v), g.constant(v), g.param("log_beta"), 0.0));
  CHECK(grads.at("log_beta")[0] < 0.0);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(4);
  ParamStore p;
  std::normal_distribution<double> n;
  Tensor a({4, 3}), b({4, 3});
  for (auto& x : a.data()) x = n(rng);
  for (auto& x : b.data()) x = n(rng);
  p.add("v", a);
  p.add("l", b);
  p.add("log_beta", Tensor({1}, 0.7));
  auto report = check_gradients(
      p,
      [](Graph& g) {
        return contrastive_loss(ops::l2_normalize_rows(g.param("v")), ops::l2_normalize_rows(g.param("l")),
                                g.param("log_beta"), 0.1);
      },
      rng, 25);
  CHECK(report.ok());
}

TEST_CASE("embeddings are unit vectors and pooled per item") {
  Rng rng(5);
  DualEncoder enc(small_dual(), rng);
  auto img = random_image(rng, 16), other = random_image(rng, 16);
  VisualInput video{Tensor({2, 16, 16, 3})};
  for (auto& x : video.pixels.data()) x = uniform01(rng);
  std::vector<VisualInput> imgs = {img, other, img, video};
  auto e = enc.image_embeddings(imgs);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (double x : e.row(r)) s += x * x;
    CHECK(std::abs(std::sqrt(s) - 1) <= 1e-9);
  }
  for (std::size_t k = 0; k < e.cols(); ++k) CHECK(e.at(0, k) == e.at(2, k));
  // Oracle: mean of the item's own feature rows, projected and normalised.
  Graph g(&enc.params(), GradMode::none);
  auto feats = enc.vision().encode_frames(g, video).features.value();
  Tensor mean({1, feats.cols()}, 0.0);
  for (std::size_t r = 0; r < feats.rows(); ++r)
    for (std::size_t k = 0; k < feats.cols(); ++k) mean.at(0, k) += feats.at(r, k) / static_cast<double>(feats.rows());
  auto proj = kernels::matmul(mean, enc.params().get("proj.vision.w"));
  double s = 0;
  for (double x : proj.data()) s += x * x;
  for (std::size_t k = 0; k < e.cols(); ++k) CHECK(e.at(3, k) == doctest::Approx(proj[k] / std::sqrt(s)).epsilon(1e-12));

  std::vector<std::vector<TokenId>> texts = {{6, 7, 8}, {9}, {6, 7, 8}};
  auto t = enc.text_embeddings(texts);
  for (std::size_t r = 0; r < 3; ++r) {
    double q = 0;
    for (double x : t.row(r)) q += x * x;
    CHECK(std::abs(std::sqrt(q) - 1) <= 1e-9);
  }
  for (std::size_t k = 0; k < t.cols(); ++k) CHECK(t.at(0, k) == t.at(2, k));
  std::vector<std::vector<TokenId>> bad = {{99}};
  CHECK_THROWS(enc.text_embeddings(bad));
  CHECK(enc.beta() == doctest::Approx(10.0));
}

TEST_CASE("zero-shot classification") {
  Tensor classes({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor img({1, 3}, std::vector<double>{0.1, 0.9, 0.2});
  CHECK(zero_shot_classify(img, classes) == 1);
  CHECK(zero_shot_classify(img, Tensor({1, 3}, std::vector<double>{0, 0, -1})) == 0);

  Rng rng(6);
  auto vocab = synth::build_vocab({});
  auto cfg = small_dual(vocab.size());
  DualEncoder enc(cfg, rng);
  std::vector<std::string> names = {"red square", "blue circle", "green ring"};
  std::vector<std::string> one = {"Output: {}"}, twice = {"Output: {}", "Output: {}"}, two = {"Output: {}", "{}"};
  auto e1 = class_embeddings(enc, vocab, names, one);
  auto e2 = class_embeddings(enc, vocab, names, twice);
  for (std::size_t i = 0; i < e1.numel(); ++i) CHECK(e1[i] == doctest::Approx(e2[i]).epsilon(1e-14));
  auto ens = class_embeddings(enc, vocab, names, two);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (double x : ens.row(r)) s += x * x;
    CHECK(std::abs(std::sqrt(s) - 1) <= 1e-12);
  }
  auto img2 = random_image(rng, 16);
  CHECK(zero_shot_classify(enc, img2, vocab, std::vector<std::string>{"red square"}, one) == 0);
  CHECK_THROWS(zero_shot_classify(enc, img2, vocab, std::vector<std::string>{}, one));
  CHECK_THROWS(class_embeddings(enc, vocab, names, std::vector<std::string>{"no placeholder"}));
}

TEST_CASE("retrieval recall") {
  Rng rng(7);
  auto v = random_unit_rows(rng, 10, 6);
  std::vector<std::size_t> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor l({10, 6});
  for (std::size_t q = 0; q < 10; ++q)
    for (std::size_t k = 0; k < 6; ++k) l.at(perm[q], k) = v.at(q, k);
  auto r = retrieval_recall(v, l, perm, 1);
  CHECK(r.image_to_text == 1.0);
  CHECK(r.text_to_image == 1.0);

  // Every query has a decoy that beats its true match.
  const std::size_t Q = 6;
  Tensor qv({Q, 2 * Q}, 0.0), gal({2 * Q, 2 * Q}, 0.0);
  std::vector<std::size_t> truth(Q);
  for (std::size_t q = 0; q < Q; ++q) {
    qv.at(q, q) = 1.0;
    truth[q] = 2 * q;
    gal.at(2 * q, q) = 0.8;
    gal.at(2 * q, Q + q) = 0.6;
    gal.at(2 * q + 1, q) = 0.9;
    gal.at(2 * q + 1, Q + q) = 0.1;
  }
  // Brute-force rank of the true item.
  for (std::size_t q = 0; q < Q; ++q) {
    auto cos = [&](std::size_t g) {
      double d = 0, a = 0, b = 0;
      for (std::size_t k = 0; k < 2 * Q; ++k) {
        d += qv.at(q, k) * gal.at(g, k);
        a += qv.at(q, k) * qv.at(q, k);
        b += gal.at(g, k) * gal.at(g, k);
      }
      return d / std::sqrt(a * b);
    };
    std::size_t better = 0;
    for (std::size_t g = 0; g < 2 * Q; ++g) better += cos(g) > cos(truth[q]);
    CHECK(better == 1);
  }
  auto r1 = retrieval_recall(qv, gal, truth, 1), r5 = retrieval_recall(qv, gal, truth, 5);
  CHECK(r1.image_to_text == 0.0);
  CHECK(r5.image_to_text == 1.0);
  auto all = retrieval_recall(random_unit_rows(rng, 5, 3), random_unit_rows(rng, 5, 3), 5);
  CHECK(all.image_to_text == 1.0);
  CHECK(all.text_to_image == 1.0);
  CHECK_THROWS(retrieval_recall(v, l, 0));
  // Ties resolve toward the lower index.
  Tensor tie({3, 2}, std::vector<double>{1, 0, 1, 0, 1, 0});
  CHECK(rank_by_cosine(std::vector<double>{1, 0}, tie) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("vision export loads into the multimodal model") {
  Rng rng(8);
  auto fc = small_config();
  auto cfg = small_dual();
  cfg.vision = fc.vision;
  DualEncoder enc(cfg, rng);
  const auto path = std::filesystem::temp_directory_path() / "flamingo_vision_export.ckpt";
  enc.export_vision(path);
  CHECK(checkpoint::manifest(path).size() == 1);
  auto model = FlamingoModel::assemble(fc, rng);
  CHECK(checkpoint::load_into(model.params(), path, {"vision"}) > 0);
  for (const auto& [name, e] : model.params().entries())
    if (name.rfind("vision.", 0) == 0) CHECK(bitwise_equal(e.value, enc.params().get(name)));
  std::filesystem::remove(path);
}

TEST_CASE("trainer strategies are deterministic") {
  synth::SynthConfig sc;
  auto vocab = synth::build_vocab(sc);
  auto cfg = small_dual(vocab.size());
  Rng drng(9);
  auto a = std::make_shared<synth::Dataset>(synth::make_corpus(synth::Task::glyph_caption, 12, drng, sc, cfg.vision));
  auto b = std::make_shared<synth::Dataset>(synth::make_corpus(synth::Task::glyph_caption, 12, drng, sc, cfg.vision));
  auto run = [&](Strategy s) {
    Rng init(10);
    DualEncoder enc(cfg, init);
    ContrastiveOptions opts;
    opts.strategy = s;
    ContrastiveTrainer t(enc, {{"a", 1.0, 4, a}, {"b", 1.0, 4, b}}, opts, Rng(11), vocab);
    std::vector<double> out;
    for (int i = 0; i < 3; ++i) {
      auto st = t.step();
      out.push_back(st.total);
      CHECK(st.losses.size() == 2);
    }
    CHECK(t.steps_done() == 3);
    out.push_back(enc.beta());
    return out;
  };
  for (auto s : {Strategy::accumulation, Strategy::round_robin, Strategy::merged}) CHECK(run(s) == run(s));
  CHECK(run(Strategy::accumulation) != run(Strategy::merged));
}

}  // TEST_SUITE
