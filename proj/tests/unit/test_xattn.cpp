#include <doctest.h>

#include "flamingo/ops.hpp"
#include "flamingo/xattn.hpp"
#include "naive.hpp"

using namespace flamingo;

namespace {

std::vector<std::vector<bool>> rows(const PhiMask& m) {
  std::vector<std::vector<bool>> out(m.admissible.rows(), std::vector<bool>(m.admissible.cols()));
  for (std::size_t r = 0; r < out.size(); ++r)
    for (std::size_t c = 0; c < out[r].size(); ++c) out[r][c] = m.admissible.get(r, c);
  return out;
}

Tensor randn(Rng& rng, Shape s) {
  std::normal_distribution<double> n;
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

}  // namespace

TEST_SUITE("xattn") {

TEST_CASE("phi mask examples") {
  using R = std::vector<std::vector<bool>>;
  const int a[] = {0, 1, 1, 2};
  CHECK(rows(build_phi_mask(a, 2, 1)) == R{{false, false}, {true, false}, {true, false}, {false, true}});
  const int z[] = {0, 0, 0};
  CHECK(rows(build_phi_mask(z, 2, 3)) == R(3, std::vector<bool>(6, false)));
  const int b[] = {0, 1, 2};
  CHECK(rows(build_phi_mask(b, 2, 1, true)) == R{{false, false}, {true, false}, {true, true}});
  const int bad[] = {3};
  CHECK_THROWS(build_phi_mask(bad, 2, 1));
}

TEST_CASE("phi mask rule holds on random inputs") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 4), r = 1 + uniform_index(rng, 3), l = 1 + uniform_index(rng, 10);
    std::vector<int> phi(l);
    for (auto& p : phi) p = static_cast<int>(uniform_index(rng, n + 1));
    auto m = build_phi_mask(phi, n, r);
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t c = 0; c < n * r; ++c)
        CHECK(m.admissible.get(i, c) == (phi[i] >= 1 && static_cast<std::size_t>(phi[i]) == c / r + 1));
  }
}

TEST_CASE("fresh block is the identity") {
  GatedBlockConfig cfg;
  cfg.width = 8;
  for (bool vanilla : {false, true}) {
    cfg.vanilla_xattn = vanilla;
    GatedXAttnBlock blk(cfg, "gated.0");
    ParamStore p;
    Rng rng(2);
    blk.init(p, rng);
    CHECK(p.get("gated.0.alpha_attn").item() == 0.0);
    if (!vanilla) CHECK(p.get("gated.0.alpha_ffw").item() == 0.0);
    Graph g(&p, GradMode::none);
    const Tensor text = randn(rng, {5, 8});
    const int phi[] = {0, 1, 1, 2, 2};
    auto out = blk.forward(g, g.constant(text), g.constant(randn(rng, {4, 8})), build_phi_mask(phi, 2, 2));
    CHECK(out.value() == text);
  }
}

TEST_CASE("all-false mask with ffw gate closed is the identity") {
  GatedBlockConfig cfg;
  cfg.width = 4;
  GatedXAttnBlock blk(cfg, "gated.0");
  ParamStore p;
  Rng rng(3);
  blk.init(p, rng);
  p.get_mutable("gated.0.alpha_attn")[0] = 1.5;
  Graph g(&p, GradMode::none);
  const Tensor text = randn(rng, {3, 4});
  const int phi[] = {0, 0, 0};
  auto out = blk.forward(g, g.constant(text), g.constant(randn(rng, {2, 4})), build_phi_mask(phi, 1, 2));
  CHECK(out.value() == text);
}

TEST_CASE("mask shape mismatch throws") {
  GatedBlockConfig cfg;
  cfg.width = 4;
  GatedXAttnBlock blk(cfg, "gated.0");
  ParamStore p;
  Rng rng(4);
  blk.init(p, rng);
  Graph g(&p, GradMode::none);
  const int phi[] = {1, 1};
  CHECK_THROWS(blk.forward(g, g.constant(Tensor({2, 4})), g.constant(Tensor({3, 4})), build_phi_mask(phi, 1, 2)));
}

TEST_CASE("closed-form single token single visual token") {
  GatedBlockConfig cfg;
  cfg.width = 2;
  cfg.heads = 1;
  cfg.ffw_mult = 1;
  GatedXAttnBlock blk(cfg, "x");
  ParamStore p;
  Rng rng(5);
  blk.init(p, rng);
  const double alpha = 20.0;
  p.get_mutable("x.alpha_attn")[0] = alpha;
  p.get_mutable("x.attn.wv") = Tensor::matrix(2, 2, {2, 0, 1, 3});
  p.get_mutable("x.attn.wo") = Tensor::matrix(2, 2, {1, 1, 0, 2});
  p.get_mutable("x.ln_kv.scale") = Tensor::vector({0.5, 2.0});
  p.get_mutable("x.ln_kv.offset") = Tensor::vector({0.1, -0.2});
  Graph g(&p, GradMode::none);
  const Tensor text = Tensor::matrix(1, 2, {0.3, -0.7});
  const Tensor vis = Tensor::matrix(1, 2, {4.0, 1.0});
  const int phi[] = {1};
  const Tensor out = blk.forward(g, g.constant(text), g.constant(vis), build_phi_mask(phi, 1, 1)).value();
  // One admissible key: attention weight 1, so the output is LN(v) Wv Wo.
  const double s = 1.5 / std::sqrt(2.25 + 1e-5);  // (x - mean) / sqrt(var + eps) for x = [4, 1]
  const double n0 = s * 0.5 + 0.1, n1 = -s * 2.0 - 0.2;
  const double v0 = n0 * 2 + n1 * 1, v1 = n1 * 3;
  const double o0 = v0 * 1, o1 = v0 * 1 + v1 * 2;
  const double t = std::tanh(alpha);
  const double y0 = 0.3 + t * o0, y1 = -0.7 + t * o1;
  // FFW gate still at 0.
  CHECK(out.at(0, 0) == doctest::Approx(y0).epsilon(1e-13));
  CHECK(out.at(0, 1) == doctest::Approx(y1).epsilon(1e-13));
}

TEST_CASE("block output matches a naive reference with random weights") {
  GatedBlockConfig cfg;
  cfg.width = 4;
  cfg.heads = 1;
  cfg.ffw_mult = 2;
  GatedXAttnBlock blk(cfg, "b");
  ParamStore p;
  Rng rng(6);
  blk.init(p, rng);
  p.get_mutable("b.alpha_attn")[0] = 0.7;
  p.get_mutable("b.alpha_ffw")[0] = -0.4;
  const Tensor text = randn(rng, {3, 4}), vis = randn(rng, {4, 4});
  const int phi[] = {0, 1, 2};
  auto mask = build_phi_mask(phi, 2, 2);
  Graph g(&p, GradMode::none);
  const Tensor got = blk.forward(g, g.constant(text), g.constant(vis), mask).value();

  using naive::Mat;
  auto P = [&](const std::string& n) { return naive::from(p.get("b." + n)); };
  auto V = [&](const std::string& n) {
    const Tensor& t = p.get("b." + n);
    return std::vector<double>(t.data().begin(), t.data().end());
  };
  Mat q = naive::layer_norm(naive::from(text), V("ln_q.scale"), V("ln_q.offset"));
  Mat kv = naive::layer_norm(naive::from(vis), V("ln_kv.scale"), V("ln_kv.offset"));
  auto m = rows(mask);
  Mat att = naive::attention(naive::matmul(q, P("attn.wq")), naive::matmul(kv, P("attn.wk")),
                             naive::matmul(kv, P("attn.wv")), &m);
  Mat y = naive::add(naive::from(text), naive::scale(naive::matmul(att, P("attn.wo")), std::tanh(0.7)));
  Mat h = naive::layer_norm(y, V("ffw.ln.scale"), V("ffw.ln.offset"));
  h = naive::map(naive::add_bias(naive::matmul(h, P("ffw.fc1.w")), V("ffw.fc1.b")), naive::sqrelu);
  h = naive::add_bias(naive::matmul(h, P("ffw.fc2.w")), V("ffw.fc2.b"));
  y = naive::add(y, naive::scale(h, std::tanh(-0.4)));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(got.at(r, c) == doctest::Approx(y[r][c]).epsilon(1e-12));
  // Row 0 has no admissible image: only the FFW branch moves it.
}

TEST_CASE("rows ignore visual tokens of other images") {
  GatedBlockConfig cfg;
  cfg.width = 6;
  GatedXAttnBlock blk(cfg, "b");
  ParamStore p;
  Rng rng(7);
  blk.init(p, rng);
  p.get_mutable("b.alpha_attn")[0] = 1.0;
  p.get_mutable("b.alpha_ffw")[0] = 1.0;
  const std::size_t R = 2, N = 3;
  const int phi[] = {0, 1, 1, 2, 3, 3, 2};
  auto mask = build_phi_mask(phi, N, R);
  const Tensor text = randn(rng, {7, 6});
  Tensor vis = randn(rng, {N * R, 6});
  Graph g(&p, GradMode::none);
  const Tensor base = blk.forward(g, g.constant(text), g.constant(vis), mask).value();
  for (std::size_t img = 1; img <= N; ++img) {
    Tensor noisy = vis;
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < 6; ++c) noisy.at((img - 1) * R + r, c) += 5.0;
    const Tensor out = blk.forward(g, g.constant(text), g.constant(noisy), mask).value();
    for (std::size_t l = 0; l < 7; ++l) {
      if (phi[l] == static_cast<int>(img)) continue;
      for (std::size_t c = 0; c < 6; ++c) CHECK(out.at(l, c) == base.at(l, c));
    }
  }
}

TEST_CASE("gate values are finite magnitudes") {
  GatedBlockConfig cfg;
  GatedXAttnBlock blk(cfg, "gated.2");
  ParamStore p;
  Rng rng(8);
  blk.init(p, rng);
  p.get_mutable("gated.2.alpha_attn")[0] = -0.5;
  auto gv = blk.gates(p);
  CHECK(gv.attn == doctest::Approx(std::tanh(0.5)));
  CHECK(gv.ffw == 0.0);
}

}  // TEST_SUITE
