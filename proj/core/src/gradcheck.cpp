#include "flamingo/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "flamingo/ops.hpp"

namespace flamingo {

std::size_t GradCheckReport::failures() const {
  return static_cast<std::size_t>(
      std::count_if(probes.begin(), probes.end(), [](const GradProbe& p) { return !p.ok; }));
}

namespace {

double evaluate(const ParamStore& params, const LossBuilder& loss) {
  Graph g(&params, GradMode::none);
  return loss(g).value().item();
}

}  // namespace

GradCheckReport check_gradients(ParamStore& params, const LossBuilder& loss, Rng& rng,
                                std::size_t count, const GradCheckOptions& opts) {
  GradMap analytic;
  {
    Graph g(&params, GradMode::all);
    analytic = g.backward(loss(g));
  }
  std::vector<std::string> names;
  for (const auto& name : params.names())
    if (params.get(name).numel() > 0) names.push_back(name);
  GradCheckReport report;
  if (names.empty()) return report;
  for (std::size_t i = 0; i < count; ++i) {
    GradProbe p;
    p.param = names[uniform_index(rng, names.size())];
    Tensor& w = params.get_mutable(p.param);
    p.index = uniform_index(rng, w.numel());
    const double saved = w[p.index];
    w[p.index] = saved + opts.step;
    const double up = evaluate(params, loss);
    w[p.index] = saved - opts.step;
    const double down = evaluate(params, loss);
    w[p.index] = saved;
    p.numeric = (up - down) / (2.0 * opts.step);
    auto it = analytic.find(p.param);
    p.analytic = it == analytic.end() ? 0.0 : it->second[p.index];
    const double diff = std::abs(p.analytic - p.numeric);
    const double denom = std::max(std::abs(p.analytic), std::abs(p.numeric));
    const double rel = denom > 0.0 ? diff / denom : 0.0;
    p.ok = diff <= opts.atol || rel <= opts.rtol;
    if (diff > opts.atol) report.max_rel_error = std::max(report.max_rel_error, rel);
    report.probes.push_back(p);
  }
  return report;
}

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

// Wraps `body` so the loss is <body(g), R> for a fixed random R.
LossBuilder project(Rng& rng, const Shape& out_shape, std::function<Var(Graph&)> body) {
  auto weights = std::make_shared<Tensor>(random_tensor(rng, out_shape));
  return [weights, body = std::move(body)](Graph& g) { return ops::weighted_sum(body(g), *weights); };
}

}  // namespace

std::vector<OpCase> make_op_cases(Rng& rng) {
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::vector<std::pair<std::string, Shape>> inputs,
                      const Shape& out_shape, std::function<Var(Graph&)> body, double scale = 1.0) {
    OpCase c;
    c.name = std::move(name);
    for (auto& [n, s] : inputs) c.params.add(n, random_tensor(rng, s, scale));
    c.loss = project(rng, out_shape, std::move(body));
    cases.push_back(std::move(c));
  };
  const Shape m34{3, 4}, m43{4, 3}, m33{3, 3};

  add_case("add", {{"a", m34}, {"b", m34}}, m34, [](Graph& g) { return ops::add(g.param("a"), g.param("b")); });
  add_case("sub", {{"a", m34}, {"b", m34}}, m34, [](Graph& g) { return ops::sub(g.param("a"), g.param("b")); });
  add_case("mul", {{"a", m34}, {"b", m34}}, m34, [](Graph& g) { return ops::mul(g.param("a"), g.param("b")); });
  add_case("scale", {{"a", m34}}, m34, [](Graph& g) { return ops::scale(g.param("a"), -1.7); });
  add_case("add_row", {{"a", m34}, {"b", {4}}}, m34,
           [](Graph& g) { return ops::add_row(g.param("a"), g.param("b")); });
  add_case("mul_scalar", {{"a", m34}, {"s", {1}}}, m34,
           [](Graph& g) { return ops::mul_scalar(g.param("a"), g.param("s")); });
  add_case("matmul", {{"a", m34}, {"b", m43}}, m33,
           [](Graph& g) { return ops::matmul(g.param("a"), g.param("b")); });
  add_case("matmul_nt", {{"a", m34}, {"b", m34}}, m33,
           [](Graph& g) { return ops::matmul_nt(g.param("a"), g.param("b")); });
  add_case("linear", {{"x", m34}, {"w", m43}, {"b", {3}}}, m33,
           [](Graph& g) { return ops::linear(g.param("x"), g.param("w"), g.param("b")); });
  add_case("transpose", {{"a", m34}}, m43, [](Graph& g) { return ops::transpose(g.param("a")); });
  add_case("reshape", {{"a", m34}}, {6, 2}, [](Graph& g) { return ops::reshape(g.param("a"), {6, 2}); });
  add_case("tanh", {{"a", m34}}, m34, [](Graph& g) { return ops::tanh(g.param("a")); });
  add_case("exp", {{"a", m34}}, m34, [](Graph& g) { return ops::exp(g.param("a")); }, 0.5);
  add_case("gelu", {{"a", m34}}, m34,
           [](Graph& g) { return ops::activation(g.param("a"), ops::Activation::gelu); });
  add_case("squared_relu", {{"a", m34}}, m34,
           [](Graph& g) { return ops::activation(g.param("a"), ops::Activation::squared_relu); });

  auto mask = std::make_shared<BoolMatrix>(3, 4, false);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 4; ++c) mask->set(r, c, bernoulli(rng, 0.6) || c == r);
  add_case("masked_softmax", {{"a", m34}}, m34,
           [mask](Graph& g) { return ops::masked_softmax(g.param("a"), *mask); });
  add_case("log_softmax", {{"a", m34}}, m34, [](Graph& g) { return ops::log_softmax(g.param("a")); });
  add_case("layer_norm", {{"x", m34}, {"s", {4}}, {"o", {4}}}, m34,
           [](Graph& g) { return ops::layer_norm(g.param("x"), g.param("s"), g.param("o")); });

  auto amask = std::make_shared<BoolMatrix>(3, 5, false);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 5; ++c) amask->set(r, c, bernoulli(rng, 0.7) || c == 0);
  add_case("attention_masked", {{"q", {3, 4}}, {"k", {5, 4}}, {"v", {5, 4}}}, {3, 4}, [amask](Graph& g) {
    return ops::attention(g.param("q"), g.param("k"), g.param("v"), amask.get(), false, 2);
  });
  add_case("attention_causal", {{"q", {4, 6}}, {"k", {4, 6}}, {"v", {4, 6}}}, {4, 6}, [](Graph& g) {
    return ops::attention(g.param("q"), g.param("k"), g.param("v"), nullptr, true, 3);
  });

  auto ids = std::make_shared<std::vector<int>>(std::vector<int>{2, 0, 2, 4});
  add_case("embedding", {{"t", {5, 3}}}, {4, 3},
           [ids](Graph& g) { return ops::embedding(g.param("t"), *ids); });
  add_case("replace_row", {{"t", {5, 3}}, {"r", {1, 3}}}, {5, 3},
           [](Graph& g) { return ops::replace_row(g.param("t"), 2, g.param("r")); });
  add_case("concat_rows", {{"a", {2, 3}}, {"b", {3, 3}}}, {5, 3}, [](Graph& g) {
    const Var parts[] = {g.param("a"), g.param("b")};
    return ops::concat_rows(parts);
  });
  add_case("slice_rows", {{"a", {5, 3}}}, {2, 3}, [](Graph& g) { return ops::slice_rows(g.param("a"), 1, 3); });
  auto gidx = std::make_shared<std::vector<long>>(std::vector<long>{3, -1, 0, 3});
  add_case("gather_rows", {{"a", {4, 3}}}, {4, 3}, [gidx](Graph& g) { return ops::gather_rows(g.param("a"), *gidx); });
  add_case("grid_neighbourhood", {{"a", {2 * 3 * 2, 2}}}, {12, 18},
           [](Graph& g) { return ops::grid_neighbourhood(g.param("a"), 2, 3, 2, 3); });
  add_case("sum", {{"a", m34}}, {1}, [](Graph& g) { return ops::sum(g.param("a")); });
  add_case("mean", {{"a", m34}}, {1}, [](Graph& g) { return ops::mean(g.param("a")); });
  add_case("mean_rows", {{"a", m34}}, {1, 4}, [](Graph& g) { return ops::mean_rows(g.param("a")); });
  add_case("l2_normalize_rows", {{"a", m34}}, m34, [](Graph& g) { return ops::l2_normalize_rows(g.param("a")); });

  {
    OpCase c;
    c.name = "nll_loss";
    c.params.add("logits", random_tensor(rng, {4, 5}));
    c.loss = [](Graph& g) {
      static const int targets[] = {1, 4, 0, 2};
      static const double weights[] = {1.0, 0.5, 0.0, 2.0};
      return ops::nll_loss(g.param("logits"), targets, weights);
    };
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace flamingo
