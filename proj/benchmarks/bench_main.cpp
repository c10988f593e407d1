#include <benchmark/benchmark.h>

#include "flamingo/fewshot.hpp"
#include "flamingo/ops.hpp"
#include "flamingo/train.hpp"

using namespace flamingo;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n;
  for (auto& x : t.data()) x = n(rng);
  return t;
}

TrainingInstance random_instance(const FlamingoConfig& c, Rng& rng, std::size_t len, std::size_t images) {
  TrainingInstance inst;
  for (std::size_t i = 0; i < images; ++i)
    inst.images.push_back({random_tensor({1, c.vision.resolution, c.vision.resolution, 3}, rng)});
  inst.real_images = images;
  for (std::size_t l = 0; l < len; ++l) {
    inst.text.push_back(static_cast<TokenId>(uniform_index(rng, c.lm.vocab)));
    inst.indices.push_back(static_cast<int>(std::min(images, 1 + l * images / len)));
  }
  return inst;
}

FlamingoModel desk_model(Rng& rng) { return FlamingoModel::assemble(FlamingoConfig{}.resolve(), rng); }

}  // namespace

static void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::matmul(a, b));
  state.SetItemsProcessed(static_cast<long>(state.iterations() * 2 * n * n * n));
}
BENCHMARK(BM_Gemm)->Arg(32)->Arg(64)->Arg(128);

static void BM_AttentionForwardBackward(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  ParamStore p;
  p.add("q", random_tensor({len, 32}, rng));
  p.add("k", random_tensor({len, 32}, rng));
  p.add("v", random_tensor({len, 32}, rng));
  for (auto _ : state) {
    Graph g(&p, GradMode::all);
    auto out = ops::attention(g.param("q"), g.param("k"), g.param("v"), nullptr, true, 2);
    benchmark::DoNotOptimize(g.backward(ops::sum(out)));
  }
}
BENCHMARK(BM_AttentionForwardBackward)->Arg(16)->Arg(64);

static void BM_ModelForward(benchmark::State& state) {
  Rng rng(3);
  const auto m = desk_model(rng);
  const auto inst = random_instance(m.config(), rng, 32, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    Graph g(&m.params(), GradMode::none);
    benchmark::DoNotOptimize(m.forward(g, inst).value());
  }
}
BENCHMARK(BM_ModelForward)->Arg(1)->Arg(5);

static void BM_AccumulatedGradient(benchmark::State& state) {
  Rng rng(4);
  auto m = desk_model(rng);
  m.apply_freeze_policy({});
  std::vector<Batch> batches(3);
  for (auto& b : batches)
    for (int i = 0; i < 8; ++i) b.push_back(random_instance(m.config(), rng, 16, 2));
  const std::vector<double> lambda(3, 1.0);
  FeatureCache cache;
  for (auto _ : state) benchmark::DoNotOptimize(accumulate_gradients(m, batches, lambda, &cache));
}
BENCHMARK(BM_AccumulatedGradient)->Unit(benchmark::kMillisecond);

static void BM_BeamDecode(benchmark::State& state) {
  Rng rng(5);
  const auto m = desk_model(rng);
  const auto prompt = random_instance(m.config(), rng, 24, 3);
  std::vector<std::string> words;
  for (std::size_t i = 0; i + 6 < m.config().lm.vocab; ++i) words.push_back(" w" + std::to_string(i));
  const Vocab vocab = Vocab::build(words);
  const auto next = model_next_token_fn(m, prompt, vocab);
  const DecodeOptions opts{DecodeMode::beam, static_cast<std::size_t>(state.range(0)), 8, {}};
  for (auto _ : state) benchmark::DoNotOptimize(generate(next, prompt.text, Vocab::eoc(), opts));
}
BENCHMARK(BM_BeamDecode)->Arg(1)->Arg(3)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
