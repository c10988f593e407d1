#include "flamingo/cli/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "flamingo/gradcheck.hpp"
#include "flamingo/ops.hpp"
#include "flamingo/train.hpp"

namespace flamingo::cli {
namespace {

FlamingoConfig small_config() {
  FlamingoConfig c;
  c.vision.width = 8;
  c.vision.hidden = 8;
  c.vision.blocks = 1;
  c.lm.vocab = 16;
  c.lm.width = 8;
  c.lm.layers = 2;
  c.lm.max_len = 24;
  c.resampler.latents = 3;
  c.resampler.layers = 1;
  return c.resolve();
}

VisualInput noise_image(Rng& rng, std::size_t res) {
  VisualInput v{Tensor({1, res, res, 3})};
  std::normal_distribution<double> n;
  for (auto& x : v.pixels.data()) x = n(rng);
  return v;
}

TrainingInstance random_instance(Rng& rng, const FlamingoConfig& c, std::size_t len, std::size_t images) {
  TrainingInstance inst;
  for (std::size_t i = 0; i < images; ++i) inst.images.push_back(noise_image(rng, c.vision.resolution));
  inst.real_images = images;
  int phi = 0;
  for (std::size_t l = 0; l < len; ++l) {
    if (static_cast<std::size_t>(phi) < images && bernoulli(rng, 0.35)) ++phi;
    inst.text.push_back(static_cast<TokenId>(uniform_index(rng, c.lm.vocab)));
    inst.indices.push_back(phi);
  }
  return inst;
}

Tensor logits_of(const FlamingoModel& m, const TrainingInstance& inst) {
  Graph g(&m.params(), GradMode::none);
  return m.forward(g, inst).value();
}

std::string format(const char* fmt, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, fmt, a, b);
  return buf;
}

}  // namespace

FlamingoModel selftest_model(Rng& rng, bool open_gates) {
  auto m = FlamingoModel::assemble(small_config(), rng);
  if (open_gates)
    for (const auto& name : m.params().names())
      if (name.find("alpha") != std::string::npos) m.params().get_mutable(name)[0] = 0.5 + uniform01(rng);
  return m;
}

SuiteResult gradcheck_suite(const SelftestOptions& opts) {
  SuiteResult r{"gradcheck"};
  Rng rng = make_rng(opts.seed, "selftest", 0);
  GradCheckOptions go;
  go.rtol = opts.grad_rtol;
  std::size_t done = 0, failed = 0;
  std::string worst_op;
  while (done < opts.probes) {
    for (auto& c : make_op_cases(rng)) {
      if (done >= opts.probes) break;
      auto rep = check_gradients(c.params, c.loss, rng, std::min<std::size_t>(4, opts.probes - done), go);
      done += rep.probes.size();
      failed += rep.failures();
      if (rep.max_rel_error > r.worst) {
        r.worst = rep.max_rel_error;
        worst_op = c.name;
      }
    }
  }
  r.ok = failed == 0;
  r.detail = std::to_string(done) + " probes, " + std::to_string(failed) + " failed, worst rel error beyond atol " +
             format("%.3g", r.worst) + (worst_op.empty() ? "" : " (" + worst_op + ")");
  return r;
}

SuiteResult gate_identity_suite(const SelftestOptions& opts) {
  SuiteResult r{"gate-identity"};
  Rng rng = make_rng(opts.seed, "selftest", 1);
  auto m = selftest_model(rng, false);
  if (opts.mask_builder) m.set_mask_builder(opts.mask_builder);
  const auto& c = m.config();
  for (std::size_t i = 0; i < opts.instances; ++i) {
    auto inst = random_instance(rng, c, 4 + uniform_index(rng, c.lm.max_len - 4), 1 + uniform_index(rng, 3));
    Tensor full = logits_of(m, inst);
    Graph g(&m.params(), GradMode::none);
    Tensor lm = m.forward_lm_only(g, inst.text).value();
    for (std::size_t k = 0; k < full.numel(); ++k) r.worst = std::max(r.worst, std::abs(full[k] - lm[k]));
  }
  r.ok = r.worst <= opts.tolerance;
  r.detail = std::to_string(opts.instances) + " instances, max |multimodal - LM| " + format("%.3g", r.worst);
  return r;
}

SuiteResult mask_invariance_suite(const SelftestOptions& opts) {
  SuiteResult r{"mask-invariance"};
  Rng rng = make_rng(opts.seed, "selftest", 2);
  auto m = selftest_model(rng, true);
  if (opts.mask_builder) m.set_mask_builder(opts.mask_builder);
  const auto& c = m.config();
  std::size_t checks = 0;
  for (std::size_t i = 0; i < opts.instances; ++i) {
    auto inst = random_instance(rng, c, 8 + uniform_index(rng, c.lm.max_len - 8), 2 + uniform_index(rng, 3));
    // A position l and every image after phi(l) replaced by fresh noise.
    std::vector<std::size_t> open;
    for (std::size_t k = 0; k < inst.text.size(); ++k)
      if (static_cast<std::size_t>(inst.indices[k]) < inst.real_images) open.push_back(k);
    if (open.empty()) continue;
    const std::size_t l = open[uniform_index(rng, open.size())];
    const int phi = inst.indices[l];
    Tensor before = logits_of(m, inst);
    auto changed = inst;
    for (std::size_t k = static_cast<std::size_t>(phi); k < inst.real_images; ++k)
      changed.images[k] = noise_image(rng, c.vision.resolution);
    Tensor after = logits_of(m, changed);
    for (std::size_t v = 0; v < before.cols(); ++v) r.worst = std::max(r.worst, std::abs(before.at(l, v) - after.at(l, v)));
    ++checks;
  }
  r.ok = checks > 0 && r.worst <= opts.tolerance;
  r.detail = std::to_string(checks) + " positions, max logit change " + format("%.3g", r.worst);
  return r;
}

SuiteResult accumulation_suite(const SelftestOptions& opts) {
  SuiteResult r{"accumulation"};
  Rng rng = make_rng(opts.seed, "selftest", 3);
  auto m = selftest_model(rng, true);
  if (opts.mask_builder) m.set_mask_builder(opts.mask_builder);
  m.apply_freeze_policy({});
  const auto& c = m.config();
  std::vector<Batch> batches(3);
  std::vector<double> lambda;
  for (auto& b : batches) {
    const std::size_t n = 1 + uniform_index(rng, 3);
    for (std::size_t k = 0; k < n; ++k) b.push_back(random_instance(rng, c, 6 + uniform_index(rng, 10), 1 + uniform_index(rng, 2)));
    lambda.push_back(0.1 + uniform01(rng));
  }
  auto acc = accumulate_gradients(m, batches, lambda);
  GradMap independent;
  for (std::size_t k = 0; k < batches.size(); ++k) {
    Graph g(&m.params(), GradMode::trainable);
    auto grads = g.backward(batch_nll(g, m, batches[k]));
    accumulate_grads(independent, grads, lambda[k]);
  }
  bool same_keys = acc.grads.size() == independent.size();
  for (const auto& [name, ref] : independent) {
    auto it = acc.grads.find(name);
    if (it == acc.grads.end()) {
      same_keys = false;
      continue;
    }
    double diff = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < ref.numel(); ++k) {
      diff = std::max(diff, std::abs(it->second[k] - ref[k]));
      scale = std::max(scale, std::abs(ref[k]));
    }
    if (scale > 0.0) r.worst = std::max(r.worst, diff / scale);
    else r.worst = std::max(r.worst, diff);
  }
  r.ok = same_keys && r.worst <= opts.tolerance;
  r.detail = std::to_string(independent.size()) + " tensors over 3 datasets, max rel diff " + format("%.3g", r.worst);
  return r;
}

std::vector<SuiteResult> run_selftest(const SelftestOptions& opts) {
  return {gradcheck_suite(opts), gate_identity_suite(opts), mask_invariance_suite(opts), accumulation_suite(opts)};
}

}  // namespace flamingo::cli
