#include <algorithm>
#include <cmath>
#include <map>

#include "acceptance.hpp"
#include "flamingo/fewshot.hpp"

namespace acceptance {
namespace {

using namespace flamingo;

FlamingoConfig toy_config() {
  FlamingoConfig c;
  c.vision.width = 8;
  c.vision.hidden = 8;
  c.vision.blocks = 1;
  c.lm.vocab = 8;
  c.lm.width = 8;
  c.lm.layers = 2;
  c.lm.max_len = 16;
  c.resampler.latents = 3;
  c.resampler.layers = 1;
  return c.resolve();
}

FlamingoModel toy_model(std::uint64_t seed) {
  Rng rng = make_rng(seed, "init", 0);
  auto m = FlamingoModel::assemble(toy_config(), rng);
  for (const auto& name : m.params().names())
    if (name.find("alpha") != std::string::npos) m.params().get_mutable(name)[0] = 0.5 + uniform01(rng);
  return m;
}

// 6 specials plus " a" and " b": exactly the toy model's 8 ids.
Vocab toy_vocab() { return Vocab::build(std::vector<std::string>{" a b"}); }

TrainingInstance toy_prompt(const FlamingoModel& m, const Vocab& v, Rng& rng) {
  TrainingInstance p;
  VisualInput img{Tensor({1, m.config().vision.resolution, m.config().vision.resolution, 3})};
  std::normal_distribution<double> n;
  for (auto& x : img.pixels.data()) x = n(rng);
  p.images = {img};
  p.real_images = 1;
  p.text = {Vocab::bos(), Vocab::image(), v.id(" a"), v.id(" b")};
  p.indices = {0, 1, 1, 1};
  return p;
}

// Next-token log-probabilities after `prefix`, from a forward pass over the
// truncated sequence alone.
class ChainOracle {
 public:
  ChainOracle(const FlamingoModel& m, TrainingInstance prompt) : m_(m), prompt_(std::move(prompt)) {}

  const std::vector<double>& next(const std::vector<TokenId>& continuation) {
    auto it = memo_.find(continuation);
    if (it != memo_.end()) return it->second;
    TrainingInstance inst = prompt_;
    inst.text.insert(inst.text.end(), continuation.begin(), continuation.end());
    inst.indices.resize(inst.text.size(), prompt_.indices.back());
    Graph g(&m_.params(), GradMode::none);
    const Tensor logits = m_.forward(g, inst).value();
    const auto last = logits.row(logits.rows() - 1);
    const double mx = *std::max_element(last.begin(), last.end());
    double z = 0.0;
    for (double x : last) z += std::exp(x - mx);
    std::vector<double> lp(last.size());
    for (std::size_t k = 0; k < lp.size(); ++k) lp[k] = last[k] - mx - std::log(z);
    return memo_.emplace(continuation, std::move(lp)).first->second;
  }

  double chain(const std::vector<TokenId>& cand) {
    double s = 0.0;
    std::vector<TokenId> prefix;
    for (auto t : cand) {
      s += next(prefix)[static_cast<std::size_t>(t)];
      prefix.push_back(t);
    }
    return s;
  }

  std::size_t forwards() const { return memo_.size(); }

 private:
  const FlamingoModel& m_;
  TrainingInstance prompt_;
  std::map<std::vector<TokenId>, std::vector<double>> memo_;
};

void all_sequences(std::size_t alphabet, std::size_t max_len, std::vector<std::vector<TokenId>>& out) {
  std::vector<std::vector<TokenId>> level = {{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::vector<TokenId>> nxt;
    for (const auto& s : level)
      for (std::size_t t = 0; t < alphabet; ++t) {
        auto e = s;
        e.push_back(static_cast<TokenId>(t));
        nxt.push_back(std::move(e));
      }
    out.insert(out.end(), nxt.begin(), nxt.end());
    level = std::move(nxt);
  }
}

struct Best {
  std::vector<TokenId> tokens;
  double score = -HUGE_VAL;
  bool finished = false;
};

// Every continuation that ends at `stop` or runs to max_len tokens.
void exhaustive(const NextTokenFn& f, std::vector<TokenId>& seq, std::size_t prefix_len, TokenId stop,
                std::size_t max_len, double score, Best& best) {
  if (seq.size() - prefix_len == max_len) {
    if (score > best.score) best = {{seq.begin() + static_cast<long>(prefix_len), seq.end()}, score, false};
    return;
  }
  const auto lp = f(seq);
  for (std::size_t t = 0; t < lp.size(); ++t) {
    if (lp[t] == -HUGE_VAL) continue;
    if (static_cast<TokenId>(t) == stop) {
      if (score + lp[t] > best.score)
        best = {{seq.begin() + static_cast<long>(prefix_len), seq.end()}, score + lp[t], true};
      continue;
    }
    seq.push_back(static_cast<TokenId>(t));
    exhaustive(f, seq, prefix_len, stop, max_len, score + lp[t], best);
    seq.pop_back();
  }
}

NextTokenFn random_lm(std::uint64_t seed, std::size_t vocab) {
  return [seed, vocab](std::span<const TokenId> prefix) {
    std::uint64_t h = seed;
    for (auto t : prefix) h = splitmix64(h ^ static_cast<std::uint64_t>(t + 1));
    Rng r(h);
    std::normal_distribution<double> n(0.0, 1.5);
    std::vector<double> logits(vocab);
    for (auto& l : logits) l = n(r);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    for (auto& l : logits) l = l - mx - std::log(z);
    return logits;
  };
}

bool same(const Completion& c, const Best& b, double tol) {
  return c.tokens == b.tokens && c.finished == b.finished && std::abs(c.log_likelihood - b.score) <= tol;
}

}  // namespace

Outcome close_ended_oracle() {
  const auto model = toy_model(16);
  const Vocab vocab = toy_vocab();
  if (vocab.size() != 8) return {false, "toy vocabulary is not 8 tokens"};
  Rng rng = make_rng(16, "data", 0);
  const auto prompt = toy_prompt(model, vocab, rng);
  ChainOracle oracle(model, prompt);
  FeatureCache cache;

  // Every id sequence of length 1..4 over the full vocabulary.
  std::vector<std::vector<TokenId>> cands;
  all_sequences(8, 4, cands);
  const auto scores = candidate_scores(model_logits_fn(model, prompt, &cache), prompt.text, cands);
  double worst_scores = 0.0, worst_sll = 0.0;
  std::vector<double> mass(5, 0.0);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const double expect = oracle.chain(cands[i]);
    worst_scores = std::max(worst_scores, std::abs(scores[i] - expect));
    TrainingInstance inst = prompt;
    inst.text.insert(inst.text.end(), cands[i].begin(), cands[i].end());
    inst.indices.resize(inst.text.size(), prompt.indices.back());
    const double sll = sequence_log_likelihood(model, inst, prompt.length(), inst.length(), &cache);
    worst_sll = std::max(worst_sll, std::abs(sll - expect));
    mass[cands[i].size()] += std::exp(scores[i]);
  }
  double worst_mass = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) worst_mass = std::max(worst_mass, std::abs(mass[n] - 1.0));

  // The string interface over the two word pieces and <EOC>.
  const std::vector<std::string> pieces = {" a", " b", "<EOC>"};
  std::vector<std::vector<TokenId>> idx;
  all_sequences(3, 4, idx);
  std::vector<std::string> texts;
  for (const auto& s : idx) {
    std::string t;
    for (auto k : s) t += pieces[static_cast<std::size_t>(k)];
    texts.push_back(t);
  }
  const auto ranked = score_candidates(model, prompt, texts, vocab, &cache);
  double worst_text = 0.0;
  bool order = ranked.size() == texts.size();
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    worst_text = std::max(worst_text, std::abs(ranked[i].score - oracle.chain(vocab.encode(ranked[i].text))));
    if (i > 0) order &= ranked[i - 1].score >= ranked[i].score;
  }
  const double worst = std::max({worst_scores, worst_sll, worst_text});
  return {worst <= 1e-12 && worst_mass <= 1e-12 && order,
          fmt("%zu id sequences + %zu strings vs %zu truncated-forward chains: max |diff| %.3g "
              "(candidate_scores %.3g, sequence_log_likelihood %.3g, score_candidates %.3g), "
              "per-length probability mass off by %.3g (tol 1e-12)",
              cands.size(), texts.size(), oracle.forwards(), worst, worst_scores, worst_sll, worst_text, worst_mass)};
}

Outcome beam_vs_exhaustive() {
  // a=0, b=1, c=2, stop=3. Greedy follows the likelier first token into a
  // flat continuation; the best sequence is "b <stop>".
  const std::map<std::vector<TokenId>, std::vector<double>> table = {
      {{}, {0.45, 0.35, 0.15, 0.05}},
      {{0}, {0.25, 0.25, 0.25, 0.25}},
      {{1}, {0.04, 0.03, 0.03, 0.9}},
  };
  NextTokenFn toy = [&](std::span<const TokenId> s) {
    auto it = table.find(std::vector<TokenId>(s.begin(), s.end()));
    std::vector<double> p = it == table.end() ? std::vector<double>{0.2, 0.2, 0.1, 0.5} : it->second;
    for (auto& x : p) x = std::log(x);
    return p;
  };
  const std::size_t len = 4, vocab = 4;
  const std::size_t full = 256;  // vocab^len
  Best best;
  std::vector<TokenId> seq;
  exhaustive(toy, seq, 0, 3, len, 0.0, best);
  const auto beam = generate(toy, {}, 3, {DecodeMode::beam, full, len, {}});
  const auto greedy = generate(toy, {}, 3, {DecodeMode::greedy, 1, len, {}});
  bool ok = same(beam, best, 1e-12) && greedy.log_likelihood < best.score;
  std::string detail = fmt("constructed LM (V=%zu, len %zu): beam(%zu) log-lik %.4f, exhaustive %.4f, greedy %.4f",
                           vocab, len, full, beam.log_likelihood, best.score, greedy.log_likelihood);

  // A small multimodal model through the decoding closure.
  const auto model = toy_model(17);
  const Vocab v = toy_vocab();
  Rng rng = make_rng(17, "data", 0);
  const auto prompt = toy_prompt(model, v, rng);
  const auto next = model_next_token_fn(model, prompt, v);
  Best mbest;
  seq = prompt.text;
  exhaustive(next, seq, prompt.length(), Vocab::eoc(), len, 0.0, mbest);
  const auto mbeam = generate(next, prompt.text, Vocab::eoc(), {DecodeMode::beam, 4096, len, {}});
  const bool model_ok = same(mbeam, mbest, 1e-12);
  ok &= model_ok;
  detail += fmt("; toy model beam(8^4) %s exhaustive", model_ok ? "matches" : "DIFFERS from");

  std::size_t greedy_match = 0, full_match = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto f = random_lm(s, vocab);
    const std::vector<TokenId> pre = {1, 2};
    const auto g = generate(f, pre, 0, {DecodeMode::greedy, 1, 5, {}});
    const auto b1 = generate(f, pre, 0, {DecodeMode::beam, 1, 5, {}});
    greedy_match += g.tokens == b1.tokens && g.finished == b1.finished &&
                    std::abs(g.log_likelihood - b1.log_likelihood) <= 1e-12;
    Best rb;
    std::vector<TokenId> rs = pre;
    exhaustive(f, rs, pre.size(), 0, 3, 0.0, rb);
    full_match += same(generate(f, pre, 0, {DecodeMode::beam, 64, 3, {}}), rb, 1e-12);
  }
  ok &= greedy_match == 20 && full_match == 20;
  detail += fmt("; beam(1) == greedy on %zu/20 random models, full-width beam == exhaustive on %zu/20", greedy_match,
                full_match);
  return {ok, detail};
}

}  // namespace acceptance
