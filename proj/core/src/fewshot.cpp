#include "flamingo/fewshot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "flamingo/contrastive.hpp"
#include "flamingo/datapipe.hpp"
#include "flamingo/ops.hpp"
#include "jsonl.hpp"

namespace flamingo {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

template <class T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(' ');
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(' ') - b + 1);
}

}  // namespace

std::string caption_prompt(const std::string& output) { return "Output: " + output; }
std::string qa_prompt(const std::string& question, const std::string& answer) {
  return "Question: " + question + " Answer: " + answer;
}
std::string caption_prefix() { return "Output:"; }
std::string qa_prefix(const std::string& question) { return "Question: " + question + " Answer:"; }

TrainingInstance build_fewshot_prompt(const PromptSpec& spec, const Vocab& vocab, Rng* shuffle_rng) {
  std::vector<Shot> shots = spec.support;
  if (shuffle_rng) shuffle_in_place(shots, *shuffle_rng);
  TrainingInstance out;
  std::vector<std::size_t> tags;
  auto put_image = [&](const VisualInput& v) {
    tags.push_back(out.text.size());
    out.text.push_back(vocab.image());
    out.images.push_back(v);
  };
  auto put_text = [&](const std::string& s) {
    auto ids = vocab.encode(s);
    out.text.insert(out.text.end(), ids.begin(), ids.end());
  };
  out.text.push_back(vocab.bos());
  for (const auto& shot : shots) {
    if (shot.visual) put_image(*shot.visual);
    put_text(shot.text);
    out.text.push_back(vocab.eoc());
  }
  if (spec.query_visual) put_image(*spec.query_visual);
  put_text(spec.query_prefix);
  out.real_images = out.images.size();
  out.direction = PhiDirection::previous;
  out.indices = compute_phi(out.text.size(), tags, PhiDirection::previous);
  return out;
}

TrainingInstance build_zeroshot_prompt(std::span<const std::string> text_examples, const VisualInput& query,
                                       const std::string& query_prefix, EvalMode mode, const Vocab& vocab) {
  if (mode == EvalMode::open_ended && text_examples.size() != 2) {
    throw std::invalid_argument("zero-shot open-ended prompts take exactly 2 text examples, got " +
                                std::to_string(text_examples.size()));
  }
  PromptSpec spec;
  for (const auto& t : text_examples) spec.support.push_back({std::nullopt, t});
  spec.query_visual = query;
  spec.query_prefix = query_prefix;
  return build_fewshot_prompt(spec, vocab);
}

SequenceLogitsFn model_logits_fn(const FlamingoModel& model, const TrainingInstance& prompt, FeatureCache* cache) {
  Graph g(&model.params(), GradMode::none);
  Tensor visual = model.visual_tokens(g, prompt, cache).value();
  const std::size_t images = visual.rows() / model.config().resampler.latents;
  std::vector<int> phi = prompt.indices;
  const int last = phi.empty() ? 0 : phi.back();
  return [&model, visual = std::move(visual), images, phi = std::move(phi), last](std::span<const TokenId> tokens) {
    std::vector<int> idx(tokens.size(), last);
    std::copy_n(phi.begin(), std::min(phi.size(), idx.size()), idx.begin());
    Graph fg(&model.params(), GradMode::none);
    return model.forward_tokens(fg, tokens, idx, fg.constant(visual), images).value();
  };
}

NextTokenFn model_next_token_fn(const FlamingoModel& model, const TrainingInstance& prompt, const Vocab& vocab,
                                FeatureCache* cache) {
  auto logits = model_logits_fn(model, prompt, cache);
  std::vector<bool> banned(model.config().lm.vocab, false);
  for (TokenId t = 0; t < static_cast<TokenId>(banned.size()); ++t)
    banned[static_cast<std::size_t>(t)] =
        static_cast<std::size_t>(t) >= vocab.size() || (vocab.is_special(t) && t != vocab.eoc());
  return [logits = std::move(logits), banned = std::move(banned)](std::span<const TokenId> tokens) {
    const Tensor all = logits(tokens);
    Tensor last({1, all.cols()});
    std::copy_n(all.row(all.rows() - 1).begin(), all.cols(), last.ptr());
    const Tensor lp = kernels::log_softmax_rows(last);
    std::vector<double> out(lp.data().begin(), lp.data().end());
    for (std::size_t t = 0; t < out.size(); ++t)
      if (banned[t]) out[t] = kNegInf;
    return out;
  };
}

Completion generate(const NextTokenFn& next, std::span<const TokenId> prefix, TokenId stop, const DecodeOptions& opts) {
  if (opts.max_len == 0) throw std::invalid_argument("decode: max_len must be > 0");
  if (opts.mode == DecodeMode::beam && opts.width == 0) throw std::invalid_argument("decode: beam width must be >= 1");
  std::vector<TokenId> seq(prefix.begin(), prefix.end());
  if (opts.mode == DecodeMode::greedy) {
    Completion c;
    for (std::size_t step = 0; step < opts.max_len; ++step) {
      const auto lp = next(seq);
      const auto best = static_cast<std::size_t>(std::max_element(lp.begin(), lp.end()) - lp.begin());
      c.log_likelihood += lp[best];
      if (static_cast<TokenId>(best) == stop) {
        c.finished = true;
        break;
      }
      c.tokens.push_back(static_cast<TokenId>(best));
      seq.push_back(static_cast<TokenId>(best));
    }
    return c;
  }
  struct Beam {
    std::vector<TokenId> tokens;
    double score;
  };
  struct Expansion {
    std::size_t beam;
    TokenId token;
    double score;
  };
  std::vector<Beam> live = {{{}, 0.0}}, finished;
  for (std::size_t step = 0; step < opts.max_len && !live.empty(); ++step) {
    std::vector<Expansion> ex;
    for (std::size_t b = 0; b < live.size(); ++b) {
      seq.resize(prefix.size());
      seq.insert(seq.end(), live[b].tokens.begin(), live[b].tokens.end());
      const auto lp = next(seq);
      for (std::size_t t = 0; t < lp.size(); ++t) ex.push_back({b, static_cast<TokenId>(t), live[b].score + lp[t]});
    }
    std::stable_sort(ex.begin(), ex.end(), [](const Expansion& a, const Expansion& b) { return a.score > b.score; });
    std::vector<Beam> kept;
    for (std::size_t i = 0; i < std::min(opts.width, ex.size()); ++i) {
      const auto& e = ex[i];
      if (e.score == kNegInf) break;
      if (e.token == stop) {
        finished.push_back({live[e.beam].tokens, e.score});
      } else {
        auto toks = live[e.beam].tokens;
        toks.push_back(e.token);
        kept.push_back({std::move(toks), e.score});
      }
    }
    live = std::move(kept);
    if (!finished.empty() && !live.empty()) {
      double best_done = kNegInf, best_live = kNegInf;
      for (const auto& f : finished) best_done = std::max(best_done, f.score);
      for (const auto& l : live) best_live = std::max(best_live, l.score);
      if (best_done >= best_live) break;
    }
  }
  Completion c;
  c.log_likelihood = kNegInf;
  bool any = false;
  for (const auto& f : finished)
    if (!any || f.score > c.log_likelihood) {
      c = {f.tokens, f.score, true};
      any = true;
    }
  for (const auto& l : live)
    if (!any || l.score > c.log_likelihood) {
      c = {l.tokens, l.score, false};
      any = true;
    }
  return c;
}

std::string trim_completion(const std::string& text, std::span<const std::string> keywords) {
  std::size_t cut = text.size();
  for (const auto& k : keywords)
    if (!k.empty()) cut = std::min(cut, text.find(k));
  return strip(text.substr(0, cut));
}

Decoded decode(const FlamingoModel& model, const TrainingInstance& prompt, const Vocab& vocab, const DecodeOptions& opts,
               FeatureCache* cache) {
  const std::size_t room = model.config().lm.max_len > prompt.text.size() ? model.config().lm.max_len - prompt.text.size() : 0;
  if (room == 0) throw std::invalid_argument("decode: prompt fills the whole context");
  DecodeOptions o = opts;
  o.max_len = std::min(o.max_len, room);
  Decoded d;
  d.completion = generate(model_next_token_fn(model, prompt, vocab, cache), prompt.text, vocab.eoc(), o);
  d.raw = vocab.decode(d.completion.tokens);
  d.text = trim_completion(d.raw, o.trim_keywords);
  return d;
}

std::vector<Candidate> rank_candidates(std::span<const std::string> texts, std::span<const double> scores) {
  if (texts.size() != scores.size()) throw std::invalid_argument("rank_candidates: size mismatch");
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < texts.size(); ++i) out.push_back({texts[i], scores[i], i});
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  return out;
}

std::vector<double> candidate_scores(const SequenceLogitsFn& logits, std::span<const TokenId> prompt,
                                     std::span<const std::vector<TokenId>> candidates) {
  if (prompt.empty()) throw std::invalid_argument("score_candidates: empty prompt");
  if (candidates.empty()) throw std::invalid_argument("score_candidates: no candidates");
  std::vector<double> out;
  for (const auto& c : candidates) {
    if (c.empty()) throw std::invalid_argument("score_candidates: empty candidate");
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), c.begin(), c.end());
    out.push_back(sequence_log_likelihood(logits(seq), seq, prompt.size(), seq.size()));
  }
  return out;
}

namespace {

std::vector<std::vector<TokenId>> encode_candidates(std::span<const std::string> candidates, const Vocab& vocab) {
  std::vector<std::vector<TokenId>> out;
  for (const auto& c : candidates) {
    if (c.empty()) throw std::invalid_argument("score_candidates: empty candidate string");
    out.push_back(vocab.encode(c));
  }
  return out;
}

}  // namespace

std::vector<Candidate> score_candidates(const FlamingoModel& model, const TrainingInstance& prompt,
                                        std::span<const std::string> candidates, const Vocab& vocab,
                                        FeatureCache* cache) {
  const auto scores = candidate_scores(model_logits_fn(model, prompt, cache), prompt.text,
                                       encode_candidates(candidates, vocab));
  return rank_candidates(candidates, scores);
}

std::vector<double> ensemble_mean(std::span<const std::vector<double>> scores) {
  if (scores.empty()) throw std::invalid_argument("ensemble: no variants");
  std::vector<double> mean(scores[0].size(), 0.0);
  for (const auto& v : scores) {
    if (v.size() != mean.size()) throw std::invalid_argument("ensemble: variants score different candidate counts");
    for (std::size_t c = 0; c < v.size(); ++c) mean[c] += v[c];
  }
  for (auto& m : mean) m /= static_cast<double>(scores.size());
  return mean;
}

std::vector<Candidate> ensemble_scores(const FlamingoModel& model, std::span<const TrainingInstance> variants,
                                       std::span<const std::string> candidates, const Vocab& vocab,
                                       FeatureCache* cache) {
  const auto encoded = encode_candidates(candidates, vocab);
  std::vector<std::vector<double>> per_variant;
  for (const auto& v : variants) per_variant.push_back(candidate_scores(model_logits_fn(model, v, cache), v.text, encoded));
  return rank_candidates(candidates, ensemble_mean(per_variant));
}

std::vector<std::vector<Shot>> permutation_variants(std::span<const Shot> shots, std::size_t count, Rng& rng) {
  std::vector<std::vector<Shot>> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<Shot> v(shots.begin(), shots.end());
    shuffle_in_place(v, rng);
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<std::size_t> rices_select(std::span<const double> query_feature, const Tensor& pool_features, std::size_t k) {
  if (k == 0) throw std::invalid_argument("rices: K must be >= 1");
  if (pool_features.rows() == 0) throw std::invalid_argument("rices: empty support pool");
  if (k > pool_features.rows()) {
    throw std::invalid_argument("rices: K=" + std::to_string(k) + " exceeds pool of " +
                                std::to_string(pool_features.rows()));
  }
  auto order = rank_by_cosine(query_feature, pool_features);
  order.resize(k);
  std::reverse(order.begin(), order.end());
  return order;
}

Tensor pooled_features(const FlamingoModel& model, std::span<const VisualInput> visuals) {
  Tensor out({visuals.size(), model.config().vision.width});
  for (std::size_t i = 0; i < visuals.size(); ++i) {
    const Tensor f = model.vision().pooled(model.params(), visuals[i]);
    std::copy_n(f.ptr(), f.numel(), out.row(i).data());
  }
  return out;
}

std::vector<std::size_t> rices_select(const FlamingoModel& model, const VisualInput& query,
                                      std::span<const VisualInput> pool, std::size_t k) {
  const Tensor q = model.vision().pooled(model.params(), query);
  return rices_select(q.data(), pooled_features(model, pool), k);
}

EvalTask load_eval_task(const std::filesystem::path& path, const VisionConfig& vision) {
  EvalTask task;
  detail::for_each_jsonl(path, [&](const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    const auto visual = preprocess_image(detail::read_json_image(j.at("image"), path.parent_path()), vision);
    if (kind == "support") {
      task.support.push_back({visual, j.at("text").get<std::string>()});
    } else if (kind == "query") {
      QueryItem q{visual, j.value("prefix", caption_prefix()), j.at("answer").get<std::string>(),
                  j.value("candidates", std::vector<std::string>{})};
      if (!q.candidates.empty() && std::find(q.candidates.begin(), q.candidates.end(), q.answer) == q.candidates.end()) {
        throw std::runtime_error("answer '" + q.answer + "' is not among the candidates");
      }
      task.queries.push_back(std::move(q));
    } else {
      throw std::runtime_error("unknown kind '" + kind + "' (support, query)");
    }
  });
  if (task.queries.empty()) throw std::runtime_error(path.string() + ": no query items");
  return task;
}

EvalReport evaluate_task(const FlamingoModel& model, const EvalTask& task, const Vocab& vocab, const EvalOptions& opts,
                         Rng& shuffle_rng, Rng& ensemble_rng, FeatureCache* cache) {
  if (opts.ensemble == 0) throw std::invalid_argument("eval: ensemble must be >= 1");
  if (opts.shots > task.support.size()) {
    throw std::invalid_argument("eval: " + std::to_string(opts.shots) + " shots but the support pool has " +
                                std::to_string(task.support.size()) + " items");
  }
  const bool zero_open = opts.shots == 0 && opts.mode == EvalMode::open_ended;
  if (zero_open && task.support.size() < 2) throw std::invalid_argument("eval: open-ended zero-shot needs 2 support texts");
  Tensor pool;
  if (opts.rices && opts.shots > 0) {
    std::vector<VisualInput> visuals;
    for (const auto& s : task.support) visuals.push_back(s.visual);
    pool = pooled_features(model, visuals);
  }
  EvalReport report;
  std::size_t correct = 0;
  for (std::size_t q = 0; q < task.queries.size(); ++q) {
    const auto& query = task.queries[q];
    QueryResult r;
    r.query = q;
    if (opts.shots > 0) {
      if (opts.rices) {
        r.shots = rices_select(model.vision().pooled(model.params(), query.visual).data(), pool, opts.shots);
      } else {
        std::vector<std::size_t> idx(task.support.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < opts.shots; ++i) std::swap(idx[i], idx[i + uniform_index(shuffle_rng, idx.size() - i)]);
        r.shots.assign(idx.begin(), idx.begin() + static_cast<long>(opts.shots));
      }
    } else if (zero_open) {
      const std::size_t a = uniform_index(shuffle_rng, task.support.size());
      std::size_t b = uniform_index(shuffle_rng, task.support.size() - 1);
      if (b >= a) ++b;
      r.shots = {a, b};
    }
    std::vector<Shot> shots;
    for (auto i : r.shots) shots.push_back({task.support[i].visual, task.support[i].text});
    auto make_prompt = [&](const std::vector<Shot>& ordered) {
      if (zero_open) {
        std::vector<std::string> texts;
        for (const auto& s : ordered) texts.push_back(s.text);
        return build_zeroshot_prompt(texts, query.visual, query.prefix, EvalMode::open_ended, vocab);
      }
      return build_fewshot_prompt(PromptSpec{ordered, query.visual, query.prefix}, vocab);
    };
    if (opts.mode == EvalMode::close_ended) {
      if (query.candidates.empty()) throw std::invalid_argument("eval: close-ended query " + std::to_string(q) + " has no candidates");
      std::vector<Candidate> ranked;
      if (opts.ensemble > 1 && shots.size() > 1) {
        std::vector<TrainingInstance> variants;
        for (const auto& v : permutation_variants(shots, opts.ensemble, ensemble_rng)) variants.push_back(make_prompt(v));
        ranked = ensemble_scores(model, variants, query.candidates, vocab, cache);
      } else {
        ranked = score_candidates(model, make_prompt(shots), query.candidates, vocab, cache);
      }
      r.prediction = ranked.front().text;
      r.correct = r.prediction == query.answer;
    } else {
      auto d = decode(model, make_prompt(shots), vocab, opts.decode, cache);
      r.prediction = d.text;
      r.correct = d.text == trim_completion(query.answer, opts.decode.trim_keywords);
    }
    correct += r.correct;
    report.results.push_back(std::move(r));
  }
  report.accuracy = task.queries.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(task.queries.size());
  return report;
}

}  // namespace flamingo
