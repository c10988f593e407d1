#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flamingo/lm.hpp"
#include "flamingo/tokenizer.hpp"

namespace flamingo {

enum class TaskFormat { caption, qa };

// "Output: {output}" and "Question: {question} Answer: {answer}"; the
// prefixes are the same strings cut before the output/answer.
std::string caption_prompt(const std::string& output);
std::string qa_prompt(const std::string& question, const std::string& answer);
std::string caption_prefix();
std::string qa_prefix(const std::string& question);

struct Shot {
  std::optional<VisualInput> visual;  // absent for text-only examples
  std::string text;
};

struct PromptSpec {
  std::vector<Shot> support;
  std::optional<VisualInput> query_visual;
  std::string query_prefix;
};

// <BOS>, then per shot [<image>] text <EOC>, then [<image>] prefix. Indices
// follow the previous-image rule. With `shuffle_rng`, shots are permuted.
TrainingInstance build_fewshot_prompt(const PromptSpec& spec, const Vocab& vocab, Rng* shuffle_rng = nullptr);

enum class EvalMode { open_ended, close_ended };
// Image-free text examples before the query. Open-ended prompts take exactly
// two examples; close-ended ones any number, including none.
TrainingInstance build_zeroshot_prompt(std::span<const std::string> text_examples, const VisualInput& query,
                                       const std::string& query_prefix, EvalMode mode, const Vocab& vocab);

// Log-probabilities [V] of the token following `tokens`.
using NextTokenFn = std::function<std::vector<double>(std::span<const TokenId> tokens)>;
// Logits [L, V] for a whole sequence.
using SequenceLogitsFn = std::function<Tensor(std::span<const TokenId> tokens)>;

// Model evaluation closures over a fixed prompt: visual tokens are computed
// once and generated tokens take the last prompt index. Specials other than
// <EOC>, and ids past the tokenizer, get log-probability -inf when generating.
SequenceLogitsFn model_logits_fn(const FlamingoModel& model, const TrainingInstance& prompt,
                                 FeatureCache* cache = nullptr);
NextTokenFn model_next_token_fn(const FlamingoModel& model, const TrainingInstance& prompt, const Vocab& vocab,
                                FeatureCache* cache = nullptr);

enum class DecodeMode { greedy, beam };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::beam;
  std::size_t width = 3;
  std::size_t max_len = 12;
  // Text from the first occurrence of any keyword on is dropped.
  std::vector<std::string> trim_keywords{"Output:", "Question:", "Answer:", "<image>", "<EOC>"};
};

struct Completion {
  std::vector<TokenId> tokens;  // generated ids, without the final <EOC>
  double log_likelihood = 0.0;  // including <EOC> when finished
  bool finished = false;        // ended with <EOC>
};

// Continues `prefix` until `stop` or max_len tokens. Beam search keeps the
// `width` best expansions (stable order: beam, then token id), retires
// beams that emit `stop`, and ends once the best retired score is at least
// the best live one. Greedy takes the lowest-id argmax.
Completion generate(const NextTokenFn& next, std::span<const TokenId> prefix, TokenId stop, const DecodeOptions& opts);

std::string trim_completion(const std::string& text, std::span<const std::string> keywords);

struct Decoded {
  Completion completion;
  std::string raw;   // decoded completion
  std::string text;  // after trimming
};
Decoded decode(const FlamingoModel& model, const TrainingInstance& prompt, const Vocab& vocab, const DecodeOptions& opts,
               FeatureCache* cache = nullptr);

struct Candidate {
  std::string text;
  double score = 0.0;  // summed token log-likelihood
  std::size_t index = 0;  // position in the input list
};

// Descending by score; equal scores keep input order.
std::vector<Candidate> rank_candidates(std::span<const std::string> texts, std::span<const double> scores);

std::vector<double> candidate_scores(const SequenceLogitsFn& logits, std::span<const TokenId> prompt,
                                     std::span<const std::vector<TokenId>> candidates);
std::vector<Candidate> score_candidates(const FlamingoModel& model, const TrainingInstance& prompt,
                                        std::span<const std::string> candidates, const Vocab& vocab,
                                        FeatureCache* cache = nullptr);

// scores[v][c]: score of candidate c under variant v. Returns per-candidate means.
std::vector<double> ensemble_mean(std::span<const std::vector<double>> scores);
std::vector<Candidate> ensemble_scores(const FlamingoModel& model, std::span<const TrainingInstance> variants,
                                       std::span<const std::string> candidates, const Vocab& vocab,
                                       FeatureCache* cache = nullptr);
// `count` random orderings of the shots.
std::vector<std::vector<Shot>> permutation_variants(std::span<const Shot> shots, std::size_t count, Rng& rng);

// Top-k pool rows by cosine similarity to the query, most similar last.
std::vector<std::size_t> rices_select(std::span<const double> query_feature, const Tensor& pool_features, std::size_t k);
// Features are mean-pooled outputs of the model's vision encoder.
Tensor pooled_features(const FlamingoModel& model, std::span<const VisualInput> visuals);
std::vector<std::size_t> rices_select(const FlamingoModel& model, const VisualInput& query,
                                      std::span<const VisualInput> pool, std::size_t k);

// JSONL evaluation task. Lines are {"kind": "support", "image", "text"} or
// {"kind": "query", "image", "prefix", "answer", "candidates"?}; queries with
// candidates are close-ended. Images are paths or inline tensors.
struct SupportItem {
  VisualInput visual;
  std::string text;
};
struct QueryItem {
  VisualInput visual;
  std::string prefix;
  std::string answer;
  std::vector<std::string> candidates;
};
struct EvalTask {
  std::vector<SupportItem> support;
  std::vector<QueryItem> queries;
};
EvalTask load_eval_task(const std::filesystem::path& path, const VisionConfig& vision);

struct EvalOptions {
  std::size_t shots = 4;
  EvalMode mode = EvalMode::close_ended;
  bool rices = false;         // otherwise shots are a uniform random draw
  std::size_t ensemble = 1;   // >1: mean over that many shot orderings
  DecodeOptions decode;
};

struct QueryResult {
  std::size_t query = 0;
  std::vector<std::size_t> shots;  // support indices in prompt order
  std::string prediction;
  bool correct = false;
};

struct EvalReport {
  std::vector<QueryResult> results;
  double accuracy = 0.0;
};

// Close-ended queries need candidates. Zero-shot open-ended prompts use the
// texts of two random support items without their images.
EvalReport evaluate_task(const FlamingoModel& model, const EvalTask& task, const Vocab& vocab, const EvalOptions& opts,
                         Rng& shuffle_rng, Rng& ensemble_rng, FeatureCache* cache = nullptr);

}  // namespace flamingo
