#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flamingo/datapipe.hpp"
#include "flamingo/lm.hpp"
#include "flamingo/optim.hpp"

namespace flamingo {

// Mean next-token NLL over every non-pad target of the batch. Throws when
// the batch has no target at all.
Var batch_nll(Graph& g, const FlamingoModel& model, const Batch& batch, FeatureCache* cache = nullptr);
std::size_t count_targets(const Batch& batch);

struct MixtureLoss {
  Var total;                      // sum_m lambda_m * nll_m
  std::vector<double> components;  // nll_m
};
MixtureLoss mixture_loss(Graph& g, const FlamingoModel& model, std::span<const Batch> batches,
                         std::span<const double> lambda, FeatureCache* cache = nullptr);

struct GradResult {
  GradMap grads;
  std::vector<double> losses;  // per dataset; NaN where not evaluated
  double total = 0.0;
};

// sum_m lambda_m * grad_m, one backward pass per dataset, summed in dataset
// order. Zero-weight datasets contribute their loss but no gradient.
GradResult accumulate_gradients(const FlamingoModel& model, std::span<const Batch> batches,
                                std::span<const double> lambda, FeatureCache* cache = nullptr);
// lambda * grad of one dataset's loss.
GradResult dataset_gradient(const FlamingoModel& model, const Batch& batch, double lambda, FeatureCache* cache = nullptr);
// Gradient of the per-token mean over one pooled batch; no per-dataset losses.
GradResult merged_gradient(const FlamingoModel& model, const Batch& pooled, FeatureCache* cache = nullptr);

enum class Strategy { accumulation, round_robin, merged };
Strategy parse_strategy(std::string_view s);
std::string_view strategy_name(Strategy s);

struct StepRecord {
  std::size_t step = 0;  // 1-based update count
  std::vector<double> losses;
  double total = 0.0;
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
  std::vector<GateValues> gates;
};

// Clip, then one optimizer update.
StepRecord apply_update(FlamingoModel& model, GradResult grads, OptimState& opt, const ClipConfig& clip);

StepRecord accumulation_step(FlamingoModel& model, std::span<const Batch> batches, std::span<const double> lambda,
                             OptimState& opt, const ClipConfig& clip, FeatureCache* cache = nullptr);
// Update from lambda_m * grad_m only; losses has `datasets` entries.
StepRecord round_robin_step(FlamingoModel& model, const Batch& batch, std::size_t m, std::size_t datasets,
                            double lambda, OptimState& opt, const ClipConfig& clip, FeatureCache* cache = nullptr);
// losses has `datasets` NaN entries; total is the pooled loss.
StepRecord merged_step(FlamingoModel& model, const Batch& pooled, std::size_t datasets, OptimState& opt,
                       const ClipConfig& clip, FeatureCache* cache = nullptr);

struct TrainOptions {
  Strategy strategy = Strategy::accumulation;
  ClipConfig clip;
  AdamWConfig optim;
  FreezePolicy freeze;
};

// Draws batches from the mixture and applies the chosen strategy. Round robin
// visits dataset (step mod M). Frozen vision features are cached.
class Trainer {
 public:
  Trainer(FlamingoModel& model, MixtureSpec spec, TrainOptions opts, Rng data_rng);

  StepRecord step();
  const OptimState& optimizer() const { return opt_; }
  const MixtureSpec& mixture() const { return spec_; }
  std::size_t steps_done() const { return opt_.step(); }

 private:
  FlamingoModel& model_;
  MixtureSpec spec_;
  TrainOptions opts_;
  Rng rng_;
  OptimState opt_;
  FeatureCache cache_;
  bool use_cache_ = false;
};

struct LMPretrainOptions {
  std::size_t batch_size = 16;
  AdamWConfig optim{1e-3, 100, 0.9, 0.999, 1e-8, 0.0, {}};
  ClipConfig clip;
};

// Mean next-token NLL of a text-only language model over a batch.
Var lm_batch_nll(Graph& g, const LanguageModel& lm, const Batch& batch);

// Next-token training of a text-only language model held in its own store.
class LMPretrainer {
 public:
  LMPretrainer(const LanguageModel& lm, ParamStore& params, std::shared_ptr<const InstanceSource> texts,
               LMPretrainOptions opts, Rng data_rng);

  // Returns the batch loss before the update.
  double step();
  std::size_t steps_done() const { return opt_.step(); }

 private:
  const LanguageModel& lm_;
  ParamStore& params_;
  std::shared_ptr<const InstanceSource> texts_;
  LMPretrainOptions opts_;
  Rng rng_;
  OptimState opt_;
};

// CSV: step, loss_<name>..., total, grad_norm, lr, gate_attn_<j>, gate_ffw_<j>...
class MetricLog {
 public:
  MetricLog(std::vector<std::string> dataset_names, std::size_t gated_blocks);

  void append(const StepRecord& r);
  const std::string& csv() const { return csv_; }
  std::size_t rows() const { return rows_; }
  void write(const std::filesystem::path& path) const;

 private:
  std::size_t datasets_;
  std::size_t gates_;
  std::size_t rows_ = 0;
  std::string csv_;
};

}  // namespace flamingo
