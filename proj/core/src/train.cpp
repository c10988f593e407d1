#include "flamingo/train.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "flamingo/io.hpp"
#include "flamingo/ops.hpp"
#include "flamingo/tokenizer.hpp"

namespace flamingo {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_lambda(std::span<const Batch> batches, std::span<const double> lambda) {
  if (batches.empty()) throw std::invalid_argument("mixture: no batches");
  if (batches.size() != lambda.size()) {
    throw std::invalid_argument("mixture: " + std::to_string(batches.size()) + " batches but " +
                                std::to_string(lambda.size()) + " weights");
  }
  for (double l : lambda)
    if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("mixture: weights must be finite and >= 0");
}

// Sum of per-target NLL over one instance.
Var instance_nll_sum(Graph& g, const FlamingoModel& model, const TrainingInstance& inst, FeatureCache* cache) {
  const std::size_t L = inst.text.size();
  Var logits = ops::slice_rows(model.forward(g, inst, cache), 0, L - 1);
  std::vector<int> targets(inst.text.begin() + 1, inst.text.end());
  std::vector<double> w(L - 1);
  for (std::size_t l = 0; l + 1 < L; ++l) w[l] = targets[l] == Vocab::pad() ? 0.0 : 1.0;
  return ops::nll_loss(logits, targets, w);
}

void append_number(std::string& out, double v) {
  if (std::isnan(v)) return;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  out += buf;
}

}  // namespace

std::size_t count_targets(const Batch& batch) {
  std::size_t n = 0;
  for (const auto& inst : batch)
    for (std::size_t l = 1; l < inst.text.size(); ++l) n += inst.text[l] != Vocab::pad();
  return n;
}

Var batch_nll(Graph& g, const FlamingoModel& model, const Batch& batch, FeatureCache* cache) {
  const std::size_t n = count_targets(batch);
  if (n == 0) throw std::invalid_argument("batch_nll: batch has no non-pad targets");
  std::vector<Var> parts;
  for (const auto& inst : batch)
    if (inst.text.size() >= 2) parts.push_back(instance_nll_sum(g, model, inst, cache));
  Var total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) total = ops::add(total, parts[i]);
  return ops::scale(total, 1.0 / static_cast<double>(n));
}

MixtureLoss mixture_loss(Graph& g, const FlamingoModel& model, std::span<const Batch> batches,
                         std::span<const double> lambda, FeatureCache* cache) {
  check_lambda(batches, lambda);
  MixtureLoss out;
  std::optional<Var> total;
  for (std::size_t m = 0; m < batches.size(); ++m) {
    Var nll = batch_nll(g, model, batches[m], cache);
    out.components.push_back(nll.value()[0]);
    Var term = ops::scale(nll, lambda[m]);
    total = total ? ops::add(*total, term) : term;
  }
  out.total = *total;
  return out;
}

GradResult dataset_gradient(const FlamingoModel& model, const Batch& batch, double lambda, FeatureCache* cache) {
  GradResult r;
  if (lambda == 0.0) {
    Graph g(&model.params(), GradMode::none);
    r.losses = {batch_nll(g, model, batch, cache).value()[0]};
    return r;
  }
  Graph g(&model.params(), GradMode::trainable);
  Var nll = batch_nll(g, model, batch, cache);
  r.losses = {nll.value()[0]};
  r.total = lambda * r.losses[0];
  r.grads = g.backward(ops::scale(nll, lambda));
  return r;
}

GradResult accumulate_gradients(const FlamingoModel& model, std::span<const Batch> batches,
                                std::span<const double> lambda, FeatureCache* cache) {
  check_lambda(batches, lambda);
  GradResult out;
  for (std::size_t m = 0; m < batches.size(); ++m) {
    auto r = dataset_gradient(model, batches[m], lambda[m], cache);
    out.losses.push_back(r.losses[0]);
    out.total += lambda[m] * r.losses[0];
    accumulate_grads(out.grads, r.grads);
  }
  return out;
}

GradResult merged_gradient(const FlamingoModel& model, const Batch& pooled, FeatureCache* cache) {
  if (pooled.empty()) throw std::invalid_argument("merged: empty batch");
  GradResult r;
  Graph g(&model.params(), GradMode::trainable);
  Var nll = batch_nll(g, model, pooled, cache);
  r.total = nll.value()[0];
  r.grads = g.backward(nll);
  return r;
}

Strategy parse_strategy(std::string_view s) {
  if (s == "accumulation") return Strategy::accumulation;
  if (s == "round_robin") return Strategy::round_robin;
  if (s == "merged") return Strategy::merged;
  throw std::invalid_argument("unknown strategy '" + std::string(s) + "' (accumulation, round_robin, merged)");
}

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::accumulation: return "accumulation";
    case Strategy::round_robin: return "round_robin";
    case Strategy::merged: return "merged";
  }
  return "?";
}

StepRecord apply_update(FlamingoModel& model, GradResult grads, OptimState& opt, const ClipConfig& clip) {
  StepRecord r;
  r.grad_norm = clip_gradients(grads.grads, clip, &model.params());
  r.lr = opt.apply(model.params(), grads.grads);
  r.step = opt.step();
  r.losses = std::move(grads.losses);
  r.total = grads.total;
  r.gates = model.gate_values();
  return r;
}

StepRecord accumulation_step(FlamingoModel& model, std::span<const Batch> batches, std::span<const double> lambda,
                             OptimState& opt, const ClipConfig& clip, FeatureCache* cache) {
  return apply_update(model, accumulate_gradients(model, batches, lambda, cache), opt, clip);
}

StepRecord round_robin_step(FlamingoModel& model, const Batch& batch, std::size_t m, std::size_t datasets,
                            double lambda, OptimState& opt, const ClipConfig& clip, FeatureCache* cache) {
  if (m >= datasets) throw std::out_of_range("round robin: dataset index out of range");
  auto r = dataset_gradient(model, batch, lambda, cache);
  std::vector<double> losses(datasets, kNaN);
  losses[m] = r.losses[0];
  r.total = lambda * losses[m];
  r.losses = std::move(losses);
  return apply_update(model, std::move(r), opt, clip);
}

StepRecord merged_step(FlamingoModel& model, const Batch& pooled, std::size_t datasets, OptimState& opt,
                       const ClipConfig& clip, FeatureCache* cache) {
  auto r = merged_gradient(model, pooled, cache);
  r.losses.assign(datasets, kNaN);
  return apply_update(model, std::move(r), opt, clip);
}

Trainer::Trainer(FlamingoModel& model, MixtureSpec spec, TrainOptions opts, Rng data_rng)
    : model_(model), spec_(std::move(spec)), opts_(std::move(opts)), rng_(std::move(data_rng)), opt_(opts_.optim) {
  spec_.validate();
  model_.apply_freeze_policy(opts_.freeze);
  if (!opts_.freeze.freeze_lm) opt_.set_lr_multiplier("lm.", opts_.freeze.lm_lr_multiplier);
  use_cache_ = true;
  for (const auto& [name, e] : model_.params().entries())
    if (name.rfind("vision.", 0) == 0 && !e.frozen) use_cache_ = false;
}

StepRecord Trainer::step() {
  FeatureCache* cache = use_cache_ ? &cache_ : nullptr;
  const auto lambda = spec_.weights();
  switch (opts_.strategy) {
    case Strategy::accumulation: {
      auto batches = next_mixture_batches(spec_, rng_);
      return accumulation_step(model_, batches, lambda, opt_, opts_.clip, cache);
    }
    case Strategy::round_robin: {
      const std::size_t m = opt_.step() % spec_.datasets.size();
      auto batch = next_dataset_batch(spec_, m, rng_);
      return round_robin_step(model_, batch, m, spec_.datasets.size(), lambda[m], opt_, opts_.clip, cache);
    }
    case Strategy::merged: {
      auto pooled = next_pooled_batch(spec_, rng_);
      return merged_step(model_, pooled, spec_.datasets.size(), opt_, opts_.clip, cache);
    }
  }
  throw std::logic_error("unknown strategy");
}

Var lm_batch_nll(Graph& g, const LanguageModel& lm, const Batch& batch) {
  const std::size_t n = count_targets(batch);
  if (n == 0) throw std::invalid_argument("lm_batch_nll: batch has no non-pad targets");
  std::optional<Var> total;
  for (const auto& inst : batch) {
    const std::size_t L = inst.text.size();
    if (L < 2) continue;
    Var logits = ops::slice_rows(lm.forward(g, inst.text), 0, L - 1);
    std::vector<int> targets(inst.text.begin() + 1, inst.text.end());
    std::vector<double> w(L - 1);
    for (std::size_t l = 0; l + 1 < L; ++l) w[l] = targets[l] == Vocab::pad() ? 0.0 : 1.0;
    Var part = ops::nll_loss(logits, targets, w);
    total = total ? ops::add(*total, part) : part;
  }
  return ops::scale(*total, 1.0 / static_cast<double>(n));
}

LMPretrainer::LMPretrainer(const LanguageModel& lm, ParamStore& params, std::shared_ptr<const InstanceSource> texts,
                           LMPretrainOptions opts, Rng data_rng)
    : lm_(lm), params_(params), texts_(std::move(texts)), opts_(std::move(opts)), rng_(std::move(data_rng)),
      opt_(opts_.optim) {
  if (!texts_ || texts_->size() == 0) throw std::invalid_argument("lm pretraining: empty text source");
  if (opts_.batch_size == 0) throw std::invalid_argument("lm pretraining: batch_size must be >= 1");
}

double LMPretrainer::step() {
  Rng sub(rng_());
  Batch batch;
  for (std::size_t i = 0; i < opts_.batch_size; ++i) batch.push_back(texts_->make(uniform_index(sub, texts_->size()), sub));
  Graph g(&params_, GradMode::trainable);
  Var nll = lm_batch_nll(g, lm_, batch);
  auto grads = g.backward(nll);
  clip_gradients(grads, opts_.clip, &params_);
  opt_.apply(params_, grads);
  return nll.value()[0];
}

MetricLog::MetricLog(std::vector<std::string> dataset_names, std::size_t gated_blocks)
    : datasets_(dataset_names.size()), gates_(gated_blocks) {
  csv_ = "step";
  for (const auto& n : dataset_names) csv_ += ",loss_" + n;
  csv_ += ",total,grad_norm,lr";
  for (std::size_t j = 0; j < gates_; ++j) csv_ += ",gate_attn_" + std::to_string(j) + ",gate_ffw_" + std::to_string(j);
  csv_ += '\n';
}

void MetricLog::append(const StepRecord& r) {
  if (r.losses.size() != datasets_ || r.gates.size() != gates_) {
    throw std::invalid_argument("metric log: record does not match the header");
  }
  csv_ += std::to_string(r.step);
  for (double l : r.losses) {
    csv_ += ',';
    append_number(csv_, l);
  }
  for (double v : {r.total, r.grad_norm, r.lr}) {
    csv_ += ',';
    append_number(csv_, v);
  }
  for (const auto& gv : r.gates) {
    csv_ += ',';
    append_number(csv_, gv.attn);
    csv_ += ',';
    append_number(csv_, gv.ffw);
  }
  csv_ += '\n';
  ++rows_;
}

void MetricLog::write(const std::filesystem::path& path) const { io::write_file_atomic(path, csv_); }

}  // namespace flamingo
