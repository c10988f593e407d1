#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "flamingo/graph.hpp"

namespace flamingo {

struct AdamWConfig {
  double peak_lr = 1e-4;
  std::size_t warmup_steps = 5000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
  std::vector<std::string> no_decay_prefixes{"resampler."};

  void validate() const;
};

// Linear warmup from 0, then constant: peak * min(1, step / warmup).
double lr_at(std::size_t step, double peak, std::size_t warmup);

// Decoupled-weight-decay Adam. Moments are created lazily, and only for
// parameters that are not frozen at the time of the update. Update n
// (1-based) uses lr_at(n).
class OptimState {
 public:
  explicit OptimState(AdamWConfig cfg = {});

  const AdamWConfig& config() const { return cfg_; }
  std::size_t step() const { return step_; }
  double next_lr() const { return lr_at(step_ + 1, cfg_.peak_lr, cfg_.warmup_steps); }

  // Scales the rate of every parameter under `prefix` (longest prefix wins).
  void set_lr_multiplier(const std::string& prefix, double multiplier);
  double lr_multiplier(std::string_view name) const;
  double weight_decay(std::string_view name) const;

  // Missing gradients of trainable parameters count as zero. Returns the rate used.
  double apply(ParamStore& params, const GradMap& grads);

  bool has_moments(const std::string& name) const { return moments_.count(name) != 0; }
  std::vector<std::string> moment_names() const;

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  AdamWConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, double> lr_multipliers_;
  std::map<std::string, Moments> moments_;
};

struct ClipConfig {
  enum class Mode { none, global_norm, agc };
  Mode mode = Mode::global_norm;
  double threshold = 1.0;  // c for global_norm, lambda for agc
  double agc_eps = 1e-3;
};

ClipConfig::Mode parse_clip_mode(std::string_view s);
std::string_view clip_mode_name(ClipConfig::Mode m);

// Clips in place and returns the global norm before clipping. AGC needs the
// parameter values and bounds ||g_p|| / (||w_p|| + eps) per tensor.
double clip_gradients(GradMap& grads, const ClipConfig& cfg, const ParamStore* params = nullptr);

}  // namespace flamingo
