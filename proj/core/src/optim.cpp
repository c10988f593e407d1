#include "flamingo/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flamingo {
namespace {

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

double norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

void AdamWConfig::validate() const {
  if (!(peak_lr >= 0.0)) throw std::invalid_argument("optimizer: peak_lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("optimizer: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("optimizer: eps must be > 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("optimizer: weight_decay must be >= 0");
}

double lr_at(std::size_t step, double peak, std::size_t warmup) {
  if (warmup == 0 || step >= warmup) return peak;
  return peak * static_cast<double>(step) / static_cast<double>(warmup);
}

OptimState::OptimState(AdamWConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

void OptimState::set_lr_multiplier(const std::string& prefix, double multiplier) {
  if (!(multiplier >= 0.0)) throw std::invalid_argument("optimizer: lr multiplier must be >= 0");
  lr_multipliers_[prefix] = multiplier;
}

double OptimState::lr_multiplier(std::string_view name) const {
  double out = 1.0;
  std::size_t best = 0;
  for (const auto& [prefix, mult] : lr_multipliers_) {
    if (starts_with(name, prefix) && prefix.size() >= best) {
      best = prefix.size();
      out = mult;
    }
  }
  return out;
}

double OptimState::weight_decay(std::string_view name) const {
  for (const auto& p : cfg_.no_decay_prefixes)
    if (starts_with(name, p)) return 0.0;
  return cfg_.weight_decay;
}

double OptimState::apply(ParamStore& params, const GradMap& grads) {
  ++step_;
  const double lr = lr_at(step_, cfg_.peak_lr, cfg_.warmup_steps);
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  for (const auto& [name, entry] : params.entries()) {
    if (entry.frozen) continue;
    Tensor& w = params.get_mutable(name);
    auto g = grads.find(name);
    if (g != grads.end() && !g->second.same_shape(w)) throw std::invalid_argument("optimizer: gradient shape mismatch for " + name);
    auto [it, fresh] = moments_.try_emplace(name);
    if (fresh) it->second = {Tensor(w.shape(), 0.0), Tensor(w.shape(), 0.0)};
    auto& [m, v] = it->second;
    const double rate = lr * lr_multiplier(name);
    const double wd = weight_decay(name);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double gi = g == grads.end() ? 0.0 : g->second[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= rate * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * w[i]);
    }
  }
  return lr;
}

std::vector<std::string> OptimState::moment_names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : moments_) out.push_back(name);
  return out;
}

ClipConfig::Mode parse_clip_mode(std::string_view s) {
  if (s == "none") return ClipConfig::Mode::none;
  if (s == "global_norm") return ClipConfig::Mode::global_norm;
  if (s == "agc") return ClipConfig::Mode::agc;
  throw std::invalid_argument("unknown clip mode '" + std::string(s) + "' (none, global_norm, agc)");
}

std::string_view clip_mode_name(ClipConfig::Mode m) {
  switch (m) {
    case ClipConfig::Mode::none: return "none";
    case ClipConfig::Mode::global_norm: return "global_norm";
    case ClipConfig::Mode::agc: return "agc";
  }
  return "?";
}

double clip_gradients(GradMap& grads, const ClipConfig& cfg, const ParamStore* params) {
  for (const auto& [name, g] : grads)
    for (double v : g.data())
      if (!std::isfinite(v)) throw std::domain_error("non-finite gradient in " + name);
  const double total = global_grad_norm(grads);
  switch (cfg.mode) {
    case ClipConfig::Mode::none:
      break;
    case ClipConfig::Mode::global_norm: {
      if (!(cfg.threshold > 0.0)) throw std::invalid_argument("clip: threshold must be > 0");
      if (total > cfg.threshold) {
        const double f = cfg.threshold / total;
        for (auto& [_, g] : grads)
          for (auto& v : g.data()) v *= f;
      }
      break;
    }
    case ClipConfig::Mode::agc: {
      if (!params) throw std::invalid_argument("clip: agc needs parameter values");
      if (!(cfg.threshold > 0.0)) throw std::invalid_argument("clip: threshold must be > 0");
      for (auto& [name, g] : grads) {
        const double limit = cfg.threshold * (norm(params->get(name)) + cfg.agc_eps);
        const double gn = norm(g);
        if (gn > limit) {
          const double f = limit / gn;
          for (auto& v : g.data()) v *= f;
        }
      }
      break;
    }
  }
  return total;
}

}  // namespace flamingo
