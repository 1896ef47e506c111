#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaml/select.hpp"

namespace leaml {

enum class UpdateRule { kSgd, kAdamW };

struct OptimizerConfig {
  UpdateRule rule = UpdateRule::kAdamW;
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  long total_steps = 1;   // cosine horizon
  long warmup_steps = 0;  // linear ramp before the cosine decay
  double min_lr_ratio = 0.0;
};

/// Learning rate at a 0-based step: optional linear warmup, then cosine
/// annealing from lr to lr * min_lr_ratio over the remaining steps.
inline double scheduled_lr(const OptimizerConfig& c, long step) {
  if (c.warmup_steps > 0 && step < c.warmup_steps) {
    return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  }
  const long span = std::max(1L, c.total_steps - c.warmup_steps);
  const double t = std::clamp(static_cast<double>(step - c.warmup_steps) / static_cast<double>(span), 0.0, 1.0);
  const double floor = c.lr * c.min_lr_ratio;
  return floor + (c.lr - floor) * 0.5 * (1.0 + std::cos(M_PI * t));
}

/// Per-parameter trainable coordinates and adaptive-moment buffers. Moments
/// are allocated only for trainable coordinates.
template <typename T>
class OptimizerState {
 public:
  explicit OptimizerState(OptimizerConfig config) : config_(config) {}

  const OptimizerConfig& config() const { return config_; }
  long step() const { return step_; }

  /// Number of coordinates carrying moment state.
  std::size_t moment_size() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.m.size();
    return n;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.dense ? s.size : s.coords.size();
    return n;
  }

 private:
  template <typename U>
  friend void masked_step(const ParameterStore<U>&, const UpdateMask*, OptimizerState<U>&);

  struct Slot {
    bool dense = false;                 // every coordinate trainable
    std::size_t size = 0;
    std::vector<std::uint32_t> coords;  // used when !dense
    std::vector<T> m, v;
  };

  void bind(const ParameterStore<T>& params, const UpdateMask* mask) {
    bound_ = true;
    mask_ = mask;
    for (const auto& p : params.parameters()) {
      Slot s;
      s.size = p.tensor->size();
      if (!mask) {
        s.dense = true;
      } else if (p.selectable()) {
        const auto* e = mask->find(p.name);
        if (!e || e->trainable.size() != s.size) {
          throw InvalidState("update mask has no entry matching parameter '" + p.name + "'");
        }
        for (std::size_t i = 0; i < s.size; ++i)
          if (e->trainable[i]) s.coords.push_back(static_cast<std::uint32_t>(i));
      } else if (mask->non_selectable_policy() == NonSelectablePolicy::kTrainable) {
        s.dense = true;
      }
      const std::size_t n = s.dense ? s.size : s.coords.size();
      if (config_.rule == UpdateRule::kAdamW) {
        s.m.assign(n, T(0));
        s.v.assign(n, T(0));
      }
      slots_.push_back(std::move(s));
    }
  }

  OptimizerConfig config_;
  long step_ = 0;
  bool bound_ = false;
  const UpdateMask* mask_ = nullptr;
  std::vector<Slot> slots_;
};

/// Applies one update to the trainable coordinates. All other coordinates,
/// including frozen tensors, are left untouched. A null mask trains everything.
template <typename T>
void masked_step(const ParameterStore<T>& params, const UpdateMask* mask, OptimizerState<T>& state) {
  if (!state.bound_) {
    state.bind(params, mask);
  } else if (state.mask_ != mask || state.slots_.size() != params.size()) {
    throw InvalidState("optimizer state was bound to a different mask or parameter store");
  }
  const auto& cfg = state.config_;
  const T lr = static_cast<T>(scheduled_lr(cfg, state.step_));
  const long t = state.step_ + 1;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  const T eps = static_cast<T>(cfg.eps), wd = static_cast<T>(cfg.weight_decay);

  const auto& ps = params.parameters();
  for (std::size_t k = 0; k < ps.size(); ++k) {
    auto& slot = state.slots_[k];
    const std::size_t n = slot.dense ? slot.size : slot.coords.size();
    if (n == 0) continue;
    auto& tensor = *ps[k].tensor;
    if (tensor.grad.size() != tensor.data.size()) {
      throw InvalidState("no gradient for trainable parameter '" + ps[k].name + "'");
    }
    T* theta = tensor.data.data();
    const T* g = tensor.grad.data();
    auto update = [&](std::size_t slot_index, std::size_t i) {
      if (cfg.rule == UpdateRule::kSgd) {
        theta[i] = theta[i] - lr * g[i];
        return;
      }
      T& m = slot.m[slot_index];
      T& v = slot.v[slot_index];
      m = b1 * m + (T(1) - b1) * g[i];
      v = b2 * v + (T(1) - b2) * g[i] * g[i];
      const T mhat = m / bc1;
      const T vhat = v / bc2;
      theta[i] = theta[i] - lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta[i]);
    };
    if (slot.dense) {
      for (std::size_t i = 0; i < n; ++i) update(i, i);
    } else {
      for (std::size_t s = 0; s < n; ++s) update(s, slot.coords[s]);
    }
  }
  ++state.step_;
}

inline const char* to_string(UpdateRule r) { return r == UpdateRule::kSgd ? "sgd" : "adamw"; }

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"rule", to_string(c.rule)},  {"lr", c.lr},
       {"beta1", c.beta1},           {"beta2", c.beta2},
       {"eps", c.eps},               {"weight_decay", c.weight_decay},
       {"warmup_steps", c.warmup_steps}, {"min_lr_ratio", c.min_lr_ratio}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  OptimizerConfig d;
  const auto rule = j.value("rule", std::string("adamw"));
  if (rule != "sgd" && rule != "adamw") throw InvalidInput("unknown update rule '" + rule + "'");
  c.rule = rule == "sgd" ? UpdateRule::kSgd : UpdateRule::kAdamW;
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.min_lr_ratio = j.value("min_lr_ratio", d.min_lr_ratio);
}

}  // namespace leaml
