#include "e4srec/optim.hpp"

#include <cmath>
#include <iostream>

#include "e4srec/errors.hpp"

namespace e4srec::ad {

Adam::Adam(std::vector<Param*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Param* p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void Adam::step(float lr) {
  if (lr < 0.0f) throw ConfigError("adam: negative learning rate");
  ++step_;
  float b1 = config_.beta1, b2 = config_.beta2;
  float bc1 = 1.0f - std::pow(b1, static_cast<float>(step_));
  float bc2 = 1.0f - std::pow(b2, static_cast<float>(step_));
  for (size_t k = 0; k < params_.size(); ++k) {
    Param* p = params_[k];
    if (!p->trainable) continue;
    bool has_grad = !p->grad.empty();
    if (has_grad && !p->grad.same_shape(p->value)) {
      throw ShapeError("adam: grad shape " + p->grad.shape_str() + " mismatches param " +
                       p->name + " " + p->value.shape_str());
    }
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (int64_t i = 0; i < p->value.size(); ++i) {
      float g = has_grad ? p->grad(i) : 0.0f;
      m(i) = b1 * m(i) + (1.0f - b1) * g;
      v(i) = b2 * v(i) + (1.0f - b2) * g * g;
      float mhat = m(i) / bc1;
      float vhat = v(i) / bc2;
      float update = mhat / (std::sqrt(vhat) + config_.epsilon);
      p->value(i) -= lr * (update + config_.weight_decay * p->value(i));
    }
    if (!p->value.all_finite()) {
      throw NumericError("adam: parameter " + p->name + " became non-finite");
    }
    p->zero_grad();
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

float LRSchedule::at(int64_t step) const {
  if (step < 0) throw ConfigError("lr schedule: negative step");
  if (step > total_steps) {
    static thread_local bool warned = false;
    if (!warned) {
      std::cerr << "[e4srec] warning: lr queried past total_steps, clamping\n";
      warned = true;
    }
    step = total_steps;
  }
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<float>(step) / static_cast<float>(warmup_steps);
  }
  int64_t span = total_steps - warmup_steps;
  if (span <= 0) return base_lr;
  double t = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  return base_lr * 0.5f * static_cast<float>(1.0 + std::cos(3.141592653589793 * t));
}

}  // namespace e4srec::ad
