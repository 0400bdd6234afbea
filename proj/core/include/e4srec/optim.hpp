#pragma once

#include <cstdint>
#include <vector>

#include "e4srec/graph.hpp"

namespace e4srec::ad {

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  float weight_decay = 0.0f;  // decoupled (AdamW-style)
};

// Adam with bias correction and decoupled weight decay. Moments shape-match
// their parameters; the step counter only moves forward.
class Adam {
 public:
  Adam(std::vector<Param*> params, AdamConfig config = {});

  // Applies one update from the gradients accumulated in Param::grad and
  // clears them. Params with an empty grad (no contribution this step) are
  // still weight-decayed, matching decoupled decay semantics.
  void step(float lr);
  void zero_grad();

  int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<Param*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamConfig config_;
  int64_t step_ = 0;
};

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0
// at total_steps.
struct LRSchedule {
  float base_lr = 1e-3f;
  int64_t warmup_steps = 0;
  int64_t total_steps = 1;

  // Steps past total_steps clamp to the final value (and warn once).
  float at(int64_t step) const;
};

}  // namespace e4srec::ad
