#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "e4srec/tensor.hpp"

namespace e4srec::ad {

// A named trainable (or frozen) tensor owned by a model. Gradients accumulate
// across instances of a batch; the optimizer consumes and clears them.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;  // lazily sized on first accumulation
  bool trainable = true;

  Param() = default;
  Param(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {
    value.set_requires_grad(train);
  }
  void zero_grad() { grad = Tensor(); }
};

enum class Op : uint8_t {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  linear,
  embedding_lookup,
  softmax,
  cross_entropy_with_logits,
  causal_multihead_attention,
  rms_norm,
  layer_norm,
  silu,
  gelu,
  softplus,
  dropout,
  concat,
  slice,
  sum,
  mean_rows,
};

const char* op_name(Op op);

using NodeId = int32_t;

// Eager define-by-run tape. Each builder call computes the forward value
// immediately, verifies it is finite, and records the node for backward().
// One graph per forward pass; graphs are independent and thread-compatible.
class Graph {
 public:
  // `seed` drives dropout masks through a counter-based hash, so a rebuilt
  // graph with the same structure and seed reproduces identical masks.
  // `training=false` turns every dropout into the identity.
  explicit Graph(uint64_t seed = 0, bool training = false);

  // --- leaves -----------------------------------------------------------
  NodeId value(Tensor t);             // owned constant (grad iff t.requires_grad())
  NodeId param(Param& p);             // borrows p.value; trainable params get grads
  NodeId borrow(const Tensor& t);     // non-owning frozen view (never gets grads)

  // --- primitives ---------------------------------------------------------
  NodeId matmul(NodeId a, NodeId b, bool transpose_a = false, bool transpose_b = false);
  NodeId add(NodeId a, NodeId b);     // same shape, or b a rank-1 row vector
  NodeId sub(NodeId a, NodeId b);     // same shape
  NodeId mul(NodeId a, NodeId b);     // elementwise, same shape
  NodeId scale(NodeId a, float c);
  NodeId linear(NodeId x, NodeId w);  // x[T,din] * w[din,dout]
  NodeId linear(NodeId x, NodeId w, NodeId bias);  // + bias[dout] per row
  NodeId embedding_lookup(NodeId table, std::span<const int32_t> ids);
  NodeId softmax(NodeId a, int axis = -1);  // along the last axis
  // rank-1 logits with a single target, or rank-2 [R,C] logits with R targets;
  // rows whose target equals ignore_index are skipped; result is the mean.
  NodeId cross_entropy_with_logits(NodeId logits, std::span<const int32_t> targets,
                                   int32_t ignore_index = -1);
  // Fused causal self-attention. x:[T,d], weights each [d,d], d % heads == 0.
  // Positions < pad_prefix are left padding: they are invisible as keys and
  // produce exactly zero output rows.
  NodeId causal_multihead_attention(NodeId x, NodeId wq, NodeId wk, NodeId wv, NodeId wo,
                                    int heads, int pad_prefix = 0);
  NodeId rms_norm(NodeId x, NodeId gain, float eps = 1e-6f);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, float eps = 1e-5f);
  NodeId silu(NodeId a);
  NodeId gelu(NodeId a);
  NodeId softplus(NodeId a);
  NodeId dropout(NodeId a, float p);
  NodeId concat(std::span<const NodeId> parts, int axis = 0);
  NodeId slice(NodeId a, int axis, int64_t start, int64_t stop);
  NodeId sum(NodeId a);        // full reduction to a scalar
  NodeId mean_rows(NodeId a);  // [T,d] -> [1,d]

  // --- results ------------------------------------------------------------
  const Tensor& value_of(NodeId id) const;
  // Gradient of the last backward() target w.r.t. node `id`. Throws if the
  // node does not require grad or backward has not run.
  const Tensor& grad_of(NodeId id) const;
  bool has_grad(NodeId id) const;

  // Reverse pass from a scalar loss; dL/dloss = loss_scale. Gradients for
  // bound Params are accumulated into Param::grad. A loss with no path to any
  // grad-requiring leaf yields an empty gradient map and a warning on stderr.
  void backward(NodeId loss, float loss_scale = 1.0f);

  // (param, gradient) pairs produced by the last backward(); frozen params
  // never appear.
  std::vector<std::pair<Param*, const Tensor*>> param_grads();

  size_t node_count() const { return nodes_.size(); }
  bool training() const { return training_; }
  uint64_t seed() const { return seed_; }

 private:
  struct Node {
    Op op = Op::leaf;
    std::vector<NodeId> in;
    Tensor out;                      // owned output (leaves may use `borrowed`)
    const Tensor* borrowed = nullptr;
    Param* bound = nullptr;
    bool requires_grad = false;
    Tensor grad;
    bool has_grad = false;
    // attributes
    int axis = -1;
    float f = 0.0f;   // scale factor / dropout p
    float eps = 0.0f;
    int heads = 0;
    int pad = 0;
    int64_t start = 0, stop = 0;
    bool ta = false, tb = false;
    int32_t ignore = -1;
    std::vector<int32_t> idx;     // embedding ids or loss targets
    std::vector<Tensor> saved;    // forward intermediates for backward
  };

  NodeId push(Node n);
  const Tensor& val(NodeId id) const;
  Tensor& grad_buf(NodeId id);
  void check_finite(const Tensor& t, Op op) const;
  void backward_node(NodeId id);

  std::vector<Node> nodes_;
  uint64_t seed_;
  bool training_;
  bool ran_backward_ = false;
};

}  // namespace e4srec::ad
