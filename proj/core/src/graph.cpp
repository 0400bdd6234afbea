#include "e4srec/graph.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <iostream>
#include <sstream>

#include "e4srec/errors.hpp"

namespace e4srec::ad {

namespace {

using EMat = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ECMat =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

ECMat cmap(const Tensor& t, int64_t r, int64_t c) { return ECMat(t.raw(), r, c); }
EMat mmap(Tensor& t, int64_t r, int64_t c) { return EMat(t.raw(), r, c); }

float stable_softplus(float x) {
  if (x > 20.0f) return x;
  if (x < -20.0f) return std::exp(x);
  return std::log1p(std::exp(x));
}

float sigmoidf(float x) {
  if (x >= 0.0f) {
    float z = std::exp(-x);
    return 1.0f / (1.0f + z);
  }
  float z = std::exp(x);
  return z / (1.0f + z);
}

constexpr float kInvSqrt2 = 0.7071067811865475f;
constexpr float kInvSqrt2Pi = 0.3989422804014327f;

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::linear: return "linear";
    case Op::embedding_lookup: return "embedding_lookup";
    case Op::softmax: return "softmax";
    case Op::cross_entropy_with_logits: return "cross_entropy_with_logits";
    case Op::causal_multihead_attention: return "causal_multihead_attention";
    case Op::rms_norm: return "rms_norm";
    case Op::layer_norm: return "layer_norm";
    case Op::silu: return "silu";
    case Op::gelu: return "gelu";
    case Op::softplus: return "softplus";
    case Op::dropout: return "dropout";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::sum: return "sum";
    case Op::mean_rows: return "mean_rows";
  }
  return "?";
}

Graph::Graph(uint64_t seed, bool training) : seed_(seed), training_(training) {
  nodes_.reserve(64);
}

NodeId Graph::push(Node n) {
  check_finite(n.borrowed ? *n.borrowed : n.out, n.op);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Tensor& Graph::val(NodeId id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  return n.borrowed ? *n.borrowed : n.out;
}

const Tensor& Graph::value_of(NodeId id) const { return val(id); }

bool Graph::has_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].has_grad; }

const Tensor& Graph::grad_of(NodeId id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.requires_grad) {
    throw ContractError("grad_of: node does not require grad");
  }
  if (!n.has_grad) {
    throw ContractError("grad_of: backward() has not produced a gradient for this node");
  }
  return n.grad;
}

Tensor& Graph::grad_buf(NodeId id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.has_grad) {
    n.grad = Tensor::zeros(val(id).shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::check_finite(const Tensor& t, Op op) const {
  if (!t.all_finite()) {
    throw NumericError(std::string(op_name(op)) + ": non-finite output");
  }
}

NodeId Graph::value(Tensor t) {
  Node n;
  n.op = Op::leaf;
  n.requires_grad = t.requires_grad();
  n.out = std::move(t);
  return push(std::move(n));
}

NodeId Graph::param(Param& p) {
  Node n;
  n.op = Op::leaf;
  n.borrowed = &p.value;
  n.bound = &p;
  n.requires_grad = p.trainable;
  return push(std::move(n));
}

NodeId Graph::borrow(const Tensor& t) {
  Node n;
  n.op = Op::leaf;
  n.borrowed = &t;
  n.requires_grad = false;
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// forward builders
// ---------------------------------------------------------------------------

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_a, bool transpose_b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.rank() != 2 || tb.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 operands, got " + ta.shape_str() + " and " +
                     tb.shape_str());
  }
  int64_t m = transpose_a ? ta.dim(1) : ta.dim(0);
  int64_t k = transpose_a ? ta.dim(0) : ta.dim(1);
  int64_t kb = transpose_b ? tb.dim(1) : tb.dim(0);
  int64_t nn = transpose_b ? tb.dim(0) : tb.dim(1);
  if (k != kb) {
    throw ShapeError(std::string("matmul: inner dimensions differ, ") + ta.shape_str() +
                     (transpose_a ? "^T" : "") + " * " + tb.shape_str() +
                     (transpose_b ? "^T" : ""));
  }
  Node n;
  n.op = Op::matmul;
  n.in = {a, b};
  n.ta = transpose_a;
  n.tb = transpose_b;
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  n.out = Tensor({m, nn});
  auto A = cmap(ta, ta.dim(0), ta.dim(1));
  auto B = cmap(tb, tb.dim(0), tb.dim(1));
  auto C = mmap(n.out, m, nn);
  if (!transpose_a && !transpose_b) C.noalias() = A * B;
  else if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
  else if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
  else C.noalias() = A.transpose() * B.transpose();
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  bool broadcast = ta.rank() == 2 && tb.rank() == 1 && tb.dim(0) == ta.dim(1);
  if (!broadcast && !ta.same_shape(tb)) {
    throw ShapeError("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Node n;
  n.op = Op::add;
  n.in = {a, b};
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  n.out = Tensor(ta.shape());
  if (broadcast) {
    auto A = cmap(ta, ta.dim(0), ta.dim(1));
    auto O = mmap(n.out, ta.dim(0), ta.dim(1));
    Eigen::Map<const Eigen::RowVectorXf> bias(tb.raw(), tb.dim(0));
    O = A.rowwise() + bias;
  } else {
    for (int64_t i = 0; i < ta.size(); ++i) n.out(i) = ta(i) + tb(i);
  }
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) {
    throw ShapeError("sub: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Node n;
  n.op = Op::sub;
  n.in = {a, b};
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  n.out = Tensor(ta.shape());
  for (int64_t i = 0; i < ta.size(); ++i) n.out(i) = ta(i) - tb(i);
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) {
    throw ShapeError("mul: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Node n;
  n.op = Op::mul;
  n.in = {a, b};
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  n.out = Tensor(ta.shape());
  for (int64_t i = 0; i < ta.size(); ++i) n.out(i) = ta(i) * tb(i);
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, float c) {
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::scale;
  n.in = {a};
  n.f = c;
  n.requires_grad = nodes_[a].requires_grad;
  n.out = Tensor(ta.shape());
  for (int64_t i = 0; i < ta.size(); ++i) n.out(i) = c * ta(i);
  return push(std::move(n));
}

NodeId Graph::linear(NodeId x, NodeId w) { return linear(x, w, -1); }

NodeId Graph::linear(NodeId x, NodeId w, NodeId bias) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  if (tx.rank() != 2 || tw.rank() != 2 || tx.dim(1) != tw.dim(0)) {
    throw ShapeError("linear: x " + tx.shape_str() + " incompatible with w " + tw.shape_str());
  }
  Node n;
  n.op = Op::linear;
  n.in = {x, w};
  n.requires_grad = nodes_[x].requires_grad || nodes_[w].requires_grad;
  n.out = Tensor({tx.dim(0), tw.dim(1)});
  auto X = cmap(tx, tx.dim(0), tx.dim(1));
  auto W = cmap(tw, tw.dim(0), tw.dim(1));
  auto O = mmap(n.out, n.out.dim(0), n.out.dim(1));
  O.noalias() = X * W;
  if (bias >= 0) {
    const Tensor& tb = val(bias);
    if (tb.rank() != 1 || tb.dim(0) != tw.dim(1)) {
      throw ShapeError("linear: bias " + tb.shape_str() + " incompatible with w " +
                       tw.shape_str());
    }
    n.in.push_back(bias);
    n.requires_grad = n.requires_grad || nodes_[bias].requires_grad;
    Eigen::Map<const Eigen::RowVectorXf> B(tb.raw(), tb.dim(0));
    O.rowwise() += B;
  }
  return push(std::move(n));
}

NodeId Graph::embedding_lookup(NodeId table, std::span<const int32_t> ids) {
  const Tensor& tt = val(table);
  if (tt.rank() != 2) throw ShapeError("embedding_lookup: table must be rank-2");
  if (ids.empty()) throw ContractError("embedding_lookup: empty id list");
  int64_t rows = tt.dim(0);
  for (int32_t id : ids) {
    if (id < 0 || id >= rows) {
      throw ContractError("embedding_lookup: id " + std::to_string(id) +
                          " out of range [0, " + std::to_string(rows) + ")");
    }
  }
  Node n;
  n.op = Op::embedding_lookup;
  n.in = {table};
  n.idx.assign(ids.begin(), ids.end());
  n.requires_grad = nodes_[table].requires_grad;
  int64_t d = tt.dim(1);
  n.out = Tensor({static_cast<int64_t>(ids.size()), d});
  for (size_t t = 0; t < ids.size(); ++t) {
    const float* src = tt.raw() + static_cast<int64_t>(ids[t]) * d;
    float* dst = n.out.raw() + static_cast<int64_t>(t) * d;
    std::copy(src, src + d, dst);
  }
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId a, int axis) {
  const Tensor& ta = val(a);
  if (!(axis == -1 || axis == ta.rank() - 1)) {
    throw ShapeError("softmax: only the last axis is supported");
  }
  Node n;
  n.op = Op::softmax;
  n.in = {a};
  n.axis = ta.rank() - 1;
  n.requires_grad = nodes_[a].requires_grad;
  n.out = Tensor(ta.shape());
  int64_t cols = ta.dim(ta.rank() - 1);
  int64_t rows = ta.size() / cols;
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = ta.raw() + r * cols;
    float* y = n.out.raw() + r * cols;
    float m = x[0];
    for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
    double denom = 0.0;  // 64-bit accumulation
    for (int64_t c = 0; c < cols; ++c) {
      double e = std::exp(static_cast<double>(x[c] - m));
      y[c] = static_cast<float>(e);
      denom += e;
    }
    float inv = static_cast<float>(1.0 / denom);
    for (int64_t c = 0; c < cols; ++c) y[c] *= inv;
  }
  return push(std::move(n));
}

NodeId Graph::cross_entropy_with_logits(NodeId logits, std::span<const int32_t> targets,
                                        int32_t ignore_index) {
  const Tensor& tl = val(logits);
  int64_t rows, cols;
  if (tl.rank() == 1) {
    rows = 1;
    cols = tl.dim(0);
  } else if (tl.rank() == 2) {
    rows = tl.dim(0);
    cols = tl.dim(1);
  } else {
    throw ShapeError("cross_entropy_with_logits: logits must be rank-1 or rank-2");
  }
  if (static_cast<int64_t>(targets.size()) != rows) {
    throw ShapeError("cross_entropy_with_logits: got " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  }
  Node n;
  n.op = Op::cross_entropy_with_logits;
  n.in = {logits};
  n.idx.assign(targets.begin(), targets.end());
  n.ignore = ignore_index;
  n.requires_grad = nodes_[logits].requires_grad;
  Tensor probs({rows, cols});
  double total = 0.0;
  int64_t counted = 0;
  for (int64_t r = 0; r < rows; ++r) {
    int32_t t = targets[static_cast<size_t>(r)];
    const float* x = tl.raw() + r * cols;
    float* p = probs.raw() + r * cols;
    float m = x[0];
    for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      double e = std::exp(static_cast<double>(x[c] - m));
      p[c] = static_cast<float>(e);
      denom += e;
    }
    float inv = static_cast<float>(1.0 / denom);
    for (int64_t c = 0; c < cols; ++c) p[c] *= inv;
    if (t == ignore_index) continue;
    if (t < 0 || t >= cols) {
      throw ContractError("cross_entropy_with_logits: target " + std::to_string(t) +
                          " out of range [0, " + std::to_string(cols) + ")");
    }
    double lse = std::log(denom) + static_cast<double>(m);
    total += lse - static_cast<double>(x[t]);
    ++counted;
  }
  if (counted == 0) {
    throw ContractError("cross_entropy_with_logits: no rows left after ignore_index");
  }
  n.saved.push_back(std::move(probs));
  n.start = counted;  // reused as the divisor
  n.out = Tensor::scalar(static_cast<float>(total / static_cast<double>(counted)));
  return push(std::move(n));
}

NodeId Graph::causal_multihead_attention(NodeId x, NodeId wq, NodeId wk, NodeId wv, NodeId wo,
                                         int heads, int pad_prefix) {
  const Tensor& tx = val(x);
  if (tx.rank() != 2) throw ShapeError("causal_multihead_attention: x must be rank-2");
  int64_t T = tx.dim(0);
  int64_t d = tx.dim(1);
  for (NodeId w : {wq, wk, wv, wo}) {
    const Tensor& tw = val(w);
    if (tw.rank() != 2 || tw.dim(0) != d || tw.dim(1) != d) {
      throw ShapeError("causal_multihead_attention: weight " + tw.shape_str() +
                       " must be [" + std::to_string(d) + "x" + std::to_string(d) + "]");
    }
  }
  if (heads <= 0 || d % heads != 0) {
    throw ShapeError("causal_multihead_attention: model dim " + std::to_string(d) +
                     " not divisible by heads " + std::to_string(heads));
  }
  if (pad_prefix < 0 || pad_prefix > T) {
    throw ContractError("causal_multihead_attention: pad_prefix out of range");
  }
  int64_t dh = d / heads;
  float alpha = 1.0f / std::sqrt(static_cast<float>(dh));

  Node n;
  n.op = Op::causal_multihead_attention;
  n.in = {x, wq, wk, wv, wo};
  n.heads = heads;
  n.pad = pad_prefix;
  n.requires_grad = false;
  for (NodeId in : n.in) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;

  Tensor Q({T, d}), K({T, d}), V({T, d}), probs({heads, T, T}), ctx({T, d});
  auto X = cmap(tx, T, d);
  mmap(Q, T, d).noalias() = X * cmap(val(wq), d, d);
  mmap(K, T, d).noalias() = X * cmap(val(wk), d, d);
  mmap(V, T, d).noalias() = X * cmap(val(wv), d, d);

  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> scores(T, T);
  for (int h = 0; h < heads; ++h) {
    auto Qh = cmap(Q, T, d).middleCols(h * dh, dh);
    auto Kh = cmap(K, T, d).middleCols(h * dh, dh);
    auto Vh = cmap(V, T, d).middleCols(h * dh, dh);
    scores.noalias() = Qh * Kh.transpose() * alpha;
    float* P = probs.raw() + static_cast<int64_t>(h) * T * T;
    std::fill(P, P + T * T, 0.0f);
    for (int64_t i = pad_prefix; i < T; ++i) {
      // causal window [pad_prefix, i]
      float m = scores(i, pad_prefix);
      for (int64_t j = pad_prefix + 1; j <= i; ++j) m = std::max(m, scores(i, j));
      double denom = 0.0;
      for (int64_t j = pad_prefix; j <= i; ++j) {
        double e = std::exp(static_cast<double>(scores(i, j) - m));
        P[i * T + j] = static_cast<float>(e);
        denom += e;
      }
      float inv = static_cast<float>(1.0 / denom);
      for (int64_t j = pad_prefix; j <= i; ++j) P[i * T + j] *= inv;
    }
    ECMat Ph(P, T, T);
    mmap(ctx, T, d).middleCols(h * dh, dh).noalias() = Ph * Vh;
  }
  if (pad_prefix > 0) mmap(ctx, T, d).topRows(pad_prefix).setZero();

  n.out = Tensor({T, d});
  mmap(n.out, T, d).noalias() = cmap(ctx, T, d) * cmap(val(wo), d, d);
  n.saved.push_back(std::move(Q));
  n.saved.push_back(std::move(K));
  n.saved.push_back(std::move(V));
  n.saved.push_back(std::move(probs));
  n.saved.push_back(std::move(ctx));
  return push(std::move(n));
}

NodeId Graph::rms_norm(NodeId x, NodeId gain, float eps) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gain);
  if (tx.rank() != 2 || tg.rank() != 1 || tg.dim(0) != tx.dim(1)) {
    throw ShapeError("rms_norm: x " + tx.shape_str() + " incompatible with gain " +
                     tg.shape_str());
  }
  int64_t T = tx.dim(0), d = tx.dim(1);
  Node n;
  n.op = Op::rms_norm;
  n.in = {x, gain};
  n.eps = eps;
  n.requires_grad = nodes_[x].requires_grad || nodes_[gain].requires_grad;
  n.out = Tensor({T, d});
  Tensor inv({T});
  for (int64_t r = 0; r < T; ++r) {
    const float* xr = tx.raw() + r * d;
    double ms = 0.0;
    for (int64_t c = 0; c < d; ++c) ms += static_cast<double>(xr[c]) * xr[c];
    ms /= static_cast<double>(d);
    float iv = static_cast<float>(1.0 / std::sqrt(ms + eps));
    inv(r) = iv;
    float* yr = n.out.raw() + r * d;
    for (int64_t c = 0; c < d; ++c) yr[c] = xr[c] * iv * tg(c);
  }
  n.saved.push_back(std::move(inv));
  return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId bias, float eps) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gain);
  const Tensor& tb = val(bias);
  if (tx.rank() != 2 || tg.rank() != 1 || tg.dim(0) != tx.dim(1) || !tg.same_shape(tb)) {
    throw ShapeError("layer_norm: x " + tx.shape_str() + " incompatible with gain/bias");
  }
  int64_t T = tx.dim(0), d = tx.dim(1);
  Node n;
  n.op = Op::layer_norm;
  n.in = {x, gain, bias};
  n.eps = eps;
  n.requires_grad = nodes_[x].requires_grad || nodes_[gain].requires_grad ||
                    nodes_[bias].requires_grad;
  n.out = Tensor({T, d});
  Tensor inv({T});
  Tensor normed({T, d});
  for (int64_t r = 0; r < T; ++r) {
    const float* xr = tx.raw() + r * d;
    double mean = 0.0;
    for (int64_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      double u = xr[c] - mean;
      var += u * u;
    }
    var /= static_cast<double>(d);
    float iv = static_cast<float>(1.0 / std::sqrt(var + eps));
    inv(r) = iv;
    float* hr = normed.raw() + r * d;
    float* yr = n.out.raw() + r * d;
    for (int64_t c = 0; c < d; ++c) {
      hr[c] = (xr[c] - static_cast<float>(mean)) * iv;
      yr[c] = hr[c] * tg(c) + tb(c);
    }
  }
  n.saved.push_back(std::move(inv));
  n.saved.push_back(std::move(normed));
  return push(std::move(n));
}

NodeId Graph::silu(NodeId a) {
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::silu;
  n.in = {a};
  n.requires_grad = nodes_[a].requires_grad;
  n.out = Tensor(ta.shape());
  for (int64_t i = 0; i < ta.size(); ++i) n.out(i) = ta(i) * sigmoidf(ta(i));
  return push(std::move(n));
}

NodeId Graph::gelu(NodeId a) {
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::gelu;
  n.in = {a};
  n.requires_grad = nodes_[a].requires_grad;
  n.out = Tensor(ta.shape());
  for (int64_t i = 0; i < ta.size(); ++i) {
    float x = ta(i);
    n.out(i) = 0.5f * x * (1.0f + std::erf(x * kInvSqrt2));
  }
  return push(std::move(n));
}

NodeId Graph::softplus(NodeId a) {
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::softplus;
  n.in = {a};
  n.requires_grad = nodes_[a].requires_grad;
  n.out = Tensor(ta.shape());
  for (int64_t i = 0; i < ta.size(); ++i) n.out(i) = stable_softplus(ta(i));
  return push(std::move(n));
}

NodeId Graph::dropout(NodeId a, float p) {
  if (p < 0.0f || p >= 1.0f) {
    throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
  }
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::dropout;
  n.in = {a};
  n.f = p;
  n.requires_grad = nodes_[a].requires_grad;
  if (!training_ || p == 0.0f) {
    n.out = ta;  // identity in eval mode
    n.out.set_requires_grad(false);
    return push(std::move(n));
  }
  uint64_t node_counter = hash_combine(seed_, 0x9E377900ULL + nodes_.size());
  float keep_scale = 1.0f / (1.0f - p);
  Tensor mask(ta.shape());
  for (int64_t i = 0; i < ta.size(); ++i) {
    double u = u01_from_bits(mix64(node_counter ^ (0xBF58476D1CE4E5B9ULL * static_cast<uint64_t>(i + 1))));
    mask(i) = (u >= static_cast<double>(p)) ? keep_scale : 0.0f;
  }
  n.out = Tensor(ta.shape());
  for (int64_t i = 0; i < ta.size(); ++i) n.out(i) = ta(i) * mask(i);
  n.saved.push_back(std::move(mask));
  return push(std::move(n));
}

NodeId Graph::concat(std::span<const NodeId> parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Tensor& first = val(parts[0]);
  int rank = first.rank();
  if (rank != 1 && rank != 2) throw ShapeError("concat: rank-1 or rank-2 only");
  if (axis < 0 || axis >= rank) throw ShapeError("concat: bad axis");
  Node n;
  n.op = Op::concat;
  n.axis = axis;
  int64_t total = 0;
  for (NodeId id : parts) {
    const Tensor& t = val(id);
    if (t.rank() != rank) throw ShapeError("concat: mixed ranks");
    for (int a = 0; a < rank; ++a) {
      if (a != axis && t.dim(a) != first.dim(a)) {
        throw ShapeError("concat: shape mismatch " + t.shape_str() + " vs " + first.shape_str());
      }
    }
    total += t.dim(axis);
    n.in.push_back(id);
    n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  }
  std::vector<int64_t> out_shape = first.shape();
  out_shape[static_cast<size_t>(axis)] = total;
  n.out = Tensor(out_shape);
  if (rank == 1 || axis == 0) {
    int64_t row_elems = (rank == 2) ? first.dim(1) : 1;
    int64_t offset = 0;
    for (NodeId id : n.in) {
      const Tensor& t = val(id);
      std::copy(t.raw(), t.raw() + t.size(), n.out.raw() + offset * row_elems);
      offset += t.dim(0);
    }
  } else {
    int64_t rows = first.dim(0);
    int64_t col_off = 0;
    for (NodeId id : n.in) {
      const Tensor& t = val(id);
      for (int64_t r = 0; r < rows; ++r) {
        std::copy(t.raw() + r * t.dim(1), t.raw() + (r + 1) * t.dim(1),
                  n.out.raw() + r * total + col_off);
      }
      col_off += t.dim(1);
    }
  }
  return push(std::move(n));
}

NodeId Graph::slice(NodeId a, int axis, int64_t start, int64_t stop) {
  const Tensor& ta = val(a);
  int rank = ta.rank();
  if (rank != 1 && rank != 2) throw ShapeError("slice: rank-1 or rank-2 only");
  if (axis < 0 || axis >= rank) throw ShapeError("slice: bad axis");
  if (start < 0 || stop <= start || stop > ta.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(stop) +
                     ") invalid for " + ta.shape_str());
  }
  Node n;
  n.op = Op::slice;
  n.in = {a};
  n.axis = axis;
  n.start = start;
  n.stop = stop;
  n.requires_grad = nodes_[a].requires_grad;
  std::vector<int64_t> out_shape = ta.shape();
  out_shape[static_cast<size_t>(axis)] = stop - start;
  n.out = Tensor(out_shape);
  if (rank == 1 || axis == 0) {
    int64_t row_elems = (rank == 2) ? ta.dim(1) : 1;
    std::copy(ta.raw() + start * row_elems, ta.raw() + stop * row_elems, n.out.raw());
  } else {
    for (int64_t r = 0; r < ta.dim(0); ++r) {
      std::copy(ta.raw() + r * ta.dim(1) + start, ta.raw() + r * ta.dim(1) + stop,
                n.out.raw() + r * (stop - start));
    }
  }
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::sum;
  n.in = {a};
  n.requires_grad = nodes_[a].requires_grad;
  double total = 0.0;
  for (int64_t i = 0; i < ta.size(); ++i) total += ta(i);
  n.out = Tensor::scalar(static_cast<float>(total));
  return push(std::move(n));
}

NodeId Graph::mean_rows(NodeId a) {
  const Tensor& ta = val(a);
  if (ta.rank() != 2) throw ShapeError("mean_rows: expects rank-2 input");
  int64_t T = ta.dim(0), d = ta.dim(1);
  Node n;
  n.op = Op::mean_rows;
  n.in = {a};
  n.requires_grad = nodes_[a].requires_grad;
  n.out = Tensor({1, d});
  for (int64_t c = 0; c < d; ++c) {
    double acc = 0.0;
    for (int64_t r = 0; r < T; ++r) acc += ta(r, c);
    n.out(0, c) = static_cast<float>(acc / static_cast<double>(T));
  }
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Graph::backward(NodeId loss, float loss_scale) {
  if (ran_backward_) throw ContractError("backward: already ran on this graph");
  if (loss < 0 || static_cast<size_t>(loss) >= nodes_.size()) {
    throw ContractError("backward: bad loss node");
  }
  if (val(loss).size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + val(loss).shape_str());
  }
  ran_backward_ = true;
  if (!nodes_[static_cast<size_t>(loss)].requires_grad) {
    std::cerr << "[e4srec] warning: loss is detached from every grad-requiring input; "
                 "gradient map is empty\n";
    return;
  }
  grad_buf(loss)(0) = loss_scale;
  for (NodeId id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.has_grad || n.op == Op::leaf) continue;
    backward_node(id);
  }
  for (Node& n : nodes_) {
    if (n.bound && n.has_grad && n.bound->trainable) {
      if (n.bound->grad.empty()) n.bound->grad = Tensor::zeros(n.bound->value.shape());
      n.bound->grad.add_scaled(n.grad, 1.0f);
    }
  }
}

std::vector<std::pair<Param*, const Tensor*>> Graph::param_grads() {
  std::vector<std::pair<Param*, const Tensor*>> out;
  for (Node& n : nodes_) {
    if (n.bound && n.has_grad && n.bound->trainable) {
      out.emplace_back(n.bound, &n.grad);
    }
  }
  return out;
}

void Graph::backward_node(NodeId id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  const Tensor& g = n.grad;
  auto needs = [&](size_t k) { return nodes_[static_cast<size_t>(n.in[k])].requires_grad; };

  switch (n.op) {
    case Op::leaf:
      break;

    case Op::matmul: {
      const Tensor& ta = val(n.in[0]);
      const Tensor& tb = val(n.in[1]);
      auto A = cmap(ta, ta.dim(0), ta.dim(1));
      auto B = cmap(tb, tb.dim(0), tb.dim(1));
      auto G = cmap(g, g.dim(0), g.dim(1));
      if (needs(0)) {
        Tensor& da = grad_buf(n.in[0]);
        auto DA = mmap(da, da.dim(0), da.dim(1));
        // dA_eff = G * B_eff^T, transposed back if A was transposed
        if (!n.ta && !n.tb) DA.noalias() += G * B.transpose();
        else if (!n.ta && n.tb) DA.noalias() += G * B;
        else if (n.ta && !n.tb) DA.noalias() += B * G.transpose();
        else DA.noalias() += B.transpose() * G.transpose();
      }
      if (needs(1)) {
        Tensor& db = grad_buf(n.in[1]);
        auto DB = mmap(db, db.dim(0), db.dim(1));
        if (!n.ta && !n.tb) DB.noalias() += A.transpose() * G;
        else if (!n.ta && n.tb) DB.noalias() += G.transpose() * A;
        else if (n.ta && !n.tb) DB.noalias() += A * G;
        else DB.noalias() += G.transpose() * A.transpose();
      }
      break;
    }

    case Op::add: {
      const Tensor& tb = val(n.in[1]);
      if (needs(0)) grad_buf(n.in[0]).add_scaled(g, 1.0f);
      if (needs(1)) {
        Tensor& db = grad_buf(n.in[1]);
        if (tb.same_shape(g)) {
          db.add_scaled(g, 1.0f);
        } else {
          int64_t rows = g.dim(0), cols = g.dim(1);
          for (int64_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int64_t r = 0; r < rows; ++r) acc += g(r, c);
            db(c) += static_cast<float>(acc);
          }
        }
      }
      break;
    }

    case Op::sub: {
      if (needs(0)) grad_buf(n.in[0]).add_scaled(g, 1.0f);
      if (needs(1)) grad_buf(n.in[1]).add_scaled(g, -1.0f);
      break;
    }

    case Op::mul: {
      const Tensor& ta = val(n.in[0]);
      const Tensor& tb = val(n.in[1]);
      if (needs(0)) {
        Tensor& da = grad_buf(n.in[0]);
        for (int64_t i = 0; i < g.size(); ++i) da(i) += g(i) * tb(i);
      }
      if (needs(1)) {
        Tensor& db = grad_buf(n.in[1]);
        for (int64_t i = 0; i < g.size(); ++i) db(i) += g(i) * ta(i);
      }
      break;
    }

    case Op::scale: {
      if (needs(0)) grad_buf(n.in[0]).add_scaled(g, n.f);
      break;
    }

    case Op::linear: {
      const Tensor& tx = val(n.in[0]);
      const Tensor& tw = val(n.in[1]);
      auto X = cmap(tx, tx.dim(0), tx.dim(1));
      auto W = cmap(tw, tw.dim(0), tw.dim(1));
      auto G = cmap(g, g.dim(0), g.dim(1));
      if (needs(0)) mmap(grad_buf(n.in[0]), tx.dim(0), tx.dim(1)).noalias() += G * W.transpose();
      if (needs(1)) mmap(grad_buf(n.in[1]), tw.dim(0), tw.dim(1)).noalias() += X.transpose() * G;
      if (n.in.size() == 3 && needs(2)) {
        Tensor& db = grad_buf(n.in[2]);
        for (int64_t c = 0; c < g.dim(1); ++c) {
          double acc = 0.0;
          for (int64_t r = 0; r < g.dim(0); ++r) acc += g(r, c);
          db(c) += static_cast<float>(acc);
        }
      }
      break;
    }

    case Op::embedding_lookup: {
      if (!needs(0)) break;
      Tensor& dt = grad_buf(n.in[0]);
      int64_t d = g.dim(1);
      for (size_t t = 0; t < n.idx.size(); ++t) {
        float* dst = dt.raw() + static_cast<int64_t>(n.idx[t]) * d;
        const float* src = g.raw() + static_cast<int64_t>(t) * d;
        for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
      }
      break;
    }

    case Op::softmax: {
      if (!needs(0)) break;
      Tensor& dx = grad_buf(n.in[0]);
      const Tensor& p = n.out;
      int64_t cols = p.dim(p.rank() - 1);
      int64_t rows = p.size() / cols;
      for (int64_t r = 0; r < rows; ++r) {
        const float* pr = p.raw() + r * cols;
        const float* gr = g.raw() + r * cols;
        float* dr = dx.raw() + r * cols;
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) dot += static_cast<double>(gr[c]) * pr[c];
        for (int64_t c = 0; c < cols; ++c) {
          dr[c] += pr[c] * static_cast<float>(static_cast<double>(gr[c]) - dot);
        }
      }
      break;
    }

    case Op::cross_entropy_with_logits: {
      if (!needs(0)) break;
      Tensor& dx = grad_buf(n.in[0]);
      const Tensor& probs = n.saved[0];
      float go = g(0) / static_cast<float>(n.start);  // n.start == counted rows
      int64_t cols = probs.dim(1);
      for (int64_t r = 0; r < probs.dim(0); ++r) {
        int32_t t = n.idx[static_cast<size_t>(r)];
        if (t == n.ignore) continue;
        float* dr = dx.raw() + r * cols;
        const float* pr = probs.raw() + r * cols;
        for (int64_t c = 0; c < cols; ++c) dr[c] += go * pr[c];
        dr[t] -= go;
      }
      break;
    }

    case Op::causal_multihead_attention: {
      const Tensor& tx = val(n.in[0]);
      int64_t T = tx.dim(0), d = tx.dim(1);
      int heads = n.heads;
      int64_t dh = d / heads;
      float alpha = 1.0f / std::sqrt(static_cast<float>(dh));
      const Tensor& Q = n.saved[0];
      const Tensor& K = n.saved[1];
      const Tensor& V = n.saved[2];
      const Tensor& probs = n.saved[3];
      const Tensor& ctx = n.saved[4];
      auto G = cmap(g, T, d);

      // d(out)/d(wo) and d(out)/d(ctx)
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dctx(T, d);
      dctx.noalias() = G * cmap(val(n.in[4]), d, d).transpose();
      if (n.pad > 0) dctx.topRows(n.pad).setZero();
      if (needs(4)) {
        mmap(grad_buf(n.in[4]), d, d).noalias() += cmap(ctx, T, d).transpose() * G;
      }

      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dQ(T, d), dK(T, d),
          dV(T, d), dP(T, T), dS(T, T);
      dQ.setZero();
      dK.setZero();
      dV.setZero();
      for (int h = 0; h < heads; ++h) {
        ECMat Ph(probs.raw() + static_cast<int64_t>(h) * T * T, T, T);
        auto Vh = cmap(V, T, d).middleCols(h * dh, dh);
        auto Qh = cmap(Q, T, d).middleCols(h * dh, dh);
        auto Kh = cmap(K, T, d).middleCols(h * dh, dh);
        auto dctxh = dctx.middleCols(h * dh, dh);
        dP.noalias() = dctxh * Vh.transpose();
        dV.middleCols(h * dh, dh).noalias() += Ph.transpose() * dctxh;
        // softmax backward restricted to each causal window
        dS.setZero();
        for (int64_t i = n.pad; i < T; ++i) {
          double dot = 0.0;
          for (int64_t j = n.pad; j <= i; ++j) {
            dot += static_cast<double>(dP(i, j)) * Ph(i, j);
          }
          for (int64_t j = n.pad; j <= i; ++j) {
            dS(i, j) = Ph(i, j) * static_cast<float>(static_cast<double>(dP(i, j)) - dot);
          }
        }
        dQ.middleCols(h * dh, dh).noalias() += dS * Kh * alpha;
        dK.middleCols(h * dh, dh).noalias() += dS.transpose() * Qh * alpha;
      }

      auto X = cmap(tx, T, d);
      if (needs(0)) {
        auto DX = mmap(grad_buf(n.in[0]), T, d);
        DX.noalias() += dQ * cmap(val(n.in[1]), d, d).transpose();
        DX.noalias() += dK * cmap(val(n.in[2]), d, d).transpose();
        DX.noalias() += dV * cmap(val(n.in[3]), d, d).transpose();
      }
      if (needs(1)) mmap(grad_buf(n.in[1]), d, d).noalias() += X.transpose() * dQ;
      if (needs(2)) mmap(grad_buf(n.in[2]), d, d).noalias() += X.transpose() * dK;
      if (needs(3)) mmap(grad_buf(n.in[3]), d, d).noalias() += X.transpose() * dV;
      break;
    }

    case Op::rms_norm: {
      const Tensor& tx = val(n.in[0]);
      const Tensor& tg = val(n.in[1]);
      const Tensor& inv = n.saved[0];
      int64_t T = tx.dim(0), d = tx.dim(1);
      for (int64_t r = 0; r < T; ++r) {
        const float* xr = tx.raw() + r * d;
        const float* gr = g.raw() + r * d;
        float iv = inv(r);
        if (needs(0)) {
          double dot = 0.0;
          for (int64_t c = 0; c < d; ++c) {
            dot += static_cast<double>(gr[c]) * tg(c) * xr[c];
          }
          float k = static_cast<float>(dot) * iv * iv * iv / static_cast<float>(d);
          float* dr = grad_buf(n.in[0]).raw() + r * d;
          for (int64_t c = 0; c < d; ++c) dr[c] += gr[c] * tg(c) * iv - xr[c] * k;
        }
        if (needs(1)) {
          Tensor& dg = grad_buf(n.in[1]);
          for (int64_t c = 0; c < d; ++c) dg(c) += gr[c] * xr[c] * iv;
        }
      }
      break;
    }

    case Op::layer_norm: {
      const Tensor& tg = val(n.in[1]);
      const Tensor& inv = n.saved[0];
      const Tensor& normed = n.saved[1];
      int64_t T = g.dim(0), d = g.dim(1);
      for (int64_t r = 0; r < T; ++r) {
        const float* gr = g.raw() + r * d;
        const float* hr = normed.raw() + r * d;
        float iv = inv(r);
        if (needs(0)) {
          double mean_u = 0.0, mean_uh = 0.0;
          for (int64_t c = 0; c < d; ++c) {
            double u = static_cast<double>(gr[c]) * tg(c);
            mean_u += u;
            mean_uh += u * hr[c];
          }
          mean_u /= static_cast<double>(d);
          mean_uh /= static_cast<double>(d);
          float* dr = grad_buf(n.in[0]).raw() + r * d;
          for (int64_t c = 0; c < d; ++c) {
            double u = static_cast<double>(gr[c]) * tg(c);
            dr[c] += static_cast<float>(iv * (u - mean_u - hr[c] * mean_uh));
          }
        }
        if (needs(1)) {
          Tensor& dg = grad_buf(n.in[1]);
          for (int64_t c = 0; c < d; ++c) dg(c) += gr[c] * hr[c];
        }
        if (needs(2)) {
          Tensor& db = grad_buf(n.in[2]);
          for (int64_t c = 0; c < d; ++c) db(c) += gr[c];
        }
      }
      break;
    }

    case Op::silu: {
      if (!needs(0)) break;
      const Tensor& tx = val(n.in[0]);
      Tensor& dx = grad_buf(n.in[0]);
      for (int64_t i = 0; i < g.size(); ++i) {
        float s = sigmoidf(tx(i));
        dx(i) += g(i) * (s + tx(i) * s * (1.0f - s));
      }
      break;
    }

    case Op::gelu: {
      if (!needs(0)) break;
      const Tensor& tx = val(n.in[0]);
      Tensor& dx = grad_buf(n.in[0]);
      for (int64_t i = 0; i < g.size(); ++i) {
        float x = tx(i);
        float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
        float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
        dx(i) += g(i) * (cdf + x * pdf);
      }
      break;
    }

    case Op::softplus: {
      if (!needs(0)) break;
      const Tensor& tx = val(n.in[0]);
      Tensor& dx = grad_buf(n.in[0]);
      for (int64_t i = 0; i < g.size(); ++i) dx(i) += g(i) * sigmoidf(tx(i));
      break;
    }

    case Op::dropout: {
      if (!needs(0)) break;
      Tensor& dx = grad_buf(n.in[0]);
      if (n.saved.empty()) {
        dx.add_scaled(g, 1.0f);  // identity (eval mode or p == 0)
      } else {
        const Tensor& mask = n.saved[0];
        for (int64_t i = 0; i < g.size(); ++i) dx(i) += g(i) * mask(i);
      }
      break;
    }

    case Op::concat: {
      int rank = n.out.rank();
      if (rank == 1 || n.axis == 0) {
        int64_t row_elems = (rank == 2) ? n.out.dim(1) : 1;
        int64_t offset = 0;
        for (size_t k = 0; k < n.in.size(); ++k) {
          const Tensor& part = val(n.in[k]);
          if (needs(k)) {
            Tensor& dp = grad_buf(n.in[k]);
            const float* src = g.raw() + offset * row_elems;
            for (int64_t i = 0; i < part.size(); ++i) dp(i) += src[i];
          }
          offset += part.dim(0);
        }
      } else {
        int64_t rows = n.out.dim(0), total = n.out.dim(1);
        int64_t col_off = 0;
        for (size_t k = 0; k < n.in.size(); ++k) {
          const Tensor& part = val(n.in[k]);
          int64_t w = part.dim(1);
          if (needs(k)) {
            Tensor& dp = grad_buf(n.in[k]);
            for (int64_t r = 0; r < rows; ++r) {
              const float* src = g.raw() + r * total + col_off;
              float* dst = dp.raw() + r * w;
              for (int64_t c = 0; c < w; ++c) dst[c] += src[c];
            }
          }
          col_off += w;
        }
      }
      break;
    }

    case Op::slice: {
      if (!needs(0)) break;
      Tensor& dx = grad_buf(n.in[0]);
      const Tensor& tx = val(n.in[0]);
      if (tx.rank() == 1 || n.axis == 0) {
        int64_t row_elems = (tx.rank() == 2) ? tx.dim(1) : 1;
        float* dst = dx.raw() + n.start * row_elems;
        for (int64_t i = 0; i < g.size(); ++i) dst[i] += g(i);
      } else {
        int64_t w = n.stop - n.start;
        for (int64_t r = 0; r < tx.dim(0); ++r) {
          float* dst = dx.raw() + r * tx.dim(1) + n.start;
          const float* src = g.raw() + r * w;
          for (int64_t c = 0; c < w; ++c) dst[c] += src[c];
        }
      }
      break;
    }

    case Op::sum: {
      if (!needs(0)) break;
      Tensor& dx = grad_buf(n.in[0]);
      float go = g(0);
      for (int64_t i = 0; i < dx.size(); ++i) dx(i) += go;
      break;
    }

    case Op::mean_rows: {
      if (!needs(0)) break;
      Tensor& dx = grad_buf(n.in[0]);
      const Tensor& tx = val(n.in[0]);
      int64_t T = tx.dim(0), d = tx.dim(1);
      float s = 1.0f / static_cast<float>(T);
      for (int64_t r = 0; r < T; ++r) {
        for (int64_t c = 0; c < d; ++c) dx(r, c) += g(0, c) * s;
      }
      break;
    }
  }
}

}  // namespace e4srec::ad
