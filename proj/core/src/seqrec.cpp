#include "e4srec/seqrec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "e4srec/errors.hpp"
#include "e4srec/eval.hpp"
#include "e4srec/optim.hpp"
#include "e4srec/rng.hpp"

namespace e4srec::seqrec {

using ad::Graph;
using ad::NodeId;
using ad::Param;
using ad::Tensor;

// ---------------------------------------------------------------------------
// popularity
// ---------------------------------------------------------------------------

std::vector<int64_t> train_item_counts(const data::SplitDataset& split) {
  std::vector<int64_t> counts(static_cast<size_t>(split.n_items), 0);
  for (const auto& seq : split.train) {
    for (int32_t item : seq) ++counts[static_cast<size_t>(item)];
  }
  return counts;
}

std::vector<int32_t> rank_pop(std::span<const int64_t> counts) {
  std::vector<int32_t> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
    if (counts[static_cast<size_t>(a)] != counts[static_cast<size_t>(b)]) {
      return counts[static_cast<size_t>(a)] > counts[static_cast<size_t>(b)];
    }
    return a < b;
  });
  return order;
}

std::vector<float> pop_scores(const data::SplitDataset& split) {
  auto counts = train_item_counts(split);
  std::vector<float> scores(counts.size());
  for (size_t i = 0; i < counts.size(); ++i) scores[i] = static_cast<float>(counts[i]);
  return scores;
}

const char* provenance_name(Provenance p) {
  return p == Provenance::sasrec ? "sasrec" : "bpr";
}

// ---------------------------------------------------------------------------
// SASRec
// ---------------------------------------------------------------------------

SASRecModel::SASRecModel(int32_t n_items, SASRecConfig config)
    : n_items_(n_items), config_(config) {
  if (n_items < 1) throw ConfigError("SASRecModel: need at least one item");
  if (config_.d % config_.heads != 0) {
    throw ConfigError("SASRecModel: d must be divisible by heads");
  }
  Rng rng(config_.seed);
  int64_t d = config_.d;
  item_emb_ = Param("item_emb", Tensor::xavier(n_items + 1, d, rng));
  for (int64_t c = 0; c < d; ++c) item_emb_.value(n_items, c) = 0.0f;  // padding row
  pos_emb_ = Param("pos_emb", Tensor::xavier(config_.max_len, d, rng));
  blocks_.resize(static_cast<size_t>(config_.blocks));
  for (size_t b = 0; b < blocks_.size(); ++b) {
    std::string prefix = "blocks." + std::to_string(b) + ".";
    Block& blk = blocks_[b];
    blk.wq = Param(prefix + "wq", Tensor::xavier(d, d, rng));
    blk.wk = Param(prefix + "wk", Tensor::xavier(d, d, rng));
    blk.wv = Param(prefix + "wv", Tensor::xavier(d, d, rng));
    blk.wo = Param(prefix + "wo", Tensor::xavier(d, d, rng));
    blk.attn_norm_g = Param(prefix + "attn_norm_g", Tensor::full({d}, 1.0f));
    blk.attn_norm_b = Param(prefix + "attn_norm_b", Tensor::zeros({d}));
    blk.ffn_w1 = Param(prefix + "ffn_w1", Tensor::xavier(d, d, rng));
    blk.ffn_b1 = Param(prefix + "ffn_b1", Tensor::zeros({d}));
    blk.ffn_w2 = Param(prefix + "ffn_w2", Tensor::xavier(d, d, rng));
    blk.ffn_b2 = Param(prefix + "ffn_b2", Tensor::zeros({d}));
    blk.ffn_norm_g = Param(prefix + "ffn_norm_g", Tensor::full({d}, 1.0f));
    blk.ffn_norm_b = Param(prefix + "ffn_norm_b", Tensor::zeros({d}));
  }
  out_norm_g_ = Param("out_norm_g", Tensor::full({d}, 1.0f));
  out_norm_b_ = Param("out_norm_b", Tensor::zeros({d}));
}

namespace {

struct TrainBind {
  NodeId operator()(Graph& g, Param& p) const { return g.param(p); }
};

struct EvalBind {
  NodeId operator()(Graph& g, const Param& p) const { return g.borrow(p.value); }
};

}  // namespace

// Pre-LN transformer encoder over the truncated history.
template <typename Self, typename Bind>
std::pair<NodeId, NodeId> SASRecModel::hidden_net(Self& self, Graph& g,
                                                  std::span<const int32_t> items, Bind bind) {
  const SASRecConfig& cfg = self.config_;
  if (items.empty()) throw ContractError("sasrec: empty input sequence");
  for (int32_t id : items) {
    if (id < 0 || id >= self.n_items_) {
      throw ContractError("sasrec: item id " + std::to_string(id) + " out of range [0, " +
                          std::to_string(self.n_items_) + ")");
    }
  }
  auto ids = data::truncate(items, cfg.max_len);
  int64_t T = static_cast<int64_t>(ids.size());
  std::vector<int32_t> positions(static_cast<size_t>(T));
  std::iota(positions.begin(), positions.end(), 0);

  NodeId emb_table = bind(g, self.item_emb_);
  NodeId x = g.add(g.embedding_lookup(emb_table, ids),
                   g.embedding_lookup(bind(g, self.pos_emb_), positions));
  x = g.dropout(x, cfg.dropout);
  for (auto& blk : self.blocks_) {
    NodeId h = g.layer_norm(x, bind(g, blk.attn_norm_g), bind(g, blk.attn_norm_b));
    NodeId a = g.causal_multihead_attention(h, bind(g, blk.wq), bind(g, blk.wk),
                                            bind(g, blk.wv), bind(g, blk.wo), cfg.heads);
    x = g.add(x, g.dropout(a, cfg.dropout));
    NodeId f = g.layer_norm(x, bind(g, blk.ffn_norm_g), bind(g, blk.ffn_norm_b));
    f = g.linear(f, bind(g, blk.ffn_w1), bind(g, blk.ffn_b1));
    f = g.gelu(f);
    f = g.dropout(f, cfg.dropout);
    f = g.linear(f, bind(g, blk.ffn_w2), bind(g, blk.ffn_b2));
    x = g.add(x, g.dropout(f, cfg.dropout));
  }
  x = g.layer_norm(x, bind(g, self.out_norm_g_), bind(g, self.out_norm_b_));
  return {x, emb_table};
}

NodeId SASRecModel::build_position_logits(Graph& g, std::span<const int32_t> items) {
  auto [hidden, table] = hidden_net(*this, g, items, TrainBind{});
  return g.matmul(hidden, g.slice(table, 0, 0, n_items_), false, true);
}

NodeId SASRecModel::build_position_logits(Graph& g, std::span<const int32_t> items) const {
  auto [hidden, table] = hidden_net(*this, g, items, EvalBind{});
  return g.matmul(hidden, g.slice(table, 0, 0, n_items_), false, true);
}

std::vector<float> SASRecModel::score_all(std::span<const int32_t> history) const {
  Graph g(0, /*training=*/false);
  auto [hidden, table] = hidden_net(*this, g, history, EvalBind{});
  int64_t T = g.value_of(hidden).rows();
  NodeId last = g.slice(hidden, 0, T - 1, T);
  NodeId logits = g.matmul(last, g.slice(table, 0, 0, n_items_), false, true);
  const Tensor& out = g.value_of(logits);
  return std::vector<float>(out.data().begin(), out.data().end());
}

std::vector<Param*> SASRecModel::params() {
  std::vector<Param*> out{&item_emb_, &pos_emb_};
  for (auto& blk : blocks_) {
    for (Param* p : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.attn_norm_g, &blk.attn_norm_b,
                     &blk.ffn_w1, &blk.ffn_b1, &blk.ffn_w2, &blk.ffn_b2, &blk.ffn_norm_g,
                     &blk.ffn_norm_b}) {
      out.push_back(p);
    }
  }
  out.push_back(&out_norm_g_);
  out.push_back(&out_norm_b_);
  return out;
}

std::vector<const Param*> SASRecModel::params() const {
  auto mutable_params = const_cast<SASRecModel*>(this)->params();
  return std::vector<const Param*>(mutable_params.begin(), mutable_params.end());
}

namespace {

struct Snapshot {
  std::vector<Tensor> values;

  static Snapshot take(const std::vector<Param*>& params) {
    Snapshot s;
    s.values.reserve(params.size());
    for (const Param* p : params) s.values.push_back(p->value);
    return s;
  }
  void restore(const std::vector<Param*>& params) const {
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
  }
};

}  // namespace

SASRecModel train_sasrec(const data::SplitDataset& split, const SASRecConfig& config,
                         TrainStats* stats, const ProgressFn& progress) {
  SASRecModel model(split.n_items, config);
  auto params = model.params();
  ad::Adam opt(params, {});
  int64_t users = split.user_count();
  int64_t batches_per_epoch = (users + config.batch_size - 1) / config.batch_size;
  ad::LRSchedule schedule{config.lr, config.warmup_steps,
                          std::max<int64_t>(1, batches_per_epoch * config.epochs)};

  eval::ScoreFn scorer = [&model](int32_t, std::span<const int32_t> history) {
    return model.score_all(history);
  };

  Rng rng(hash_combine(config.seed, 0x5A55EC));
  std::vector<int32_t> order(static_cast<size_t>(users));
  std::iota(order.begin(), order.end(), 0);

  Snapshot best;
  double best_hr = -1.0;
  int best_epoch = -1;
  int since_best = 0;
  int64_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t instances = 0;
    try {
      for (int64_t start = 0; start < users; start += config.batch_size) {
        int64_t end = std::min(users, start + config.batch_size);
        float inv = 1.0f / static_cast<float>(end - start);
        for (int64_t k = start; k < end; ++k) {
          int32_t u = order[static_cast<size_t>(k)];
          const auto& seq = split.train[static_cast<size_t>(u)];
          // window of the most recent max_len transitions
          auto window = data::truncate(seq, config.max_len + 1);
          std::span<const int32_t> input(window.data(), window.size() - 1);
          std::vector<int32_t> targets(window.begin() + 1, window.end());
          Graph g(hash_combine(config.seed, static_cast<uint64_t>(step * 131071 + u)),
                  /*training=*/true);
          NodeId logits = model.build_position_logits(g, input);
          NodeId loss = g.cross_entropy_with_logits(logits, targets);
          g.backward(loss, inv);
          epoch_loss += g.value_of(loss)(0);
          ++instances;
        }
        opt.step(schedule.at(step));
        ++step;
      }
    } catch (const NumericError& e) {
      throw NumericError("train_sasrec: diverged at epoch " + std::to_string(epoch) + ": " +
                         e.what());
    }
    epoch_loss /= static_cast<double>(std::max<int64_t>(1, instances));

    auto ranks = eval::full_ranks(scorer, split, eval::Split::validation);
    double hr10 = eval::hr_at_k(ranks, 10);
    if (stats) {
      stats->epoch_loss.push_back(epoch_loss);
      stats->epoch_val_hr10.push_back(hr10);
    }
    if (progress) progress(epoch, epoch_loss, hr10);
    if (hr10 > best_hr) {
      best_hr = hr10;
      best_epoch = epoch;
      best = Snapshot::take(params);
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  if (best_epoch >= 0) best.restore(params);
  if (stats) {
    stats->best_epoch = best_epoch;
    stats->best_val_hr10 = best_hr;
  }
  return model;
}

// ---------------------------------------------------------------------------
// BPR
// ---------------------------------------------------------------------------

BPRModel::BPRModel(int32_t n_users, int32_t n_items, int d, uint64_t seed) {
  Rng rng(seed);
  user_f_ = Param("user_factors", Tensor::xavier(n_users, d, rng));
  item_f_ = Param("item_factors", Tensor::xavier(n_items, d, rng));
}

float BPRModel::score(int32_t user, int32_t item) const {
  int64_t d = user_f_.value.cols();
  const float* u = user_f_.value.raw() + static_cast<int64_t>(user) * d;
  const float* v = item_f_.value.raw() + static_cast<int64_t>(item) * d;
  double acc = 0.0;
  for (int64_t c = 0; c < d; ++c) acc += static_cast<double>(u[c]) * v[c];
  return static_cast<float>(acc);
}

std::vector<float> BPRModel::score_all(int32_t user) const {
  std::vector<float> scores(static_cast<size_t>(n_items()));
  for (int32_t i = 0; i < n_items(); ++i) scores[static_cast<size_t>(i)] = score(user, i);
  return scores;
}

BPRModel train_bpr(const data::SplitDataset& split, const BPRConfig& config, TrainStats* stats,
                   const ProgressFn& progress) {
  BPRModel model(split.user_count(), split.n_items, config.d, config.seed);
  model.set_config(config);
  std::vector<Param*> params{&model.user_factors(), &model.item_factors()};
  ad::Adam opt(params, {});

  struct Pair {
    int32_t user;
    int32_t item;
  };
  std::vector<Pair> positives;
  std::vector<std::vector<bool>> seen(static_cast<size_t>(split.user_count()),
                                      std::vector<bool>(static_cast<size_t>(split.n_items)));
  for (int32_t u = 0; u < split.user_count(); ++u) {
    for (int32_t item : split.train[static_cast<size_t>(u)]) {
      positives.push_back({u, item});
      seen[static_cast<size_t>(u)][static_cast<size_t>(item)] = true;
    }
  }

  int64_t samples_per_epoch = static_cast<int64_t>(positives.size()) * config.negatives;
  int64_t batches_per_epoch = (samples_per_epoch + config.batch_size - 1) / config.batch_size;
  ad::LRSchedule schedule{config.lr, 0, std::max<int64_t>(1, batches_per_epoch * config.epochs)};

  Rng rng(hash_combine(config.seed, 0xB9B9));
  int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(positives);
    double epoch_loss = 0.0;
    int64_t n_samples = 0;
    int64_t in_batch = 0;
    try {
      for (const Pair& pos : positives) {
        for (int neg_i = 0; neg_i < config.negatives; ++neg_i) {
          int32_t neg;
          do {
            neg = static_cast<int32_t>(rng.uniform_int(split.n_items));
          } while (seen[static_cast<size_t>(pos.user)][static_cast<size_t>(neg)]);
          Graph g;
          std::vector<int32_t> uid{pos.user}, pid{pos.item}, nid{neg};
          NodeId u_row = g.embedding_lookup(g.param(model.user_factors()), uid);
          NodeId items = g.param(model.item_factors());
          NodeId s_pos = g.sum(g.mul(u_row, g.embedding_lookup(items, pid)));
          NodeId s_neg = g.sum(g.mul(u_row, g.embedding_lookup(items, nid)));
          // -log sigmoid(s_pos - s_neg)
          NodeId loss = g.softplus(g.sub(s_neg, s_pos));
          g.backward(loss, 1.0f / static_cast<float>(config.batch_size));
          epoch_loss += g.value_of(loss)(0);
          ++n_samples;
          if (++in_batch == config.batch_size) {
            opt.step(schedule.at(step));
            ++step;
            in_batch = 0;
          }
        }
      }
      if (in_batch > 0) {
        opt.step(schedule.at(std::min(step, schedule.total_steps)));
        ++step;
        in_batch = 0;
      }
    } catch (const NumericError& e) {
      throw NumericError("train_bpr: diverged at epoch " + std::to_string(epoch) + ": " +
                         e.what());
    }
    epoch_loss /= static_cast<double>(std::max<int64_t>(1, n_samples));
    if (stats) stats->epoch_loss.push_back(epoch_loss);
    if (progress) progress(epoch, epoch_loss, 0.0);
  }
  return model;
}

// ---------------------------------------------------------------------------
// extraction
// ---------------------------------------------------------------------------

namespace {

Tensor copy_rows(const Tensor& table, int64_t rows) {
  Tensor out({rows, table.cols()});
  std::copy(table.raw(), table.raw() + rows * table.cols(), out.raw());
  return out;
}

}  // namespace

ItemEmbeddingTable extract_item_embeddings(const SASRecModel& model) {
  // padding row dropped, real rows copied without any transformation
  return {copy_rows(model.raw_item_table(), model.n_items()), Provenance::sasrec};
}

ItemEmbeddingTable extract_item_embeddings(const BPRModel& model) {
  return {copy_rows(model.item_table(), model.n_items()), Provenance::bpr};
}

}  // namespace e4srec::seqrec
