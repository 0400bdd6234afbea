#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "e4srec/data.hpp"
#include "e4srec/graph.hpp"

namespace e4srec::seqrec {

// ---------------------------------------------------------------------------
// popularity baseline
// ---------------------------------------------------------------------------

std::vector<int64_t> train_item_counts(const data::SplitDataset& split);
// items by descending count, ties by ascending item index
std::vector<int32_t> rank_pop(std::span<const int64_t> counts);
// counts as scores, directly usable with the evaluation tie rule
std::vector<float> pop_scores(const data::SplitDataset& split);

// ---------------------------------------------------------------------------
// extracted ID embeddings (the injection source)
// ---------------------------------------------------------------------------

enum class Provenance : uint8_t { sasrec = 0, bpr = 1 };

struct ItemEmbeddingTable {
  ad::Tensor table;  // N x d_s, row i is item i, copied verbatim
  Provenance provenance = Provenance::sasrec;

  int32_t item_count() const { return static_cast<int32_t>(table.rows()); }
  int32_t width() const { return static_cast<int32_t>(table.cols()); }
};

const char* provenance_name(Provenance p);

// ---------------------------------------------------------------------------
// SASRec
// ---------------------------------------------------------------------------

struct SASRecConfig {
  int d = 64;  // embedding width d_s
  int max_len = 50;
  int blocks = 2;
  int heads = 2;
  float dropout = 0.2f;
  int epochs = 30;
  float lr = 1e-3f;
  int warmup_steps = 0;
  int batch_size = 32;
  int patience = 5;  // epochs without validation improvement before stopping
  uint64_t seed = 42;
};

class SASRecModel {
 public:
  SASRecModel(int32_t n_items, SASRecConfig config);

  // Logits over the N real items at every position of `items` (truncated to
  // the most recent max_len), tied against the item embedding table. The
  // non-const overload binds parameters for training; the const one builds a
  // frozen graph.
  ad::NodeId build_position_logits(ad::Graph& g, std::span<const int32_t> items);
  ad::NodeId build_position_logits(ad::Graph& g, std::span<const int32_t> items) const;

  // Next-item scores after `history` (eval mode, dropout off).
  std::vector<float> score_all(std::span<const int32_t> history) const;

  std::vector<ad::Param*> params();
  std::vector<const ad::Param*> params() const;
  // the full (N+1) x d table including the padding row
  const ad::Tensor& raw_item_table() const { return item_emb_.value; }
  int32_t n_items() const { return n_items_; }
  const SASRecConfig& config() const { return config_; }

 private:
  struct Block {
    ad::Param wq, wk, wv, wo;
    ad::Param attn_norm_g, attn_norm_b;
    ad::Param ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    ad::Param ffn_norm_g, ffn_norm_b;
  };

  // shared forward builder; Self is (const) SASRecModel, Bind maps a Param to
  // a leaf node. Returns {final hidden states, item-table node}.
  template <typename Self, typename Bind>
  static std::pair<ad::NodeId, ad::NodeId> hidden_net(Self& self, ad::Graph& g,
                                                      std::span<const int32_t> items, Bind bind);

  int32_t n_items_;
  SASRecConfig config_;
  ad::Param item_emb_;  // (N+1) x d; row N is the padding id, pinned at zero
  ad::Param pos_emb_;   // max_len x d
  std::vector<Block> blocks_;
  ad::Param out_norm_g_, out_norm_b_;
};

struct TrainStats {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_val_hr10;
  int best_epoch = -1;
  double best_val_hr10 = 0.0;
};

using ProgressFn = std::function<void(int epoch, double loss, double val_hr10)>;

SASRecModel train_sasrec(const data::SplitDataset& split, const SASRecConfig& config,
                         TrainStats* stats = nullptr, const ProgressFn& progress = nullptr);

// ---------------------------------------------------------------------------
// BPR matrix factorization
// ---------------------------------------------------------------------------

struct BPRConfig {
  int d = 64;
  int epochs = 12;
  float lr = 5e-3f;
  int negatives = 1;
  int batch_size = 256;
  uint64_t seed = 42;
};

class BPRModel {
 public:
  BPRModel(int32_t n_users, int32_t n_items, int d, uint64_t seed);

  float score(int32_t user, int32_t item) const;
  std::vector<float> score_all(int32_t user) const;

  ad::Param& user_factors() { return user_f_; }
  ad::Param& item_factors() { return item_f_; }
  const ad::Tensor& item_table() const { return item_f_.value; }
  int32_t n_items() const { return static_cast<int32_t>(item_f_.value.rows()); }
  int32_t n_users() const { return static_cast<int32_t>(user_f_.value.rows()); }
  const BPRConfig& config() const { return config_; }
  void set_config(const BPRConfig& c) { config_ = c; }

 private:
  ad::Param user_f_;  // U x d
  ad::Param item_f_;  // N x d
  BPRConfig config_;
};

BPRModel train_bpr(const data::SplitDataset& split, const BPRConfig& config,
                   TrainStats* stats = nullptr, const ProgressFn& progress = nullptr);

// Rows 0..N-1 of the trained table, bit-for-bit, padding row dropped.
ItemEmbeddingTable extract_item_embeddings(const SASRecModel& model);
ItemEmbeddingTable extract_item_embeddings(const BPRModel& model);

}  // namespace e4srec::seqrec
