#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "e4srec/graph.hpp"

namespace e4srec::lm {

// fixed special ids, documented part of every checkpoint
struct SpecialTokens {
  static constexpr int32_t pad = 0;
  static constexpr int32_t bos = 1;
  static constexpr int32_t eos = 2;
  static constexpr int32_t unk = 3;
};

// lowercased whitespace-delimited word pieces
std::vector<std::string> split_words(const std::string& text);

class Vocabulary {
 public:
  Vocabulary();

  // Most frequent words from the corpus, capped at max_size (specials
  // included in the budget); frequency ties resolve by first appearance.
  static Vocabulary build(std::span<const std::string> corpus, int max_size);
  static Vocabulary from_words(std::vector<std::string> words);  // checkpoint load

  std::vector<int32_t> tokenize(const std::string& text) const;
  std::string detokenize(std::span<const int32_t> ids) const;

  int32_t id_of(const std::string& word) const;  // unk when absent
  const std::string& word(int32_t id) const;
  int32_t size() const { return static_cast<int32_t>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int32_t> index_;
};

struct BackboneConfig {
  int d_k = 128;
  int blocks = 4;
  int heads = 4;
  int mlp_hidden = 256;
  int context = 256;
  int vocab_cap = 2048;
};

class LoRAAdapter;

// Decoder-only transformer over pre-embedded inputs: RMS-norm blocks with a
// gated MLP (gate/up/down projections) and learned positions. Once frozen,
// no training path can bind its parameters.
class BackboneWeights {
 public:
  BackboneWeights(BackboneConfig config, Vocabulary vocab, uint64_t seed);

  // hidden states for an already-embedded [T, d_k] sequence (frozen weights;
  // optional adapter deltas on the MLP projections)
  ad::NodeId forward(ad::Graph& g, ad::NodeId embedded) const;
  ad::NodeId forward(ad::Graph& g, ad::NodeId embedded, LoRAAdapter& adapter) const;
  ad::NodeId forward(ad::Graph& g, ad::NodeId embedded, const LoRAAdapter& adapter) const;

  // pretraining path: binds backbone parameters for gradient updates
  ad::NodeId forward_train(ad::Graph& g, ad::NodeId embedded);

  // frozen word-embedding rows for a token sequence
  ad::NodeId embed_tokens(ad::Graph& g, std::span<const int32_t> token_ids) const;

  void freeze();
  bool frozen() const { return frozen_; }
  bool lora_merged() const { return lora_merged_; }
  uint64_t weight_hash() const;  // FNV-1a over all parameter bytes

  const BackboneConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const ad::Tensor& word_embeddings() const { return word_emb_.value; }
  std::vector<ad::Param*> params();
  std::vector<const ad::Param*> params() const;
  int64_t param_count() const;

 private:
  friend LoRAAdapter attach_lora(const BackboneWeights&, std::vector<std::string>, int, float,
                                 float, uint64_t);
  friend BackboneWeights merge_lora(const BackboneWeights&, const LoRAAdapter&);

  struct Block {
    ad::Param wq, wk, wv, wo;
    ad::Param attn_norm_g;
    ad::Param gate, up, down;
    ad::Param mlp_norm_g;
  };

  template <typename Self, typename Bind, typename AdapterBind>
  static ad::NodeId net(Self& self, ad::Graph& g, ad::NodeId embedded, Bind bind,
                        AdapterBind adapter_bind);

  BackboneConfig config_;
  Vocabulary vocab_;
  ad::Param word_emb_;  // V x d_k
  ad::Param pos_emb_;   // context x d_k
  std::vector<Block> blocks_;
  ad::Param final_norm_g_;
  bool frozen_ = false;
  bool lora_merged_ = false;
};

// Low-rank deltas (alpha/r * x A B) on the MLP projections of every block.
// B starts at zero, so a fresh adapter is output-invisible.
class LoRAAdapter {
 public:
  struct Entry {
    std::string target;  // "blocks.<i>.<kind>_proj"
    int block = 0;
    int kind = 0;  // 0 = gate, 1 = up, 2 = down
    ad::Param a;   // d_in x r
    ad::Param b;   // r x d_out
  };

  int rank = 16;
  float alpha = 16.0f;
  float dropout = 0.05f;
  std::vector<std::string> target_kinds;
  std::vector<Entry> entries;

  float scaling() const { return alpha / static_cast<float>(rank); }
  int64_t param_count() const;
  std::vector<ad::Param*> params();
  const Entry* find(int block, int kind) const;
};

// Valid target names: gate_proj, up_proj, down_proj.
LoRAAdapter attach_lora(const BackboneWeights& weights, std::vector<std::string> targets,
                        int r = 16, float alpha = 16.0f, float dropout = 0.05f,
                        uint64_t seed = 0);

// W + (alpha/r) A B folded into a copy of the weights; guarded against
// applying the same deltas twice.
BackboneWeights merge_lora(const BackboneWeights& weights, const LoRAAdapter& adapter);

struct PretrainConfig {
  int epochs = 1;  // mirrors single-epoch instruction tuning
  float lr = 1e-3f;
  int batch_size = 8;
  int warmup_steps = 20;
  double holdout_fraction = 0.1;
  uint64_t seed = 42;
};

struct PretrainStats {
  double initial_holdout_perplexity = 0.0;
  double final_holdout_perplexity = 0.0;
  std::vector<double> epoch_loss;
};

// Next-token training on Alpaca-shaped texts; returns frozen weights.
BackboneWeights pretrain_backbone(std::span<const std::string> corpus,
                                  const BackboneConfig& config,
                                  const PretrainConfig& pretrain, PretrainStats* stats = nullptr);

double perplexity(const BackboneWeights& weights, std::span<const std::string> texts);

// Seeded instruction/input/response documents for toy pretraining.
std::vector<std::string> synth_instruction_corpus(int n_docs, uint64_t seed);

}  // namespace e4srec::lm
