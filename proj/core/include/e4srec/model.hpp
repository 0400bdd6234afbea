#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "e4srec/backbone.hpp"
#include "e4srec/data.hpp"
#include "e4srec/graph.hpp"
#include "e4srec/seqrec.hpp"

namespace e4srec {

inline constexpr const char* kDefaultInstruction =
    "Given the user's interaction history in chronological order, predict the next item.";

// Alpaca-shaped prompt rendered to token ids once; items are injected between
// the input marker and the response marker.
struct PromptTemplate {
  std::string instruction;
  std::vector<int32_t> prefix_ids;  // bos + instruction header + instruction
  std::vector<int32_t> infix_ids;   // input header
  std::vector<int32_t> suffix_ids;  // response header

  static PromptTemplate render(const lm::Vocabulary& vocab, std::string instruction);

  int64_t fixed_tokens() const {
    return static_cast<int64_t>(prefix_ids.size() + infix_ids.size() + suffix_ids.size());
  }
};

// Defaults follow the published training configuration; serialized as JSON
// with the same keys.
struct TrainConfig {
  int epochs = 3;
  float lr = 3e-4f;
  int batch_size = 16;
  int lora_rank = 16;
  float lora_alpha = 16.0f;
  float lora_dropout = 0.05f;
  std::vector<std::string> lora_targets{"gate_proj", "down_proj", "up_proj"};
  std::string scheduler = "cosine";
  float weight_decay = 0.1f;
  int warmup_steps = 100;
  int max_len = 50;
  bool all_prefix_expansion = false;  // one instance per user when off
  bool use_llm = true;                // off reproduces the no-LLM ablation
  uint64_t seed = 42;

  static TrainConfig from_json_file(const std::filesystem::path& path);
  static TrainConfig from_json_text(const std::string& text);
  std::string to_json() const;
};

// Frozen backbone + frozen ID embeddings + the pluggable trainables
// {adapter, input projection, output projection}.
class E4SRecModel {
 public:
  // fresh trainables (Xavier projections, zero-delta adapter)
  E4SRecModel(std::shared_ptr<const lm::BackboneWeights> backbone,
              seqrec::ItemEmbeddingTable embeddings, TrainConfig config);
  // exact parts, e.g. from a deserialized bundle
  E4SRecModel(std::shared_ptr<const lm::BackboneWeights> backbone,
              seqrec::ItemEmbeddingTable embeddings, ad::Tensor w_input,
              lm::LoRAAdapter adapter, ad::Tensor w_output, TrainConfig config);

  // [T, d_k] embedded sequence: prompt tokens through the frozen word table,
  // item ids through E * W_input, in their original positions
  ad::NodeId assemble_input(ad::Graph& g, std::span<const int32_t> item_ids) const;
  ad::NodeId assemble_input(ad::Graph& g, std::span<const int32_t> item_ids);

  // raw logits over all N candidates (always exactly N of them)
  std::vector<float> predict_scores(std::span<const int32_t> item_ids) const;
  // softmax applied on request only
  std::vector<float> predict_probs(std::span<const int32_t> item_ids) const;

  // fused cross-entropy loss node for one training instance
  ad::NodeId build_loss(ad::Graph& g, std::span<const int32_t> item_ids, int32_t target);

  int32_t n_items() const { return embeddings_.item_count(); }
  int32_t d_s() const { return embeddings_.width(); }
  int32_t d_k() const { return backbone_->config().d_k; }

  const TrainConfig& config() const { return config_; }
  const PromptTemplate& prompt() const { return prompt_; }
  const lm::BackboneWeights& backbone() const { return *backbone_; }
  std::shared_ptr<const lm::BackboneWeights> backbone_ptr() const { return backbone_; }
  const seqrec::ItemEmbeddingTable& id_embeddings() const { return embeddings_; }
  const ad::Param& input_projection() const { return w_input_; }
  const ad::Param& output_projection() const { return w_output_; }
  lm::LoRAAdapter& adapter() { return adapter_; }
  const lm::LoRAAdapter& adapter() const { return adapter_; }

  // exactly {adapter A/B, W_input, W_output}; the no-LLM variant has no
  // adapter entries
  std::vector<ad::Param*> trainable_params();
  // N*d_s + d_s*d_k + sum r*(d_in+d_out) + d_k*N
  int64_t pluggable_param_count() const;

 private:
  template <typename Self, typename BindProj, typename ForwardFn>
  static ad::NodeId final_hidden(Self& self, ad::Graph& g, std::span<const int32_t> item_ids,
                                 BindProj bind, ForwardFn forward);

  std::shared_ptr<const lm::BackboneWeights> backbone_;
  seqrec::ItemEmbeddingTable embeddings_;
  PromptTemplate prompt_;
  ad::Param w_input_;   // d_s x d_k
  lm::LoRAAdapter adapter_;
  ad::Param w_output_;  // d_k x N
  TrainConfig config_;
};

struct E4SRecTrainStats {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_val_hr10;
  int best_epoch = -1;
  double best_val_hr10 = 0.0;
};

// Stage 3 of the pipeline: requires a pretrained frozen backbone (stage 2)
// and extracted embeddings (stage 1), otherwise raises a stage-order error
// naming the missing stage.
E4SRecModel train_e4srec(std::shared_ptr<const lm::BackboneWeights> backbone,
                         seqrec::ItemEmbeddingTable embeddings,
                         const data::SplitDataset& split, TrainConfig config,
                         E4SRecTrainStats* stats = nullptr,
                         const seqrec::ProgressFn& progress = nullptr);

}  // namespace e4srec
