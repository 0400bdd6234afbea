#include "e4srec/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "e4srec/errors.hpp"
#include "e4srec/eval.hpp"
#include "e4srec/optim.hpp"
#include "e4srec/rng.hpp"

namespace e4srec {

using ad::Graph;
using ad::NodeId;
using ad::Param;
using ad::Tensor;

// ---------------------------------------------------------------------------
// prompt template
// ---------------------------------------------------------------------------

PromptTemplate PromptTemplate::render(const lm::Vocabulary& vocab, std::string instruction) {
  PromptTemplate t;
  t.instruction = std::move(instruction);
  t.prefix_ids.push_back(lm::SpecialTokens::bos);
  for (int32_t id : vocab.tokenize("### Instruction:\n" + t.instruction)) {
    t.prefix_ids.push_back(id);
  }
  t.infix_ids = vocab.tokenize("### Input:");
  t.suffix_ids = vocab.tokenize("### Response:");
  return t;
}

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

namespace {

TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "training_epochs") c.epochs = value.get<int>();
    else if (key == "learning_rate") c.lr = value.get<float>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "lora_rank") c.lora_rank = value.get<int>();
    else if (key == "lora_alpha") c.lora_alpha = value.get<float>();
    else if (key == "lora_dropout") c.lora_dropout = value.get<float>();
    else if (key == "lora_modules") c.lora_targets = value.get<std::vector<std::string>>();
    else if (key == "lr_scheduler") c.scheduler = value.get<std::string>();
    else if (key == "weight_decay") c.weight_decay = value.get<float>();
    else if (key == "warmup_steps") c.warmup_steps = value.get<int>();
    else if (key == "max_len") c.max_len = value.get<int>();
    else if (key == "all_prefix_expansion") c.all_prefix_expansion = value.get<bool>();
    else if (key == "use_llm") c.use_llm = value.get<bool>();
    else if (key == "seed") c.seed = value.get<uint64_t>();
    else throw ConfigError("TrainConfig: unknown key '" + key + "'");
  }
  if (c.scheduler != "cosine") {
    throw ConfigError("TrainConfig: only the cosine scheduler is supported");
  }
  if (c.epochs < 1 || c.batch_size < 1 || c.max_len < 1) {
    throw ConfigError("TrainConfig: epochs, batch_size and max_len must be positive");
  }
  return c;
}

}  // namespace

TrainConfig TrainConfig::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("TrainConfig: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("TrainConfig: invalid JSON in " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  try {
    return config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("TrainConfig: invalid JSON: ") + e.what());
  }
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["training_epochs"] = epochs;
  j["learning_rate"] = lr;
  j["batch_size"] = batch_size;
  j["lora_rank"] = lora_rank;
  j["lora_alpha"] = lora_alpha;
  j["lora_dropout"] = lora_dropout;
  j["lora_modules"] = lora_targets;
  j["lr_scheduler"] = scheduler;
  j["weight_decay"] = weight_decay;
  j["warmup_steps"] = warmup_steps;
  j["max_len"] = max_len;
  j["all_prefix_expansion"] = all_prefix_expansion;
  j["use_llm"] = use_llm;
  j["seed"] = seed;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

E4SRecModel::E4SRecModel(std::shared_ptr<const lm::BackboneWeights> backbone,
                         seqrec::ItemEmbeddingTable embeddings, TrainConfig config)
    : backbone_(std::move(backbone)), embeddings_(std::move(embeddings)),
      config_(std::move(config)) {
  if (!backbone_) throw StageOrderError("E4SRecModel: no backbone loaded", "pretrain-backbone");
  if (embeddings_.table.empty()) {
    throw StageOrderError("E4SRecModel: no ID embeddings", "extract-embeddings");
  }
  prompt_ = PromptTemplate::render(backbone_->vocab(), kDefaultInstruction);
  Rng rng(hash_combine(config_.seed, 0xE45EC));
  w_input_ = Param("w_input", Tensor::xavier(d_s(), d_k(), rng));
  w_output_ = Param("w_output", Tensor::xavier(d_k(), n_items(), rng));
  if (config_.use_llm) {
    adapter_ = lm::attach_lora(*backbone_, config_.lora_targets, config_.lora_rank,
                               config_.lora_alpha, config_.lora_dropout,
                               hash_combine(config_.seed, 0xADA1));
  }
  embeddings_.table.set_requires_grad(false);
}

E4SRecModel::E4SRecModel(std::shared_ptr<const lm::BackboneWeights> backbone,
                         seqrec::ItemEmbeddingTable embeddings, Tensor w_input,
                         lm::LoRAAdapter adapter, Tensor w_output, TrainConfig config)
    : backbone_(std::move(backbone)), embeddings_(std::move(embeddings)),
      adapter_(std::move(adapter)), config_(std::move(config)) {
  if (!backbone_) throw StageOrderError("E4SRecModel: no backbone loaded", "pretrain-backbone");
  prompt_ = PromptTemplate::render(backbone_->vocab(), kDefaultInstruction);
  if (w_input.rows() != d_s() || w_input.cols() != d_k()) {
    throw ShapeError("E4SRecModel: input projection " + w_input.shape_str() +
                     " does not match d_s x d_k");
  }
  if (w_output.rows() != d_k() || w_output.cols() != n_items()) {
    throw ShapeError("E4SRecModel: output projection " + w_output.shape_str() +
                     " does not match d_k x N");
  }
  w_input_ = Param("w_input", std::move(w_input));
  w_output_ = Param("w_output", std::move(w_output));
  embeddings_.table.set_requires_grad(false);
}

namespace {

struct TrainBind {
  NodeId operator()(Graph& g, Param& p) const { return g.param(p); }
};

struct FrozenBind {
  NodeId operator()(Graph& g, const Param& p) const { return g.borrow(p.value); }
};

}  // namespace

template <typename Self, typename BindProj, typename ForwardFn>
NodeId E4SRecModel::final_hidden(Self& self, Graph& g, std::span<const int32_t> item_ids,
                                 BindProj bind, ForwardFn forward) {
  if (item_ids.empty()) throw ContractError("e4srec: empty item history");
  for (int32_t id : item_ids) {
    if (id < 0 || id >= self.n_items()) {
      throw ContractError("e4srec: item id " + std::to_string(id) + " out of range [0, " +
                          std::to_string(self.n_items()) + ")");
    }
  }
  auto ids = data::truncate(item_ids, self.config_.max_len);
  NodeId item_rows = g.embedding_lookup(g.borrow(self.embeddings_.table), ids);
  NodeId projected = g.matmul(item_rows, bind(g, self.w_input_));
  if (!self.config_.use_llm) {
    // linear-projections-only variant: no prompt, no backbone
    return g.mean_rows(projected);
  }
  std::vector<NodeId> parts{
      self.backbone_->embed_tokens(g, self.prompt_.prefix_ids),
      self.backbone_->embed_tokens(g, self.prompt_.infix_ids),
      projected,
      self.backbone_->embed_tokens(g, self.prompt_.suffix_ids),
  };
  NodeId assembled = g.concat(parts, 0);
  NodeId h = forward(g, assembled);
  int64_t T = g.value_of(h).rows();
  // the hidden state at the final response-marker position feeds prediction
  return g.slice(h, 0, T - 1, T);
}

NodeId E4SRecModel::assemble_input(Graph& g, std::span<const int32_t> item_ids) const {
  if (item_ids.empty()) throw ContractError("e4srec: empty item history");
  for (int32_t id : item_ids) {
    if (id < 0 || id >= n_items()) {
      throw ContractError("e4srec: item id " + std::to_string(id) + " out of range [0, " +
                          std::to_string(n_items()) + ")");
    }
  }
  auto ids = data::truncate(item_ids, config_.max_len);
  NodeId item_rows = g.embedding_lookup(g.borrow(embeddings_.table), ids);
  NodeId projected = g.matmul(item_rows, g.borrow(w_input_.value));
  if (!config_.use_llm) return projected;
  std::vector<NodeId> parts{
      backbone_->embed_tokens(g, prompt_.prefix_ids),
      backbone_->embed_tokens(g, prompt_.infix_ids),
      projected,
      backbone_->embed_tokens(g, prompt_.suffix_ids),
  };
  return g.concat(parts, 0);
}

NodeId E4SRecModel::assemble_input(Graph& g, std::span<const int32_t> item_ids) {
  return static_cast<const E4SRecModel&>(*this).assemble_input(g, item_ids);
}

std::vector<float> E4SRecModel::predict_scores(std::span<const int32_t> item_ids) const {
  Graph g(0, /*training=*/false);
  const auto& self = *this;
  NodeId hidden = final_hidden(
      self, g, item_ids, FrozenBind{},
      [&](Graph& gg, NodeId assembled) { return backbone_->forward(gg, assembled, adapter()); });
  NodeId logits = g.matmul(hidden, g.borrow(w_output_.value));
  const Tensor& out = g.value_of(logits);
  return std::vector<float>(out.data().begin(), out.data().end());
}

std::vector<float> E4SRecModel::predict_probs(std::span<const int32_t> item_ids) const {
  auto scores = predict_scores(item_ids);
  Graph g;
  NodeId probs = g.softmax(g.value(Tensor({static_cast<int64_t>(scores.size())}, scores)));
  const Tensor& out = g.value_of(probs);
  return std::vector<float>(out.data().begin(), out.data().end());
}

NodeId E4SRecModel::build_loss(Graph& g, std::span<const int32_t> item_ids, int32_t target) {
  if (target < 0 || target >= n_items()) {
    throw ContractError("e4srec: loss target " + std::to_string(target) + " out of range");
  }
  NodeId hidden = final_hidden(
      *this, g, item_ids, TrainBind{},
      [&](Graph& gg, NodeId assembled) { return backbone_->forward(gg, assembled, adapter_); });
  NodeId logits = g.matmul(hidden, g.param(w_output_));
  std::vector<int32_t> targets{target};
  return g.cross_entropy_with_logits(logits, targets);
}

std::vector<Param*> E4SRecModel::trainable_params() {
  std::vector<Param*> out = adapter_.params();
  out.push_back(&w_input_);
  out.push_back(&w_output_);
  return out;
}

int64_t E4SRecModel::pluggable_param_count() const {
  return static_cast<int64_t>(n_items()) * d_s() + static_cast<int64_t>(d_s()) * d_k() +
         adapter_.param_count() + static_cast<int64_t>(d_k()) * n_items();
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

struct Instance {
  int32_t user;
  std::span<const int32_t> full_train;  // prefix length decides the history
  size_t prefix_len;
  int32_t target;
};

}  // namespace

E4SRecModel train_e4srec(std::shared_ptr<const lm::BackboneWeights> backbone,
                         seqrec::ItemEmbeddingTable embeddings,
                         const data::SplitDataset& split, TrainConfig config,
                         E4SRecTrainStats* stats, const seqrec::ProgressFn& progress) {
  if (!backbone) {
    throw StageOrderError("train: backbone weights missing", "pretrain-backbone");
  }
  if (!backbone->frozen()) {
    throw StageOrderError("train: backbone has not been pretrained and frozen",
                          "pretrain-backbone");
  }
  if (embeddings.table.empty()) {
    throw StageOrderError("train: item ID embeddings missing", "extract-embeddings");
  }
  if (embeddings.item_count() != split.n_items) {
    throw ConfigError("train: embeddings cover " + std::to_string(embeddings.item_count()) +
                      " items but the dataset has " + std::to_string(split.n_items));
  }

  E4SRecModel model(std::move(backbone), std::move(embeddings), config);
  auto trainables = model.trainable_params();
  ad::AdamConfig adam_cfg;
  adam_cfg.weight_decay = config.weight_decay;
  ad::Adam opt(trainables, adam_cfg);

  // one instance per user: full train prefix predicts the last train item;
  // optional expansion adds every shorter prefix
  std::vector<Instance> instances;
  for (int32_t u = 0; u < split.user_count(); ++u) {
    const auto& seq = split.train[static_cast<size_t>(u)];
    if (seq.size() < 2) continue;
    if (config.all_prefix_expansion) {
      for (size_t len = 1; len + 1 <= seq.size(); ++len) {
        instances.push_back({u, seq, len, seq[len]});
      }
    } else {
      instances.push_back({u, seq, seq.size() - 1, seq.back()});
    }
  }
  if (instances.empty()) throw EmptyDatasetError("train: no usable training instances");

  int64_t batches_per_epoch =
      (static_cast<int64_t>(instances.size()) + config.batch_size - 1) / config.batch_size;
  ad::LRSchedule schedule{config.lr, config.warmup_steps,
                          std::max<int64_t>(1, batches_per_epoch * config.epochs)};

  eval::ScoreFn scorer = [&model](int32_t, std::span<const int32_t> history) {
    return model.predict_scores(history);
  };

  Rng rng(hash_combine(config.seed, 0x7A17));
  std::vector<Tensor> best_values;
  double best_hr = -1.0;
  int best_epoch = -1;
  int64_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(instances);
    double epoch_loss = 0.0;
    int64_t counted = 0;
    try {
      for (size_t start = 0; start < instances.size();
           start += static_cast<size_t>(config.batch_size)) {
        size_t end = std::min(instances.size(), start + static_cast<size_t>(config.batch_size));
        float inv = 1.0f / static_cast<float>(end - start);
        for (size_t k = start; k < end; ++k) {
          const Instance& inst = instances[k];
          std::span<const int32_t> history(inst.full_train.data(), inst.prefix_len);
          Graph g(hash_combine(config.seed, static_cast<uint64_t>(step) * 2654435761ULL + k),
                  /*training=*/true);
          NodeId loss = model.build_loss(g, history, inst.target);
          g.backward(loss, inv);
          epoch_loss += g.value_of(loss)(0);
          ++counted;
        }
        opt.step(schedule.at(step));
        ++step;
      }
    } catch (const NumericError& e) {
      throw NumericError("train: diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    epoch_loss /= static_cast<double>(std::max<int64_t>(1, counted));

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
      best_values.clear();
      for (Param* p : trainables) best_values.push_back(p->value);
    }
  }
  if (best_epoch >= 0) {
    for (size_t i = 0; i < trainables.size(); ++i) trainables[i]->value = best_values[i];
  }
  if (stats) {
    stats->best_epoch = best_epoch;
    stats->best_val_hr10 = best_hr;
  }
  return model;
}

}  // namespace e4srec
