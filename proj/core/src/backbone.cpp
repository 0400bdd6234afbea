#include "e4srec/backbone.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>

#include "e4srec/errors.hpp"
#include "e4srec/optim.hpp"
#include "e4srec/rng.hpp"

namespace e4srec::lm {

using ad::Graph;
using ad::NodeId;
using ad::Param;
using ad::Tensor;

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) {
        words.push_back(std::move(current));
        current.clear();
      }
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int32_t>(i);
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus, int max_size) {
  if (max_size < 5) throw ConfigError("Vocabulary: max_size too small for special tokens");
  std::unordered_map<std::string, int64_t> freq;
  std::vector<std::string> order;  // first-appearance order for stable ties
  for (const auto& text : corpus) {
    for (auto& w : split_words(text)) {
      auto [it, inserted] = freq.try_emplace(w, 0);
      if (inserted) order.push_back(w);
      ++it->second;
    }
  }
  std::vector<int64_t> first_seen(order.size());
  std::unordered_map<std::string, int64_t> appearance;
  for (size_t i = 0; i < order.size(); ++i) appearance[order[i]] = static_cast<int64_t>(i);
  std::sort(order.begin(), order.end(), [&](const std::string& a, const std::string& b) {
    if (freq[a] != freq[b]) return freq[a] > freq[b];
    return appearance[a] < appearance[b];
  });
  Vocabulary v;
  for (const auto& w : order) {
    if (v.size() >= max_size) break;
    v.index_[w] = v.size();
    v.words_.push_back(w);
  }
  return v;
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  if (words.size() < 4 || words[0] != "<pad>" || words[1] != "<bos>" || words[2] != "<eos>" ||
      words[3] != "<unk>") {
    throw ConfigError("Vocabulary: word list must start with the four special tokens");
  }
  v.words_ = std::move(words);
  v.index_.clear();
  for (size_t i = 0; i < v.words_.size(); ++i) v.index_[v.words_[i]] = static_cast<int32_t>(i);
  return v;
}

std::vector<int32_t> Vocabulary::tokenize(const std::string& text) const {
  std::vector<int32_t> ids;
  for (const auto& w : split_words(text)) ids.push_back(id_of(w));
  return ids;
}

std::string Vocabulary::detokenize(std::span<const int32_t> ids) const {
  std::string out;
  for (int32_t id : ids) {
    if (id == SpecialTokens::pad || id == SpecialTokens::bos || id == SpecialTokens::eos) {
      continue;
    }
    if (!out.empty()) out.push_back(' ');
    out += word(id);
  }
  return out;
}

int32_t Vocabulary::id_of(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? SpecialTokens::unk : it->second;
}

const std::string& Vocabulary::word(int32_t id) const {
  if (id < 0 || id >= size()) throw ContractError("Vocabulary: id out of range");
  return words_[static_cast<size_t>(id)];
}

// ---------------------------------------------------------------------------
// backbone
// ---------------------------------------------------------------------------

BackboneWeights::BackboneWeights(BackboneConfig config, Vocabulary vocab, uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
  if (config_.d_k % config_.heads != 0) {
    throw ConfigError("BackboneWeights: d_k must be divisible by heads");
  }
  if (vocab_.size() > config_.vocab_cap) {
    throw ConfigError("BackboneWeights: vocabulary exceeds the configured cap");
  }
  Rng rng(seed);
  int64_t d = config_.d_k;
  int64_t hidden = config_.mlp_hidden;
  word_emb_ = Param("word_emb", Tensor::gaussian({vocab_.size(), d}, rng, 0.02f));
  pos_emb_ = Param("pos_emb", Tensor::gaussian({config_.context, d}, rng, 0.02f));
  blocks_.resize(static_cast<size_t>(config_.blocks));
  for (size_t i = 0; i < blocks_.size(); ++i) {
    std::string prefix = "blocks." + std::to_string(i) + ".";
    Block& blk = blocks_[i];
    blk.wq = Param(prefix + "wq", Tensor::xavier(d, d, rng));
    blk.wk = Param(prefix + "wk", Tensor::xavier(d, d, rng));
    blk.wv = Param(prefix + "wv", Tensor::xavier(d, d, rng));
    blk.wo = Param(prefix + "wo", Tensor::xavier(d, d, rng));
    blk.attn_norm_g = Param(prefix + "attn_norm_g", Tensor::full({d}, 1.0f));
    blk.gate = Param(prefix + "gate_proj", Tensor::xavier(d, hidden, rng));
    blk.up = Param(prefix + "up_proj", Tensor::xavier(d, hidden, rng));
    blk.down = Param(prefix + "down_proj", Tensor::xavier(hidden, d, rng));
    blk.mlp_norm_g = Param(prefix + "mlp_norm_g", Tensor::full({d}, 1.0f));
  }
  final_norm_g_ = Param("final_norm_g", Tensor::full({d}, 1.0f));
}

namespace {

struct TrainBind {
  NodeId operator()(Graph& g, Param& p) const { return g.param(p); }
};

struct FrozenBind {
  NodeId operator()(Graph& g, const Param& p) const { return g.borrow(p.value); }
};

// adapter_bind(g, input, block, kind, base) -> node; identity when no adapter
struct NoAdapter {
  NodeId operator()(Graph&, NodeId, int, int, NodeId base) const { return base; }
};

template <typename AdapterT>
struct LoRAApply {
  AdapterT* adapter;  // LoRAAdapter (trainable) or const LoRAAdapter (frozen)

  NodeId operator()(Graph& g, NodeId input, int block, int kind, NodeId base) const {
    const LoRAAdapter::Entry* e = adapter->find(block, kind);
    if (!e) return base;
    NodeId a, b;
    if constexpr (std::is_const_v<AdapterT>) {
      a = g.borrow(e->a.value);
      b = g.borrow(e->b.value);
    } else {
      auto& entry = const_cast<LoRAAdapter::Entry&>(*e);
      a = g.param(entry.a);
      b = g.param(entry.b);
    }
    NodeId x = g.dropout(input, adapter->dropout);
    NodeId delta = g.scale(g.matmul(g.matmul(x, a), b), adapter->scaling());
    return g.add(base, delta);
  }
};

}  // namespace

template <typename Self, typename Bind, typename AdapterBind>
NodeId BackboneWeights::net(Self& self, Graph& g, NodeId embedded, Bind bind,
                            AdapterBind adapter_bind) {
  const Tensor& in = g.value_of(embedded);
  if (in.rank() != 2 || in.cols() != self.config_.d_k) {
    throw ShapeError("backbone: embedded input must be [T x " +
                     std::to_string(self.config_.d_k) + "], got " + in.shape_str());
  }
  int64_t T = in.rows();
  if (T > self.config_.context) {
    throw ContractError("backbone: sequence length " + std::to_string(T) +
                        " exceeds context window " + std::to_string(self.config_.context));
  }
  std::vector<int32_t> positions(static_cast<size_t>(T));
  std::iota(positions.begin(), positions.end(), 0);
  NodeId x = g.add(embedded, g.embedding_lookup(bind(g, self.pos_emb_), positions));
  int block_index = 0;
  for (auto& blk : self.blocks_) {
    NodeId h = g.rms_norm(x, bind(g, blk.attn_norm_g));
    NodeId a = g.causal_multihead_attention(h, bind(g, blk.wq), bind(g, blk.wk),
                                            bind(g, blk.wv), bind(g, blk.wo),
                                            self.config_.heads);
    x = g.add(x, a);
    NodeId m = g.rms_norm(x, bind(g, blk.mlp_norm_g));
    NodeId gate_out = adapter_bind(g, m, block_index, 0, g.matmul(m, bind(g, blk.gate)));
    NodeId up_out = adapter_bind(g, m, block_index, 1, g.matmul(m, bind(g, blk.up)));
    NodeId inner = g.mul(g.silu(gate_out), up_out);
    NodeId down_out = adapter_bind(g, inner, block_index, 2, g.matmul(inner, bind(g, blk.down)));
    x = g.add(x, down_out);
    ++block_index;
  }
  return g.rms_norm(x, bind(g, self.final_norm_g_));
}

NodeId BackboneWeights::forward(Graph& g, NodeId embedded) const {
  return net(*this, g, embedded, FrozenBind{}, NoAdapter{});
}

NodeId BackboneWeights::forward(Graph& g, NodeId embedded, LoRAAdapter& adapter) const {
  return net(*this, g, embedded, FrozenBind{}, LoRAApply<LoRAAdapter>{&adapter});
}

NodeId BackboneWeights::forward(Graph& g, NodeId embedded, const LoRAAdapter& adapter) const {
  return net(*this, g, embedded, FrozenBind{}, LoRAApply<const LoRAAdapter>{&adapter});
}

NodeId BackboneWeights::forward_train(Graph& g, NodeId embedded) {
  if (frozen_) throw ContractError("backbone: weights are frozen, training forward refused");
  return net(*this, g, embedded, TrainBind{}, NoAdapter{});
}

NodeId BackboneWeights::embed_tokens(Graph& g, std::span<const int32_t> token_ids) const {
  return g.embedding_lookup(g.borrow(word_emb_.value), token_ids);
}

void BackboneWeights::freeze() {
  frozen_ = true;
  for (Param* p : params()) {
    p->trainable = false;
    p->value.set_requires_grad(false);
  }
}

uint64_t BackboneWeights::weight_hash() const {
  uint64_t h = 1469598103934665603ULL;  // FNV-1a 64
  for (const Param* p : params()) {
    const auto bytes = p->value.data();
    const unsigned char* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    for (size_t i = 0; i < bytes.size() * sizeof(float); ++i) {
      h ^= raw[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::vector<Param*> BackboneWeights::params() {
  std::vector<Param*> out{&word_emb_, &pos_emb_};
  for (auto& blk : blocks_) {
    for (Param* p : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.attn_norm_g, &blk.gate, &blk.up,
                     &blk.down, &blk.mlp_norm_g}) {
      out.push_back(p);
    }
  }
  out.push_back(&final_norm_g_);
  return out;
}

std::vector<const Param*> BackboneWeights::params() const {
  auto mutable_params = const_cast<BackboneWeights*>(this)->params();
  return std::vector<const Param*>(mutable_params.begin(), mutable_params.end());
}

int64_t BackboneWeights::param_count() const {
  int64_t n = 0;
  for (const Param* p : params()) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

int64_t LoRAAdapter::param_count() const {
  int64_t n = 0;
  for (const Entry& e : entries) n += e.a.value.size() + e.b.value.size();
  return n;
}

std::vector<Param*> LoRAAdapter::params() {
  std::vector<Param*> out;
  for (Entry& e : entries) {
    out.push_back(&e.a);
    out.push_back(&e.b);
  }
  return out;
}

const LoRAAdapter::Entry* LoRAAdapter::find(int block, int kind) const {
  for (const Entry& e : entries) {
    if (e.block == block && e.kind == kind) return &e;
  }
  return nullptr;
}

LoRAAdapter attach_lora(const BackboneWeights& weights, std::vector<std::string> targets,
                        int r, float alpha, float dropout, uint64_t seed) {
  if (r < 1) throw ConfigError("attach_lora: rank must be >= 1");
  if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("attach_lora: bad dropout");
  LoRAAdapter adapter;
  adapter.rank = r;
  adapter.alpha = alpha;
  adapter.dropout = dropout;
  adapter.target_kinds = targets;
  Rng rng(hash_combine(seed, 0x10AA));
  const auto& cfg = weights.config();
  for (const std::string& t : targets) {
    int kind;
    int64_t d_in, d_out;
    if (t == "gate_proj") {
      kind = 0;
      d_in = cfg.d_k;
      d_out = cfg.mlp_hidden;
    } else if (t == "up_proj") {
      kind = 1;
      d_in = cfg.d_k;
      d_out = cfg.mlp_hidden;
    } else if (t == "down_proj") {
      kind = 2;
      d_in = cfg.mlp_hidden;
      d_out = cfg.d_k;
    } else {
      throw ConfigError("attach_lora: unknown target '" + t +
                        "' (expected gate_proj, up_proj or down_proj)");
    }
    for (int b = 0; b < cfg.blocks; ++b) {
      LoRAAdapter::Entry e;
      e.target = "blocks." + std::to_string(b) + "." + t;
      e.block = b;
      e.kind = kind;
      e.a = Param(e.target + ".lora_a", Tensor::gaussian({d_in, r}, rng, 0.02f));
      e.b = Param(e.target + ".lora_b", Tensor::zeros({r, d_out}));
      adapter.entries.push_back(std::move(e));
    }
  }
  return adapter;
}

BackboneWeights merge_lora(const BackboneWeights& weights, const LoRAAdapter& adapter) {
  if (weights.lora_merged()) {
    throw ContractError("merge_lora: weights already carry merged adapter deltas");
  }
  BackboneWeights merged = weights;
  for (const auto& e : adapter.entries) {
    if (e.block < 0 || e.block >= merged.config_.blocks) {
      throw ShapeError("merge_lora: adapter block index out of range");
    }
    Param* target = nullptr;
    auto& blk = merged.blocks_[static_cast<size_t>(e.block)];
    if (e.kind == 0) target = &blk.gate;
    else if (e.kind == 1) target = &blk.up;
    else target = &blk.down;
    int64_t d_in = target->value.rows();
    int64_t d_out = target->value.cols();
    if (e.a.value.rows() != d_in || e.b.value.cols() != d_out ||
        e.a.value.cols() != e.b.value.rows()) {
      throw ShapeError("merge_lora: adapter shapes incompatible with " + e.target);
    }
    int64_t r = e.a.value.cols();
    float s = adapter.scaling();
    for (int64_t i = 0; i < d_in; ++i) {
      for (int64_t j = 0; j < d_out; ++j) {
        double acc = 0.0;
        for (int64_t k = 0; k < r; ++k) {
          acc += static_cast<double>(e.a.value(i, k)) * e.b.value(k, j);
        }
        target->value(i, j) += s * static_cast<float>(acc);
      }
    }
  }
  merged.lora_merged_ = true;
  return merged;
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

namespace {

std::vector<int32_t> doc_token_ids(const Vocabulary& vocab, const std::string& text,
                                   int context) {
  std::vector<int32_t> ids{SpecialTokens::bos};
  for (int32_t id : vocab.tokenize(text)) ids.push_back(id);
  ids.push_back(SpecialTokens::eos);
  if (static_cast<int>(ids.size()) > context) ids.resize(static_cast<size_t>(context));
  return ids;
}

double mean_token_loss(const BackboneWeights& weights,
                       std::span<const std::vector<int32_t>> docs) {
  double total = 0.0;
  int64_t tokens = 0;
  for (const auto& ids : docs) {
    if (ids.size() < 2) continue;
    Graph g;
    std::span<const int32_t> input(ids.data(), ids.size() - 1);
    std::vector<int32_t> targets(ids.begin() + 1, ids.end());
    NodeId h = weights.forward(g, weights.embed_tokens(g, input));
    NodeId logits = g.matmul(h, g.borrow(weights.word_embeddings()), false, true);
    NodeId loss = g.cross_entropy_with_logits(logits, targets);
    total += static_cast<double>(g.value_of(loss)(0)) * static_cast<double>(targets.size());
    tokens += static_cast<int64_t>(targets.size());
  }
  if (tokens == 0) throw EmptyDatasetError("perplexity: no scorable tokens");
  return total / static_cast<double>(tokens);
}

}  // namespace

double perplexity(const BackboneWeights& weights, std::span<const std::string> texts) {
  std::vector<std::vector<int32_t>> docs;
  docs.reserve(texts.size());
  for (const auto& t : texts) {
    docs.push_back(doc_token_ids(weights.vocab(), t, weights.config().context));
  }
  return std::exp(mean_token_loss(weights, docs));
}

BackboneWeights pretrain_backbone(std::span<const std::string> corpus,
                                  const BackboneConfig& config, const PretrainConfig& pretrain,
                                  PretrainStats* stats) {
  if (corpus.empty()) throw EmptyDatasetError("pretrain_backbone: empty corpus");
  Vocabulary vocab = Vocabulary::build(corpus, config.vocab_cap);
  BackboneWeights weights(config, std::move(vocab), pretrain.seed);

  std::vector<std::vector<int32_t>> docs;
  docs.reserve(corpus.size());
  for (const auto& text : corpus) {
    docs.push_back(doc_token_ids(weights.vocab(), text, config.context));
  }
  Rng rng(hash_combine(pretrain.seed, 0xBB0E));
  rng.shuffle(docs);
  size_t holdout_count = std::min(
      docs.size() > 1 ? docs.size() - 1 : size_t{0},
      static_cast<size_t>(std::ceil(static_cast<double>(docs.size()) * pretrain.holdout_fraction)));
  std::vector<std::vector<int32_t>> holdout(docs.end() - static_cast<ptrdiff_t>(holdout_count),
                                            docs.end());
  docs.resize(docs.size() - holdout_count);

  if (stats && !holdout.empty()) {
    stats->initial_holdout_perplexity = std::exp(mean_token_loss(weights, holdout));
  }

  auto params = weights.params();
  ad::Adam opt(params, {});
  int64_t batches = (static_cast<int64_t>(docs.size()) + pretrain.batch_size - 1) /
                    pretrain.batch_size;
  ad::LRSchedule schedule{pretrain.lr, pretrain.warmup_steps,
                          std::max<int64_t>(1, batches * pretrain.epochs)};
  int64_t step = 0;
  for (int epoch = 0; epoch < pretrain.epochs; ++epoch) {
    rng.shuffle(docs);
    double epoch_loss = 0.0;
    int64_t counted = 0;
    try {
      for (size_t start = 0; start < docs.size(); start += static_cast<size_t>(pretrain.batch_size)) {
        size_t end = std::min(docs.size(), start + static_cast<size_t>(pretrain.batch_size));
        float inv = 1.0f / static_cast<float>(end - start);
        for (size_t k = start; k < end; ++k) {
          const auto& ids = docs[k];
          if (ids.size() < 2) continue;
          Graph g(hash_combine(pretrain.seed, step * 977 + k), /*training=*/true);
          std::span<const int32_t> input(ids.data(), ids.size() - 1);
          std::vector<int32_t> targets(ids.begin() + 1, ids.end());
          NodeId emb = g.embedding_lookup(g.param(*params[0]), input);  // word_emb
          NodeId h = weights.forward_train(g, emb);
          NodeId logits = g.matmul(h, g.param(*params[0]), false, true);
          NodeId loss = g.cross_entropy_with_logits(logits, targets);
          g.backward(loss, inv);
          epoch_loss += g.value_of(loss)(0);
          ++counted;
        }
        opt.step(schedule.at(step));
        ++step;
      }
    } catch (const NumericError& e) {
      throw NumericError("pretrain_backbone: diverged at epoch " + std::to_string(epoch) +
                         ": " + e.what());
    }
    if (stats) {
      stats->epoch_loss.push_back(epoch_loss / static_cast<double>(std::max<int64_t>(1, counted)));
    }
  }

  weights.freeze();
  if (stats && !holdout.empty()) {
    stats->final_holdout_perplexity = std::exp(mean_token_loss(weights, holdout));
  }
  return weights;
}

// ---------------------------------------------------------------------------
// toy instruction corpus
// ---------------------------------------------------------------------------

namespace {

const char* kWordBank[] = {
    "apple",  "pear",   "plum",   "grape",  "melon",  "peach",  "lemon",  "cherry",
    "red",    "blue",   "green",  "amber",  "violet", "teal",   "coral",  "ivory",
    "fox",    "owl",    "lynx",   "crane",  "otter",  "heron",  "moth",   "finch",
};

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

std::string render(const std::string& instruction, const std::string& input,
                   const std::string& response) {
  return "### Instruction:\n" + instruction + "\n\n### Input:\n" + input +
         "\n\n### Response:\n" + response;
}

}  // namespace

std::vector<std::string> synth_instruction_corpus(int n_docs, uint64_t seed) {
  if (n_docs < 1) throw ConfigError("synth_instruction_corpus: need at least one document");
  Rng rng(seed);
  constexpr size_t bank_size = sizeof(kWordBank) / sizeof(kWordBank[0]);
  auto pick_words = [&](int count) {
    std::vector<std::string> out;
    for (int i = 0; i < count; ++i) {
      out.push_back(kWordBank[rng.uniform_int(static_cast<int64_t>(bank_size))]);
    }
    return out;
  };
  std::vector<std::string> docs;
  docs.reserve(static_cast<size_t>(n_docs));
  for (int d = 0; d < n_docs; ++d) {
    switch (rng.uniform_int(6)) {
      case 0: {
        int k = 3 + static_cast<int>(rng.uniform_int(4));
        std::vector<int> nums;
        for (int i = 0; i < k; ++i) nums.push_back(static_cast<int>(rng.uniform_int(21)));
        std::vector<std::string> in, sorted_out;
        for (int v : nums) in.push_back(std::to_string(v));
        std::sort(nums.begin(), nums.end());
        for (int v : nums) sorted_out.push_back(std::to_string(v));
        docs.push_back(render("sort the numbers in ascending order.", join(in),
                              join(sorted_out)));
        break;
      }
      case 1: {
        auto words = pick_words(3 + static_cast<int>(rng.uniform_int(4)));
        docs.push_back(render("repeat the last word of the input.", join(words), words.back()));
        break;
      }
      case 2: {
        auto words = pick_words(2 + static_cast<int>(rng.uniform_int(6)));
        docs.push_back(render("count the words in the input.", join(words),
                              std::to_string(words.size())));
        break;
      }
      case 3: {
        auto words = pick_words(3 + static_cast<int>(rng.uniform_int(4)));
        auto reversed = words;
        std::reverse(reversed.begin(), reversed.end());
        docs.push_back(render("reverse the order of the words.", join(words), join(reversed)));
        break;
      }
      case 4: {
        auto words = pick_words(3 + static_cast<int>(rng.uniform_int(4)));
        docs.push_back(render(
            "given the user's interaction history in chronological order, repeat it.",
            join(words), join(words)));
        break;
      }
      default: {
        auto pair = pick_words(2);
        int len = 4 + static_cast<int>(rng.uniform_int(4));
        std::vector<std::string> pattern;
        for (int i = 0; i < len; ++i) pattern.push_back(pair[static_cast<size_t>(i % 2)]);
        docs.push_back(render("predict the next item.", join(pattern),
                              pair[static_cast<size_t>(len % 2)]));
        break;
      }
    }
  }
  return docs;
}

}  // namespace e4srec::lm

