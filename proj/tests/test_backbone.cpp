#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "e4srec/backbone.hpp"
#include "e4srec/errors.hpp"
#include "e4srec/optim.hpp"
#include "e4srec/rng.hpp"

using namespace e4srec;
using namespace e4srec::lm;

namespace {

Vocabulary tiny_vocab() {
  std::vector<std::string> corpus{
      "### Instruction:\nrepeat the last word of the input.\n\n### Input:\napple pear\n\n"
      "### Response:\npear",
      "fox owl lynx crane apple blue red green",
  };
  return Vocabulary::build(corpus, 64);
}

BackboneConfig small_config() {
  BackboneConfig cfg;
  cfg.d_k = 32;
  cfg.blocks = 2;
  cfg.heads = 2;
  cfg.mlp_hidden = 48;
  cfg.context = 64;
  cfg.vocab_cap = 128;
  return cfg;
}

std::string normalized(const std::string& text) {
  auto words = split_words(text);
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

ad::Tensor random_embedded(int64_t T, int64_t d, uint64_t seed) {
  Rng rng(seed);
  return ad::Tensor::gaussian({T, d}, rng, 0.5f);
}

}  // namespace

TEST_CASE("tokenizer: response marker round-trips up to whitespace and case") {
  auto vocab = tiny_vocab();
  auto ids = vocab.tokenize("### Response:");
  CHECK(vocab.detokenize(ids) == normalized("### Response:"));
}

TEST_CASE("tokenizer: empty string gives an empty id list") {
  auto vocab = tiny_vocab();
  CHECK(vocab.tokenize("").empty());
  CHECK(vocab.tokenize("   \n\t ").empty());
}

TEST_CASE("tokenizer: out-of-vocabulary words map to unk") {
  auto vocab = tiny_vocab();
  auto ids = vocab.tokenize("apple zeppelin");
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] != SpecialTokens::unk);
  CHECK(ids[1] == SpecialTokens::unk);
}

TEST_CASE("vocabulary: specials are pinned and the cap is honored") {
  auto vocab = tiny_vocab();
  CHECK(vocab.word(SpecialTokens::pad) == "<pad>");
  CHECK(vocab.word(SpecialTokens::bos) == "<bos>");
  CHECK(vocab.word(SpecialTokens::eos) == "<eos>");
  CHECK(vocab.word(SpecialTokens::unk) == "<unk>");

  std::vector<std::string> big{"a b c d e f g h i j k l m n o p q r s t u v w x y z"};
  auto capped = Vocabulary::build(big, 10);
  CHECK(capped.size() == 10);
  auto reloaded = Vocabulary::from_words(capped.words());
  CHECK(reloaded.id_of("a") == capped.id_of("a"));
}

TEST_CASE("backbone: freshly attached adapter changes no output bitwise") {
  BackboneWeights weights(small_config(), tiny_vocab(), 7);
  weights.freeze();
  auto adapter = attach_lora(weights, {"gate_proj", "up_proj", "down_proj"}, 4, 4.0f, 0.0f, 3);
  ad::Tensor x = random_embedded(6, 32, 11);

  ad::Graph g1, g2;
  const auto& plain = g1.value_of(weights.forward(g1, g1.value(x)));
  const LoRAAdapter& frozen_adapter = adapter;
  const auto& adapted = g2.value_of(weights.forward(g2, g2.value(x), frozen_adapter));
  CHECK(plain.bitwise_equal(adapted));
}

TEST_CASE("backbone: causal mask hides future positions") {
  BackboneWeights weights(small_config(), tiny_vocab(), 5);
  weights.freeze();
  ad::Tensor x = random_embedded(7, 32, 13);
  ad::Graph g1;
  const auto base = g1.value_of(weights.forward(g1, g1.value(x)));
  ad::Tensor y = x;
  for (int64_t c = 0; c < 32; ++c) y(6, c) = -y(6, c) + 0.5f;
  ad::Graph g2;
  const auto& bumped = g2.value_of(weights.forward(g2, g2.value(y)));
  for (int64_t i = 0; i < 6; ++i) {
    for (int64_t c = 0; c < 32; ++c) CHECK(base(i, c) == bumped(i, c));
  }
}

TEST_CASE("backbone: adapters get gradients, frozen weights never do") {
  BackboneWeights weights(small_config(), tiny_vocab(), 9);
  weights.freeze();
  auto adapter = attach_lora(weights, {"gate_proj", "down_proj", "up_proj"}, 4, 4.0f, 0.0f, 1);
  ad::Tensor x = random_embedded(5, 32, 17);
  x.set_requires_grad(false);

  ad::Graph g(123, /*training=*/true);
  ad::NodeId h = weights.forward(g, g.value(x), adapter);
  ad::NodeId loss = g.sum(h);
  g.backward(loss);

  auto grads = g.param_grads();
  CHECK(grads.size() == adapter.entries.size() * 2);
  for (auto& [param, grad] : grads) {
    bool is_adapter_param = false;
    for (auto* p : adapter.params()) {
      if (p == param) is_adapter_param = true;
    }
    CHECK(is_adapter_param);
  }
  uint64_t before = weights.weight_hash();
  ad::Adam opt(adapter.params(), {});
  opt.step(0.01f);
  CHECK(weights.weight_hash() == before);
}

TEST_CASE("backbone: training forward refused once frozen") {
  BackboneWeights weights(small_config(), tiny_vocab(), 2);
  ad::Graph g;
  ad::Tensor x = random_embedded(3, 32, 5);
  CHECK_NOTHROW(weights.forward_train(g, g.value(x)));
  weights.freeze();
  ad::Graph g2;
  CHECK_THROWS_AS(weights.forward_train(g2, g2.value(x)), ContractError);
}

TEST_CASE("attach_lora: parameter count follows r*(d_in+d_out)") {
  // one block with a square 128x128 gate projection: 16*(128+128) = 4096
  BackboneConfig cfg;
  cfg.d_k = 128;
  cfg.blocks = 1;
  cfg.heads = 4;
  cfg.mlp_hidden = 128;
  BackboneWeights weights(cfg, tiny_vocab(), 21);
  auto adapter = attach_lora(weights, {"gate_proj"}, 16, 16.0f, 0.05f, 2);
  CHECK(adapter.param_count() == 4096);

  // default-shaped backbone, all three MLP targets on every block
  BackboneConfig full;  // d_k=128, hidden=256, blocks=4
  BackboneWeights big(full, tiny_vocab(), 22);
  auto a2 = attach_lora(big, {"gate_proj", "down_proj", "up_proj"}, 16, 16.0f, 0.05f, 2);
  int64_t expected = 0;
  expected += 4 * 16 * (128 + 256);  // gate
  expected += 4 * 16 * (256 + 128);  // down
  expected += 4 * 16 * (128 + 256);  // up
  CHECK(a2.param_count() == expected);
  // the trainable share is reported exactly; at toy scale it is merely small,
  // nowhere near the full-scale figure
  CHECK(a2.param_count() < big.param_count());
}

TEST_CASE("attach_lora: unknown targets are rejected") {
  BackboneWeights weights(small_config(), tiny_vocab(), 3);
  CHECK_THROWS_AS(attach_lora(weights, {"q_proj"}, 8, 8.0f, 0.0f, 1), ConfigError);
}

TEST_CASE("merge_lora: zero-B merge leaves weights bitwise unchanged") {
  BackboneWeights weights(small_config(), tiny_vocab(), 31);
  weights.freeze();
  auto adapter = attach_lora(weights, {"gate_proj", "up_proj", "down_proj"}, 4, 4.0f, 0.0f, 5);
  auto merged = merge_lora(weights, adapter);
  CHECK(merged.weight_hash() == weights.weight_hash());
  CHECK(merged.lora_merged());
}

TEST_CASE("merge_lora: merged forward agrees with adapter forward within 1e-5") {
  BackboneWeights weights(small_config(), tiny_vocab(), 33);
  weights.freeze();
  auto adapter = attach_lora(weights, {"gate_proj", "up_proj", "down_proj"}, 4, 8.0f, 0.05f, 6);
  Rng rng(77);
  for (auto& e : adapter.entries) {
    e.b.value = ad::Tensor::gaussian(e.b.value.shape(), rng, 0.05f);
  }
  auto merged = merge_lora(weights, adapter);

  for (uint64_t seed : {1u, 2u, 3u}) {
    ad::Tensor x = random_embedded(9, 32, seed);
    ad::Graph g1, g2;  // eval graphs: adapter dropout disabled
    const LoRAAdapter& frozen_adapter = adapter;
    const auto& via_adapter = g1.value_of(weights.forward(g1, g1.value(x), frozen_adapter));
    const auto& via_merge = g2.value_of(merged.forward(g2, g2.value(x)));
    for (int64_t i = 0; i < via_adapter.size(); ++i) {
      CHECK(std::abs(via_adapter(i) - via_merge(i)) < 1e-5f);
    }
  }
}

TEST_CASE("merge_lora: double merge is guarded") {
  BackboneWeights weights(small_config(), tiny_vocab(), 35);
  auto adapter = attach_lora(weights, {"gate_proj"}, 4, 4.0f, 0.0f, 7);
  auto merged = merge_lora(weights, adapter);
  CHECK_THROWS_AS(merge_lora(merged, adapter), ContractError);
}

TEST_CASE("pretraining: one-epoch default lowers holdout perplexity and freezes") {
  auto corpus = synth_instruction_corpus(120, 19);
  BackboneConfig cfg = small_config();
  PretrainConfig pre;  // epochs defaults to 1
  CHECK(pre.epochs == 1);
  pre.seed = 4;
  PretrainStats stats;
  auto weights = pretrain_backbone(corpus, cfg, pre, &stats);
  CHECK(weights.frozen());
  CHECK(stats.final_holdout_perplexity < stats.initial_holdout_perplexity);

  // a further optimizer pass must not move frozen parameters
  uint64_t before = weights.weight_hash();
  ad::Adam opt(weights.params(), {});
  opt.step(0.1f);
  CHECK(weights.weight_hash() == before);
}

TEST_CASE("backbone: context overflow and bad width raise") {
  BackboneWeights weights(small_config(), tiny_vocab(), 41);
  ad::Graph g;
  CHECK_THROWS_AS(weights.forward(g, g.value(random_embedded(65, 32, 1))), ContractError);
  ad::Graph g2;
  CHECK_THROWS_AS(weights.forward(g2, g2.value(random_embedded(4, 16, 1))), ShapeError);
}

TEST_CASE("instruction corpus: deterministic and alpaca-shaped") {
  auto a = synth_instruction_corpus(40, 9);
  auto b = synth_instruction_corpus(40, 9);
  CHECK(a == b);
  for (const auto& doc : a) {
    CHECK(doc.find("### Instruction:") != std::string::npos);
    CHECK(doc.find("### Input:") != std::string::npos);
    CHECK(doc.find("### Response:") != std::string::npos);
  }
  // vocabulary coverage for the recommendation prompt
  auto vocab = Vocabulary::build(synth_instruction_corpus(400, 9), 2048);
  for (const auto& word : split_words(
           "given the user's interaction history in chronological order, predict the next item.")) {
    CHECK(vocab.id_of(word) != SpecialTokens::unk);
  }
}
