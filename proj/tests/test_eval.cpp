#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "e4srec/errors.hpp"
#include "e4srec/eval.hpp"
#include "e4srec/rng.hpp"

using namespace e4srec;
using namespace e4srec::eval;

namespace {

// 5-user hand-built fixture over an 8-item catalog; ranks [1, 3, 1, 8, 2].
const std::vector<std::vector<float>> kFixtureScores{
    {0.1f, 0.2f, 0.3f, 0.9f, 0.5f, 0.4f, 0.0f, 0.35f},
    {0.5f, 0.7f, 0.6f, 0.1f, 0.2f, 0.3f, 0.05f, 0.0f},
    {0.25f, 0.25f, 0.25f, 0.25f, 0.25f, 0.25f, 0.25f, 0.25f},
    {8.f, 7.f, 6.f, 5.f, 4.f, 3.f, 2.f, 1.f},
    {0.9f, 0.1f, 0.2f, 0.3f, 0.4f, 0.8f, 0.6f, 0.7f},
};
const std::vector<int32_t> kFixtureTargets{3, 0, 0, 7, 5};

data::SplitDataset fixture_split() {
  data::SplitDataset split;
  split.n_items = 8;
  for (int32_t u = 0; u < 5; ++u) {
    split.train.push_back({1, 2, 4});
    split.valid.push_back(6);
    split.test.push_back(kFixtureTargets[static_cast<size_t>(u)]);
  }
  return split;
}

ScoreFn fixture_scorer() {
  return [](int32_t user, std::span<const int32_t>) {
    return kFixtureScores[static_cast<size_t>(user)];
  };
}

ScoreFn oracle_scorer(const data::SplitDataset& split, Split s) {
  return [&split, s](int32_t user, std::span<const int32_t>) {
    std::vector<float> scores(static_cast<size_t>(split.n_items), 0.0f);
    int32_t t = (s == Split::test) ? split.test[static_cast<size_t>(user)]
                                   : split.valid[static_cast<size_t>(user)];
    scores[static_cast<size_t>(t)] = 1.0f;
    return scores;
  };
}

ScoreFn anti_oracle_scorer(const data::SplitDataset& split) {
  return [&split](int32_t user, std::span<const int32_t>) {
    std::vector<float> scores(static_cast<size_t>(split.n_items), 1.0f);
    scores[static_cast<size_t>(split.test[static_cast<size_t>(user)])] = -1.0f;
    return scores;
  };
}

ScoreFn constant_scorer(int32_t n) {
  return [n](int32_t, std::span<const int32_t>) {
    return std::vector<float>(static_cast<size_t>(n), 0.5f);
  };
}

// Many users with uniformly random targets over a 200-item catalog.
data::SplitDataset random_target_split(int32_t users, int32_t n_items, uint64_t seed) {
  data::SplitDataset split;
  split.n_items = n_items;
  Rng rng(seed);
  for (int32_t u = 0; u < users; ++u) {
    int32_t a = static_cast<int32_t>(rng.uniform_int(n_items));
    int32_t b = static_cast<int32_t>(rng.uniform_int(n_items));
    int32_t v = static_cast<int32_t>(rng.uniform_int(n_items));
    int32_t t = static_cast<int32_t>(rng.uniform_int(n_items));
    split.train.push_back({a, b});
    split.valid.push_back(v);
    split.test.push_back(t);
  }
  return split;
}

// Writes the library's numbers beside the raw inputs and lets the independent
// python script recompute everything by brute force.
bool oracle_script_agrees(const MetricsReport& report,
                          const std::vector<std::vector<float>>& scores,
                          const std::vector<int32_t>& targets) {
  nlohmann::json metrics;
  for (const auto& [k, v] : report.metrics) metrics[k] = v;
  nlohmann::json payload;
  payload["cases"] = nlohmann::json::array();
  payload["cases"].push_back({{"scores", scores}, {"targets", targets}, {"metrics", metrics}});
  auto path = std::filesystem::temp_directory_path() / "e4s_metrics_oracle.json";
  {
    std::ofstream out(path);
    out << payload.dump();
  }
  std::string cmd = "python3 " E4SREC_METRICS_ORACLE_SCRIPT " " + path.string();
  return std::system(cmd.c_str()) == 0;
}

}  // namespace

TEST_CASE("rank_of_target: strictly highest score ranks first") {
  std::vector<float> scores{0.3f, 0.9f, 0.2f};
  CHECK(rank_of_target(scores, 1) == 1);
}

TEST_CASE("rank_of_target: ties break by ascending item index") {
  std::vector<float> scores{0.5f, 0.5f, 0.5f, 0.5f};
  std::vector<int32_t> candidates{1, 2, 3};
  CHECK(rank_of_target(scores, 1, candidates) == 1);  // lowest index among candidates
  CHECK(rank_of_target(scores, 3, candidates) == 3);
  CHECK(rank_of_target(scores, 0) == 1);
}

TEST_CASE("rank_of_target: hand-sorted example") {
  std::vector<float> scores{0.1f, 0.9f, 0.5f};
  CHECK(rank_of_target(scores, 2) == 2);
}

TEST_CASE("rank_of_target: target outside candidate set is an error") {
  std::vector<float> scores{0.1f, 0.2f, 0.3f};
  std::vector<int32_t> candidates{0, 1};
  CHECK_THROWS_AS(rank_of_target(scores, 2, candidates), ContractError);
}

TEST_CASE("hr_at_k examples") {
  std::vector<int32_t> ranks{3, 7, 12};
  CHECK(hr_at_k(ranks, 5) == doctest::Approx(1.0 / 3.0));
  std::vector<int32_t> ones{1, 1, 1, 1};
  CHECK(hr_at_k(ones, 1) == 1.0);
  CHECK(hr_at_k(ones, 50) == 1.0);
  CHECK(hr_at_k(ranks, 1000) == 1.0);  // k beyond catalog size
  CHECK_THROWS_AS(hr_at_k({}, 5), ContractError);
}

TEST_CASE("ndcg_at_k examples") {
  std::vector<int32_t> one{1};
  CHECK(ndcg_at_k(one, 10) == doctest::Approx(1.0));
  std::vector<int32_t> three{3};
  CHECK(ndcg_at_k(three, 10) == doctest::Approx(0.5).epsilon(1e-12));  // 1/log2(4)
  std::vector<int32_t> eleven{11};
  CHECK(ndcg_at_k(eleven, 10) == 0.0);
  CHECK_THROWS_AS(ndcg_at_k({}, 5), ContractError);
}

TEST_CASE("mrr examples") {
  std::vector<int32_t> ranks{1, 2, 4};
  CHECK(mrr(ranks) == doctest::Approx(7.0 / 12.0).epsilon(1e-12));
  std::vector<int32_t> ones{1, 1};
  CHECK(mrr(ones) == 1.0);
  std::vector<int32_t> four{4};
  CHECK(mrr(four) == doctest::Approx(0.25));
}

TEST_CASE("metrics are monotone in k and nDCG never exceeds HR") {
  Rng rng(31);
  std::vector<int32_t> ranks;
  for (int i = 0; i < 200; ++i) ranks.push_back(1 + static_cast<int32_t>(rng.uniform_int(50)));
  double prev_hr = 0.0, prev_ndcg = 0.0;
  for (int k = 1; k <= 50; ++k) {
    double hr = hr_at_k(ranks, k);
    double nd = ndcg_at_k(ranks, k);
    CHECK(hr >= prev_hr);
    CHECK(nd >= prev_ndcg);
    CHECK(nd <= hr + 1e-12);
    prev_hr = hr;
    prev_ndcg = nd;
  }
}

TEST_CASE("evaluate_full: oracle scorer is perfect, anti-oracle scores zero") {
  auto split = fixture_split();
  auto perfect = evaluate_full(oracle_scorer(split, Split::test), split);
  for (const auto& [name, value] : perfect.metrics) CHECK(value == 1.0);

  auto worst = evaluate_full(anti_oracle_scorer(split), split);
  CHECK(worst.at("HR@5") == 0.0);
  CHECK(worst.at("nDCG@5") == 0.0);
}

TEST_CASE("evaluate_full: constant scorer matches the binomial expectation") {
  auto split = random_target_split(2000, 200, 77);
  auto report = evaluate_full(constant_scorer(200), split);
  // rank(t) = t + 1 under the index tie rule; targets uniform -> HR@10 ~ 0.05
  double sigma3 = 3.0 * std::sqrt(0.05 * 0.95 / 2000.0);
  CHECK(report.at("HR@10") > 0.05 - sigma3);
  CHECK(report.at("HR@10") < 0.05 + sigma3);
}

TEST_CASE("evaluate_full: 5-user fixture matches frozen values and brute-force script") {
  auto split = fixture_split();
  auto report = evaluate_full(fixture_scorer(), split);
  // ranks [1, 3, 1, 8, 2]
  CHECK(report.at("HR@5") == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(report.at("HR@10") == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.at("nDCG@5") ==
        doctest::Approx((1.0 + 0.5 + 1.0 + 0.0 + 1.0 / std::log2(3.0)) / 5.0).epsilon(1e-9));
  CHECK(report.at("nDCG@10") ==
        doctest::Approx((1.0 + 0.5 + 1.0 + 1.0 / std::log2(9.0) + 1.0 / std::log2(3.0)) / 5.0)
            .epsilon(1e-9));
  CHECK(oracle_script_agrees(report, kFixtureScores, kFixtureTargets));
}

TEST_CASE("evaluate_sampled: oracle scorer hits rank one") {
  auto split = fixture_split();
  EvalOptions opt;
  opt.n_neg = 3;
  auto report = evaluate_sampled(oracle_scorer(split, Split::test), split, opt);
  CHECK(report.at("HR@1") == 1.0);
  CHECK(report.at("MRR") == 1.0);
}

TEST_CASE("evaluate_sampled: constant scorer matches 1/100 within binomial 3 sigma") {
  auto split = random_target_split(2000, 200, 99);
  EvalOptions opt;
  opt.n_neg = 99;
  opt.seed = 4242;
  auto report = evaluate_sampled(constant_scorer(200), split, opt);
  CHECK(report.at("HR@1") > 0.01 - 0.0075);
  CHECK(report.at("HR@1") < 0.01 + 0.0075);
}

TEST_CASE("evaluate_sampled: fixed seed reproduces the report byte-for-byte") {
  auto split = random_target_split(300, 50, 5);
  EvalOptions opt;
  opt.n_neg = 20;
  opt.seed = 31337;
  ScoreFn noisy = [](int32_t user, std::span<const int32_t>) {
    Rng rng(1000 + static_cast<uint64_t>(user));
    std::vector<float> s(50);
    for (auto& v : s) v = static_cast<float>(rng.uniform());
    return s;
  };
  auto a = evaluate_sampled(noisy, split, opt);
  auto b = evaluate_sampled(noisy, split, opt);
  CHECK(a.to_json() == b.to_json());
  opt.seed = 31338;
  auto c = evaluate_sampled(noisy, split, opt);
  CHECK(a.to_json() != c.to_json());
}

TEST_CASE("evaluate_sampled: with n_neg = N-1 and no exclusion it reproduces full ranks") {
  auto split = random_target_split(100, 40, 12);
  ScoreFn noisy = [](int32_t user, std::span<const int32_t>) {
    Rng rng(7 + static_cast<uint64_t>(user));
    std::vector<float> s(40);
    for (auto& v : s) v = static_cast<float>(rng.uniform());
    return s;
  };
  EvalOptions opt;
  opt.n_neg = 39;
  opt.exclude_interacted = false;
  auto sampled = evaluate_sampled(noisy, split, opt);
  auto full = evaluate_full(noisy, split);
  CHECK(sampled.at("HR@5") == doctest::Approx(full.at("HR@5")).epsilon(1e-12));
  CHECK(sampled.at("HR@10") == doctest::Approx(full.at("HR@10")).epsilon(1e-12));
  CHECK(sampled.at("nDCG@10") == doctest::Approx(full.at("nDCG@10")).epsilon(1e-12));
}

TEST_CASE("evaluate_sampled: too few eligible negatives is an error") {
  data::SplitDataset split;
  split.n_items = 6;
  split.train.push_back({0, 1, 2});
  split.valid.push_back(3);
  split.test.push_back(4);
  EvalOptions opt;
  opt.n_neg = 3;  // eligible = {5} only
  CHECK_THROWS_AS(evaluate_sampled(constant_scorer(6), split, opt), ContractError);
}

TEST_CASE("group_by_sparsity: boundary application and partition") {
  data::SplitDataset split;
  split.n_items = 50;
  auto add_user = [&](int interactions) {
    std::vector<int32_t> train(static_cast<size_t>(interactions - 2), 1);
    split.train.push_back(train);
    split.valid.push_back(2);
    split.test.push_back(3);
  };
  add_user(5);
  add_user(7);
  add_user(30);
  add_user(10);
  add_user(11);
  auto groups = group_by_sparsity(split);
  REQUIRE(groups.size() == 3);
  CHECK(groups[0].label == "sparse");
  CHECK(groups[0].users == std::vector<int32_t>{0});
  CHECK(groups[1].label == "medium");
  CHECK(groups[1].users == std::vector<int32_t>{1, 3});
  CHECK(groups[2].label == "dense");
  CHECK(groups[2].users == std::vector<int32_t>{2, 4});
  size_t total = 0;
  for (const auto& g : groups) total += g.users.size();
  CHECK(total == 5);
}

TEST_CASE("group breakdown partitions the report") {
  auto split = random_target_split(50, 30, 3);
  EvalOptions opt;
  opt.group_breakdown = true;
  auto report = evaluate_full(constant_scorer(30), split, opt);
  REQUIRE(report.groups.size() == 3);
  int64_t total = 0;
  for (const auto& g : report.groups) total += g.user_count;
  CHECK(total == report.user_count);
}
