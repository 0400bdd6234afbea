#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "e4srec/data.hpp"

namespace e4srec::eval {

// Produces scores for all N items given a user and their history. The user
// index matters only for models with per-user state (BPR).
using ScoreFn = std::function<std::vector<float>(int32_t user, std::span<const int32_t> history)>;

enum class Split { validation, test };

struct EvalOptions {
  Split split = Split::test;
  // full protocol: drop the user's already-seen items from the candidate set
  // (never the target itself); off by default, matching whole-item-set
  // evaluation.
  bool mask_history = false;
  // sampled protocol: negatives are drawn outside the user's interacted items
  bool exclude_interacted = true;
  int n_neg = 99;
  uint64_t seed = 42;
  bool group_breakdown = false;
  // sparse: interactions <= bounds[0]; medium: <= bounds[1]; dense: above
  std::array<int64_t, 2> group_bounds{5, 10};
};

// 1-based rank of target among candidates by descending score; score ties
// break by ascending item index.
int32_t rank_of_target(std::span<const float> scores, int32_t target,
                       std::span<const int32_t> candidates);
// rank against the whole catalog [0, N)
int32_t rank_of_target(std::span<const float> scores, int32_t target);

double hr_at_k(std::span<const int32_t> ranks, int k);
double ndcg_at_k(std::span<const int32_t> ranks, int k);
double mrr(std::span<const int32_t> ranks);

struct GroupMetrics {
  std::string label;
  int64_t user_count = 0;
  std::vector<std::pair<std::string, double>> metrics;
};

struct MetricsReport {
  std::string protocol;  // "full" | "sampled99"
  int64_t user_count = 0;
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<GroupMetrics> groups;

  double at(const std::string& name) const;
  std::string to_json() const;
  std::string to_table() const;  // aligned plain text
};

struct UserGroup {
  std::string label;
  int64_t lo = 0;
  int64_t hi = 0;  // inclusive; dense group uses INT64_MAX
  std::vector<int32_t> users;
};

std::vector<UserGroup> group_by_sparsity(const data::SplitDataset& split,
                                         std::array<int64_t, 2> bounds = {5, 10});

// Per-user 1-based ranks of the held-out item over the whole catalog.
std::vector<int32_t> full_ranks(const ScoreFn& score, const data::SplitDataset& split,
                                Split target_split, bool mask_history = false);

MetricsReport evaluate_full(const ScoreFn& score, const data::SplitDataset& split,
                            const EvalOptions& options = {});
MetricsReport evaluate_sampled(const ScoreFn& score, const data::SplitDataset& split,
                               const EvalOptions& options = {});

}  // namespace e4srec::eval
