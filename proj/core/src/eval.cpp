#include "e4srec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "e4srec/errors.hpp"
#include "e4srec/rng.hpp"

namespace e4srec::eval {

namespace {

std::vector<int32_t> history_for(const data::SplitDataset& split, int32_t user, Split s) {
  std::vector<int32_t> h = split.train[static_cast<size_t>(user)];
  if (s == Split::test) h.push_back(split.valid[static_cast<size_t>(user)]);
  return h;
}

int32_t target_for(const data::SplitDataset& split, int32_t user, Split s) {
  return s == Split::test ? split.test[static_cast<size_t>(user)]
                          : split.valid[static_cast<size_t>(user)];
}

std::vector<std::pair<std::string, double>> full_metrics(std::span<const int32_t> ranks) {
  return {
      {"HR@5", hr_at_k(ranks, 5)},     {"HR@10", hr_at_k(ranks, 10)},
      {"HR@20", hr_at_k(ranks, 20)},   {"nDCG@5", ndcg_at_k(ranks, 5)},
      {"nDCG@10", ndcg_at_k(ranks, 10)}, {"nDCG@20", ndcg_at_k(ranks, 20)},
  };
}

std::vector<std::pair<std::string, double>> sampled_metrics(std::span<const int32_t> ranks) {
  return {
      {"HR@1", hr_at_k(ranks, 1)},     {"HR@5", hr_at_k(ranks, 5)},
      {"HR@10", hr_at_k(ranks, 10)},   {"nDCG@5", ndcg_at_k(ranks, 5)},
      {"nDCG@10", ndcg_at_k(ranks, 10)}, {"MRR", mrr(ranks)},
  };
}

void add_group_breakdown(MetricsReport& report, const data::SplitDataset& split,
                         std::span<const int32_t> ranks, const EvalOptions& options,
                         bool sampled) {
  auto groups = group_by_sparsity(split, options.group_bounds);
  for (const auto& g : groups) {
    GroupMetrics gm;
    gm.label = g.label;
    gm.user_count = static_cast<int64_t>(g.users.size());
    if (!g.users.empty()) {
      std::vector<int32_t> sub;
      sub.reserve(g.users.size());
      for (int32_t u : g.users) sub.push_back(ranks[static_cast<size_t>(u)]);
      gm.metrics = sampled ? sampled_metrics(sub) : full_metrics(sub);
    }
    report.groups.push_back(std::move(gm));
  }
}

}  // namespace

int32_t rank_of_target(std::span<const float> scores, int32_t target,
                       std::span<const int32_t> candidates) {
  bool found = false;
  for (int32_t c : candidates) {
    if (c == target) {
      found = true;
      break;
    }
  }
  if (!found) throw ContractError("rank_of_target: target not in candidate set");
  float ts = scores[static_cast<size_t>(target)];
  int32_t rank = 1;
  for (int32_t c : candidates) {
    if (c == target) continue;
    float s = scores[static_cast<size_t>(c)];
    if (s > ts || (s == ts && c < target)) ++rank;
  }
  return rank;
}

int32_t rank_of_target(std::span<const float> scores, int32_t target) {
  if (target < 0 || static_cast<size_t>(target) >= scores.size()) {
    throw ContractError("rank_of_target: target out of range");
  }
  float ts = scores[static_cast<size_t>(target)];
  int32_t rank = 1;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (static_cast<int32_t>(i) == target) continue;
    if (scores[i] > ts || (scores[i] == ts && static_cast<int32_t>(i) < target)) ++rank;
  }
  return rank;
}

double hr_at_k(std::span<const int32_t> ranks, int k) {
  if (ranks.empty()) throw ContractError("hr_at_k: no ranks");
  if (k < 1) throw ConfigError("hr_at_k: k must be >= 1");
  int64_t hits = 0;
  for (int32_t r : ranks) {
    if (r <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double ndcg_at_k(std::span<const int32_t> ranks, int k) {
  if (ranks.empty()) throw ContractError("ndcg_at_k: no ranks");
  if (k < 1) throw ConfigError("ndcg_at_k: k must be >= 1");
  // single relevant item per user, so ideal DCG is 1 and the gain reduces to
  // the position discount
  double acc = 0.0;
  for (int32_t r : ranks) {
    if (r <= k) acc += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  }
  return acc / static_cast<double>(ranks.size());
}

double mrr(std::span<const int32_t> ranks) {
  if (ranks.empty()) throw ContractError("mrr: no ranks");
  double acc = 0.0;
  for (int32_t r : ranks) acc += 1.0 / static_cast<double>(r);
  return acc / static_cast<double>(ranks.size());
}

std::vector<UserGroup> group_by_sparsity(const data::SplitDataset& split,
                                         std::array<int64_t, 2> bounds) {
  if (bounds[0] >= bounds[1]) throw ConfigError("group_by_sparsity: bounds must increase");
  std::vector<UserGroup> groups{
      {"sparse", 0, bounds[0], {}},
      {"medium", bounds[0] + 1, bounds[1], {}},
      {"dense", bounds[1] + 1, std::numeric_limits<int64_t>::max(), {}},
  };
  for (int32_t u = 0; u < split.user_count(); ++u) {
    int64_t n = split.interaction_count(u);
    for (auto& g : groups) {
      if (n >= g.lo && n <= g.hi) {
        g.users.push_back(u);
        break;
      }
    }
  }
  return groups;
}

std::vector<int32_t> full_ranks(const ScoreFn& score, const data::SplitDataset& split,
                                Split target_split, bool mask_history) {
  std::vector<int32_t> ranks(static_cast<size_t>(split.user_count()));
  for (int32_t u = 0; u < split.user_count(); ++u) {
    auto history = history_for(split, u, target_split);
    int32_t target = target_for(split, u, target_split);
    std::vector<float> scores = score(u, history);
    if (static_cast<int32_t>(scores.size()) != split.n_items) {
      throw ContractError("full_ranks: scorer returned " + std::to_string(scores.size()) +
                          " scores for a catalog of " + std::to_string(split.n_items));
    }
    if (mask_history) {
      for (int32_t h : history) {
        if (h != target) scores[static_cast<size_t>(h)] = -std::numeric_limits<float>::infinity();
      }
    }
    ranks[static_cast<size_t>(u)] = rank_of_target(scores, target);
  }
  return ranks;
}

MetricsReport evaluate_full(const ScoreFn& score, const data::SplitDataset& split,
                            const EvalOptions& options) {
  MetricsReport report;
  report.protocol = "full";
  report.user_count = split.user_count();
  auto ranks = full_ranks(score, split, options.split, options.mask_history);
  report.metrics = full_metrics(ranks);
  if (options.group_breakdown) add_group_breakdown(report, split, ranks, options, false);
  return report;
}

MetricsReport evaluate_sampled(const ScoreFn& score, const data::SplitDataset& split,
                               const EvalOptions& options) {
  if (options.n_neg < 1 || options.n_neg >= split.n_items) {
    throw ConfigError("evaluate_sampled: n_neg must be in [1, N)");
  }
  MetricsReport report;
  report.protocol = "sampled" + std::to_string(options.n_neg);
  report.user_count = split.user_count();
  std::vector<int32_t> ranks(static_cast<size_t>(split.user_count()));
  Rng base(options.seed);
  for (int32_t u = 0; u < split.user_count(); ++u) {
    auto history = history_for(split, u, options.split);
    int32_t target = target_for(split, u, options.split);

    std::unordered_set<int32_t> excluded;
    excluded.insert(target);
    if (options.exclude_interacted) {
      auto seq = split.full_sequence(u);
      excluded.insert(seq.begin(), seq.end());
    }
    std::vector<int32_t> eligible;
    eligible.reserve(static_cast<size_t>(split.n_items));
    for (int32_t i = 0; i < split.n_items; ++i) {
      if (!excluded.count(i)) eligible.push_back(i);
    }
    if (static_cast<int>(eligible.size()) < options.n_neg) {
      throw ContractError("evaluate_sampled: user " + std::to_string(u) + " has only " +
                          std::to_string(eligible.size()) + " eligible negatives, need " +
                          std::to_string(options.n_neg));
    }
    // per-user child stream keeps negative sets independent of user order
    Rng rng = base.fork(static_cast<uint64_t>(u));
    std::vector<int32_t> candidates;
    candidates.reserve(static_cast<size_t>(options.n_neg) + 1);
    if (static_cast<int>(eligible.size()) == options.n_neg) {
      candidates = eligible;
    } else {
      // partial Fisher-Yates: first n_neg entries are a uniform sample
      for (int j = 0; j < options.n_neg; ++j) {
        int64_t pick = j + rng.uniform_int(static_cast<int64_t>(eligible.size()) - j);
        std::swap(eligible[static_cast<size_t>(j)], eligible[static_cast<size_t>(pick)]);
        candidates.push_back(eligible[static_cast<size_t>(j)]);
      }
    }
    candidates.push_back(target);

    std::vector<float> scores = score(u, history);
    if (static_cast<int32_t>(scores.size()) != split.n_items) {
      throw ContractError("evaluate_sampled: scorer returned wrong score count");
    }
    ranks[static_cast<size_t>(u)] = rank_of_target(scores, target, candidates);
  }
  report.metrics = sampled_metrics(ranks);
  if (options.group_breakdown) add_group_breakdown(report, split, ranks, options, true);
  return report;
}

double MetricsReport::at(const std::string& name) const {
  for (const auto& [k, v] : metrics) {
    if (k == name) return v;
  }
  throw ContractError("MetricsReport: no metric named " + name);
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["protocol"] = protocol;
  j["user_count"] = user_count;
  nlohmann::ordered_json m;
  for (const auto& [k, v] : metrics) m[k] = v;
  j["metrics"] = m;
  if (!groups.empty()) {
    nlohmann::ordered_json gs = nlohmann::ordered_json::array();
    for (const auto& g : groups) {
      nlohmann::ordered_json gj;
      gj["label"] = g.label;
      gj["user_count"] = g.user_count;
      nlohmann::ordered_json gm;
      for (const auto& [k, v] : g.metrics) gm[k] = v;
      gj["metrics"] = gm;
      gs.push_back(gj);
    }
    j["groups"] = gs;
  }
  return j.dump(2);
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  char buf[64];
  os << "protocol: " << protocol << "  users: " << user_count << "\n";
  size_t w = 0;
  for (const auto& [k, v] : metrics) w = std::max(w, k.size());
  for (const auto& [k, v] : metrics) {
    std::snprintf(buf, sizeof(buf), "%-*s  %.4f\n", static_cast<int>(w), k.c_str(), v);
    os << buf;
  }
  for (const auto& g : groups) {
    os << "-- " << g.label << " (" << g.user_count << " users)\n";
    for (const auto& [k, v] : g.metrics) {
      std::snprintf(buf, sizeof(buf), "%-*s  %.4f\n", static_cast<int>(w), k.c_str(), v);
      os << buf;
    }
  }
  return os.str();
}

}  // namespace e4srec::eval
