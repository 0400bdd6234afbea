#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace e4srec::data {

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  int64_t timestamp = 0;
};

struct LoadResult {
  std::vector<InteractionRecord> records;
  int64_t malformed_count = 0;
};

// Headerless TSV: user_id \t item_id \t timestamp. Malformed lines are
// skipped and counted. min_timestamp < 0 disables the cutoff filter.
LoadResult load_interactions(const std::filesystem::path& source, int64_t min_timestamp = -1);

// Iteratively removes users and items with fewer than k interactions until
// every survivor has at least k (the classic k-core peeling fixpoint).
std::vector<InteractionRecord> k_core_filter(std::vector<InteractionRecord> records, int k = 5);

// Users and items reindexed to contiguous 0-based ids in order of first
// appearance; per-user sequences sorted by timestamp, ties kept in input
// order.
struct SequenceDataset {
  std::vector<std::string> user_ids;   // index -> external id
  std::vector<std::string> item_ids;
  std::unordered_map<std::string, int32_t> user_index;
  std::unordered_map<std::string, int32_t> item_index;
  std::vector<std::vector<int32_t>> sequences;

  int32_t user_count() const { return static_cast<int32_t>(sequences.size()); }
  int32_t item_count() const { return static_cast<int32_t>(item_ids.size()); }
};

SequenceDataset build_sequences(const std::vector<InteractionRecord>& records);

// Leave-one-out split: last item is test, second last is validation, the rest
// is training. Users with fewer than 3 interactions are dropped with a
// warning (cannot happen after 5-core filtering).
struct SplitDataset {
  std::vector<std::vector<int32_t>> train;
  std::vector<int32_t> valid;
  std::vector<int32_t> test;
  int32_t n_items = 0;
  int64_t excluded_users = 0;

  int32_t user_count() const { return static_cast<int32_t>(train.size()); }
  // train + [valid] + [test], the original interaction sequence
  std::vector<int32_t> full_sequence(int32_t user) const;
  int64_t interaction_count(int32_t user) const {
    return static_cast<int64_t>(train[static_cast<size_t>(user)].size()) + 2;
  }
};

SplitDataset leave_one_out(const SequenceDataset& ds);

// Keeps the most recent max_len items.
std::vector<int32_t> truncate(std::span<const int32_t> sequence, int max_len = 50);

// Synthetic corpus: each user walks a seeded first-order Markov chain whose
// per-item successor distribution concentrates as transition_sharpness grows
// (+inf degenerates to a unique successor per item). Successor affinities come
// from a shared latent space, so similar items have similar successor rows,
// and Sinkhorn balancing keeps the uniform distribution stationary.
struct SynthConfig {
  int n_users = 2000;
  int n_items = 200;
  double transition_sharpness = 15.0;
  uint64_t seed = 42;
  int min_walk = 8;
  int max_walk = 40;
};

std::vector<InteractionRecord> synth_generate(const SynthConfig& config);

// Dataset artifact used between CLI stages.
void save_dataset(const SequenceDataset& ds, const std::filesystem::path& path);
SequenceDataset load_dataset(const std::filesystem::path& path);

void write_interactions_tsv(std::span<const InteractionRecord> records,
                            const std::filesystem::path& path);

}  // namespace e4srec::data
