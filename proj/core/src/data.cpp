#include "e4srec/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "e4srec/errors.hpp"
#include "e4srec/rng.hpp"

namespace e4srec::data {

namespace {

bool parse_timestamp(const std::string& field, int64_t& out) {
  if (field.empty()) return false;
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end && out >= 0;
}

}  // namespace

LoadResult load_interactions(const std::filesystem::path& source, int64_t min_timestamp) {
  std::ifstream in(source);
  if (!in) throw IoError("load_interactions: cannot open " + source.string());
  LoadResult result;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    size_t t1 = line.find('\t');
    size_t t2 = (t1 == std::string::npos) ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos) {
      ++result.malformed_count;
      continue;
    }
    InteractionRecord rec;
    rec.user_id = line.substr(0, t1);
    rec.item_id = line.substr(t1 + 1, t2 - t1 - 1);
    if (rec.user_id.empty() || rec.item_id.empty() ||
        !parse_timestamp(line.substr(t2 + 1), rec.timestamp)) {
      ++result.malformed_count;
      continue;
    }
    if (min_timestamp >= 0 && rec.timestamp < min_timestamp) continue;
    result.records.push_back(std::move(rec));
  }
  if (result.records.empty()) {
    throw EmptyDatasetError("load_interactions: no valid records in " + source.string());
  }
  return result;
}

std::vector<InteractionRecord> k_core_filter(std::vector<InteractionRecord> records, int k) {
  if (k < 1) throw ConfigError("k_core_filter: k must be >= 1");
  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<std::string, int64_t> user_count, item_count;
    for (const auto& r : records) {
      ++user_count[r.user_id];
      ++item_count[r.item_id];
    }
    std::vector<InteractionRecord> kept;
    kept.reserve(records.size());
    for (auto& r : records) {
      if (user_count[r.user_id] >= k && item_count[r.item_id] >= k) {
        kept.push_back(std::move(r));
      } else {
        changed = true;
      }
    }
    records = std::move(kept);
    if (records.empty()) {
      throw EmptyDatasetError("k_core_filter: fixpoint is empty for k=" + std::to_string(k));
    }
  }
  return records;
}

SequenceDataset build_sequences(const std::vector<InteractionRecord>& records) {
  if (records.empty()) throw EmptyDatasetError("build_sequences: no records");
  SequenceDataset ds;
  struct Entry {
    int64_t timestamp;
    int64_t position;
    int32_t item;
  };
  std::vector<std::vector<Entry>> per_user;
  for (size_t pos = 0; pos < records.size(); ++pos) {
    const auto& r = records[pos];
    auto [uit, user_new] = ds.user_index.try_emplace(
        r.user_id, static_cast<int32_t>(ds.user_ids.size()));
    if (user_new) {
      ds.user_ids.push_back(r.user_id);
      per_user.emplace_back();
    }
    auto [iit, item_new] = ds.item_index.try_emplace(
        r.item_id, static_cast<int32_t>(ds.item_ids.size()));
    if (item_new) ds.item_ids.push_back(r.item_id);
    per_user[static_cast<size_t>(uit->second)].push_back(
        {r.timestamp, static_cast<int64_t>(pos), iit->second});
  }
  ds.sequences.resize(per_user.size());
  for (size_t u = 0; u < per_user.size(); ++u) {
    auto& entries = per_user[u];
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
      return a.position < b.position;  // tie: keep input order
    });
    ds.sequences[u].reserve(entries.size());
    for (const Entry& e : entries) ds.sequences[u].push_back(e.item);
  }
  return ds;
}

std::vector<int32_t> SplitDataset::full_sequence(int32_t user) const {
  std::vector<int32_t> seq = train[static_cast<size_t>(user)];
  seq.push_back(valid[static_cast<size_t>(user)]);
  seq.push_back(test[static_cast<size_t>(user)]);
  return seq;
}

SplitDataset leave_one_out(const SequenceDataset& ds) {
  SplitDataset split;
  split.n_items = ds.item_count();
  for (const auto& seq : ds.sequences) {
    if (seq.size() < 3) {
      ++split.excluded_users;
      continue;
    }
    split.train.emplace_back(seq.begin(), seq.end() - 2);
    split.valid.push_back(seq[seq.size() - 2]);
    split.test.push_back(seq.back());
  }
  if (split.excluded_users > 0) {
    std::cerr << "[e4srec] warning: leave_one_out dropped " << split.excluded_users
              << " user(s) with fewer than 3 interactions\n";
  }
  if (split.train.empty()) {
    throw EmptyDatasetError("leave_one_out: no user has at least 3 interactions");
  }
  return split;
}

std::vector<int32_t> truncate(std::span<const int32_t> sequence, int max_len) {
  if (max_len < 1) throw ConfigError("truncate: max_len must be >= 1");
  size_t keep = std::min(sequence.size(), static_cast<size_t>(max_len));
  return std::vector<int32_t>(sequence.end() - static_cast<ptrdiff_t>(keep), sequence.end());
}

std::vector<InteractionRecord> synth_generate(const SynthConfig& config) {
  if (config.n_users < 1 || config.n_items < 1) {
    throw ConfigError("synth_generate: need at least one user and one item");
  }
  if (config.min_walk < 1 || config.max_walk < config.min_walk) {
    throw ConfigError("synth_generate: bad walk-length range");
  }
  Rng rng(config.seed);
  const int n = config.n_items;
  const int latent_dim = 8;

  // Transition structure lives in a latent space: item i prefers successors j
  // with high <R z_i, z_j>, so nearby items share similar successor rows (the
  // collaborative structure a recommender exploits). Sinkhorn balancing makes
  // the matrix doubly stochastic, keeping the uniform distribution stationary
  // so raw popularity carries almost no signal.
  std::vector<std::vector<double>> latent(static_cast<size_t>(n),
                                          std::vector<double>(latent_dim));
  for (auto& z : latent) {
    double norm = 0.0;
    for (auto& v : z) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(std::max(norm, 1e-12));
    for (auto& v : z) v /= norm;
  }
  std::vector<std::vector<double>> rotation(latent_dim, std::vector<double>(latent_dim));
  for (auto& row : rotation) {
    for (auto& v : row) v = rng.normal() / std::sqrt(static_cast<double>(latent_dim));
  }

  bool degenerate = config.transition_sharpness > 1e6;
  double s = degenerate ? 1.0 : config.transition_sharpness;
  std::vector<std::vector<double>> trans(static_cast<size_t>(n), std::vector<double>(n));
  std::vector<int32_t> argmax_succ(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    std::vector<double> query(latent_dim, 0.0);
    for (int a = 0; a < latent_dim; ++a) {
      for (int b = 0; b < latent_dim; ++b) {
        query[static_cast<size_t>(a)] +=
            rotation[static_cast<size_t>(a)][static_cast<size_t>(b)] *
            latent[static_cast<size_t>(i)][static_cast<size_t>(b)];
      }
    }
    double best = -1e300;
    for (int j = 0; j < n; ++j) {
      double affinity = 0.0;
      for (int a = 0; a < latent_dim; ++a) {
        affinity += query[static_cast<size_t>(a)] * latent[static_cast<size_t>(j)][static_cast<size_t>(a)];
      }
      trans[static_cast<size_t>(i)][static_cast<size_t>(j)] = s * affinity;
      if (affinity > best) {
        best = affinity;
        argmax_succ[static_cast<size_t>(i)] = j;
      }
    }
    double row_max = *std::max_element(trans[static_cast<size_t>(i)].begin(),
                                       trans[static_cast<size_t>(i)].end());
    for (double& v : trans[static_cast<size_t>(i)]) v = std::exp(v - row_max);
  }
  for (int iter = 0; iter < 50; ++iter) {
    for (int i = 0; i < n; ++i) {  // rows
      double sum = 0.0;
      for (double v : trans[static_cast<size_t>(i)]) sum += v;
      for (double& v : trans[static_cast<size_t>(i)]) v /= sum;
    }
    for (int j = 0; j < n; ++j) {  // columns
      double sum = 0.0;
      for (int i = 0; i < n; ++i) sum += trans[static_cast<size_t>(i)][static_cast<size_t>(j)];
      for (int i = 0; i < n; ++i) {
        trans[static_cast<size_t>(i)][static_cast<size_t>(j)] *= static_cast<double>(n) / sum / n;
      }
    }
  }
  std::vector<std::vector<double>> cumulative(static_cast<size_t>(n), std::vector<double>(n));
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < n; ++j) {
      acc += trans[static_cast<size_t>(i)][static_cast<size_t>(j)];
      cumulative[static_cast<size_t>(i)][static_cast<size_t>(j)] = acc;
    }
  }

  std::vector<InteractionRecord> records;
  for (int u = 0; u < config.n_users; ++u) {
    int walk = config.min_walk +
               static_cast<int>(rng.uniform_int(config.max_walk - config.min_walk + 1));
    int32_t item = static_cast<int32_t>(rng.uniform_int(n));
    int64_t base_ts = 1'000'000'000LL + static_cast<int64_t>(u) * 100'000LL;
    for (int t = 0; t < walk; ++t) {
      records.push_back({"u" + std::to_string(u), "i" + std::to_string(item),
                         base_ts + static_cast<int64_t>(t) * 60});
      if (degenerate) {
        item = argmax_succ[static_cast<size_t>(item)];
        continue;
      }
      const auto& cum = cumulative[static_cast<size_t>(item)];
      double r = rng.uniform() * cum.back();
      size_t j = static_cast<size_t>(std::lower_bound(cum.begin(), cum.end(), r) - cum.begin());
      if (j >= cum.size()) j = cum.size() - 1;
      item = static_cast<int32_t>(j);
    }
  }
  return records;
}

void save_dataset(const SequenceDataset& ds, const std::filesystem::path& path) {
  nlohmann::json j;
  j["users"] = ds.user_ids;
  j["items"] = ds.item_ids;
  j["sequences"] = ds.sequences;
  std::ofstream out(path);
  if (!out) throw IoError("save_dataset: cannot write " + path.string());
  out << j.dump();
}

SequenceDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_dataset: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_dataset: " + path.string() + " is not valid JSON: " + e.what());
  }
  SequenceDataset ds;
  ds.user_ids = j.at("users").get<std::vector<std::string>>();
  ds.item_ids = j.at("items").get<std::vector<std::string>>();
  ds.sequences = j.at("sequences").get<std::vector<std::vector<int32_t>>>();
  for (size_t i = 0; i < ds.user_ids.size(); ++i) {
    ds.user_index[ds.user_ids[i]] = static_cast<int32_t>(i);
  }
  for (size_t i = 0; i < ds.item_ids.size(); ++i) {
    ds.item_index[ds.item_ids[i]] = static_cast<int32_t>(i);
  }
  int32_t n = ds.item_count();
  for (const auto& seq : ds.sequences) {
    for (int32_t item : seq) {
      if (item < 0 || item >= n) {
        throw IoError("load_dataset: item index out of range in " + path.string());
      }
    }
  }
  return ds;
}

void write_interactions_tsv(std::span<const InteractionRecord> records,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_interactions_tsv: cannot write " + path.string());
  for (const auto& r : records) {
    out << r.user_id << '\t' << r.item_id << '\t' << r.timestamp << '\n';
  }
}

}  // namespace e4srec::data
