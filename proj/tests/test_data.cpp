#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "e4srec/data.hpp"
#include "e4srec/errors.hpp"

using namespace e4srec;
using namespace e4srec::data;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& content) {
  auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream out(path);
  out << content;
  return path;
}

InteractionRecord rec(const std::string& u, const std::string& i, int64_t ts) {
  return {u, i, ts};
}

bool same_records(const std::vector<InteractionRecord>& a,
                  const std::vector<InteractionRecord>& b) {
  if (a.size() != b.size()) return false;
  for (size_t k = 0; k < a.size(); ++k) {
    if (a[k].user_id != b[k].user_id || a[k].item_id != b[k].item_id ||
        a[k].timestamp != b[k].timestamp) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("load_interactions: well-formed file yields one record per line") {
  auto path = write_temp("e4s_ok.tsv", "u1\ti1\t100\nu2\ti2\t200\nu1\ti2\t300\n");
  auto result = load_interactions(path);
  REQUIRE(result.records.size() == 3);
  CHECK(result.malformed_count == 0);
  CHECK(result.records[0].user_id == "u1");
  CHECK(result.records[2].timestamp == 300);
}

TEST_CASE("load_interactions: malformed lines are skipped and counted") {
  auto path = write_temp("e4s_bad.tsv",
                         "u1\ti1\t100\n"
                         "not a record\n"
                         "u2\ti2\t200\n"
                         "u3\ti3\t300\n");
  auto result = load_interactions(path);
  CHECK(result.records.size() == 3);
  CHECK(result.malformed_count == 1);
}

TEST_CASE("load_interactions: rejects missing file and empty dataset") {
  CHECK_THROWS_AS(load_interactions("/nonexistent/e4srec.tsv"), IoError);
  auto path = write_temp("e4s_empty.tsv", "garbage line\n");
  CHECK_THROWS_AS(load_interactions(path), EmptyDatasetError);
}

TEST_CASE("load_interactions: min-timestamp cutoff filters older records") {
  auto path = write_temp("e4s_ts.tsv", "u1\ti1\t100\nu1\ti2\t200\nu1\ti3\t300\n");
  auto result = load_interactions(path, 200);
  CHECK(result.records.size() == 2);
  CHECK(result.malformed_count == 0);
}

// Real Amazon Beauty numbers from the published statistics; exercised only
// when the raw file is supplied via E4SREC_BEAUTY_TSV.
TEST_CASE("load_interactions: Beauty post-filter statistics when available") {
  const char* env = std::getenv("E4SREC_BEAUTY_TSV");
  if (!env) return;
  auto loaded = load_interactions(env);
  auto filtered = k_core_filter(std::move(loaded.records), 5);
  auto ds = build_sequences(filtered);
  CHECK(ds.user_count() == 22363);
  CHECK(ds.item_count() == 12101);
}

TEST_CASE("k_core_filter: input already a k-core is unchanged") {
  std::vector<InteractionRecord> records{
      rec("u0", "i0", 1), rec("u0", "i1", 2),
      rec("u1", "i0", 3), rec("u1", "i1", 4),
  };
  auto filtered = k_core_filter(records, 2);
  CHECK(same_records(filtered, records));
}

TEST_CASE("k_core_filter: k=1 keeps every interaction") {
  std::vector<InteractionRecord> records{rec("a", "x", 1), rec("b", "y", 2), rec("c", "z", 3)};
  auto filtered = k_core_filter(records, 1);
  CHECK(same_records(filtered, records));
}

TEST_CASE("k_core_filter: cascading removal reaches the hand-computed fixpoint") {
  // i5 appears once -> drop (u3,i5); u3 falls below 2 -> drop (u3,i4);
  // i4 falls below 2 -> drop (u4,i4); u4 falls below 2 -> drop (u4,i2);
  // the remaining 8 records are a 2-core.
  std::vector<InteractionRecord> records{
      rec("u0", "i0", 1), rec("u0", "i1", 2),
      rec("u1", "i0", 3), rec("u1", "i1", 4),
      rec("u2", "i2", 5), rec("u2", "i3", 6),
      rec("u3", "i5", 7), rec("u3", "i4", 8),
      rec("u4", "i4", 9), rec("u4", "i2", 10),
      rec("u5", "i3", 11), rec("u5", "i2", 12),
  };
  auto filtered = k_core_filter(records, 2);
  std::vector<InteractionRecord> expected{
      rec("u0", "i0", 1), rec("u0", "i1", 2),
      rec("u1", "i0", 3), rec("u1", "i1", 4),
      rec("u2", "i2", 5), rec("u2", "i3", 6),
      rec("u5", "i3", 11), rec("u5", "i2", 12),
  };
  CHECK(same_records(filtered, expected));
}

TEST_CASE("k_core_filter: empty fixpoint raises, filtering is idempotent") {
  std::vector<InteractionRecord> sparse{rec("a", "x", 1), rec("b", "y", 2)};
  CHECK_THROWS_AS(k_core_filter(sparse, 2), EmptyDatasetError);

  SynthConfig cfg;
  cfg.n_users = 60;
  cfg.n_items = 30;
  cfg.seed = 7;
  auto records = synth_generate(cfg);
  auto once = k_core_filter(records, 5);
  auto twice = k_core_filter(once, 5);
  CHECK(same_records(once, twice));
}

TEST_CASE("build_sequences: per-user ordering follows timestamps") {
  std::vector<InteractionRecord> records{
      rec("u", "c", 30), rec("u", "a", 10), rec("u", "b", 20),
  };
  auto ds = build_sequences(records);
  REQUIRE(ds.user_count() == 1);
  REQUIRE(ds.sequences[0].size() == 3);
  CHECK(ds.item_ids[ds.sequences[0][0]] == "a");
  CHECK(ds.item_ids[ds.sequences[0][1]] == "b");
  CHECK(ds.item_ids[ds.sequences[0][2]] == "c");
}

TEST_CASE("build_sequences: equal timestamps keep input order") {
  std::vector<InteractionRecord> records{
      rec("u", "x", 100), rec("u", "y", 100), rec("u", "z", 100),
  };
  auto ds = build_sequences(records);
  CHECK(ds.item_ids[ds.sequences[0][0]] == "x");
  CHECK(ds.item_ids[ds.sequences[0][1]] == "y");
  CHECK(ds.item_ids[ds.sequences[0][2]] == "z");
}

TEST_CASE("build_sequences: users share one item index space") {
  std::vector<InteractionRecord> records{
      rec("u1", "apple", 1), rec("u1", "pear", 2),
      rec("u2", "pear", 3), rec("u2", "plum", 4),
  };
  auto ds = build_sequences(records);
  CHECK(ds.item_count() == 3);
  CHECK(ds.sequences[0][1] == ds.sequences[1][0]);  // both are "pear"
}

TEST_CASE("build_sequences: reindexing is a bijection onto [0, N)") {
  SynthConfig cfg;
  cfg.n_users = 40;
  cfg.n_items = 25;
  cfg.seed = 11;
  auto ds = build_sequences(synth_generate(cfg));
  std::set<int32_t> seen_items;
  for (const auto& [name, idx] : ds.item_index) {
    CHECK(ds.item_ids[static_cast<size_t>(idx)] == name);
    seen_items.insert(idx);
  }
  CHECK(static_cast<int32_t>(seen_items.size()) == ds.item_count());
  CHECK(*seen_items.begin() == 0);
  CHECK(*seen_items.rbegin() == ds.item_count() - 1);
  std::set<int32_t> seen_users;
  for (const auto& [name, idx] : ds.user_index) seen_users.insert(idx);
  CHECK(static_cast<int32_t>(seen_users.size()) == ds.user_count());
}

TEST_CASE("leave_one_out: definition and minimum-length example") {
  SequenceDataset ds;
  ds.item_ids = {"0", "1", "2", "3", "4", "5", "6"};
  ds.sequences = {{1, 2, 3, 4, 5, 6, 0}, {0, 1, 2, 3, 4}};
  auto split = leave_one_out(ds);
  REQUIRE(split.user_count() == 2);
  CHECK(split.train[0] == std::vector<int32_t>{1, 2, 3, 4, 5});
  CHECK(split.valid[0] == 6);
  CHECK(split.test[0] == 0);
  CHECK(split.train[1] == std::vector<int32_t>{0, 1, 2});
  CHECK(split.valid[1] == 3);
  CHECK(split.test[1] == 4);
}

TEST_CASE("leave_one_out: short sequences are excluded with a warning") {
  SequenceDataset ds;
  ds.item_ids = {"0", "1", "2"};
  ds.sequences = {{0, 1}, {0, 1, 2}};
  auto split = leave_one_out(ds);
  CHECK(split.user_count() == 1);
  CHECK(split.excluded_users == 1);
}

TEST_CASE("leave_one_out: parts reconstruct the original sequence") {
  SynthConfig cfg;
  cfg.n_users = 50;
  cfg.n_items = 20;
  cfg.seed = 3;
  auto ds = build_sequences(synth_generate(cfg));
  auto split = leave_one_out(ds);
  REQUIRE(split.user_count() == ds.user_count());
  for (int32_t u = 0; u < split.user_count(); ++u) {
    CHECK(split.full_sequence(u) == ds.sequences[static_cast<size_t>(u)]);
  }
}

TEST_CASE("truncate keeps the most recent items") {
  std::vector<int32_t> seq(60);
  for (int i = 0; i < 60; ++i) seq[static_cast<size_t>(i)] = i;
  auto t = truncate(seq, 50);
  REQUIRE(t.size() == 50);
  CHECK(t.front() == 10);
  CHECK(t.back() == 59);

  std::vector<int32_t> short_seq{1, 2, 3};
  CHECK(truncate(short_seq, 50) == short_seq);

  std::vector<int32_t> exact(50, 7);
  CHECK(truncate(exact, 50) == exact);
}

TEST_CASE("truncate returns a suffix of length min(|s|, m)") {
  SynthConfig cfg;
  cfg.n_users = 10;
  cfg.n_items = 15;
  cfg.seed = 21;
  auto ds = build_sequences(synth_generate(cfg));
  for (const auto& seq : ds.sequences) {
    for (int m : {1, 3, 100}) {
      auto t = truncate(seq, m);
      size_t expect = std::min(seq.size(), static_cast<size_t>(m));
      REQUIRE(t.size() == expect);
      CHECK(std::equal(t.begin(), t.end(), seq.end() - static_cast<ptrdiff_t>(expect)));
    }
  }
}

TEST_CASE("synth_generate: fixed seed regenerates byte-identical records") {
  SynthConfig cfg;
  cfg.n_users = 30;
  cfg.n_items = 12;
  auto a = synth_generate(cfg);
  auto b = synth_generate(cfg);
  CHECK(same_records(a, b));
  cfg.seed += 1;
  CHECK_FALSE(same_records(a, synth_generate(cfg)));
}

TEST_CASE("synth_generate: infinite sharpness gives each item a unique successor") {
  SynthConfig cfg;
  cfg.n_users = 200;
  cfg.n_items = 40;
  cfg.transition_sharpness = 1e18;
  cfg.seed = 5;
  auto records = synth_generate(cfg);
  // consecutive pairs within one user's walk must define a function
  std::map<std::string, std::string> next;
  std::string prev_user;
  std::string prev_item;
  for (const auto& r : records) {
    if (r.user_id == prev_user) {
      auto [it, inserted] = next.try_emplace(prev_item, r.item_id);
      if (!inserted) CHECK(it->second == r.item_id);
    }
    prev_user = r.user_id;
    prev_item = r.item_id;
  }
  CHECK(next.size() > 1);
}

TEST_CASE("synth_generate: default corpus survives 5-core intact (frozen regression)") {
  SynthConfig cfg;  // 2000 users x 200 items, sharpness 3.0, seed 42
  auto records = synth_generate(cfg);
  CHECK(records.size() == 48119);  // frozen from the seeded generator
  auto filtered = k_core_filter(records, 5);
  CHECK(filtered.size() == records.size());
  auto ds = build_sequences(filtered);
  CHECK(ds.user_count() == 2000);  // >= 90% retention required, 100% observed
  CHECK(ds.item_count() == 200);
}

TEST_CASE("dataset artifact round-trips through save/load") {
  SynthConfig cfg;
  cfg.n_users = 25;
  cfg.n_items = 10;
  cfg.seed = 9;
  auto ds = build_sequences(synth_generate(cfg));
  auto path = std::filesystem::temp_directory_path() / "e4s_ds.json";
  save_dataset(ds, path);
  auto loaded = load_dataset(path);
  CHECK(loaded.user_ids == ds.user_ids);
  CHECK(loaded.item_ids == ds.item_ids);
  CHECK(loaded.sequences == ds.sequences);
  CHECK(loaded.item_index.at("i3") == ds.item_index.at("i3"));
}
