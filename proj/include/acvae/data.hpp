#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "acvae/errors.hpp"

namespace acvae::data {

struct RawInteraction {
  std::string user_id;
  std::string item_id;
  double rating = 0;
  bool has_rating = false;
  int64_t timestamp = 0;
};

enum class Format { movielens_dat, csv, yelp_json };

Format parse_format(const std::string& name);  // throws ParseError on unknown name
std::string format_name(Format f);

// Parses the whole file or throws ParseError naming line and column of the
// first malformed row. An empty file yields an empty list.
std::vector<RawInteraction> load_interactions(const std::string& path, Format fmt);

// Keeps records with rating strictly greater than threshold, collapsing the
// rating to 1. Records without ratings pass through unchanged.
std::vector<RawInteraction> binarize(std::vector<RawInteraction> records, double threshold = 3.0);

// Iteratively removes users with fewer than min_user remaining interactions
// and items with fewer than min_item, until a fixed point. Throws NumericError
// "dataset emptied by filtering" if nothing survives.
std::vector<RawInteraction> k_core_filter(std::vector<RawInteraction> records, int min_user = 5,
                                          int min_item = 5);

struct Vocab {
  // dense index -> external id; item index 0 is reserved padding and never a real item
  std::vector<std::string> item_ids;  // item_ids[0] == ""
  std::vector<std::string> user_ids;
  std::unordered_map<std::string, int32_t> item_index;
  std::unordered_map<std::string, int32_t> user_index;

  int32_t num_items() const { return int32_t(item_ids.size()); }  // includes padding slot
  int32_t num_users() const { return int32_t(user_ids.size()); }
};

struct UserSequence {
  int32_t user_index = 0;
  std::vector<int32_t> items;  // time-ascending dense indices
  int32_t split_point = 0;     // ceil(0.8 * items.size()); train prefix is items[0..split_point)

  int32_t train_len() const { return split_point; }
  int32_t test_len() const { return int32_t(items.size()) - split_point; }
};

struct Dataset {
  Vocab vocab;
  std::vector<UserSequence> sequences;  // indexed by user_index

  int64_t num_records() const;
};

// Sorts each user's records by timestamp (stable on ties, preserving input
// order), assigns dense indices in first-appearance order, applies the 8:2
// split. Records must already be binarized/filtered.
Dataset build_sequences(const std::vector<RawInteraction>& records);

struct Stats {
  int64_t users = 0;
  int64_t items = 0;  // distinct real items
  int64_t records = 0;
  double avg_length = 0;
  double sparsity = 0;
};

Stats dataset_stats(const Dataset& ds);

// Fixed-length next-item training batch. Row-major [b x M]; row i holds user
// slot i. inputs are the last min(M, train_len) items of the train prefix,
// zero-padded at the end; targets[i,t] = inputs[i,t+1] where real; mask marks
// positions with a real next-item target.
struct PaddedBatch {
  int32_t b = 0;
  int32_t M = 0;
  std::vector<int32_t> inputs;
  std::vector<int32_t> targets;
  std::vector<uint8_t> mask;
  std::vector<int32_t> user_indices;
  std::vector<int32_t> window_len;  // real items in each row (<= M)

  int32_t input(int i, int t) const { return inputs[size_t(i) * M + t]; }
  int32_t target(int i, int t) const { return targets[size_t(i) * M + t]; }
  bool masked(int i, int t) const { return mask[size_t(i) * M + t] != 0; }
};

// One epoch of batches covering every user exactly once, user order shuffled
// by the seed. A trailing batch of one user is merged into the previous batch
// so every batch has at least two rows.
std::vector<PaddedBatch> make_batches(const std::vector<UserSequence>& sequences, int M,
                                      int batch_size, uint64_t shuffle_seed);

PaddedBatch make_batch(const std::vector<UserSequence>& sequences,
                       const std::vector<int32_t>& user_indices, int M);

// Preprocessed binary cache (ACVAE1 container) plus a <path>.stats.json sidecar.
void save_cache(const Dataset& ds, const std::string& path);
Dataset load_cache(const std::string& path);

// Content hash over vocab sizes, item streams and split points.
uint64_t fingerprint(const Dataset& ds);

}  // namespace acvae::data
