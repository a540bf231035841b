#include "acvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "acvae/checkpoint.hpp"
#include "acvae/rng.hpp"

namespace acvae::data {

Format parse_format(const std::string& name) {
  if (name == "movielens_dat") return Format::movielens_dat;
  if (name == "csv") return Format::csv;
  if (name == "yelp_json") return Format::yelp_json;
  throw ParseError("unknown input format '" + name + "' (expected movielens_dat, csv, yelp_json)");
}

std::string format_name(Format f) {
  switch (f) {
    case Format::movielens_dat: return "movielens_dat";
    case Format::csv: return "csv";
    case Format::yelp_json: return "yelp_json";
  }
  return "?";
}

namespace {

[[noreturn]] void bad_row(const std::string& path, size_t line, const std::string& what,
                          const std::string& column) {
  throw ParseError(path + ":" + std::to_string(line) + ": " + what +
                   (column.empty() ? "" : " (column " + column + ")"));
}

double parse_rating(const std::string& s, const std::string& path, size_t line) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    bad_row(path, line, "malformed rating '" + s + "'", "rating");
  }
}

int64_t parse_ts(const std::string& s, const std::string& path, size_t line) {
  try {
    size_t pos = 0;
    long long v = std::stoll(s, &pos);
    if (pos != s.size() || v < 0) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    bad_row(path, line, "malformed timestamp '" + s + "'", "timestamp");
  }
}

std::vector<std::string> split(const std::string& s, const std::string& delim) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t p = s.find(delim, start);
    if (p == std::string::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, p - start));
    start = p + delim.size();
  }
  return out;
}

// days-from-civil; epoch seconds for "YYYY-MM-DD[ HH:MM:SS]"
int64_t parse_iso_date(const std::string& s, const std::string& path, size_t line) {
  int y = 0, mo = 0, d = 0, hh = 0, mi = 0, ss = 0;
  int n = std::sscanf(s.c_str(), "%d-%d-%d %d:%d:%d", &y, &mo, &d, &hh, &mi, &ss);
  if (n < 3 || mo < 1 || mo > 12 || d < 1 || d > 31)
    bad_row(path, line, "malformed date '" + s + "'", "date");
  int64_t yy = y - (mo <= 2);
  int64_t era = (yy >= 0 ? yy : yy - 399) / 400;
  int64_t yoe = yy - era * 400;
  int64_t doy = (153 * (mo + (mo > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  int64_t doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  int64_t days = era * 146097 + doe - 719468;
  return days * 86400 + hh * 3600 + mi * 60 + ss;
}

}  // namespace

std::vector<RawInteraction> load_interactions(const std::string& path, Format fmt) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open: " + path);
  std::vector<RawInteraction> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    RawInteraction r;
    switch (fmt) {
      case Format::movielens_dat: {
        auto parts = split(line, "::");
        if (parts.size() != 4)
          bad_row(path, lineno, "expected user::item::rating::timestamp", std::to_string(parts.size()));
        r.user_id = parts[0];
        r.item_id = parts[1];
        r.rating = parse_rating(parts[2], path, lineno);
        r.has_rating = true;
        r.timestamp = parse_ts(parts[3], path, lineno);
        break;
      }
      case Format::csv: {
        if (lineno == 1 && !line.empty() && !std::isdigit(static_cast<unsigned char>(line[0])))
          continue;  // header row
        auto parts = split(line, ",");
        if (parts.size() != 4)
          bad_row(path, lineno, "expected userId,itemId,rating,timestamp", std::to_string(parts.size()));
        r.user_id = parts[0];
        r.item_id = parts[1];
        r.rating = parse_rating(parts[2], path, lineno);
        r.has_rating = true;
        r.timestamp = parse_ts(parts[3], path, lineno);
        break;
      }
      case Format::yelp_json: {
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
          bad_row(path, lineno, std::string("bad JSON: ") + e.what(), "");
        }
        try {
          r.user_id = j.at("user_id").get<std::string>();
          r.item_id = j.at("business_id").get<std::string>();
          r.rating = j.at("stars").get<double>();
          r.has_rating = true;
          r.timestamp = parse_iso_date(j.at("date").get<std::string>(), path, lineno);
        } catch (const nlohmann::json::exception& e) {
          bad_row(path, lineno, std::string("missing field: ") + e.what(), "");
        }
        break;
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RawInteraction> binarize(std::vector<RawInteraction> records, double threshold) {
  std::vector<RawInteraction> out;
  out.reserve(records.size());
  for (auto& r : records) {
    if (r.has_rating && !(r.rating > threshold)) continue;
    r.rating = 1;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RawInteraction> k_core_filter(std::vector<RawInteraction> records, int min_user,
                                          int min_item) {
  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<std::string, int> ucount, icount;
    for (const auto& r : records) {
      ++ucount[r.user_id];
      ++icount[r.item_id];
    }
    std::vector<RawInteraction> kept;
    kept.reserve(records.size());
    for (auto& r : records) {
      if (ucount[r.user_id] < min_user || icount[r.item_id] < min_item) {
        changed = true;
        continue;
      }
      kept.push_back(std::move(r));
    }
    records = std::move(kept);
    if (records.empty()) throw NumericError("dataset emptied by filtering");
  }
  return records;
}

int64_t Dataset::num_records() const {
  int64_t n = 0;
  for (const auto& s : sequences) n += int64_t(s.items.size());
  return n;
}

Dataset build_sequences(const std::vector<RawInteraction>& records) {
  Dataset ds;
  ds.vocab.item_ids.push_back("");  // padding slot
  struct Ev {
    int64_t ts;
    size_t file_order;
    int32_t item;
  };
  std::vector<std::vector<Ev>> per_user;
  for (size_t k = 0; k < records.size(); ++k) {
    const auto& r = records[k];
    auto [uit, unew] = ds.vocab.user_index.try_emplace(r.user_id, ds.vocab.num_users());
    if (unew) {
      ds.vocab.user_ids.push_back(r.user_id);
      per_user.emplace_back();
    }
    auto [iit, inew] = ds.vocab.item_index.try_emplace(r.item_id, ds.vocab.num_items());
    if (inew) ds.vocab.item_ids.push_back(r.item_id);
    per_user[size_t(uit->second)].push_back(Ev{r.timestamp, k, iit->second});
  }
  ds.sequences.resize(per_user.size());
  for (size_t u = 0; u < per_user.size(); ++u) {
    auto& evs = per_user[u];
    std::stable_sort(evs.begin(), evs.end(), [](const Ev& a, const Ev& b) { return a.ts < b.ts; });
    UserSequence seq;
    seq.user_index = int32_t(u);
    seq.items.reserve(evs.size());
    for (const auto& e : evs) seq.items.push_back(e.item);
    seq.split_point = int32_t(std::ceil(0.8 * double(seq.items.size())));
    ds.sequences[u] = std::move(seq);
  }
  return ds;
}

Stats dataset_stats(const Dataset& ds) {
  Stats st;
  st.users = int64_t(ds.sequences.size());
  st.items = ds.vocab.num_items() - 1;
  st.records = ds.num_records();
  st.avg_length = st.users ? double(st.records) / double(st.users) : 0.0;
  st.sparsity = (st.users && st.items) ? 1.0 - double(st.records) / (double(st.users) * double(st.items))
                                       : 0.0;
  return st;
}

PaddedBatch make_batch(const std::vector<UserSequence>& sequences,
                       const std::vector<int32_t>& user_indices, int M) {
  if (M < 2) throw ShapeError("make_batches: M must be >= 2");
  PaddedBatch b;
  b.b = int32_t(user_indices.size());
  b.M = M;
  b.inputs.assign(size_t(b.b) * M, 0);
  b.targets.assign(size_t(b.b) * M, 0);
  b.mask.assign(size_t(b.b) * M, 0);
  b.user_indices = user_indices;
  b.window_len.resize(size_t(b.b));
  for (int i = 0; i < b.b; ++i) {
    const UserSequence& seq = sequences[size_t(user_indices[size_t(i)])];
    const int L = seq.train_len();
    const int W = std::min(L, M);
    const int start = L - W;  // keep the last M items of the train prefix
    b.window_len[size_t(i)] = W;
    for (int t = 0; t < W; ++t) b.inputs[size_t(i) * M + t] = seq.items[size_t(start + t)];
    for (int t = 0; t + 1 < W; ++t) {
      b.targets[size_t(i) * M + t] = seq.items[size_t(start + t + 1)];
      b.mask[size_t(i) * M + t] = 1;
    }
  }
  return b;
}

std::vector<PaddedBatch> make_batches(const std::vector<UserSequence>& sequences, int M,
                                      int batch_size, uint64_t shuffle_seed) {
  if (batch_size < 1) throw ShapeError("make_batches: batch_size must be >= 1");
  std::vector<int32_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(shuffle_seed);
  shuffle(rng, order);
  std::vector<PaddedBatch> out;
  size_t n = order.size();
  for (size_t start = 0; start < n; start += size_t(batch_size)) {
    size_t end = std::min(n, start + size_t(batch_size));
    if (n - end == 1) end = n;  // fold a trailing singleton into this batch
    out.push_back(make_batch(
        sequences, std::vector<int32_t>(order.begin() + long(start), order.begin() + long(end)), M));
    if (end == n) break;
  }
  return out;
}

void save_cache(const Dataset& ds, const std::string& path) {
  Stats st = dataset_stats(ds);
  nlohmann::json meta;
  meta["kind"] = "dataset_cache";
  meta["item_ids"] = ds.vocab.item_ids;
  meta["user_ids"] = ds.vocab.user_ids;
  meta["fingerprint"] = fingerprint(ds);

  std::vector<int64_t> offsets;
  std::vector<int32_t> items, splits;
  offsets.push_back(0);
  for (const auto& s : ds.sequences) {
    items.insert(items.end(), s.items.begin(), s.items.end());
    offsets.push_back(int64_t(items.size()));
    splits.push_back(s.split_point);
  }
  io::ContainerWriter w(meta);
  w.add_i64("offsets", {int64_t(offsets.size())}, offsets);
  w.add_i32("items", {int64_t(items.size())}, items);
  w.add_i32("split_points", {int64_t(splits.size())}, splits);
  w.write(path);

  nlohmann::json sj;
  sj["users"] = st.users;
  sj["items"] = st.items;
  sj["records"] = st.records;
  sj["avg_length"] = st.avg_length;
  sj["sparsity"] = st.sparsity;
  std::ofstream sf(path + ".stats.json", std::ios::trunc);
  sf << sj.dump(2) << "\n";
}

Dataset load_cache(const std::string& path) {
  io::ContainerReader r(path);
  if (!r.meta().contains("kind") || r.meta()["kind"] != "dataset_cache")
    throw ParseError("not a dataset cache: " + path);
  Dataset ds;
  ds.vocab.item_ids = r.meta().at("item_ids").get<std::vector<std::string>>();
  ds.vocab.user_ids = r.meta().at("user_ids").get<std::vector<std::string>>();
  for (int32_t i = 0; i < ds.vocab.num_items(); ++i)
    if (i != 0) ds.vocab.item_index[ds.vocab.item_ids[size_t(i)]] = i;
  for (int32_t u = 0; u < ds.vocab.num_users(); ++u) ds.vocab.user_index[ds.vocab.user_ids[size_t(u)]] = u;
  auto offsets = r.get_i64("offsets");
  auto items = r.get_i32("items");
  auto splits = r.get_i32("split_points");
  if (offsets.size() != ds.vocab.user_ids.size() + 1 || splits.size() != ds.vocab.user_ids.size())
    throw ParseError("dataset cache is inconsistent: " + path);
  ds.sequences.resize(splits.size());
  for (size_t u = 0; u < splits.size(); ++u) {
    UserSequence s;
    s.user_index = int32_t(u);
    s.items.assign(items.begin() + offsets[u], items.begin() + offsets[u + 1]);
    s.split_point = splits[u];
    ds.sequences[u] = std::move(s);
  }
  return ds;
}

uint64_t fingerprint(const Dataset& ds) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ull;
  };
  mix(uint64_t(ds.vocab.num_users()));
  mix(uint64_t(ds.vocab.num_items()));
  for (const auto& s : ds.sequences) {
    mix(uint64_t(s.items.size()));
    mix(uint64_t(s.split_point));
    for (int32_t it : s.items) mix(uint64_t(uint32_t(it)));
  }
  return h;
}

}  // namespace acvae::data
