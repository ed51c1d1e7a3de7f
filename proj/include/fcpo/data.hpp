#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace fcpo {

// One logged user-item event. Ids are dense 0-based indices after remapping.
struct Interaction {
  int user_id = 0;
  int item_id = 0;
  double rating = 0.0;
  int64_t timestamp = 0;
};

enum class LogFormat { Tsv100k, Dcolon1m };

struct InteractionLog {
  std::vector<Interaction> events;
  int n_users = 0;
  int n_items = 0;
  // raw id -> dense id tables, kept for reporting.
  std::vector<std::pair<int64_t, int>> user_remap;
  std::vector<std::pair<int64_t, int>> item_remap;

  double density() const {
    if (n_users == 0 || n_items == 0) return 0.0;
    return static_cast<double>(events.size()) / (static_cast<double>(n_users) * n_items);
  }
};

// Per-user chronological split. `train` excludes the validation item, which
// is the last train item before extraction.
struct SplitDataset {
  std::vector<std::vector<Interaction>> train;       // per user, time-ordered
  std::vector<std::vector<Interaction>> validation;  // 0 or 1 entries per user
  std::vector<std::vector<Interaction>> test;        // per user, time-ordered
  int n_users = 0;
  int n_items = 0;
  std::vector<int> kept_users;     // dense user ids that met the threshold
  std::vector<int> dropped_users;  // dense user ids below the threshold

  size_t n_train_interactions() const {
    size_t n = 0;
    for (const auto& t : train) n += t.size();
    return n;
  }
};

// Popular/long-tail labels. G0 holds the ceil(quantile * n_items) items with
// the highest exposure counts, ties broken by lower item id.
struct GroupAssignment {
  std::vector<uint8_t> is_popular;       // 1 = G0, 0 = G1
  std::vector<int64_t> exposure_count;   // per item
  double quantile = 0.2;

  int n_items() const { return static_cast<int>(is_popular.size()); }
  int size_g0() const {
    return static_cast<int>(std::count(is_popular.begin(), is_popular.end(), uint8_t{1}));
  }
  int size_g1() const { return n_items() - size_g0(); }
};

namespace detail {

inline bool parse_fields(const std::string& line, char sep, bool double_sep,
                         std::array<std::string, 4>& out) {
  size_t pos = 0;
  const size_t step = double_sep ? 2 : 1;
  for (int f = 0; f < 3; ++f) {
    size_t next;
    if (double_sep) {
      next = line.find("::", pos);
    } else {
      next = line.find(sep, pos);
    }
    if (next == std::string::npos) return false;
    out[f] = line.substr(pos, next - pos);
    pos = next + step;
  }
  out[3] = line.substr(pos);
  for (const auto& f : out)
    if (f.empty()) return false;
  return true;
}

inline bool parse_i64(const std::string& s, int64_t& v) {
  try {
    size_t idx = 0;
    v = std::stoll(s, &idx);
    return idx == s.size();
  } catch (...) {
    return false;
  }
}

inline bool parse_f64(const std::string& s, double& v) {
  try {
    size_t idx = 0;
    v = std::stod(s, &idx);
    return idx == s.size() && std::isfinite(v);
  } catch (...) {
    return false;
  }
}

}  // namespace detail

// Loads a MovieLens-format interaction log. Ids are remapped to dense
// 0-based indices in order of first appearance; remap tables are retained.
inline InteractionLog load_movielens(const std::string& path, LogFormat format) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open interaction log: " + path);

  InteractionLog log;
  std::unordered_map<int64_t, int> user_ids, item_ids;
  std::string line;
  size_t line_no = 0;
  const bool dcolon = (format == LogFormat::Dcolon1m);

  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    std::array<std::string, 4> f;
    int64_t raw_user, raw_item, ts;
    double rating;
    const bool ok = detail::parse_fields(line, '\t', dcolon, f) &&
                    detail::parse_i64(f[0], raw_user) && detail::parse_i64(f[1], raw_item) &&
                    detail::parse_f64(f[2], rating) && detail::parse_i64(f[3], ts);
    if (!ok || rating < 1.0 || rating > 5.0 || ts < 0)
      throw std::runtime_error("parse error at line " + std::to_string(line_no) + " of " + path);

    auto [uit, unew] = user_ids.try_emplace(raw_user, static_cast<int>(user_ids.size()));
    auto [iit, inew] = item_ids.try_emplace(raw_item, static_cast<int>(item_ids.size()));
    if (unew) log.user_remap.emplace_back(raw_user, uit->second);
    if (inew) log.item_remap.emplace_back(raw_item, iit->second);
    log.events.push_back({uit->second, iit->second, rating, ts});
  }
  if (log.events.empty()) throw std::runtime_error("empty interaction log: " + path);

  log.n_users = static_cast<int>(user_ids.size());
  log.n_items = static_cast<int>(item_ids.size());
  return log;
}

inline void save_remap_csv(const std::string& path, const std::vector<std::pair<int64_t, int>>& table) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write remap table: " + path);
  os << "raw_id,dense_id\n";
  for (const auto& [raw, dense] : table) os << raw << "," << dense << "\n";
}

// Splits each user's events chronologically: round(ratio * n) events go to
// train+validation (validation = the last of them), the rest to test.
// Users with fewer than `min_interactions` events are dropped and reported.
// Equal timestamps keep input file order.
inline SplitDataset chronological_split(const InteractionLog& log, double ratio = 0.8,
                                        int min_interactions = 2) {
  if (ratio <= 0.0 || ratio >= 1.0) throw std::invalid_argument("split ratio must be in (0,1)");
  if (min_interactions < 2) min_interactions = 2;

  SplitDataset ds;
  ds.n_users = log.n_users;
  ds.n_items = log.n_items;
  ds.train.resize(log.n_users);
  ds.validation.resize(log.n_users);
  ds.test.resize(log.n_users);

  std::vector<std::vector<Interaction>> per_user(log.n_users);
  for (const auto& e : log.events) per_user[e.user_id].push_back(e);

  for (int u = 0; u < log.n_users; ++u) {
    auto& events = per_user[u];
    if (static_cast<int>(events.size()) < min_interactions) {
      ds.dropped_users.push_back(u);
      continue;
    }
    std::stable_sort(events.begin(), events.end(),
                     [](const Interaction& a, const Interaction& b) { return a.timestamp < b.timestamp; });

    const auto n = static_cast<int>(events.size());
    int n_head = static_cast<int>(std::floor(ratio * n + 0.5));
    // Keep >=1 train and the validation item; a test item whenever n >= 3.
    n_head = std::clamp(n_head, 2, std::max(2, n - 1));

    ds.train[u].assign(events.begin(), events.begin() + (n_head - 1));
    ds.validation[u].assign(events.begin() + (n_head - 1), events.begin() + n_head);
    ds.test[u].assign(events.begin() + n_head, events.end());
    ds.kept_users.push_back(u);
  }
  if (ds.kept_users.empty()) throw std::runtime_error("no user meets the interaction threshold");
  return ds;
}

// Recomputes labels from the current exposure counts, preserving
// |G0| = ceil(quantile * n_items) with ties broken by lower item id.
inline void relabel_groups(GroupAssignment& g) {
  const int n = g.n_items();
  const int k = static_cast<int>(std::ceil(g.quantile * n));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (g.exposure_count[a] != g.exposure_count[b]) return g.exposure_count[a] > g.exposure_count[b];
    return a < b;
  });
  std::fill(g.is_popular.begin(), g.is_popular.end(), uint8_t{0});
  for (int i = 0; i < k; ++i) g.is_popular[order[i]] = 1;
}

// Training impression counts and the top-quantile popularity labels.
inline GroupAssignment initial_groups(const SplitDataset& ds, double quantile = 0.2) {
  if (quantile <= 0.0 || quantile >= 1.0) throw std::invalid_argument("quantile must be in (0,1)");

  GroupAssignment g;
  g.quantile = quantile;
  g.exposure_count.assign(ds.n_items, 0);
  for (const auto& user_events : ds.train)
    for (const auto& e : user_events) ++g.exposure_count[e.item_id];

  g.is_popular.assign(ds.n_items, 0);
  relabel_groups(g);
  return g;
}

}  // namespace fcpo
