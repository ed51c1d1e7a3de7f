#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "fcpo/data.hpp"

namespace fcpo {

// Fairness budget: a per-list exposure cap alpha'*K on the popular group,
// accumulated over a discounted horizon of T steps into the cost limit d.
struct FairnessSpec {
  std::optional<double> alpha;  // Exposure(G0)/Exposure(G1) cap, if given
  double alpha_prime = 1.0;     // per-list fraction cap, in (0,1]
  int K = 1;
  int T = 1;
  double gamma_c = 0.99;

  static FairnessSpec from_alpha(double alpha, int K, int T, double gamma_c) {
    if (alpha <= 0.0) throw std::invalid_argument("alpha must be positive");
    FairnessSpec s;
    s.alpha = alpha;
    s.alpha_prime = alpha / (1.0 + alpha);
    s.K = K;
    s.T = T;
    s.gamma_c = gamma_c;
    return s;
  }

  static FairnessSpec from_alpha_prime(double alpha_prime, int K, int T, double gamma_c) {
    if (alpha_prime <= 0.0 || alpha_prime > 1.0)
      throw std::invalid_argument("alpha_prime must be in (0,1]");
    FairnessSpec s;
    s.alpha_prime = alpha_prime;
    s.K = K;
    s.T = T;
    s.gamma_c = gamma_c;
    return s;
  }
};

// d = sum_{t=0}^{T-1} gamma_c^t * alpha' * K.
inline double cost_limit(const FairnessSpec& spec) {
  double d = 0.0;
  double g = 1.0;
  for (int t = 0; t < spec.T; ++t) {
    d += g * spec.alpha_prime * spec.K;
    g *= spec.gamma_c;
  }
  return d;
}

// Per-group exposure counts of one recommendation list.
inline std::pair<int, int> exposure_counts(const std::vector<int>& items, const GroupAssignment& groups) {
  int g0 = 0, g1 = 0;
  for (int it : items) (groups.is_popular[it] ? g0 : g1)++;
  return {g0, g1};
}

// |Exposure(G0)/|G0| - Exposure(G1)/|G1||; zero iff demographic parity holds.
inline double parity_gap(std::pair<int, int> counts, std::pair<int, int> group_sizes) {
  if (group_sizes.first <= 0 || group_sizes.second <= 0)
    throw std::invalid_argument("group sizes must be positive");
  return std::abs(static_cast<double>(counts.first) / group_sizes.first -
                  static_cast<double>(counts.second) / group_sizes.second);
}

inline double recall_at_k(const std::vector<int>& recommended, const std::unordered_set<int>& relevant,
                          int k) {
  if (k > static_cast<int>(recommended.size()))
    throw std::invalid_argument("k exceeds recommendation length");
  if (relevant.empty()) return 0.0;
  int hits = 0;
  for (int i = 0; i < k; ++i) hits += relevant.count(recommended[i]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

inline double f1_at_k(const std::vector<int>& recommended, const std::unordered_set<int>& relevant,
                      int k) {
  if (k > static_cast<int>(recommended.size()))
    throw std::invalid_argument("k exceeds recommendation length");
  if (relevant.empty()) return 0.0;
  int hits = 0;
  for (int i = 0; i < k; ++i) hits += relevant.count(recommended[i]) ? 1 : 0;
  const double prec = static_cast<double>(hits) / k;
  const double rec = static_cast<double>(hits) / static_cast<double>(relevant.size());
  if (prec + rec == 0.0) return 0.0;
  return 2.0 * prec * rec / (prec + rec);
}

// Binary-gain NDCG with 1/log2(rank+1) discounts; IDCG over min(k, |relevant|).
inline double ndcg_at_k(const std::vector<int>& recommended, const std::unordered_set<int>& relevant,
                        int k) {
  if (k > static_cast<int>(recommended.size()))
    throw std::invalid_argument("k exceeds recommendation length");
  if (relevant.empty()) return 0.0;
  double dcg = 0.0;
  for (int i = 0; i < k; ++i)
    if (relevant.count(recommended[i])) dcg += 1.0 / std::log2(i + 2.0);
  const int ideal = std::min<int>(k, static_cast<int>(relevant.size()));
  double idcg = 0.0;
  for (int i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(i + 2.0);
  return idcg > 0.0 ? dcg / idcg : 0.0;
}

// Mean absolute pairwise difference normalized by twice the mean:
// (1/(2n^2 gbar)) * sum_ij |g_i - g_j|, computed via the sorted form
// sum_i (2i - n - 1) g_(i) / (n^2 gbar).
inline double gini_index(const std::vector<double>& exposures) {
  const auto n = static_cast<int>(exposures.size());
  if (n == 0) throw std::invalid_argument("gini_index: empty exposure vector");
  double total = 0.0;
  for (double g : exposures) {
    if (g < 0.0) throw std::invalid_argument("gini_index: negative exposure");
    total += g;
  }
  if (total <= 0.0) throw std::invalid_argument("gini_index: all exposures are zero");

  std::vector<double> sorted = exposures;
  std::sort(sorted.begin(), sorted.end());
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += (2.0 * (i + 1) - n - 1.0) * sorted[i];
  return acc / (static_cast<double>(n) * total);
}

// Fraction of recommended slots occupied by popular-group items.
inline double popularity_rate(const std::vector<std::vector<int>>& lists, const GroupAssignment& groups) {
  int64_t popular = 0, total = 0;
  for (const auto& list : lists) {
    for (int it : list) {
      popular += groups.is_popular[it] ? 1 : 0;
      ++total;
    }
  }
  if (total == 0) throw std::invalid_argument("popularity_rate: no recommendations");
  return static_cast<double>(popular) / static_cast<double>(total);
}

}  // namespace fcpo
