#pragma once

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fcpo/data.hpp"
#include "fcpo/net.hpp"
#include "fcpo/rng.hpp"
#include "fcpo/serialize.hpp"

namespace fcpo {

// Frozen user/item embeddings. Rows are users/items, columns are latent
// factors. Pretrained once and fixed for the rest of the pipeline.
struct EmbeddingTable {
  Mat user_vectors;  // n_users x d
  Mat item_vectors;  // n_items x d

  int dim() const { return static_cast<int>(user_vectors.cols()); }
  int n_users() const { return static_cast<int>(user_vectors.rows()); }
  int n_items() const { return static_cast<int>(item_vectors.rows()); }
};

inline double predict_score(const EmbeddingTable& table, int user, int item) {
  if (user < 0 || user >= table.n_users() || item < 0 || item >= table.n_items())
    throw std::out_of_range("predict_score: index out of range");
  return table.user_vectors.row(user).dot(table.item_vectors.row(item));
}

struct PmfOptions {
  int dim = 100;
  int epochs = 50;
  double lr = 0.01;
  double l2 = 0.1;
  int batch_size = 64;
};

// Minibatch SGD on sum_(u,i) (r_ui - u.v)^2 + l2 (|u|^2 + |v|^2), with
// per-epoch shuffling driven by the caller's stream. Deterministic per seed.
inline EmbeddingTable train_pmf(const SplitDataset& ds, const PmfOptions& opt, Rng rng) {
  if (opt.dim < 1) throw std::invalid_argument("train_pmf: dim must be >= 1");
  if (opt.lr <= 0.0) throw std::invalid_argument("train_pmf: lr must be positive");

  struct Sample {
    int u, i;
    double r;
  };
  std::vector<Sample> samples;
  for (const auto& user_events : ds.train)
    for (const auto& e : user_events) samples.push_back({e.user_id, e.item_id, e.rating});
  if (samples.empty()) throw std::invalid_argument("train_pmf: no training interactions");

  EmbeddingTable table;
  table.user_vectors = Mat::Zero(ds.n_users, opt.dim);
  table.item_vectors = Mat::Zero(ds.n_items, opt.dim);
  for (int u = 0; u < ds.n_users; ++u)
    for (int k = 0; k < opt.dim; ++k) table.user_vectors(u, k) = rng.uniform(-0.01, 0.01);
  for (int i = 0; i < ds.n_items; ++i)
    for (int k = 0; k < opt.dim; ++k) table.item_vectors(i, k) = rng.uniform(-0.01, 0.01);

  auto objective = [&]() {
    double loss = 0.0;
    for (const auto& s : samples) {
      const double err = s.r - table.user_vectors.row(s.u).dot(table.item_vectors.row(s.i));
      loss += err * err + opt.l2 * (table.user_vectors.row(s.u).squaredNorm() +
                                    table.item_vectors.row(s.i).squaredNorm());
    }
    return loss / static_cast<double>(samples.size());
  };

  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  const int batch = std::max(1, opt.batch_size);

  double first_epoch_loss = 0.0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(static_cast<int>(i))]);

    for (size_t start = 0; start < order.size(); start += batch) {
      const size_t end = std::min(order.size(), start + batch);
      std::vector<std::pair<int, Vec>> du, dv;
      for (size_t k = start; k < end; ++k) {
        const auto& s = samples[order[k]];
        const Vec u = table.user_vectors.row(s.u);
        const Vec v = table.item_vectors.row(s.i);
        const double err = s.r - u.dot(v);
        du.emplace_back(s.u, Vec(-2.0 * err * v + 2.0 * opt.l2 * u));
        dv.emplace_back(s.i, Vec(-2.0 * err * u + 2.0 * opt.l2 * v));
      }
      const double scale = opt.lr / static_cast<double>(end - start);
      for (const auto& [u, g] : du) table.user_vectors.row(u) -= scale * g.transpose();
      for (const auto& [i, g] : dv) table.item_vectors.row(i) -= scale * g.transpose();
    }

    const double loss = objective();
    if (!std::isfinite(loss))
      throw std::runtime_error("train_pmf: loss diverged (NaN/Inf); reduce the learning rate");
    if (epoch == 0) first_epoch_loss = loss;
  }
  if (opt.epochs > 0 && objective() > first_epoch_loss + 1e-12)
    throw std::runtime_error("train_pmf: final loss exceeds first-epoch loss; reduce the learning rate");
  return table;
}

// Embedding checkpoint: "FCPO-EMB v1", dims, row-major 64-bit values.
inline void save_embeddings(const std::string& path, const EmbeddingTable& table) {
  auto os = open_output(path);
  write_magic(os, "FCPO-EMB v1");
  write_u32(os, static_cast<uint32_t>(table.n_users()));
  write_u32(os, static_cast<uint32_t>(table.n_items()));
  write_u32(os, static_cast<uint32_t>(table.dim()));
  for (int u = 0; u < table.n_users(); ++u)
    for (int k = 0; k < table.dim(); ++k) write_f64(os, table.user_vectors(u, k));
  for (int i = 0; i < table.n_items(); ++i)
    for (int k = 0; k < table.dim(); ++k) write_f64(os, table.item_vectors(i, k));
  if (!os) throw std::runtime_error("failed writing embeddings: " + path);
}

inline EmbeddingTable load_embeddings(const std::string& path) {
  auto is = open_input(path);
  expect_magic(is, "FCPO-EMB v1");
  const int n_users = static_cast<int>(read_u32(is));
  const int n_items = static_cast<int>(read_u32(is));
  const int d = static_cast<int>(read_u32(is));
  EmbeddingTable table;
  table.user_vectors.resize(n_users, d);
  table.item_vectors.resize(n_items, d);
  for (int u = 0; u < n_users; ++u)
    for (int k = 0; k < d; ++k) table.user_vectors(u, k) = read_f64(is);
  for (int i = 0; i < n_items; ++i)
    for (int k = 0; k < d; ++k) table.item_vectors(i, k) = read_f64(is);
  return table;
}

}  // namespace fcpo
