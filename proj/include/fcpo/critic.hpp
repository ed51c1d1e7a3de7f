#pragma once

#include <deque>
#include <stdexcept>
#include <string>

#include "fcpo/net.hpp"
#include "fcpo/rng.hpp"
#include "fcpo/serialize.hpp"

namespace fcpo {

struct CriticFitOptions {
  int max_iters = 30;
  int lbfgs_memory = 8;
  double armijo_c1 = 1e-4;
  double backtrack = 0.5;
  int max_backtracks = 25;
  double grad_tol = 1e-10;
};

struct CriticFitResult {
  double loss_before = 0.0;
  double loss_after = 0.0;
  int iterations = 0;
};

// State-value estimator V(s): a tanh MLP with scalar output, fitted to frozen
// TD targets by full-batch L-BFGS with an Armijo line search. Steps are only
// accepted when they decrease the batch MSE, so fit never increases it.
class Critic {
 public:
  Critic(int input_dim, int hidden) : spec_{{input_dim, hidden, hidden, 1}} {
    layout_ = mlp_layout(spec_, "critic");
    params_ = Vec::Zero(layout_.total);
  }

  const ParamLayout& layout() const { return layout_; }
  Vec& params() { return params_; }
  const Vec& params() const { return params_; }
  int input_dim() const { return spec_.sizes.front(); }

  void init_params(Rng& rng) {
    for (size_t e = 0; e < layout_.entries.size(); ++e) {
      auto view = layout_.view(params_, e);
      if (view.cols() == 1 && layout_.entries[e].name.find(".b") != std::string::npos) {
        view.setZero();
        continue;
      }
      const double a = 1.0 / std::sqrt(static_cast<double>(view.cols()));
      for (Eigen::Index j = 0; j < view.cols(); ++j)
        for (Eigen::Index i = 0; i < view.rows(); ++i) view(i, j) = rng.uniform(-a, a);
    }
  }

  double estimate(const Vec& encoding) const {
    if (encoding.size() != input_dim()) throw std::invalid_argument("critic: encoding size mismatch");
    return mlp_forward(spec_, layout_, params_, encoding)(0, 0);
  }

  // One forward pass over a batch of encodings (input_dim x B) -> B values.
  Vec estimate_batch(const Mat& encodings) const {
    if (encodings.rows() != input_dim()) throw std::invalid_argument("critic: encoding size mismatch");
    return mlp_forward(spec_, layout_, params_, encodings).row(0).transpose();
  }

  // Minimizes mean squared error against frozen targets.
  CriticFitResult fit(const Mat& encodings, const Vec& targets, const CriticFitOptions& opt = {}) {
    if (encodings.cols() == 0) throw std::invalid_argument("critic fit: empty batch");
    if (encodings.cols() != targets.size()) throw std::invalid_argument("critic fit: target count mismatch");
    if (!targets.allFinite()) throw std::invalid_argument("critic fit: non-finite targets");

    auto loss_at = [&](const Vec& p) {
      const Mat pred = mlp_forward(spec_, layout_, p, encodings);
      return (pred.row(0).transpose() - targets).squaredNorm() / static_cast<double>(targets.size());
    };
    auto loss_grad = [&](const Vec& p) {
      return gradient(layout_, p, [&](Tape& tape, const std::vector<int>& ids) {
        const int pred = mlp_apply(tape, ids, spec_, tape.constant(encodings));
        const int err = tape.sub(pred, tape.constant(Mat(targets.transpose())));
        return tape.scale(tape.sum_all(tape.square(err)), 1.0 / static_cast<double>(targets.size()));
      });
    };

    CriticFitResult result;
    result.loss_before = loss(encodings, targets);
    double f = result.loss_before;
    if (!std::isfinite(f)) throw std::runtime_error("critic fit: non-finite loss before fitting");

    Vec x = params_;
    Vec g = loss_grad(x);
    std::deque<Vec> s_hist, y_hist;

    for (int it = 0; it < opt.max_iters; ++it) {
      if (g.norm() < opt.grad_tol) break;
      const Vec dir = -lbfgs_direction(g, s_hist, y_hist);
      const double slope = g.dot(dir);
      if (!(slope < 0.0)) break;  // not a descent direction; stop rather than risk ascent

      double step = 1.0;
      bool accepted = false;
      Vec x_new;
      double f_new = f;
      for (int bt = 0; bt <= opt.max_backtracks; ++bt) {
        x_new = x + step * dir;
        f_new = loss_at(x_new);
        if (std::isfinite(f_new) && f_new <= f + opt.armijo_c1 * step * slope) {
          accepted = true;
          break;
        }
        step *= opt.backtrack;
      }
      if (!accepted) break;

      const Vec g_new = loss_grad(x_new);
      const Vec s = x_new - x;
      const Vec y = g_new - g;
      if (s.dot(y) > 1e-12) {
        s_hist.push_back(s);
        y_hist.push_back(y);
        if (static_cast<int>(s_hist.size()) > opt.lbfgs_memory) {
          s_hist.pop_front();
          y_hist.pop_front();
        }
      }
      x = x_new;
      f = f_new;
      g = g_new;
      ++result.iterations;
    }

    if (!std::isfinite(f))
      throw std::runtime_error("critic fit: loss became NaN (batch size " +
                               std::to_string(targets.size()) + ")");
    params_ = x;
    result.loss_after = f;
    return result;
  }

  double loss(const Mat& encodings, const Vec& targets) const {
    const Vec pred = estimate_batch(encodings);
    return (pred - targets).squaredNorm() / static_cast<double>(targets.size());
  }

  void save(std::ostream& os, const std::string& tag) const {
    write_magic(os, "FCPO-POL v1");
    write_string(os, tag);
    write_u64(os, static_cast<uint64_t>(params_.size()));
    for (Eigen::Index i = 0; i < params_.size(); ++i) write_f64(os, params_[i]);
  }

  void load(std::istream& is, const std::string& tag) {
    expect_magic(is, "FCPO-POL v1");
    const std::string got = read_string(is);
    if (got != tag) throw std::runtime_error("critic checkpoint: expected section " + tag);
    const auto n = static_cast<Eigen::Index>(read_u64(is));
    if (n != params_.size()) throw std::runtime_error("critic checkpoint: parameter count mismatch");
    for (Eigen::Index i = 0; i < n; ++i) params_[i] = read_f64(is);
  }

 private:
  // Two-loop recursion over the stored curvature pairs.
  static Vec lbfgs_direction(const Vec& g, const std::deque<Vec>& s_hist, const std::deque<Vec>& y_hist) {
    Vec q = g;
    const int m = static_cast<int>(s_hist.size());
    std::vector<double> alpha(m), rho(m);
    for (int i = m - 1; i >= 0; --i) {
      rho[i] = 1.0 / y_hist[i].dot(s_hist[i]);
      alpha[i] = rho[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    if (m > 0) {
      const double gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      q *= gamma;
    }
    for (int i = 0; i < m; ++i) {
      const double beta = rho[i] * y_hist[i].dot(q);
      q += (alpha[i] - beta) * s_hist[i];
    }
    return q;
  }

  MlpSpec spec_;
  ParamLayout layout_;
  Vec params_;
};

}  // namespace fcpo
