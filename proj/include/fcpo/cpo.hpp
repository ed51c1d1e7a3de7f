#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "fcpo/actor.hpp"
#include "fcpo/critic.hpp"
#include "fcpo/env.hpp"
#include "fcpo/net.hpp"

namespace fcpo {

struct CpoConfig {
  double delta = 0.01;          // trust-region KL radius
  double cost_limit = 0.0;      // d
  double backtrack_ratio = 0.8; // beta
  int max_backtracks = 10;
  double gamma_r = 0.99;
  double gamma_c = 0.99;
  double gae_lambda = 0.95;
  int cg_iters = 10;
  double damping = 0.1;
  double fvp_eps = 1e-5;        // finite-difference step of the KL gradient

  void validate() const {
    if (delta <= 0.0) throw std::invalid_argument("cpo: delta must be positive");
    if (cost_limit < 0.0) throw std::invalid_argument("cpo: cost limit must be nonnegative");
    if (backtrack_ratio <= 0.0 || backtrack_ratio >= 1.0)
      throw std::invalid_argument("cpo: backtrack ratio must be in (0,1)");
    if (gae_lambda < 0.0 || gae_lambda > 1.0) throw std::invalid_argument("cpo: lambda must be in [0,1]");
    if (gamma_c >= 1.0) throw std::invalid_argument("cpo: gamma_c must be < 1 (Eq. 3 scaling)");
    if (damping < 0.0) throw std::invalid_argument("cpo: damping must be nonnegative");
  }
};

enum class StepType { Feasible, InfeasibleRecovery, Rejected };

inline const char* to_string(StepType t) {
  switch (t) {
    case StepType::Feasible: return "feasible";
    case StepType::InfeasibleRecovery: return "infeasible-recovery";
    case StepType::Rejected: return "rejected";
  }
  return "?";
}

struct UpdateReport {
  double surrogate_improvement = 0.0;
  double kl_after = 0.0;
  double cost_estimate_after = 0.0;
  StepType step_type = StepType::Rejected;
  int backtracks_used = 0;
};

// Flattened transition batch plus everything the update derives from it.
struct CpoBatch {
  StateBatch states;
  Mat proposals;        // (K*d) x B
  Mat encodings;        // m x B
  Mat next_encodings;   // m x B
  Vec logp_old;
  Vec rewards, costs;
  std::vector<uint8_t> done;
  std::vector<std::pair<int, int>> spans;  // (offset, length) per trajectory

  Vec adv_r;  // normalized reward advantages
  Vec adv_c;  // raw cost advantages
  Vec ret_r, ret_c;
  Vec td_r, td_c;
  double jc = 0.0;  // mean trajectory discounted cost-return

  int size() const { return static_cast<int>(logp_old.size()); }
};

inline CpoBatch make_batch(const std::vector<const Trajectory*>& trajectories, const Policy& policy,
                           const EmbeddingTable& emb) {
  if (trajectories.empty()) throw std::invalid_argument("cpo: empty trajectory buffer");
  int B = 0;
  for (const auto* t : trajectories) B += static_cast<int>(t->size());
  if (B == 0) throw std::invalid_argument("cpo: trajectories hold no transitions");

  const auto& spec = policy.spec();
  CpoBatch batch;
  batch.proposals.resize(spec.action_dim(), B);
  batch.encodings.resize(spec.state_dim(), B);
  batch.next_encodings.resize(spec.state_dim(), B);
  batch.logp_old.resize(B);
  batch.rewards.resize(B);
  batch.costs.resize(B);
  batch.done.resize(B);

  std::vector<const UserState*> states;
  states.reserve(B);
  int j = 0;
  for (const auto* traj : trajectories) {
    batch.spans.emplace_back(j, static_cast<int>(traj->size()));
    for (const auto& tr : *traj) {
      states.push_back(&tr.state);
      batch.proposals.col(j) = tr.action.proposal;
      batch.encodings.col(j) = tr.state.encoded;
      batch.next_encodings.col(j) = tr.next_state.encoded;
      batch.logp_old[j] = tr.log_density;
      batch.rewards[j] = tr.reward;
      batch.costs[j] = tr.cost;
      batch.done[j] = tr.done ? 1 : 0;
      ++j;
    }
  }
  batch.states = policy.state_batch(states, emb);
  return batch;
}

// GAE(lambda) advantages for rewards and costs, discounted returns-to-go, and
// frozen TD targets computed with the pre-update critics. Reward advantages
// are normalized per batch; cost advantages stay in absolute units so the
// feasibility test of the QP keeps its meaning.
inline void compute_advantages(CpoBatch& batch, const Critic& value_critic, const Critic& cost_critic,
                               const CpoConfig& cfg) {
  const int B = batch.size();
  const Vec v_r = value_critic.estimate_batch(batch.encodings);
  const Vec v_r_next = value_critic.estimate_batch(batch.next_encodings);
  const Vec v_c = cost_critic.estimate_batch(batch.encodings);
  const Vec v_c_next = cost_critic.estimate_batch(batch.next_encodings);

  batch.adv_r.resize(B);
  batch.adv_c.resize(B);
  batch.ret_r.resize(B);
  batch.ret_c.resize(B);
  batch.td_r.resize(B);
  batch.td_c.resize(B);

  double jc_sum = 0.0;
  for (const auto& [off, len] : batch.spans) {
    double gae_r = 0.0, gae_c = 0.0, ret_r = 0.0, ret_c = 0.0;
    for (int t = len - 1; t >= 0; --t) {
      const int i = off + t;
      const double cont = batch.done[i] ? 0.0 : 1.0;
      const double delta_r = batch.rewards[i] + cfg.gamma_r * v_r_next[i] * cont - v_r[i];
      const double delta_c = batch.costs[i] + cfg.gamma_c * v_c_next[i] * cont - v_c[i];
      gae_r = delta_r + cfg.gamma_r * cfg.gae_lambda * cont * gae_r;
      gae_c = delta_c + cfg.gamma_c * cfg.gae_lambda * cont * gae_c;
      ret_r = batch.rewards[i] + cfg.gamma_r * cont * ret_r;
      ret_c = batch.costs[i] + cfg.gamma_c * cont * ret_c;
      batch.adv_r[i] = gae_r;
      batch.adv_c[i] = gae_c;
      batch.ret_r[i] = ret_r;
      batch.ret_c[i] = ret_c;
      batch.td_r[i] = batch.rewards[i] + cfg.gamma_r * v_r_next[i] * cont;
      batch.td_c[i] = batch.costs[i] + cfg.gamma_c * v_c_next[i] * cont;
    }
    jc_sum += batch.ret_c[off];
  }
  batch.jc = jc_sum / static_cast<double>(batch.spans.size());

  const double mean = batch.adv_r.mean();
  const double var = (batch.adv_r.array() - mean).square().mean();
  batch.adv_r = (batch.adv_r.array() - mean) / (std::sqrt(var) + 1e-8);
}

struct SurrogateGradients {
  Vec g;     // objective gradient
  Vec b;     // constraint gradient
  double c;  // J_C(pi_k) - d
};

// Likelihood-ratio gradients of the surrogate objective and the constraint
// term at theta_k: g = grad E[ratio * A], b = grad E[ratio * A_c] / (1 - gamma_c).
inline SurrogateGradients surrogate_gradients(const CpoBatch& batch, const Policy& policy,
                                              const CpoConfig& cfg) {
  const int B = batch.size();
  const double inv_b = 1.0 / static_cast<double>(B);
  const double cost_scale = 1.0 / (1.0 - cfg.gamma_c);

  Tape tape;
  std::vector<int> ids = bind_params(tape, policy.layout(), policy.params());
  const int logp = policy.build_log_density(tape, ids, batch.states, batch.proposals);
  const int ratio = tape.exp(tape.sub(logp, tape.constant(Mat(batch.logp_old.transpose()))));
  const int surr_r = tape.scale(
      tape.sum_all(tape.cmul(ratio, tape.constant(Mat(batch.adv_r.transpose())))), inv_b);
  const int surr_c = tape.scale(
      tape.sum_all(tape.cmul(ratio, tape.constant(Mat(batch.adv_c.transpose())))), inv_b * cost_scale);

  SurrogateGradients out;
  tape.backward(surr_r);
  out.g = collect_param_grads(tape, policy.layout(), ids);
  tape.backward(surr_c);
  out.b = collect_param_grads(tape, policy.layout(), ids);
  out.c = batch.jc - cfg.cost_limit;
  return out;
}

// Frozen behavior heads (mu, log_std) for the whole batch at theta_k.
struct FrozenHeads {
  Mat mu;       // (K*d) x B
  Mat log_std;  // (K*d) x B
};

inline FrozenHeads freeze_heads(const CpoBatch& batch, const Policy& policy) {
  Tape tape;
  std::vector<int> ids = bind_params(tape, policy.layout(), policy.params());
  auto [mu, log_std] = policy.build_head(tape, ids, batch.states);
  return {tape.val(mu), tape.val(log_std)};
}

// Damped Fisher-vector product: the Hessian at theta_k of the batch-average
// KL between the frozen policy and the perturbed one, applied to v through
// symmetric differences of the exact KL gradient.
inline std::function<Vec(const Vec&)> fisher_vector_product(const Policy& policy, const CpoBatch& batch,
                                                            const FrozenHeads& frozen,
                                                            const CpoConfig& cfg) {
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  auto kl_grad = [&policy, &batch, &frozen, inv_b](const Vec& theta) {
    return gradient(policy.layout(), theta, [&](Tape& tape, const std::vector<int>& ids) {
      auto [mu, log_std] = policy.build_head(tape, ids, batch.states);
      const int kl = gaussian_kl_node(tape, tape.constant(frozen.mu), tape.constant(frozen.log_std),
                                      mu, log_std);
      return tape.scale(tape.sum_all(kl), inv_b);
    });
  };
  const Vec theta_k = policy.params();
  const double damping = cfg.damping;
  const double eps = cfg.fvp_eps;
  return [kl_grad, theta_k, damping, eps](const Vec& v) {
    return hessian_vector_product(kl_grad, theta_k, v, damping, eps);
  };
}

// Analytic solution of  max g'x  s.t.  c + b'x <= 0,  x'Hx/2 <= delta.
// H enters through CG solves against the damped Fisher-vector product.
// When the trust region cannot restore feasibility the returned direction
// purely decreases cost: x = -sqrt(2 delta / b'H^-1 b) H^-1 b.
inline std::pair<Vec, StepType> solve_step(const Vec& g, const Vec& b, double c,
                                           const std::function<Vec(const Vec&)>& fvp,
                                           const CpoConfig& cfg) {
  const double delta = cfg.delta;
  const double tiny = 1e-12;

  Vec hinv_g = Vec::Zero(g.size());
  double q = 0.0;
  if (g.norm() > tiny) {
    hinv_g = conjugate_gradient(fvp, g, cfg.cg_iters);
    q = g.dot(hinv_g);
  }

  auto pure_ascent = [&]() -> std::pair<Vec, StepType> {
    if (q <= tiny) return {Vec::Zero(g.size()), StepType::Feasible};
    return {std::sqrt(2.0 * delta / q) * hinv_g, StepType::Feasible};
  };

  if (b.norm() <= 1e-10) {
    if (c > 0.0)
      throw std::runtime_error("solve_step: constraint violated but its gradient is degenerate");
    return pure_ascent();
  }

  const Vec hinv_b = conjugate_gradient(fvp, b, cfg.cg_iters);
  const double s = b.dot(hinv_b);
  const double r = g.dot(hinv_b);
  if (s <= tiny) {
    if (c > 0.0)
      throw std::runtime_error("solve_step: constraint violated but b'H^-1 b is not positive");
    return pure_ascent();
  }

  auto recovery = [&]() -> std::pair<Vec, StepType> {
    return {-std::sqrt(2.0 * delta / s) * hinv_b, StepType::InfeasibleRecovery};
  };

  if (c > 0.0 && q <= tiny) return recovery();

  const double cc_over_s = c * c / s;
  if (cc_over_s - 2.0 * delta > 0.0) {
    // The hyperplane c + b'x = 0 does not cross the trust region.
    if (c > 0.0) return recovery();
    return pure_ascent();  // constraint slack everywhere inside the region
  }

  // Both boundaries can matter: minimize the dual over (lambda, nu >= 0).
  // With nu(lambda) = max(0, (r + lambda c)/s), the dual splits at
  // lambda_mid = -r/c into an active and an inactive branch.
  const double a_coef = std::max(q - r * r / s, 0.0);
  const double b_coef = 2.0 * delta - cc_over_s;  // >= 0 here
  const double lam_lo = 1e-8, lam_hi = 1e8;

  auto dual_active = [&](double lam) { return 0.5 * (a_coef / lam + b_coef * lam) - r * c / s; };
  auto dual_inactive = [&](double lam) { return 0.5 * (q / lam + 2.0 * delta * lam); };

  double best_lambda = -1.0;
  double best_dual = std::numeric_limits<double>::infinity();

  // Active branch: nu > 0.
  {
    double lo = lam_lo, hi = lam_hi;
    bool nonempty = true;
    if (c > 0.0) {
      lo = std::max(lo, -r / c);  // r + lambda c > 0 for lambda > -r/c
    } else if (c < 0.0) {
      hi = -r / c;
      nonempty = hi > lam_lo;  // requires r > 0
    } else {
      nonempty = r > 0.0;
    }
    if (nonempty && lo < hi) {
      const double lam =
          std::clamp(std::sqrt(a_coef / std::max(b_coef, tiny)), lo + tiny, hi);
      const double d_val = dual_active(lam);
      if (d_val < best_dual) {
        best_dual = d_val;
        best_lambda = lam;
      }
    }
  }
  // Inactive branch: nu = 0.
  {
    double lo = lam_lo, hi = lam_hi;
    bool nonempty = true;
    if (c > 0.0) {
      hi = -r / c;
      nonempty = hi > lam_lo;  // requires r < 0
    } else if (c < 0.0) {
      lo = std::max(lo, -r / c);
    } else {
      nonempty = r <= 0.0;
    }
    if (nonempty && lo < hi && q > tiny) {
      const double lam = std::clamp(std::sqrt(q / (2.0 * delta)), lo, hi);
      const double d_val = dual_inactive(lam);
      if (d_val < best_dual) {
        best_dual = d_val;
        best_lambda = lam;
      }
    }
  }

  if (best_lambda <= 0.0) {
    // No valid dual candidate: fall back to the constraint-only behaviour.
    return c > 0.0 ? recovery() : pure_ascent();
  }
  const double nu = std::max(0.0, (r + best_lambda * c) / s);
  Vec direction = (hinv_g - nu * hinv_b) / best_lambda;
  if (!direction.allFinite()) throw std::runtime_error("solve_step: non-finite direction");
  return {direction, StepType::Feasible};
}

namespace detail {

struct SampledSurrogates {
  double kl = 0.0;
  double surr_r = 0.0;
  double surr_c = 0.0;  // already scaled by 1/(1-gamma_c)
  bool finite = true;
};

inline SampledSurrogates evaluate_policy_point(const Policy& policy, const CpoBatch& batch,
                                               const FrozenHeads& frozen, const Vec& theta,
                                               double cost_scale) {
  Tape tape;
  std::vector<int> ids = bind_params(tape, policy.layout(), theta);
  auto [mu, log_std] = policy.build_head(tape, ids, batch.states);
  const Mat& mu_v = tape.val(mu);
  const Mat& ls_v = tape.val(log_std);

  SampledSurrogates out;
  const int B = batch.size();
  double kl_sum = 0.0, sr = 0.0, sc = 0.0;
  for (int j = 0; j < B; ++j) {
    const GaussianHead p{frozen.mu.col(j), frozen.log_std.col(j)};
    const GaussianHead qh{mu_v.col(j), ls_v.col(j)};
    const double kl = gaussian_kl(p, qh);
    const double logp = gaussian_log_density(qh, batch.proposals.col(j));
    const double ratio = std::exp(logp - batch.logp_old[j]);
    if (!std::isfinite(kl) || !std::isfinite(ratio)) {
      out.finite = false;
      return out;
    }
    kl_sum += kl;
    sr += ratio * batch.adv_r[j];
    sc += ratio * batch.adv_c[j];
  }
  out.kl = kl_sum / B;
  out.surr_r = sr / B;
  out.surr_c = cost_scale * sc / B;
  return out;
}

}  // namespace detail

// Backtracking line search per the training algorithm: accept the first
// scaled step satisfying (i) sampled average KL <= delta, (ii) the sampled
// surrogate improves, (iii) the projected constraint value stays within d.
// Recovery steps waive (ii) and require the constraint surrogate to decrease.
// If no scale qualifies the parameters are left untouched.
inline UpdateReport line_search(const Vec& direction, const CpoBatch& batch, Policy& policy,
                                const FrozenHeads& frozen, const CpoConfig& cfg, StepType step_type) {
  const double cost_scale = 1.0 / (1.0 - cfg.gamma_c);
  const double surr0_r = batch.adv_r.mean();
  const double surr0_c = cost_scale * batch.adv_c.mean();

  UpdateReport report;
  report.step_type = StepType::Rejected;
  report.backtracks_used = cfg.max_backtracks;
  report.cost_estimate_after = batch.jc + surr0_c;

  if (!direction.allFinite()) throw std::invalid_argument("line_search: non-finite direction");
  const Vec theta_k = policy.params();

  double scale = 1.0;
  for (int j = 0; j <= cfg.max_backtracks; ++j, scale *= cfg.backtrack_ratio) {
    const Vec theta = theta_k + scale * direction;
    const auto eval = detail::evaluate_policy_point(policy, batch, frozen, theta, cost_scale);
    if (!eval.finite || eval.kl > cfg.delta) continue;

    const double cost_proj = batch.jc + eval.surr_c;
    bool ok;
    if (step_type == StepType::InfeasibleRecovery) {
      ok = eval.surr_c < surr0_c;
    } else {
      ok = eval.surr_r > surr0_r && cost_proj <= cfg.cost_limit;
    }
    if (!ok) continue;

    policy.params() = theta;
    report.surrogate_improvement = eval.surr_r - surr0_r;
    report.kl_after = eval.kl;
    report.cost_estimate_after = cost_proj;
    report.step_type = step_type;
    report.backtracks_used = j;
    return report;
  }
  return report;
}

// One full constrained update: advantages -> surrogate gradients -> QP solve
// -> line search -> critic fits, in that order.
inline UpdateReport cpo_iteration(const std::vector<const Trajectory*>& trajectories, Policy& policy,
                                  Critic& value_critic, Critic& cost_critic, const EmbeddingTable& emb,
                                  const CpoConfig& cfg) {
  cfg.validate();
  CpoBatch batch = make_batch(trajectories, policy, emb);
  compute_advantages(batch, value_critic, cost_critic, cfg);
  const SurrogateGradients grads = surrogate_gradients(batch, policy, cfg);
  const FrozenHeads frozen = freeze_heads(batch, policy);
  const auto fvp = fisher_vector_product(policy, batch, frozen, cfg);
  auto [direction, step_type] = solve_step(grads.g, grads.b, grads.c, fvp, cfg);
  UpdateReport report = line_search(direction, batch, policy, frozen, cfg, step_type);

  value_critic.fit(batch.encodings, batch.td_r);
  cost_critic.fit(batch.encodings, batch.td_c);
  return report;
}

}  // namespace fcpo
