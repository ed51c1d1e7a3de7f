#pragma once

#include <deque>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fcpo/actor.hpp"
#include "fcpo/data.hpp"
#include "fcpo/pmf.hpp"

namespace fcpo {

enum class Phase { Train, Test };

struct EnvConfig {
  int K = 1;
  int T = 1;
  std::optional<double> rating_threshold;  // positives need rating >= threshold when set
  bool mask_repeats = true;                // never repeat an item within one trajectory
  bool dynamic_groups = false;             // regroup during long-term evaluation
  int regroup_every = 1;                   // steps between regroups when dynamic
};

struct Transition {
  UserState state;
  ActionSample action;
  int reward = 0;  // items with positive feedback, in [0, K]
  int cost = 0;    // items labeled G0 at this step's group snapshot, in [0, K]
  UserState next_state;
  bool done = false;
  double log_density = 0.0;
};

using Trajectory = std::vector<Transition>;

// Holds complete trajectories only; pushing beyond capacity drops the oldest.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
  }

  void push(Trajectory t) {
    if (t.empty()) throw std::invalid_argument("replay buffer: empty trajectory");
    trajectories_.push_back(std::move(t));
    while (trajectories_.size() > capacity_) trajectories_.pop_front();
  }

  // The n most recent complete trajectories (all of them if fewer).
  std::vector<const Trajectory*> latest(size_t n) const {
    std::vector<const Trajectory*> out;
    const size_t take = std::min(n, trajectories_.size());
    for (size_t i = trajectories_.size() - take; i < trajectories_.size(); ++i)
      out.push_back(&trajectories_[i]);
    return out;
  }

  size_t size() const { return trajectories_.size(); }
  size_t capacity() const { return capacity_; }

 private:
  size_t capacity_;
  std::deque<Trajectory> trajectories_;
};

// Log-replay environment: rewards come from the user's ground-truth
// interactions for the phase, costs from the popular-group snapshot.
class Environment {
 public:
  Environment(const SplitDataset& data, const EmbeddingTable& emb, EnvConfig cfg)
      : data_(&data), emb_(&emb), cfg_(cfg) {
    if (cfg.K < 1 || cfg.T < 1) throw std::invalid_argument("env: K and T must be >= 1");
  }

  const EnvConfig& config() const { return cfg_; }

  // Per-trajectory bookkeeping: the user state, the not-yet-consumed positive
  // set, and the items already recommended in this trajectory.
  struct Episode {
    UserState state;
    std::unordered_map<int, int> remaining_positives;  // item -> unconsumed count
    std::unordered_set<int> recommended;
    Phase phase = Phase::Train;
    int t = 0;
  };

  // Initial history: the first five clicked train items when training, the
  // last five when testing.
  Episode reset(int user, Phase phase, const Policy& policy) const {
    const int n_hist = policy.spec().history_len;
    const auto clicks = clicked_train_items(user);
    if (static_cast<int>(clicks.size()) < n_hist)
      throw std::invalid_argument("env reset: user " + std::to_string(user) +
                                  " lacks the initial history (not retained by ingest)");

    std::vector<int> history;
    if (phase == Phase::Train) {
      history.assign(clicks.begin(), clicks.begin() + n_hist);
    } else {
      history.assign(clicks.end() - n_hist, clicks.end());
    }

    Episode ep;
    ep.phase = phase;
    ep.state = policy.encode_state(user, std::move(history), *emb_);
    if (phase == Phase::Train) {
      for (size_t i = n_hist; i < clicks.size(); ++i) ++ep.remaining_positives[clicks[i]];
    } else {
      for (const auto& e : data_->test[user])
        if (is_positive(e)) ++ep.remaining_positives[e.item_id];
    }
    return ep;
  }

  // Applies one action: counts reward and cost, consumes matched positives,
  // rotates the history per positive item in list order, and records one
  // exposure per recommended item when an accumulator is given.
  Transition step(Episode& ep, const ActionSample& action, const GroupAssignment& groups,
                  const Policy& policy, std::vector<int64_t>* exposure_accum = nullptr) const {
    Transition tr;
    tr.state = ep.state;
    tr.action = action;
    tr.log_density = action.log_density;

    std::vector<int> positives;
    for (int item : action.items) {
      if (item < 0 || item >= data_->n_items) throw std::out_of_range("env step: bad item id");
      tr.cost += groups.is_popular[item] ? 1 : 0;
      auto it = ep.remaining_positives.find(item);
      if (it != ep.remaining_positives.end() && it->second > 0) {
        ++tr.reward;
        --it->second;
        positives.push_back(item);
      }
      if (cfg_.mask_repeats) ep.recommended.insert(item);
      if (exposure_accum) ++(*exposure_accum)[item];
    }

    UserState next = ep.state;
    for (int item : positives) {
      next.history.erase(next.history.begin());
      next.history.push_back(item);
    }
    if (!positives.empty()) next = policy.encode_state(next.user_id, next.history, *emb_);

    ++ep.t;
    tr.done = (ep.t >= cfg_.T);
    tr.next_state = next;
    ep.state = std::move(next);
    return tr;
  }

  const std::unordered_set<int>* exclusions(const Episode& ep) const {
    return cfg_.mask_repeats ? &ep.recommended : nullptr;
  }

  // Full trajectories for a batch of users under a frozen policy.
  std::vector<Trajectory> generate_trajectories(const Policy& policy, const std::vector<int>& users,
                                                const GroupAssignment& groups, Phase phase,
                                                ActionMode mode, Rng* rng,
                                                std::vector<int64_t>* exposure_accum = nullptr) const {
    std::vector<Trajectory> out;
    out.reserve(users.size());
    for (int user : users) {
      Episode ep = reset(user, phase, policy);
      Trajectory traj;
      traj.reserve(cfg_.T);
      for (int t = 0; t < cfg_.T; ++t) {
        const ActionSample action =
            policy.sample_action(ep.state, *emb_, mode, rng, exclusions(ep));
        traj.push_back(step(ep, action, groups, policy, exposure_accum));
      }
      out.push_back(std::move(traj));
    }
    return out;
  }

  // Exposure accumulated during evaluation is added on top of the training
  // impressions, then labels are recomputed by the top-quantile rule.
  GroupAssignment regroup(const GroupAssignment& initial,
                          const std::vector<int64_t>& accumulated_exposure) const {
    if (!cfg_.dynamic_groups) throw std::logic_error("regroup: dynamic groups disabled");
    if (accumulated_exposure.size() != initial.exposure_count.size())
      throw std::invalid_argument("regroup: exposure size mismatch");
    GroupAssignment g = initial;
    for (size_t i = 0; i < g.exposure_count.size(); ++i) g.exposure_count[i] += accumulated_exposure[i];
    relabel_groups(g);
    return g;
  }

  const SplitDataset& data() const { return *data_; }
  const EmbeddingTable& embeddings() const { return *emb_; }

 private:
  bool is_positive(const Interaction& e) const {
    return !cfg_.rating_threshold || e.rating >= *cfg_.rating_threshold;
  }

  std::vector<int> clicked_train_items(int user) const {
    if (user < 0 || user >= data_->n_users) throw std::out_of_range("env: unknown user");
    std::vector<int> items;
    for (const auto& e : data_->train[user])
      if (is_positive(e)) items.push_back(e.item_id);
    return items;
  }

  const SplitDataset* data_;
  const EmbeddingTable* emb_;
  EnvConfig cfg_;
};

}  // namespace fcpo
