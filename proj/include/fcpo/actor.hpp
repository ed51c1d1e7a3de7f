#pragma once

#include <deque>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "fcpo/net.hpp"
#include "fcpo/pmf.hpp"
#include "fcpo/rng.hpp"
#include "fcpo/serialize.hpp"

namespace fcpo {

enum class ActionMode { Stochastic, Greedy };

// A user's state: the id, the queue of the N most recent positively-rated
// items, and the encoded vector [e_u; GRU(history)] of length d + gru_hidden.
struct UserState {
  int user_id = -1;
  std::vector<int> history;  // exactly N ids, oldest first
  Vec encoded;
};

// One sampled action: K distinct items, the proposal matrix W that produced
// them (row k flattened at [k*d, (k+1)*d)), and the Gaussian log-density of W.
struct ActionSample {
  std::vector<int> items;
  Vec proposal;  // K*d
  double log_density = 0.0;
};

struct PolicySpec {
  int embed_dim = 100;
  int gru_hidden = 64;
  int gru_layers = 2;
  int mlp_hidden = 128;  // two hidden layers of this width
  int K = 1;
  int history_len = 5;
  double log_std_min = -5.0;
  double log_std_max = 2.0;

  int state_dim() const { return embed_dim + gru_hidden; }
  int action_dim() const { return K * embed_dim; }
};

// Raw per-sample policy inputs, one column per sample.
struct StateBatch {
  Mat user_emb;              // d x B
  std::vector<Mat> history;  // N entries of d x B, oldest first
  int cols() const { return static_cast<int>(user_emb.cols()); }
};

// The policy pi_theta: a stacked GRU encodes the history queue, the encoded
// state feeds a tanh MLP that emits the mean and log-std of the Gaussian over
// proposal matrices. theta covers both the encoder and the head.
class Policy {
 public:
  explicit Policy(const PolicySpec& spec)
      : spec_(spec),
        gru_{spec.embed_dim, spec.gru_hidden, spec.gru_layers},
        mlp_{{spec.state_dim(), spec.mlp_hidden, spec.mlp_hidden, 2 * spec.action_dim()}} {
    gru_layout_ = gru_layout(gru_, "gru");
    layout_ = gru_layout_;
    layout_.append(mlp_layout(mlp_, "head"));
    params_ = Vec::Zero(layout_.total);
  }

  const PolicySpec& spec() const { return spec_; }
  const ParamLayout& layout() const { return layout_; }
  Vec& params() { return params_; }
  const Vec& params() const { return params_; }
  int n_params() const { return layout_.total; }

  // Uniform init scaled by fan-in, biases zero.
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

  // Builds the differentiable head for a batch of states. Outputs are
  // (K*d x B) nodes; log_std is clamped for numerical stability.
  std::pair<int, int> build_head(Tape& tape, const std::vector<int>& param_ids,
                                 const StateBatch& batch) const {
    std::vector<int> seq;
    seq.reserve(batch.history.size());
    for (const auto& h : batch.history) seq.push_back(tape.constant(h));
    const int h_u = gru_apply(tape, param_ids, gru_, seq, 0);
    const int state = tape.vconcat(tape.constant(batch.user_emb), h_u);
    const int out = mlp_apply(tape, param_ids, mlp_, state, 12 * spec_.gru_layers);
    const int mu = tape.row_block(out, 0, spec_.action_dim());
    const int log_std = tape.clamp(tape.row_block(out, spec_.action_dim(), spec_.action_dim()),
                                   spec_.log_std_min, spec_.log_std_max);
    return {mu, log_std};
  }

  // Forward pass without gradients: per-sample Gaussian heads.
  std::vector<GaussianHead> heads(const StateBatch& batch, const Vec& params) const {
    Tape tape;
    std::vector<int> ids = bind_params(tape, layout_, params);
    auto [mu, log_std] = build_head(tape, ids, batch);
    std::vector<GaussianHead> out(batch.cols());
    for (int j = 0; j < batch.cols(); ++j)
      out[j] = {tape.val(mu).col(j), tape.val(log_std).col(j)};
    return out;
  }

  GaussianHead head(const UserState& state, const EmbeddingTable& emb, const Vec& params) const {
    return heads(state_batch({&state}, emb), params)[0];
  }
  GaussianHead head(const UserState& state, const EmbeddingTable& emb) const {
    return head(state, emb, params_);
  }

  // Assembles raw policy inputs for a set of states.
  StateBatch state_batch(const std::vector<const UserState*>& states, const EmbeddingTable& emb) const {
    const int B = static_cast<int>(states.size());
    StateBatch batch;
    batch.user_emb.resize(spec_.embed_dim, B);
    batch.history.assign(spec_.history_len, Mat(spec_.embed_dim, B));
    for (int j = 0; j < B; ++j) {
      const UserState& s = *states[j];
      if (static_cast<int>(s.history.size()) != spec_.history_len)
        throw std::invalid_argument("state history must hold exactly N items");
      batch.user_emb.col(j) = emb.user_vectors.row(s.user_id).transpose();
      for (int t = 0; t < spec_.history_len; ++t)
        batch.history[t].col(j) = emb.item_vectors.row(s.history[t]).transpose();
    }
    return batch;
  }

  // Encodes (user, history) into s_t = [e_u; GRU(history embeddings)].
  UserState encode_state(int user, std::vector<int> history, const EmbeddingTable& emb) const {
    if (static_cast<int>(history.size()) != spec_.history_len)
      throw std::invalid_argument("encode_state: history must hold exactly N items");
    if (user < 0 || user >= emb.n_users()) throw std::out_of_range("encode_state: bad user id");
    for (int it : history)
      if (it < 0 || it >= emb.n_items()) throw std::out_of_range("encode_state: bad item id");

    UserState s;
    s.user_id = user;
    s.history = std::move(history);
    s.encoded = encode(s, emb);
    return s;
  }

  // Positive feedback rotates the queue and re-encodes; otherwise no change.
  UserState update_history(const UserState& state, int recommended, double reward,
                           const EmbeddingTable& emb) const {
    if (recommended < 0 || recommended >= emb.n_items())
      throw std::out_of_range("update_history: bad item id");
    if (reward <= 0.0) return state;
    UserState next = state;
    next.history.erase(next.history.begin());
    next.history.push_back(recommended);
    next.encoded = encode(next, emb);
    return next;
  }

  // Samples (or takes the mean of) the proposal matrix and selects items
  // row by row as the masked argmax of W_k . V^T. Items listed in `excluded`
  // and items already chosen within this action are never selected.
  ActionSample sample_action(const UserState& state, const EmbeddingTable& emb, ActionMode mode,
                             Rng* rng = nullptr,
                             const std::unordered_set<int>* excluded = nullptr) const {
    const int K = spec_.K;
    const int d = spec_.embed_dim;
    if (K < 1 || K > emb.n_items()) throw std::invalid_argument("sample_action: K out of range");

    const GaussianHead h = head(state, emb);
    ActionSample action;
    action.proposal.resize(K * d);
    if (mode == ActionMode::Stochastic) {
      if (rng == nullptr) throw std::invalid_argument("stochastic sampling needs an rng");
      for (int i = 0; i < K * d; ++i)
        action.proposal[i] = h.mu[i] + std::exp(h.log_std[i]) * rng->normal();
    } else {
      action.proposal = h.mu;
    }
    action.log_density = gaussian_log_density(h, action.proposal);
    action.items = select_items(action.proposal, emb, excluded);
    return action;
  }

  // Deterministic item selection for a given proposal matrix.
  std::vector<int> select_items(const Vec& proposal, const EmbeddingTable& emb,
                                const std::unordered_set<int>* excluded = nullptr) const {
    const int K = spec_.K;
    const int d = spec_.embed_dim;
    std::vector<int> items;
    items.reserve(K);
    std::unordered_set<int> taken;
    for (int k = 0; k < K; ++k) {
      const Vec scores = emb.item_vectors * proposal.segment(k * d, d);
      int best = -1;
      double best_score = 0.0;
      for (int i = 0; i < emb.n_items(); ++i) {
        if (taken.count(i) || (excluded && excluded->count(i))) continue;
        if (best < 0 || scores[i] > best_score) {
          best = i;
          best_score = scores[i];
        }
      }
      if (best < 0) throw std::runtime_error("select_items: no selectable item left");
      items.push_back(best);
      taken.insert(best);
    }
    return items;
  }

  // log pi_theta(W | s) at explicit parameters.
  double action_log_density(const UserState& state, const EmbeddingTable& emb, const Vec& params,
                            const Vec& proposal) const {
    const GaussianHead h = head(state, emb, params);
    return gaussian_log_density(h, proposal);
  }

  // Builds the (1 x B) row of per-sample log-densities on an existing tape;
  // proposals holds one flattened W per column.
  int build_log_density(Tape& tape, const std::vector<int>& param_ids, const StateBatch& batch,
                        const Mat& proposals) const {
    auto [mu, log_std] = build_head(tape, param_ids, batch);
    const int w = tape.constant(proposals);
    return gaussian_log_density_node(tape, mu, log_std, w);
  }

  void save(std::ostream& os) const {
    write_magic(os, "FCPO-POL v1");
    write_u32(os, static_cast<uint32_t>(layout_.entries.size()));
    for (const auto& e : layout_.entries) {
      write_string(os, e.name);
      write_u32(os, static_cast<uint32_t>(e.rows));
      write_u32(os, static_cast<uint32_t>(e.cols));
    }
    write_u64(os, static_cast<uint64_t>(params_.size()));
    for (Eigen::Index i = 0; i < params_.size(); ++i) write_f64(os, params_[i]);
  }

  void load(std::istream& is) {
    expect_magic(is, "FCPO-POL v1");
    const uint32_t n_entries = read_u32(is);
    if (n_entries != layout_.entries.size())
      throw std::runtime_error("policy checkpoint: layout entry count mismatch");
    for (const auto& e : layout_.entries) {
      const std::string name = read_string(is);
      const int rows = static_cast<int>(read_u32(is));
      const int cols = static_cast<int>(read_u32(is));
      if (name != e.name || rows != e.rows || cols != e.cols)
        throw std::runtime_error("policy checkpoint: layout mismatch at " + e.name);
    }
    const auto n = static_cast<Eigen::Index>(read_u64(is));
    if (n != params_.size()) throw std::runtime_error("policy checkpoint: parameter count mismatch");
    for (Eigen::Index i = 0; i < n; ++i) params_[i] = read_f64(is);
  }

 private:
  Vec encode(const UserState& s, const EmbeddingTable& emb) const {
    StateBatch batch = state_batch({&s}, emb);
    std::vector<Mat> seq(batch.history.begin(), batch.history.end());
    const Mat h = gru_forward(gru_, gru_layout_, params_.head(gru_layout_.total), seq);
    Vec out(spec_.state_dim());
    out.head(spec_.embed_dim) = batch.user_emb.col(0);
    out.tail(spec_.gru_hidden) = h.col(0);
    return out;
  }

  PolicySpec spec_;
  GruSpec gru_;
  MlpSpec mlp_;
  ParamLayout gru_layout_;
  ParamLayout layout_;
  Vec params_;
};

}  // namespace fcpo
