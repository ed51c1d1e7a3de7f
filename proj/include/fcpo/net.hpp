#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fcpo {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Flat parameter views
// ---------------------------------------------------------------------------

// Describes how a flat parameter vector maps to named weight matrices.
// Matrices are stored column-major, one entry after another.
struct ParamLayout {
  struct Entry {
    std::string name;
    int rows = 0;
    int cols = 0;
  };
  std::vector<Entry> entries;
  std::vector<int> offsets;
  int total = 0;

  void add(std::string name, int rows, int cols) {
    offsets.push_back(total);
    total += rows * cols;
    entries.push_back({std::move(name), rows, cols});
  }

  void append(const ParamLayout& other) {
    for (const auto& e : other.entries) add(e.name, e.rows, e.cols);
  }

  Eigen::Map<const Mat> view(const Vec& flat, size_t idx) const {
    const auto& e = entries[idx];
    return Eigen::Map<const Mat>(flat.data() + offsets[idx], e.rows, e.cols);
  }

  Eigen::Map<Mat> view(Vec& flat, size_t idx) const {
    const auto& e = entries[idx];
    return Eigen::Map<Mat>(flat.data() + offsets[idx], e.rows, e.cols);
  }
};

inline std::vector<Mat> unflatten(const ParamLayout& layout, const Vec& flat) {
  if (flat.size() != layout.total) throw std::invalid_argument("unflatten: size mismatch");
  std::vector<Mat> out;
  out.reserve(layout.entries.size());
  for (size_t i = 0; i < layout.entries.size(); ++i) out.emplace_back(layout.view(flat, i));
  return out;
}

inline Vec flatten(const ParamLayout& layout, const std::vector<Mat>& mats) {
  if (mats.size() != layout.entries.size()) throw std::invalid_argument("flatten: entry count mismatch");
  Vec flat(layout.total);
  for (size_t i = 0; i < mats.size(); ++i) {
    const auto& e = layout.entries[i];
    if (mats[i].rows() != e.rows || mats[i].cols() != e.cols)
      throw std::invalid_argument("flatten: shape mismatch for " + e.name);
    layout.view(flat, i) = mats[i];
  }
  return flat;
}

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

// A small reverse-mode autodiff tape over dense matrices. Column j of a node
// is sample j of a batch, so one graph differentiates a whole minibatch.
// Reductions are plain Eigen sums evaluated in a fixed order.
class Tape {
 public:
  enum class Op {
    Leaf, MatMul, Add, AddCol, Sub, CMul, Tanh, Sigmoid, Exp, Log, Square,
    Neg, OneMinus, Scale, AddConst, Clamp, ColSum, SumAll, VConcat, RowBlock
  };

  int constant(Mat v) { return push(Op::Leaf, std::move(v), -1, -1, false); }
  int param(Mat v) { return push(Op::Leaf, std::move(v), -1, -1, true); }

  int matmul(int a, int b) {
    check_cols(val(a).cols(), val(b).rows(), "matmul");
    return push(Op::MatMul, val(a) * val(b), a, b);
  }
  int add(int a, int b) { return push(Op::Add, val(a) + val(b), a, b); }
  // (m x B) + (m x 1) broadcast across columns
  int add_col(int a, int b) {
    return push(Op::AddCol, val(a).colwise() + Vec(val(b).col(0)), a, b);
  }
  int sub(int a, int b) { return push(Op::Sub, val(a) - val(b), a, b); }
  int cmul(int a, int b) { return push(Op::CMul, val(a).cwiseProduct(val(b)), a, b); }
  int tanh(int a) { return push(Op::Tanh, val(a).array().tanh().matrix(), a); }
  int sigmoid(int a) {
    return push(Op::Sigmoid, (1.0 / (1.0 + (-val(a).array()).exp())).matrix(), a);
  }
  int exp(int a) { return push(Op::Exp, val(a).array().exp().matrix(), a); }
  int log(int a) { return push(Op::Log, val(a).array().log().matrix(), a); }
  int square(int a) { return push(Op::Square, val(a).array().square().matrix(), a); }
  int neg(int a) { return push(Op::Neg, -val(a), a); }
  int one_minus(int a) { return push(Op::OneMinus, (1.0 - val(a).array()).matrix(), a); }
  int scale(int a, double s) { return push(Op::Scale, s * val(a), a, -1, false, s); }
  int add_const(int a, double s) {
    return push(Op::AddConst, (val(a).array() + s).matrix(), a, -1, false, s);
  }
  int clamp(int a, double lo, double hi) {
    return push(Op::Clamp, val(a).array().max(lo).min(hi).matrix(), a, -1, false, lo, hi);
  }
  // (m x B) -> (1 x B)
  int colsum(int a) { return push(Op::ColSum, val(a).colwise().sum(), a); }
  int sum_all(int a) {
    Mat s(1, 1);
    s(0, 0) = val(a).sum();
    return push(Op::SumAll, std::move(s), a);
  }
  int vconcat(int a, int b) {
    check_cols(val(a).cols(), val(b).cols(), "vconcat");
    Mat v(val(a).rows() + val(b).rows(), val(a).cols());
    v.topRows(val(a).rows()) = val(a);
    v.bottomRows(val(b).rows()) = val(b);
    return push(Op::VConcat, std::move(v), a, b);
  }
  int row_block(int a, int r0, int nrows) {
    return push(Op::RowBlock, val(a).middleRows(r0, nrows), a, -1, false, r0, nrows);
  }

  const Mat& val(int id) const { return nodes_[id].val; }
  const Mat& grad(int id) const { return nodes_[id].grad; }
  double scalar(int id) const { return nodes_[id].val(0, 0); }

  // Backpropagates from a 1x1 root through every node that (transitively)
  // depends on a param leaf.
  void backward(int root) {
    auto& nodes = nodes_;
    if (nodes[root].val.size() != 1) throw std::invalid_argument("backward: root must be scalar");
    for (auto& n : nodes)
      if (n.requires_grad) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    if (!nodes[root].requires_grad) return;  // loss independent of params
    nodes[root].grad(0, 0) = 1.0;

    for (int id = root; id >= 0; --id) {
      Node& n = nodes[id];
      if (!n.requires_grad || n.op == Op::Leaf) continue;
      const Mat& g = n.grad;
      switch (n.op) {
        case Op::MatMul:
          accum(n.a, g * val(n.b).transpose());
          accum(n.b, val(n.a).transpose() * g);
          break;
        case Op::Add:
          accum(n.a, g);
          accum(n.b, g);
          break;
        case Op::AddCol:
          accum(n.a, g);
          accum(n.b, g.rowwise().sum());
          break;
        case Op::Sub:
          accum(n.a, g);
          accum_neg(n.b, g);
          break;
        case Op::CMul:
          accum(n.a, g.cwiseProduct(val(n.b)));
          accum(n.b, g.cwiseProduct(val(n.a)));
          break;
        case Op::Tanh:
          accum(n.a, (g.array() * (1.0 - n.val.array().square())).matrix());
          break;
        case Op::Sigmoid:
          accum(n.a, (g.array() * n.val.array() * (1.0 - n.val.array())).matrix());
          break;
        case Op::Exp:
          accum(n.a, g.cwiseProduct(n.val));
          break;
        case Op::Log:
          accum(n.a, (g.array() / val(n.a).array()).matrix());
          break;
        case Op::Square:
          accum(n.a, (2.0 * g.array() * val(n.a).array()).matrix());
          break;
        case Op::Neg:
          accum_neg(n.a, g);
          break;
        case Op::OneMinus:
          accum_neg(n.a, g);
          break;
        case Op::Scale:
          accum(n.a, n.c0 * g);
          break;
        case Op::AddConst:
          accum(n.a, g);
          break;
        case Op::Clamp: {
          const auto& x = val(n.a).array();
          accum(n.a, (g.array() * ((x > n.c0) && (x < n.c1)).cast<double>()).matrix());
          break;
        }
        case Op::ColSum:
          accum(n.a, g.replicate(val(n.a).rows(), 1));
          break;
        case Op::SumAll:
          accum(n.a, Mat::Constant(val(n.a).rows(), val(n.a).cols(), g(0, 0)));
          break;
        case Op::VConcat:
          accum(n.a, g.topRows(val(n.a).rows()));
          accum(n.b, g.bottomRows(val(n.b).rows()));
          break;
        case Op::RowBlock: {
          Mat full = Mat::Zero(val(n.a).rows(), val(n.a).cols());
          full.middleRows(static_cast<int>(n.c0), static_cast<int>(n.c1)) = g;
          accum(n.a, full);
          break;
        }
        case Op::Leaf:
          break;
      }
    }
  }

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;
    Op op = Op::Leaf;
    int a = -1, b = -1;
    double c0 = 0.0, c1 = 0.0;
    bool requires_grad = false;
  };

  int push(Op op, Mat v, int a = -1, int b = -1, bool force_grad = false, double c0 = 0.0,
           double c1 = 0.0) {
    Node n;
    n.val = std::move(v);
    n.op = op;
    n.a = a;
    n.b = b;
    n.c0 = c0;
    n.c1 = c1;
    n.requires_grad = force_grad || (a >= 0 && nodes_[a].requires_grad) ||
                      (b >= 0 && nodes_[b].requires_grad);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void accum(int id, const Mat& g) {
    if (id >= 0 && nodes_[id].requires_grad) nodes_[id].grad += g;
  }
  void accum_neg(int id, const Mat& g) {
    if (id >= 0 && nodes_[id].requires_grad) nodes_[id].grad -= g;
  }
  static void check_cols(Eigen::Index a, Eigen::Index b, const char* what) {
    if (a != b) throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }

  std::vector<Node> nodes_;
};

// Binds a flat parameter vector onto the tape, one leaf per layout entry.
inline std::vector<int> bind_params(Tape& tape, const ParamLayout& layout, const Vec& flat) {
  if (flat.size() != layout.total) throw std::invalid_argument("bind_params: size mismatch");
  std::vector<int> ids;
  ids.reserve(layout.entries.size());
  for (size_t i = 0; i < layout.entries.size(); ++i) ids.push_back(tape.param(Mat(layout.view(flat, i))));
  return ids;
}

// Gathers per-entry adjoints back into flat form after backward().
inline Vec collect_param_grads(const Tape& tape, const ParamLayout& layout, const std::vector<int>& ids) {
  Vec g = Vec::Zero(layout.total);
  for (size_t i = 0; i < ids.size(); ++i) layout.view(g, i) = tape.grad(ids[i]);
  return g;
}

// Reverse-mode gradient of a scalar loss built on a tape from bound params.
inline Vec gradient(const ParamLayout& layout, const Vec& params,
                    const std::function<int(Tape&, const std::vector<int>&)>& build_loss) {
  Tape tape;
  std::vector<int> ids = bind_params(tape, layout, params);
  int root = build_loss(tape, ids);
  tape.backward(root);
  return collect_param_grads(tape, layout, ids);
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

// sizes = {in, hidden..., out}; tanh on hidden layers, linear output.
struct MlpSpec {
  std::vector<int> sizes;
  int n_layers() const { return static_cast<int>(sizes.size()) - 1; }
};

inline ParamLayout mlp_layout(const MlpSpec& spec, const std::string& prefix = "mlp") {
  if (spec.sizes.size() < 2) throw std::invalid_argument("mlp_layout: need at least in/out sizes");
  ParamLayout layout;
  for (int l = 0; l < spec.n_layers(); ++l) {
    layout.add(prefix + ".W" + std::to_string(l), spec.sizes[l + 1], spec.sizes[l]);
    layout.add(prefix + ".b" + std::to_string(l), spec.sizes[l + 1], 1);
  }
  return layout;
}

// param_ids must hold the 2*n_layers leaves in layout order; x is (in x B).
inline int mlp_apply(Tape& tape, const std::vector<int>& param_ids, const MlpSpec& spec, int x,
                     int first_param = 0) {
  int h = x;
  for (int l = 0; l < spec.n_layers(); ++l) {
    const int w = param_ids[first_param + 2 * l];
    const int b = param_ids[first_param + 2 * l + 1];
    h = tape.add_col(tape.matmul(w, h), b);
    if (l + 1 < spec.n_layers()) h = tape.tanh(h);
  }
  return h;
}

inline Mat mlp_forward(const MlpSpec& spec, const ParamLayout& layout, const Vec& params, const Mat& x) {
  if (x.rows() != spec.sizes.front()) throw std::invalid_argument("mlp_forward: input size mismatch");
  Tape tape;
  std::vector<int> ids = bind_params(tape, layout, params);
  return tape.val(mlp_apply(tape, ids, spec, tape.constant(x)));
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

// Stacked GRU with the usual two-bias gate formulation:
//   r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//   z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//   n = tanh(W_in x + b_in + r . (W_hn h + b_hn))
//   h' = (1 - z) . n + z . h
struct GruSpec {
  int input = 0;
  int hidden = 0;
  int layers = 1;
};

inline ParamLayout gru_layout(const GruSpec& spec, const std::string& prefix = "gru") {
  if (spec.input <= 0 || spec.hidden <= 0 || spec.layers <= 0)
    throw std::invalid_argument("gru_layout: bad spec");
  ParamLayout layout;
  for (int l = 0; l < spec.layers; ++l) {
    const int in = (l == 0) ? spec.input : spec.hidden;
    const std::string p = prefix + ".l" + std::to_string(l) + ".";
    for (const char* gate : {"r", "z", "n"}) {
      layout.add(p + "W_i" + gate, spec.hidden, in);
      layout.add(p + "W_h" + gate, spec.hidden, spec.hidden);
      layout.add(p + "b_i" + gate, spec.hidden, 1);
      layout.add(p + "b_h" + gate, spec.hidden, 1);
    }
  }
  return layout;
}

// seq holds node ids of (input x B) matrices, oldest first. Returns the final
// hidden state of the top layer as a (hidden x B) node.
inline int gru_apply(Tape& tape, const std::vector<int>& param_ids, const GruSpec& spec,
                     const std::vector<int>& seq, int first_param = 0) {
  if (seq.empty()) throw std::invalid_argument("gru_apply: empty sequence");
  const int B = static_cast<int>(tape.val(seq[0]).cols());

  std::vector<int> inputs = seq;
  int h = -1;
  for (int l = 0; l < spec.layers; ++l) {
    const int base = first_param + 12 * l;
    const int w_ir = param_ids[base + 0], w_hr = param_ids[base + 1];
    const int b_ir = param_ids[base + 2], b_hr = param_ids[base + 3];
    const int w_iz = param_ids[base + 4], w_hz = param_ids[base + 5];
    const int b_iz = param_ids[base + 6], b_hz = param_ids[base + 7];
    const int w_in = param_ids[base + 8], w_hn = param_ids[base + 9];
    const int b_in = param_ids[base + 10], b_hn = param_ids[base + 11];

    h = tape.constant(Mat::Zero(spec.hidden, B));
    std::vector<int> outputs;
    outputs.reserve(inputs.size());
    for (int x : inputs) {
      const int r = tape.sigmoid(tape.add(tape.add_col(tape.matmul(w_ir, x), b_ir),
                                          tape.add_col(tape.matmul(w_hr, h), b_hr)));
      const int z = tape.sigmoid(tape.add(tape.add_col(tape.matmul(w_iz, x), b_iz),
                                          tape.add_col(tape.matmul(w_hz, h), b_hz)));
      const int n = tape.tanh(tape.add(tape.add_col(tape.matmul(w_in, x), b_in),
                                       tape.cmul(r, tape.add_col(tape.matmul(w_hn, h), b_hn))));
      h = tape.add(tape.cmul(tape.one_minus(z), n), tape.cmul(z, h));
      outputs.push_back(h);
    }
    inputs = std::move(outputs);
  }
  return h;
}

inline Mat gru_forward(const GruSpec& spec, const ParamLayout& layout, const Vec& params,
                       const std::vector<Mat>& seq) {
  if (seq.empty()) throw std::invalid_argument("gru_forward: empty sequence");
  Tape tape;
  std::vector<int> ids = bind_params(tape, layout, params);
  std::vector<int> seq_ids;
  seq_ids.reserve(seq.size());
  for (const auto& x : seq) {
    if (x.rows() != spec.input) throw std::invalid_argument("gru_forward: input size mismatch");
    seq_ids.push_back(tape.constant(x));
  }
  return tape.val(gru_apply(tape, ids, spec, seq_ids));
}

// ---------------------------------------------------------------------------
// Diagonal Gaussians
// ---------------------------------------------------------------------------

struct GaussianHead {
  Vec mu;
  Vec log_std;
  int dim() const { return static_cast<int>(mu.size()); }
};

inline double gaussian_log_density(const GaussianHead& head, const Vec& w) {
  if (w.size() != head.mu.size()) throw std::invalid_argument("gaussian_log_density: dim mismatch");
  const auto z = (w - head.mu).array() * (-head.log_std.array()).exp();
  return -0.5 * z.square().sum() - head.log_std.sum() -
         0.5 * head.dim() * std::log(2.0 * std::numbers::pi);
}

// KL(p || q) for diagonal Gaussians, in closed form.
inline double gaussian_kl(const GaussianHead& p, const GaussianHead& q) {
  if (p.mu.size() != q.mu.size()) throw std::invalid_argument("gaussian_kl: dim mismatch");
  const auto var_ratio = ((p.log_std - q.log_std).array() * 2.0).exp();
  const auto mean_term = (p.mu - q.mu).array().square() * (-2.0 * q.log_std.array()).exp();
  return ((q.log_std - p.log_std).array() + 0.5 * (var_ratio + mean_term) - 0.5).sum();
}

// Tape version of the log-density: mu and log_std are (m x B) nodes, w is a
// constant (m x B); the result is a (1 x B) row of per-sample densities.
inline int gaussian_log_density_node(Tape& tape, int mu, int log_std, int w) {
  const int m = static_cast<int>(tape.val(mu).rows());
  const int z = tape.cmul(tape.sub(w, mu), tape.exp(tape.neg(log_std)));
  int out = tape.scale(tape.colsum(tape.square(z)), -0.5);
  out = tape.sub(out, tape.colsum(log_std));
  return tape.add_const(out, -0.5 * m * std::log(2.0 * std::numbers::pi));
}

// Tape version of KL(p || q) with a frozen p: mu_p/log_std_p are constants.
// Returns a (1 x B) row of per-sample divergences.
inline int gaussian_kl_node(Tape& tape, int mu_p, int log_std_p, int mu_q, int log_std_q) {
  const int m = static_cast<int>(tape.val(mu_q).rows());
  const int var_p = tape.exp(tape.scale(log_std_p, 2.0));
  const int mean_sq = tape.square(tape.sub(mu_p, mu_q));
  const int inv_var_q = tape.exp(tape.scale(log_std_q, -2.0));
  int out = tape.scale(tape.colsum(tape.cmul(tape.add(var_p, mean_sq), inv_var_q)), 0.5);
  out = tape.add(out, tape.sub(tape.colsum(log_std_q), tape.colsum(log_std_p)));
  return tape.add_const(out, -0.5 * m);
}

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

// Conjugate gradient for SPD matvecs. Stops at iters or when the residual
// drops below tol * ||b||.
inline Vec conjugate_gradient(const std::function<Vec(const Vec&)>& matvec, const Vec& b, int iters,
                              double tol = 1e-10) {
  Vec x = Vec::Zero(b.size());
  Vec r = b;
  Vec p = b;
  double rs = r.squaredNorm();
  const double threshold = tol * tol * b.squaredNorm();
  for (int i = 0; i < iters && rs > threshold; ++i) {
    const Vec ap = matvec(p);
    const double pap = p.dot(ap);
    if (!std::isfinite(pap) || pap <= 0.0)
      throw std::runtime_error("conjugate_gradient: matvec is not positive definite");
    const double alpha = rs / pap;
    x += alpha * p;
    r -= alpha * ap;
    const double rs_new = r.squaredNorm();
    if (!std::isfinite(rs_new)) throw std::runtime_error("conjugate_gradient: non-finite residual");
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  return x;
}

// (H + damping I) v where H is the Hessian of the scalar function whose exact
// gradient is grad_fn, evaluated by symmetric differences of that gradient.
inline Vec hessian_vector_product(const std::function<Vec(const Vec&)>& grad_fn, const Vec& params,
                                  const Vec& v, double damping, double eps = 1e-5) {
  const double norm = v.norm();
  if (norm == 0.0) return Vec::Zero(v.size());
  const Vec u = v / norm;
  const Vec gp = grad_fn(params + eps * u);
  const Vec gm = grad_fn(params - eps * u);
  return (norm / (2.0 * eps)) * (gp - gm) + damping * v;
}

}  // namespace fcpo
