#pragma once

// ABD-Net actor and the GNN / MLP baselines, built on the autodiff tape.
//
// Every network is described by a NetSpec (structure only) plus a ParamSet
// (weights). Forward passes are templates on the scalar type so the same code
// runs in float for training and in double for gradient checks.

#include <abd/autodiff.hpp>
#include <abd/errors.hpp>
#include <abd/morphology.hpp>

#include <nlohmann/json.hpp>

#include <Eigen/QR>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace abd {

enum class ActorKind { kAbdNet, kAbdNetNoOrth, kGnn, kMlp };

inline constexpr std::array<const char*, 4> kActorNames = {"abdnet", "abdnet-noorth", "gnn", "mlp"};

inline const char* to_string(ActorKind k) { return kActorNames[static_cast<int>(k)]; }

inline ActorKind parse_actor_kind(const std::string& name) {
  for (std::size_t k = 0; k < kActorNames.size(); ++k)
    if (name == kActorNames[k]) return static_cast<ActorKind>(k);
  throw ConfigError("unknown actor '" + name + "' (valid: abdnet, abdnet-noorth, gnn, mlp)");
}

inline bool is_abd(ActorKind k) { return k == ActorKind::kAbdNet || k == ActorKind::kAbdNetNoOrth; }

/// One decoder head. ABD-Net reads v of `input_link`; the GNN reads the node
/// state of `link`. Output column c of the head lands in column out_cols[c].
struct Head {
  int link = 0;
  int input_link = 0;
  std::vector<int> out_cols;
};

struct NetSpec {
  ActorKind kind = ActorKind::kAbdNet;
  int d = 32;      // link representation width
  int width = 0;   // GNN node width / MLP hidden width
  int in_dim = 0;
  int out_dim = 0;
  bool policy = true;  // carries a log_std vector
  bool per_sample_orth = false;
  std::vector<int> parent;  // parent[i], -1 for the root
  std::vector<Head> heads;
  std::string tree_hash;

  int links() const { return static_cast<int>(parent.size()); }

  std::vector<std::vector<int>> children() const {
    std::vector<std::vector<int>> ch(parent.size());
    for (int i = 0; i < links(); ++i)
      if (parent[i] >= 0) ch[parent[i]].push_back(i);
    return ch;
  }

  /// Children before parents, siblings ascending (postorder DFS).
  std::vector<int> leaf_to_root() const {
    auto ch = children();
    std::vector<int> out;
    std::vector<std::pair<int, std::size_t>> stack{{0, 0}};
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < ch[node].size()) {
        int c = ch[node][next++];
        stack.push_back({c, 0});
      } else {
        out.push_back(node);
        stack.pop_back();
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Spec construction.

inline NetSpec tree_net_spec(const KinematicTree& tree, ActorKind kind, int d, int in_dim) {
  if (d < 1) throw ConfigError("hidden width d must be >= 1");
  if (in_dim < 1) throw ConfigError("input dimension must be >= 1");
  NetSpec s;
  s.kind = kind;
  s.d = d;
  s.in_dim = in_dim;
  for (int i = 0; i < tree.size(); ++i) s.parent.push_back(tree.parent(i));
  s.tree_hash = tree_hash(tree);
  return s;
}

/// Policy network: one head per actuated joint j, reading v of pa(j).
inline NetSpec policy_spec(const KinematicTree& tree, ActorKind kind, int d, int obs_dim) {
  NetSpec s = tree_net_spec(tree, kind, d, obs_dim);
  int col = 0;
  for (int link : tree.actuated_links()) {
    Head h{link, tree.parent(link), {}};
    for (int k = 0; k < tree.joint(link).dof; ++k) h.out_cols.push_back(col++);
    s.heads.push_back(h);
  }
  s.out_dim = col;
  return s;
}

/// Dynamics model: `cols_per_link[i]` lists the output entries predicted by
/// link i's joint head (read from v of pa(i)); every other entry goes to a
/// root head reading v_0.
inline NetSpec dynamics_spec(const KinematicTree& tree, ActorKind kind, int d, int in_dim, int out_dim,
                             const std::vector<std::vector<int>>& cols_per_link) {
  NetSpec s = tree_net_spec(tree, kind, d, in_dim);
  s.out_dim = out_dim;
  s.policy = false;
  std::vector<bool> taken(out_dim, false);
  for (int i = 1; i < tree.size() && i < static_cast<int>(cols_per_link.size()); ++i) {
    if (cols_per_link[i].empty()) continue;
    Head h{i, tree.parent(i), cols_per_link[i]};
    for (int c : h.out_cols) {
      if (c < 0 || c >= out_dim || taken[c]) throw ConfigError("dynamics head columns overlap or out of range");
      taken[c] = true;
    }
    s.heads.push_back(h);
  }
  Head root{0, 0, {}};
  for (int c = 0; c < out_dim; ++c)
    if (!taken[c]) root.out_cols.push_back(c);
  if (!root.out_cols.empty()) s.heads.push_back(root);
  return s;
}

/// Plain MLP with `width` hidden units; ignores tree structure.
inline NetSpec mlp_spec(int in_dim, int out_dim, int width, bool policy) {
  NetSpec s;
  s.kind = ActorKind::kMlp;
  s.in_dim = in_dim;
  s.out_dim = out_dim;
  s.width = width;
  s.policy = policy;
  s.parent = {-1};
  return s;
}

/// Value network shared by all actor kinds: in -> 64 -> 64 -> 1.
inline NetSpec critic_spec(int obs_dim) { return mlp_spec(obs_dim, 1, 64, false); }

// ---------------------------------------------------------------------------
// Parameter counting.

inline std::size_t head_params(int w, const Head& h) {
  std::size_t n = h.out_cols.size();
  return static_cast<std::size_t>(w) * w + w + w * n + n;
}

inline std::size_t param_count(const NetSpec& s) {
  const std::size_t K = s.links(), in = s.in_dim;
  std::size_t n = s.policy ? s.out_dim : 0;
  switch (s.kind) {
    case ActorKind::kAbdNet:
    case ActorKind::kAbdNetNoOrth: {
      const std::size_t d = s.d;
      n += K * (in * d + d) + K * d + (K - 1) * d * d;
      for (const auto& h : s.heads) n += head_params(s.d, h);
      return n;
    }
    case ActorKind::kGnn: {
      const std::size_t w = s.width;
      n += K * (in * w + w) + 2 * w * w + w;
      for (const auto& h : s.heads) n += head_params(s.width, h);
      return n;
    }
    case ActorKind::kMlp: {
      const std::size_t w = s.width;
      return n + in * w + w + w * w + w + w * s.out_dim + s.out_dim;
    }
  }
  return n;
}

/// Same structure as `abd`, re-targeted to `kind` with its width chosen so the
/// parameter count lands as close as possible to ABD-Net's.
inline NetSpec matched_spec(const NetSpec& abd, ActorKind kind) {
  NetSpec s = abd;
  s.kind = kind;
  if (is_abd(kind)) return s;
  const double target = static_cast<double>(param_count(abd));
  int best = 1;
  double best_gap = 1e300;
  for (int w = 1; w <= 2048; ++w) {
    s.width = w;
    double gap = std::abs(static_cast<double>(param_count(s)) - target);
    if (gap < best_gap) best_gap = gap, best = w;
  }
  s.width = best;
  if (best_gap > 0.1 * target)
    throw ConfigError(std::string("cannot match parameter budget for ") + to_string(kind));
  return s;
}

// ---------------------------------------------------------------------------
// Initialization.

/// rows x cols matrix with orthonormal rows or columns (whichever is shorter), times `gain`.
inline ad::Tensor<float> orthogonal_init(std::size_t rows, std::size_t cols, double gain, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd A(big, small);
  for (Eigen::Index r = 0; r < A.rows(); ++r)
    for (Eigen::Index c = 0; c < A.cols(); ++c) A(r, c) = nd(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  Eigen::MatrixXd R = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (std::size_t k = 0; k < small; ++k)
    if (R(k, k) < 0) Q.col(k) *= -1.0;
  if (rows < cols) Q.transposeInPlace();
  ad::Tensor<float> t(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t(r, c) = static_cast<float>(gain * Q(r, c));
  return t;
}

inline std::string link_param(const char* what, int i) { return std::string(what) + std::to_string(i); }
inline std::string head_param(int h, const char* what) { return "head" + std::to_string(h) + "." + what; }

/// Output-layer gain: small for policy means, unit otherwise.
inline double output_gain(const NetSpec& s) { return s.policy ? 0.01 : 1.0; }

inline void add_heads(ad::ParamSet<float>& p, const NetSpec& s, int w, std::mt19937_64& rng) {
  for (std::size_t h = 0; h < s.heads.size(); ++h) {
    const std::size_t n = s.heads[h].out_cols.size();
    p.add(head_param(h, "W1"), orthogonal_init(w, w, 1.0, rng));
    p.add(head_param(h, "b1"), ad::Tensor<float>(1, w));
    p.add(head_param(h, "W2"), orthogonal_init(w, n, output_gain(s), rng));
    p.add(head_param(h, "b2"), ad::Tensor<float>(1, n));
  }
}

inline ad::ParamSet<float> init_params(const NetSpec& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ad::ParamSet<float> p;
  switch (s.kind) {
    case ActorKind::kAbdNet:
    case ActorKind::kAbdNetNoOrth: {
      const int d = s.d;
      for (int i = 0; i < s.links(); ++i) {
        p.add(link_param("enc.W", i), orthogonal_init(s.in_dim, d, 1.0, rng));
        p.add(link_param("enc.b", i), ad::Tensor<float>(1, d));
        p.add(link_param("B", i), ad::Tensor<float>(1, d));
        if (i == 0) continue;
        // W W^T starts at I/d
        p.add(link_param(s.kind == ActorKind::kAbdNet ? "W" : "U", i),
              orthogonal_init(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
      }
      if (s.kind == ActorKind::kAbdNetNoOrth) {
        // the unconstrained slot starts from the same I/d as W W^T
        for (int i = 1; i < s.links(); ++i) {
          auto& U = p.get(link_param("U", i));
          ad::Tensor<float> sq(d, d);
          for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) {
              float acc = 0.0f;
              for (int k = 0; k < d; ++k) acc += U(r, k) * U(c, k);
              sq(r, c) = acc;
            }
          U = sq;
        }
      }
      add_heads(p, s, d, rng);
      break;
    }
    case ActorKind::kGnn: {
      const int w = s.width;
      if (w < 1) throw ConfigError("gnn width must be >= 1");
      for (int i = 0; i < s.links(); ++i) {
        p.add(link_param("enc.W", i), orthogonal_init(s.in_dim, w, 1.0, rng));
        p.add(link_param("enc.b", i), ad::Tensor<float>(1, w));
      }
      p.add("gnn.U_self", orthogonal_init(w, w, 1.0, rng));
      p.add("gnn.U_nbr", orthogonal_init(w, w, 1.0, rng));
      p.add("gnn.b", ad::Tensor<float>(1, w));
      add_heads(p, s, w, rng);
      break;
    }
    case ActorKind::kMlp: {
      const int w = s.width;
      if (w < 1) throw ConfigError("mlp width must be >= 1");
      p.add("mlp.W1", orthogonal_init(s.in_dim, w, 1.0, rng));
      p.add("mlp.b1", ad::Tensor<float>(1, w));
      p.add("mlp.W2", orthogonal_init(w, w, 1.0, rng));
      p.add("mlp.b2", ad::Tensor<float>(1, w));
      p.add("mlp.W3", orthogonal_init(w, s.out_dim, output_gain(s), rng));
      p.add("mlp.b3", ad::Tensor<float>(1, s.out_dim));
      break;
    }
  }
  if (s.policy) p.add("log_std", ad::Tensor<float>(1, s.out_dim, static_cast<float>(std::log(0.5))));
  return p;
}

// ---------------------------------------------------------------------------
// Forward passes.

/// Sets the tape tag for the lifetime of the guard.
template <class T>
class TagScope {
 public:
  TagScope(ad::Tape<T>& tape, std::string tag) : tape_(tape), saved_(tape.tag()) { tape.set_tag(std::move(tag)); }
  ~TagScope() { tape_.set_tag(saved_); }
  TagScope(const TagScope&) = delete;
  TagScope& operator=(const TagScope&) = delete;

 private:
  ad::Tape<T>& tape_;
  std::string saved_;
};

template <class T>
struct LinkFeatures {
  std::vector<ad::Var<T>> z;   // encoder outputs
  std::vector<ad::Var<T>> v;   // link representations
  std::vector<ad::Var<T>> va;  // child contributions (root entry unused)
  std::vector<ad::Var<T>> m;   // aggregated messages (zeros for leaves)
};

template <class T>
struct NetOutput {
  ad::Var<T> out;
  std::optional<ad::Var<T>> orth;
  LinkFeatures<T> features;
};

/// z_i = x Wenc_i + b_i for every link, each reading the full input.
template <class T>
std::vector<ad::Var<T>> encode(const NetSpec& s, const ad::Bound<T>& p, ad::Var<T> x) {
  if (x.shape().cols != static_cast<std::size_t>(s.in_dim))
    throw ShapeError("encode: input " + x.shape().str() + " vs expected width " + std::to_string(s.in_dim));
  TagScope<T> tag(*x.tape, "encode");
  std::vector<ad::Var<T>> z;
  for (int i = 0; i < s.links(); ++i)
    z.push_back(ad::add_bias(ad::matmul(x, p[link_param("enc.W", i)]), p[link_param("enc.b", i)]));
  return z;
}

/// Leaf-to-root aggregation:
///   v_i  = softplus(z_i + B_i) + m_i
///   va_i = v_i - v_i * (W_i W_i^T v_i)      (or v_i - v_i * (U_i v_i) without orth)
///   m_pa(i) += va_i
template <class T>
LinkFeatures<T> message_pass(const NetSpec& s, const ad::Bound<T>& p, std::vector<ad::Var<T>> z) {
  if (static_cast<int>(z.size()) != s.links()) throw ShapeError("message_pass: one z per link required");
  ad::Tape<T>& tape = *z[0].tape;
  const std::size_t B = z[0].shape().rows;
  for (const auto& zi : z)
    if (zi.shape() != ad::Shape{B, static_cast<std::size_t>(s.d)})
      throw ShapeError("message_pass: z " + zi.shape().str() + " vs expected [" + std::to_string(B) + "x" +
                       std::to_string(s.d) + "]");
  const auto ch = s.children();
  LinkFeatures<T> f;
  f.z = std::move(z);
  f.v.resize(s.links());
  f.va.resize(s.links());
  f.m.resize(s.links());
  std::vector<bool> has_m(s.links(), false);
  for (int i : s.leaf_to_root()) {
    ad::Var<T> base;
    {
      TagScope<T> tag(tape, "encode.base");
      base = ad::softplus(ad::add_bias(f.z[i], p[link_param("B", i)]));
    }
    TagScope<T> tag(tape, "message");
    if (ch[i].empty()) {
      f.m[i] = tape.zeros(B, s.d);
      f.v[i] = base;
    } else {
      f.v[i] = ad::add(base, f.m[i]);
    }
    const int pa = s.parent[i];
    if (pa < 0) continue;
    ad::Var<T> proj = s.kind == ActorKind::kAbdNetNoOrth
                          ? ad::matmul(f.v[i], p[link_param("U", i)])
                          : ad::matmul(ad::matmul(f.v[i], p[link_param("W", i)]), ad::transpose(p[link_param("W", i)]));
    f.va[i] = ad::sub(f.v[i], ad::mul(f.v[i], proj));
    TagScope<T> edge(tape, "message.edge");
    if (!has_m[pa]) {
      f.m[pa] = tape.zeros(B, s.d);
      has_m[pa] = true;
    }
    f.m[pa] = ad::add(f.m[pa], f.va[i]);
  }
  return f;
}

/// Applies every head to its input representation and assembles the output columns.
template <class T>
ad::Var<T> decode_heads(const NetSpec& s, const ad::Bound<T>& p, const std::vector<ad::Var<T>>& reps, bool abd) {
  ad::Tape<T>& tape = *reps[0].tape;
  TagScope<T> tag(tape, "decode");
  const std::size_t B = reps[0].shape().rows;
  if (s.heads.empty()) return tape.zeros(B, 0);
  std::vector<ad::Var<T>> outs;
  std::vector<std::pair<int, int>> where(s.out_dim, {-1, -1});
  for (std::size_t h = 0; h < s.heads.size(); ++h) {
    const Head& hd = s.heads[h];
    ad::Var<T> in = reps[abd ? hd.input_link : hd.link];
    ad::Var<T> hidden = ad::tanh(ad::add_bias(ad::matmul(in, p[head_param(h, "W1")]), p[head_param(h, "b1")]));
    outs.push_back(ad::add_bias(ad::matmul(hidden, p[head_param(h, "W2")]), p[head_param(h, "b2")]));
    for (std::size_t k = 0; k < hd.out_cols.size(); ++k) where[hd.out_cols[k]] = {static_cast<int>(h), static_cast<int>(k)};
  }
  // Gather runs of consecutive columns coming from the same head.
  std::vector<ad::Var<T>> pieces;
  for (int c = 0; c < s.out_dim;) {
    auto [h, k] = where[c];
    if (h < 0) throw ConfigError("output column " + std::to_string(c) + " has no head");
    int len = 1;
    while (c + len < s.out_dim && where[c + len].first == h && where[c + len].second == k + len) ++len;
    const bool whole = k == 0 && len == static_cast<int>(outs[h].shape().cols);
    pieces.push_back(whole ? outs[h] : ad::slice_cols(outs[h], k, k + len));
    c += len;
  }
  return pieces.size() == 1 ? pieces[0] : ad::concat_cols(pieces);
}

/// (1/K) sum_{i>=1} || W_i^T diag(vbar_i) W_i - I ||_F^2, with vbar_i the batch
/// mean of v_i (or the per-sample terms averaged over the batch).
template <class T>
ad::Var<T> orth_loss(const NetSpec& s, const ad::Bound<T>& p, const LinkFeatures<T>& f) {
  ad::Tape<T>& tape = *f.v[0].tape;
  TagScope<T> tag(tape, "orth");
  const std::size_t d = s.d;
  ad::Tensor<T> eye(d, d);
  for (std::size_t k = 0; k < d; ++k) eye(k, k) = T(1);
  ad::Var<T> I = tape.constant(eye);
  ad::Var<T> total = tape.zeros(1, 1);
  const std::size_t B = f.v[0].shape().rows;
  for (int i = 1; i < s.links(); ++i) {
    ad::Var<T> W = p[link_param("W", i)];
    ad::Var<T> Wt = ad::transpose(W);
    if (!s.per_sample_orth) {
      ad::Var<T> G = ad::matmul(Wt, ad::scale_rows(W, ad::mean_rows(f.v[i])));
      total = ad::add(total, ad::frobenius_norm_sq(ad::sub(G, I)));
    } else {
      for (std::size_t b = 0; b < B; ++b) {
        ad::Var<T> G = ad::matmul(Wt, ad::scale_rows(W, ad::slice_rows(f.v[i], b, b + 1)));
        total = ad::add(total, ad::scalar_mul(ad::frobenius_norm_sq(ad::sub(G, I)), T(1) / static_cast<T>(B)));
      }
    }
  }
  return ad::scalar_mul(total, T(1) / static_cast<T>(s.links()));
}

template <class T>
ad::Var<T> gnn_forward(const NetSpec& s, const ad::Bound<T>& p, ad::Var<T> x, int rounds = 2) {
  ad::Tape<T>& tape = *x.tape;
  if (x.shape().cols != static_cast<std::size_t>(s.in_dim))
    throw ShapeError("gnn: input " + x.shape().str() + " vs expected width " + std::to_string(s.in_dim));
  std::vector<ad::Var<T>> h(s.links());
  {
    TagScope<T> tag(tape, "encode");
    for (int i = 0; i < s.links(); ++i)
      h[i] = ad::tanh(ad::add_bias(ad::matmul(x, p[link_param("enc.W", i)]), p[link_param("enc.b", i)]));
  }
  const auto ch = s.children();
  TagScope<T> tag(tape, "message");
  for (int r = 0; r < rounds; ++r) {
    std::vector<ad::Var<T>> next(s.links());
    for (int i = 0; i < s.links(); ++i) {
      std::vector<int> nbrs = ch[i];
      if (s.parent[i] >= 0) nbrs.insert(nbrs.begin(), s.parent[i]);
      ad::Var<T> pre = ad::matmul(h[i], p["gnn.U_self"]);
      if (!nbrs.empty()) {
        ad::Var<T> agg = h[nbrs[0]];
        for (std::size_t k = 1; k < nbrs.size(); ++k) agg = ad::add(agg, h[nbrs[k]]);
        pre = ad::add(pre, ad::matmul(agg, p["gnn.U_nbr"]));
      }
      next[i] = ad::tanh(ad::add_bias(pre, p["gnn.b"]));
    }
    h = std::move(next);
  }
  return decode_heads(s, p, h, false);
}

template <class T>
ad::Var<T> mlp_forward(const NetSpec& s, const ad::Bound<T>& p, ad::Var<T> x) {
  if (x.shape().cols != static_cast<std::size_t>(s.in_dim))
    throw ShapeError("mlp: input " + x.shape().str() + " vs expected width " + std::to_string(s.in_dim));
  ad::Tape<T>& tape = *x.tape;
  ad::Var<T> h;
  {
    TagScope<T> tag(tape, "encode");
    h = ad::tanh(ad::add_bias(ad::matmul(x, p["mlp.W1"]), p["mlp.b1"]));
  }
  TagScope<T> tag(tape, "decode");
  h = ad::tanh(ad::add_bias(ad::matmul(h, p["mlp.W2"]), p["mlp.b2"]));
  return ad::add_bias(ad::matmul(h, p["mlp.W3"]), p["mlp.b3"]);
}

/// Full forward. `with_orth` adds the orthogonality term for ABD-Net.
template <class T>
NetOutput<T> forward(const NetSpec& s, const ad::Bound<T>& p, ad::Var<T> x, bool with_orth = false) {
  NetOutput<T> o;
  switch (s.kind) {
    case ActorKind::kAbdNet:
    case ActorKind::kAbdNetNoOrth:
      o.features = message_pass(s, p, encode(s, p, x));
      o.out = decode_heads(s, p, o.features.v, true);
      if (with_orth && s.kind == ActorKind::kAbdNet) o.orth = orth_loss(s, p, o.features);
      break;
    case ActorKind::kGnn:
      o.out = gnn_forward(s, p, x);
      break;
    case ActorKind::kMlp:
      o.out = mlp_forward(s, p, x);
      break;
  }
  return o;
}

/// Convenience: deterministic output for a batch of inputs (rows).
inline ad::Tensor<float> predict(const NetSpec& s, const ad::ParamSet<float>& params, const ad::Tensor<float>& x) {
  ad::Tape<float> tape;
  ad::Bound<float> p(tape, params);
  return forward(s, p, tape.constant(x)).out.tensor();
}

// ---------------------------------------------------------------------------
// FLOPs.

struct FlopCount {
  std::uint64_t encode = 0;
  std::uint64_t message = 0;
  std::uint64_t decode = 0;
  std::uint64_t total() const { return encode + message + decode; }
};

/// Multiply-adds of one single-sample forward pass (no orth term), from closed-form counts.
inline FlopCount flops_count(const NetSpec& s) {
  FlopCount f;
  const std::uint64_t K = s.links(), in = s.in_dim;
  const auto ch = s.children();
  std::uint64_t internal = 0;
  for (const auto& c : ch) internal += c.empty() ? 0 : 1;
  auto heads = [&](std::uint64_t w) {
    std::uint64_t n = 0;
    for (const auto& h : s.heads) n += head_params(static_cast<int>(w), h);
    return n;
  };
  switch (s.kind) {
    case ActorKind::kAbdNet:
    case ActorKind::kAbdNetNoOrth: {
      const std::uint64_t d = s.d;
      const std::uint64_t proj = s.kind == ActorKind::kAbdNet ? 2 * d * d : d * d;
      f.encode = K * (in * d + d) + K * d;
      f.message = (K - 1) * (proj + 3 * d) + internal * d;
      f.decode = heads(d);
      break;
    }
    case ActorKind::kGnn: {
      const std::uint64_t w = s.width;
      f.encode = K * (in * w + w);
      std::uint64_t per_round = 0;
      for (int i = 0; i < s.links(); ++i) {
        std::uint64_t deg = ch[i].size() + (s.parent[i] >= 0 ? 1 : 0);
        per_round += w * w + w;
        if (deg > 0) per_round += w * w + w + (deg - 1) * w;
      }
      f.message = 2 * per_round;
      f.decode = heads(w);
      break;
    }
    case ActorKind::kMlp: {
      const std::uint64_t w = s.width;
      f.encode = in * w + w;
      f.decode = w * w + w + w * s.out_dim + s.out_dim;
      break;
    }
  }
  return f;
}

/// Same quantity measured by running a forward pass on the tape counter.
inline FlopCount instrumented_flops(const NetSpec& s, const ad::ParamSet<float>& params) {
  ad::Tape<float> tape;
  ad::Bound<float> p(tape, params);
  ad::Var<float> x = tape.constant(ad::Tensor<float>(1, s.in_dim));
  tape.reset_mul_adds();
  forward(s, p, x);
  return {tape.mul_adds("encode"), tape.mul_adds("message"), tape.mul_adds("decode")};
}

// ---------------------------------------------------------------------------
// Spec / checkpoint serialization.

inline nlohmann::json to_json(const NetSpec& s) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : s.heads) heads.push_back({{"link", h.link}, {"input_link", h.input_link}, {"out_cols", h.out_cols}});
  return {{"kind", to_string(s.kind)}, {"d", s.d},         {"width", s.width},
          {"in_dim", s.in_dim},        {"out_dim", s.out_dim}, {"policy", s.policy},
          {"per_sample_orth", s.per_sample_orth}, {"parent", s.parent}, {"heads", heads},
          {"tree_hash", s.tree_hash}};
}

inline NetSpec net_spec_from_json(const nlohmann::json& j) {
  try {
    NetSpec s;
    s.kind = parse_actor_kind(j.at("kind").get<std::string>());
    s.d = j.at("d").get<int>();
    s.width = j.at("width").get<int>();
    s.in_dim = j.at("in_dim").get<int>();
    s.out_dim = j.at("out_dim").get<int>();
    s.policy = j.at("policy").get<bool>();
    s.per_sample_orth = j.value("per_sample_orth", false);
    s.parent = j.at("parent").get<std::vector<int>>();
    for (const auto& h : j.at("heads"))
      s.heads.push_back({h.at("link").get<int>(), h.at("input_link").get<int>(), h.at("out_cols").get<std::vector<int>>()});
    s.tree_hash = j.value("tree_hash", "");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad network spec: ") + e.what());
  }
}

inline constexpr char kCheckpointMagic[8] = {'A', 'B', 'D', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
  nlohmann::json manifest;
  ad::ParamSet<float> params;
};

namespace detail {
inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32_le(const unsigned char* b) {
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}
}  // namespace detail

/// Layout: 8-byte magic, u32 manifest length, manifest JSON (UTF-8), then every
/// parameter as little-endian IEEE-754 float32 in manifest "params" order.
inline void save_checkpoint(const std::string& path, nlohmann::json manifest, const ad::ParamSet<float>& params) {
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& t = params.tensor(k);
    table.push_back({{"name", params.name(k)}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", offset}});
    offset += t.size();
  }
  manifest["params"] = table;
  manifest["precision"] = "float32";
  const std::string text = manifest.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint " + path);
  os.write(kCheckpointMagic, 8);
  detail::put_u32_le(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t k = 0; k < params.size(); ++k)
    for (float x : params.tensor(k).data) {
      std::uint32_t bits;
      std::memcpy(&bits, &x, 4);
      detail::put_u32_le(os, bits);
    }
  if (!os) throw ConfigError("failed writing checkpoint " + path);
}

/// Reads a checkpoint; throws TreeMismatchError if `expected_tree_hash` is
/// given and differs from the stored one.
inline Checkpoint load_checkpoint(const std::string& path, const std::optional<std::string>& expected_tree_hash = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open checkpoint " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0)
    throw ParseError("not a checkpoint file: " + path);
  const std::uint32_t len = detail::get_u32_le(buf.data() + 8);
  if (buf.size() < 12 + static_cast<std::size_t>(len)) throw ParseError("truncated checkpoint manifest: " + path);
  Checkpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(buf.begin() + 12, buf.begin() + 12 + len);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad checkpoint manifest: ") + e.what());
  }
  if (expected_tree_hash) {
    const std::string stored = ck.manifest.value("tree_hash", "");
    if (stored != *expected_tree_hash)
      throw TreeMismatchError("checkpoint tree hash " + stored + " does not match " + *expected_tree_hash);
  }
  const unsigned char* data = buf.data() + 12 + len;
  const std::size_t n_floats = (buf.size() - 12 - len) / 4;
  for (const auto& e : ck.manifest.at("params")) {
    const std::size_t rows = e.at("rows"), cols = e.at("cols"), off = e.at("offset");
    if (off + rows * cols > n_floats) throw ParseError("checkpoint data truncated at " + e.at("name").get<std::string>());
    ad::Tensor<float> t(rows, cols);
    for (std::size_t k = 0; k < t.size(); ++k) {
      std::uint32_t bits = detail::get_u32_le(data + 4 * (off + k));
      std::memcpy(&t.data[k], &bits, 4);
    }
    ck.params.add(e.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

/// Parameters whose names start with `prefix`, with the prefix stripped.
inline ad::ParamSet<float> subset(const ad::ParamSet<float>& all, const std::string& prefix) {
  ad::ParamSet<float> out;
  for (std::size_t k = 0; k < all.size(); ++k)
    if (all.name(k).compare(0, prefix.size(), prefix) == 0) out.add(all.name(k).substr(prefix.size()), all.tensor(k));
  return out;
}

inline void merge_into(ad::ParamSet<float>& all, const std::string& prefix, const ad::ParamSet<float>& part) {
  for (std::size_t k = 0; k < part.size(); ++k) all.add(prefix + part.name(k), part.tensor(k));
}

}  // namespace abd
