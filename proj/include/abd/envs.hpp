#pragma once

// Torque-controlled environments built on the dynamics module.
//
// Actions are normalized: each entry is clamped to [-1, 1] and multiplied by
// the joint's torque limit. Observations are built from blocks
//   q (minus skipped joints) | qd * qd_scale | previous clamped action
// and, with history h > 1, the h most recent such vectors (newest first),
// zero-padded at episode start.

#include <abd/dynamics.hpp>
#include <abd/errors.hpp>
#include <abd/morphology.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace abd {

enum class RewardKind { kBalance, kSwingup, kHopForward, kRegressOnly };

inline RewardKind parse_reward_kind(const std::string& s) {
  if (s == "balance") return RewardKind::kBalance;
  if (s == "swingup") return RewardKind::kSwingup;
  if (s == "hop_forward") return RewardKind::kHopForward;
  if (s == "regress_only") return RewardKind::kRegressOnly;
  throw ConfigError("unknown reward kind '" + s + "' (valid: balance, swingup, hop_forward, regress_only)");
}

struct ObsLayout {
  bool q = true;
  bool qd = true;
  bool prev_action = false;
  int history = 1;
  double qd_scale = 1.0;
  std::vector<std::string> q_skip;  // joint names left out of the q block
};

struct RewardParams {
  RewardKind kind = RewardKind::kRegressOnly;
  double w_up = 1.0;
  double w_ctrl = 1e-3;
  // balance termination: tip of tip_link below fall_height
  std::string tip_link;
  Vec3 tip_point = Vec3::Zero();
  double fall_height = -1e9;
  // hop_forward
  std::string forward_joint;
  std::string height_link;
  std::string pitch_joint;
  double w_forward = 1.0;
  double alive_bonus = 1.0;
  double max_forward_velocity = 5.0;
  double min_height = -1e9;
  double max_pitch = 1e9;
};

struct ContactParams {
  std::string link;
  std::vector<Vec3> points;  // in the link frame
  double stiffness = 2e4;
  double damping = 800.0;
  double tangential_damping = 1000.0;
  double friction = 0.9;
  bool enabled() const { return !link.empty() && !points.empty(); }
};

struct EnvSpec {
  std::string name;
  KinematicTree tree;
  double dt = 0.01;
  int decimation = 1;
  int horizon = 100;
  double gravity = 9.81;
  ObsLayout obs;
  RewardParams reward;
  std::vector<double> torque_limit;  // per action entry
  std::vector<double> q_nominal;     // per dof
  std::vector<double> q_range;       // per dof half-width of the uniform reset
  double qd_noise = 0.0;
  ContactParams contact;
  bool identity = false;             // frozen dynamics: state never changes
  std::string shift_link;            // link scaled by mass-shift evaluation
  nlohmann::json config;             // resolved source document

  // derived by finalize()
  std::vector<int> q_obs;  // dof indices in the q block
  int base_obs_dim = 0;
  int obs_dim = 0;
  int action_dim = 0;

  Vec3 gravity_vec() const { return Vec3(0, 0, -gravity); }
  double control_dt() const { return dt * decimation; }
  int state_dim() const { return static_cast<int>(q_obs.size()) + tree.dof(); }

  void finalize() {
    if (!(dt > 0.0)) throw ConfigError("env '" + name + "': dt must be positive");
    if (decimation < 1) throw ConfigError("env '" + name + "': decimation must be >= 1");
    if (horizon < 1) throw ConfigError("env '" + name + "': horizon must be >= 1");
    if (obs.history < 1) throw ConfigError("env '" + name + "': history must be >= 1");
    action_dim = tree.action_dim();
    if (static_cast<int>(torque_limit.size()) != action_dim)
      throw ConfigError("env '" + name + "': torque_limit needs " + std::to_string(action_dim) + " entries");
    const int n = tree.dof();
    if (q_nominal.empty()) q_nominal.assign(n, 0.0);
    if (q_range.empty()) q_range.assign(n, 0.0);
    if (static_cast<int>(q_nominal.size()) != n || static_cast<int>(q_range.size()) != n)
      throw ConfigError("env '" + name + "': reset ranges need one entry per dof");
    q_obs.clear();
    for (int i = 1; i < tree.size(); ++i) {
      const int k = tree.q_index(i);
      if (k < 0) continue;
      const auto& skip = obs.q_skip;
      if (std::find(skip.begin(), skip.end(), tree.joint(i).name) == skip.end()) q_obs.push_back(k);
    }
    for (const auto& j : obs.q_skip) joint_link(j);  // validates names
    base_obs_dim = (obs.q ? static_cast<int>(q_obs.size()) : 0) + (obs.qd ? n : 0) + (obs.prev_action ? action_dim : 0);
    obs_dim = base_obs_dim * obs.history;
    if (obs_dim < 1) throw ConfigError("env '" + name + "': empty observation layout");
  }

  int joint_link(const std::string& joint_name) const {
    for (int i = 1; i < tree.size(); ++i)
      if (tree.joint(i).name == joint_name) return i;
    throw UnknownLinkError("env '" + name + "': unknown joint '" + joint_name + "'");
  }
  int link_index(const std::string& link_name) const {
    auto i = tree.find_link(link_name);
    if (!i) throw UnknownLinkError("env '" + name + "': unknown link '" + link_name + "'");
    return *i;
  }

  /// Largest possible |reward| of one control step.
  double reward_bound() const {
    double ctrl = reward.w_ctrl * action_dim;
    switch (reward.kind) {
      case RewardKind::kBalance:
      case RewardKind::kSwingup:
        return std::abs(reward.w_up) + ctrl;
      case RewardKind::kHopForward:
        return std::abs(reward.w_forward) * reward.max_forward_velocity + std::abs(reward.alive_bonus) + ctrl;
      case RewardKind::kRegressOnly:
        return 0.0;
    }
    return 0.0;
  }

  /// Columns of the state vector [q(kept) | qd] owned by each link's joint.
  std::vector<std::vector<int>> state_columns_per_link() const {
    std::vector<std::vector<int>> cols(tree.size());
    for (std::size_t c = 0; c < q_obs.size(); ++c)
      for (int i = 1; i < tree.size(); ++i)
        if (tree.q_index(i) == q_obs[c]) cols[i].push_back(static_cast<int>(c));
    for (int i = 1; i < tree.size(); ++i) {
      const int k = tree.q_index(i);
      if (k >= 0) cols[i].push_back(static_cast<int>(q_obs.size()) + k);
    }
    return cols;
  }
};

// ---------------------------------------------------------------------------
// Loading.

namespace detail {

inline std::vector<double> per_entry(const nlohmann::json& j, int n, const std::string& what) {
  if (j.is_number()) return std::vector<double>(n, j.get<double>());
  auto v = j.get<std::vector<double>>();
  if (static_cast<int>(v.size()) != n) throw ConfigError(what + " needs " + std::to_string(n) + " entries");
  return v;
}

inline Vec3 vec3_of(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw ConfigError("expected a 3-vector");
  return {v[0], v[1], v[2]};
}

}  // namespace detail

/// Builds a spec from a config document; relative model paths resolve against `base_dir`.
inline EnvSpec parse_env_spec(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
  try {
    EnvSpec s;
    s.config = doc;
    s.name = doc.value("name", "env");
    std::filesystem::path model = doc.at("model").get<std::string>();
    if (model.is_relative()) model = base_dir / model;
    s.tree = load_tree(model.string());
    s.dt = doc.value("dt", 0.01);
    s.decimation = doc.value("decimation", 1);
    s.horizon = doc.value("horizon", 100);
    s.gravity = doc.value("gravity", 9.81);
    s.identity = doc.value("identity", false);
    s.shift_link = doc.value("shift_link", "");
    if (doc.contains("obs")) {
      const auto& o = doc["obs"];
      s.obs.q = o.value("q", true);
      s.obs.qd = o.value("qd", true);
      s.obs.prev_action = o.value("prev_action", false);
      s.obs.history = o.value("history", 1);
      s.obs.qd_scale = o.value("qd_scale", 1.0);
      s.obs.q_skip = o.value("q_skip", std::vector<std::string>{});
    }
    const int A = s.tree.action_dim(), n = s.tree.dof();
    s.torque_limit = detail::per_entry(doc.at("torque_limit"), A, "torque_limit");
    if (doc.contains("reset")) {
      const auto& r = doc["reset"];
      if (r.contains("q_nominal")) s.q_nominal = detail::per_entry(r["q_nominal"], n, "q_nominal");
      if (r.contains("q_range")) s.q_range = detail::per_entry(r["q_range"], n, "q_range");
      s.qd_noise = r.value("qd_noise", 0.0);
    }
    const auto& rw = doc.at("reward");
    s.reward.kind = parse_reward_kind(rw.at("kind").get<std::string>());
    s.reward.w_up = rw.value("w_up", 1.0);
    s.reward.w_ctrl = rw.value("w_ctrl", 1e-3);
    s.reward.tip_link = rw.value("tip_link", "");
    if (rw.contains("tip_point")) s.reward.tip_point = detail::vec3_of(rw["tip_point"]);
    s.reward.fall_height = rw.value("fall_height", -1e9);
    s.reward.forward_joint = rw.value("forward_joint", "");
    s.reward.height_link = rw.value("height_link", "");
    s.reward.pitch_joint = rw.value("pitch_joint", "");
    s.reward.w_forward = rw.value("w_forward", 1.0);
    s.reward.alive_bonus = rw.value("alive_bonus", 1.0);
    s.reward.max_forward_velocity = rw.value("max_forward_velocity", 5.0);
    s.reward.min_height = rw.value("min_height", -1e9);
    s.reward.max_pitch = rw.value("max_pitch", 1e9);
    if (doc.contains("contact")) {
      const auto& c = doc["contact"];
      s.contact.link = c.at("link").get<std::string>();
      for (const auto& p : c.at("points")) s.contact.points.push_back(detail::vec3_of(p));
      s.contact.stiffness = c.value("stiffness", 2e4);
      s.contact.damping = c.value("damping", 800.0);
      s.contact.tangential_damping = c.value("tangential_damping", 1000.0);
      s.contact.friction = c.value("friction", 0.9);
    }
    s.finalize();
    if (!s.reward.tip_link.empty()) s.link_index(s.reward.tip_link);
    if (!s.reward.height_link.empty()) s.link_index(s.reward.height_link);
    if (!s.reward.forward_joint.empty()) s.joint_link(s.reward.forward_joint);
    if (!s.reward.pitch_joint.empty()) s.joint_link(s.reward.pitch_joint);
    if (s.contact.enabled()) s.link_index(s.contact.link);
    if (!s.shift_link.empty()) s.link_index(s.shift_link);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad env config: ") + e.what());
  }
}

inline std::filesystem::path presets_dir() { return std::filesystem::path(ABD_DATA_DIR) / "presets"; }

/// A preset name (looked up in the shipped presets directory) or a path to a config file.
inline EnvSpec load_env(const std::string& name_or_path) {
  std::filesystem::path p = name_or_path;
  if (!std::filesystem::exists(p)) p = presets_dir() / (name_or_path + ".json");
  if (!std::filesystem::exists(p)) throw ConfigError("unknown env preset '" + name_or_path + "'");
  try {
    return parse_env_spec(nlohmann::json::parse(read_text_file(p.string())), p.parent_path());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("bad env config " + p.string() + ": " + e.what());
  }
}

/// Same env with the shift link's mass scaled by `factor`.
inline EnvSpec with_mass_scale(const EnvSpec& spec, double factor) {
  if (spec.shift_link.empty()) throw ConfigError("env '" + spec.name + "' declares no shift_link");
  EnvSpec out = spec;
  out.tree = mass_scaled(spec.tree, spec.shift_link, factor);
  return out;
}

// ---------------------------------------------------------------------------
// Simulation.

struct EnvState {
  JointState js;
  VecX prev_action;
  std::deque<VecX> history;  // newest first, base observations
  int t = 0;
};

struct Transition {
  VecX obs;
  VecX action;  // clamped to [-1, 1]
  double reward = 0.0;
  VecX next_obs;
  bool done = false;       // terminal condition held
  bool truncated = false;  // horizon reached without termination
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline VecX state_vector(const EnvSpec& spec, const JointState& js) {
  VecX s(spec.state_dim());
  int k = 0;
  for (int idx : spec.q_obs) s[k++] = js.q[idx];
  for (int i = 0; i < spec.tree.dof(); ++i) s[k++] = js.qd[i];
  return s;
}

inline VecX base_observation(const EnvSpec& spec, const EnvState& st) {
  VecX o(spec.base_obs_dim);
  int k = 0;
  if (spec.obs.q)
    for (int idx : spec.q_obs) o[k++] = st.js.q[idx];
  if (spec.obs.qd)
    for (int i = 0; i < spec.tree.dof(); ++i) o[k++] = spec.obs.qd_scale * st.js.qd[i];
  if (spec.obs.prev_action)
    for (int i = 0; i < spec.action_dim; ++i) o[k++] = st.prev_action[i];
  return o;
}

inline VecX observe(const EnvSpec& spec, const EnvState& st) {
  VecX o = VecX::Zero(spec.obs_dim);
  for (int h = 0; h < spec.obs.history && h < static_cast<int>(st.history.size()); ++h)
    o.segment(h * spec.base_obs_dim, spec.base_obs_dim) = st.history[h];
  return o;
}

inline void push_history(const EnvSpec& spec, EnvState& st) {
  st.history.push_front(base_observation(spec, st));
  while (static_cast<int>(st.history.size()) > spec.obs.history) st.history.pop_back();
}

/// Samples the initial state (deterministic in `seed`).
inline EnvState reset_state(const EnvSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  EnvState st;
  const int n = spec.tree.dof();
  st.js.q = VecX(n);
  st.js.qd = VecX(n);
  for (int i = 0; i < n; ++i) st.js.q[i] = spec.q_nominal[i] + spec.q_range[i] * u(rng);
  for (int i = 0; i < n; ++i) st.js.qd[i] = spec.qd_noise * u(rng);
  enforce_limits(spec.tree, st.js);
  st.prev_action = VecX::Zero(spec.action_dim);
  push_history(spec, st);
  return st;
}

inline VecX reset(const EnvSpec& spec, std::uint64_t seed) { return observe(spec, reset_state(spec, seed)); }

/// Generalized force from ground penalty contact (zero for points above ground).
inline VecX contact_forces(const EnvSpec& spec, const JointState& js) {
  VecX tau = VecX::Zero(spec.tree.dof());
  if (!spec.contact.enabled()) return tau;
  const int link = spec.link_index(spec.contact.link);
  const auto poses = forward_kinematics(spec.tree, js.q);
  const auto& c = spec.contact;
  for (const Vec3& p : c.points) {
    const Vec3 w = poses[link].apply_point(p);
    if (w.z() >= 0.0) continue;
    MatX J = point_jacobian(spec.tree, js.q, link, p);
    Vec3 vel = J * js.qd;
    double fn = std::max(0.0, -c.stiffness * w.z() - c.damping * vel.z());
    double cap = c.friction * fn;
    Vec3 f(std::clamp(-c.tangential_damping * vel.x(), -cap, cap),
           std::clamp(-c.tangential_damping * vel.y(), -cap, cap), fn);
    tau += J.transpose() * f;
  }
  return tau;
}

inline double uprightness(const EnvSpec& spec, const VecX& q) {
  const auto poses = forward_kinematics(spec.tree, q);
  double acc = 0.0;
  for (int i = 1; i < spec.tree.size(); ++i) acc += poses[i].rotation(2, 2);
  return spec.tree.size() > 1 ? acc / (spec.tree.size() - 1) : 1.0;
}

inline bool terminal(const EnvSpec& spec, const JointState& js) {
  const auto& r = spec.reward;
  switch (r.kind) {
    case RewardKind::kBalance: {
      if (r.tip_link.empty()) return false;
      auto poses = forward_kinematics(spec.tree, js.q);
      return poses[spec.link_index(r.tip_link)].apply_point(r.tip_point).z() < r.fall_height;
    }
    case RewardKind::kHopForward: {
      if (!r.height_link.empty()) {
        auto poses = forward_kinematics(spec.tree, js.q);
        if (poses[spec.link_index(r.height_link)].translation.z() < r.min_height) return true;
      }
      if (!r.pitch_joint.empty()) {
        const int k = spec.tree.q_index(spec.joint_link(r.pitch_joint));
        if (std::abs(js.q[k]) > r.max_pitch) return true;
      }
      return false;
    }
    default:
      return false;
  }
}

/// Advances one control step. `action` is in normalized units.
inline Transition step(const EnvSpec& spec, EnvState& st, const VecX& action) {
  if (action.size() != spec.action_dim)
    throw DimensionError("action has " + std::to_string(action.size()) + " entries, env expects " +
                         std::to_string(spec.action_dim));
  Transition tr;
  tr.obs = observe(spec, st);
  tr.action = action.cwiseMax(-1.0).cwiseMin(1.0);
  VecX tau = VecX::Zero(spec.tree.dof());
  for (int k = 0; k < spec.action_dim; ++k) tau[spec.tree.action_q_index(k)] = spec.torque_limit[k] * tr.action[k];

  const auto& r = spec.reward;
  double x_before = 0.0;
  int fwd = -1;
  if (r.kind == RewardKind::kHopForward && !r.forward_joint.empty()) {
    fwd = spec.tree.q_index(spec.joint_link(r.forward_joint));
    x_before = st.js.q[fwd];
  }
  if (!spec.identity) {
    for (int s = 0; s < spec.decimation; ++s)
      st.js = step_semi_implicit(spec.tree, st.js, tau + contact_forces(spec, st.js), spec.gravity_vec(), spec.dt);
  }
  ++st.t;
  st.prev_action = tr.action;
  push_history(spec, st);

  const double ctrl = r.w_ctrl * tr.action.squaredNorm();
  switch (r.kind) {
    case RewardKind::kBalance:
    case RewardKind::kSwingup:
      tr.reward = r.w_up * uprightness(spec, st.js.q) - ctrl;
      break;
    case RewardKind::kHopForward: {
      double v = fwd >= 0 ? (st.js.q[fwd] - x_before) / spec.control_dt() : 0.0;
      v = std::clamp(v, -r.max_forward_velocity, r.max_forward_velocity);
      tr.reward = r.w_forward * v + r.alive_bonus - ctrl;
      break;
    }
    case RewardKind::kRegressOnly:
      tr.reward = 0.0;
      break;
  }
  tr.done = terminal(spec, st.js);
  tr.truncated = !tr.done && st.t >= spec.horizon;
  tr.next_obs = observe(spec, st);
  if (!tr.obs.allFinite() || !tr.next_obs.allFinite() || !std::isfinite(tr.reward))
    throw NumericalError("env '" + spec.name + "' produced a non-finite state at t=" + std::to_string(st.t));
  return tr;
}

// ---------------------------------------------------------------------------
// Rollouts.

/// Maps an observation to a normalized action; may draw from `rng`.
using Policy = std::function<VecX(const VecX& obs, std::mt19937_64& rng)>;

inline Policy random_policy(const EnvSpec& spec) {
  const int A = spec.action_dim;
  return [A](const VecX&, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    VecX a(A);
    for (int k = 0; k < A; ++k) a[k] = u(rng);
    return a;
  };
}

struct Rollout {
  std::vector<Transition> steps;
  std::vector<int> episode;           // episode id per step
  std::vector<VecX> state;            // state_vector before each step
  std::vector<VecX> next_state;       // state_vector after each step
  std::size_t size() const { return steps.size(); }
  int episodes() const { return episode.empty() ? 0 : episode.back() + 1; }
};

inline std::uint64_t episode_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t episode) {
  return splitmix64(splitmix64(seed ^ (stream * 0x9E3779B97F4A7C15ull)) + episode);
}

/// Runs `policy` for n_steps control steps, resetting after each episode end.
inline Rollout rollout_dataset(const EnvSpec& spec, const Policy& policy, int n_steps, std::uint64_t seed) {
  if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
  Rollout out;
  std::mt19937_64 rng(splitmix64(seed + 17));
  int ep = 0;
  EnvState st = reset_state(spec, episode_seed(seed, 0, ep));
  for (int t = 0; t < n_steps; ++t) {
    VecX s0 = state_vector(spec, st.js);
    Transition tr = step(spec, st, policy(observe(spec, st), rng));
    out.state.push_back(std::move(s0));
    out.next_state.push_back(state_vector(spec, st.js));
    out.episode.push_back(ep);
    const bool end = tr.done || tr.truncated;
    out.steps.push_back(std::move(tr));
    if (end) st = reset_state(spec, episode_seed(seed, 0, ++ep));
  }
  return out;
}

/// N independent instances stepped in index order with automatic resets.
class VecEnv {
 public:
  VecEnv(const EnvSpec& spec, int n, std::uint64_t seed) : spec_(&spec), seed_(seed), episodes_(n, 0), returns_(n, 0.0) {
    if (n < 1) throw ConfigError("n_envs must be >= 1");
    for (int i = 0; i < n; ++i) states_.push_back(reset_state(spec, episode_seed(seed, i + 1, 0)));
  }

  int size() const { return static_cast<int>(states_.size()); }
  VecX observation(int i) const { return observe(*spec_, states_[i]); }

  /// Steps instance i; finished episodes are reset and their return recorded.
  Transition step(int i, const VecX& action) {
    Transition tr = abd::step(*spec_, states_[i], action);
    returns_[i] += tr.reward;
    if (tr.done || tr.truncated) {
      finished_.push_back(returns_[i]);
      returns_[i] = 0.0;
      states_[i] = reset_state(*spec_, episode_seed(seed_, i + 1, ++episodes_[i]));
    }
    return tr;
  }

  /// Returns of episodes finished since the last call.
  std::vector<double> take_finished() { return std::exchange(finished_, {}); }

 private:
  const EnvSpec* spec_;
  std::uint64_t seed_;
  std::vector<EnvState> states_;
  std::vector<int> episodes_;
  std::vector<double> returns_;
  std::vector<double> finished_;
};

/// Undiscounted return of one episode from `seed`.
inline double run_episode(const EnvSpec& spec, const Policy& policy, std::uint64_t seed, int* length = nullptr) {
  EnvState st = reset_state(spec, seed);
  std::mt19937_64 rng(splitmix64(seed + 3));
  double ret = 0.0;
  int t = 0;
  for (;; ++t) {
    Transition tr = step(spec, st, policy(observe(spec, st), rng));
    ret += tr.reward;
    if (tr.done || tr.truncated) break;
  }
  if (length) *length = t + 1;
  return ret;
}

}  // namespace abd
