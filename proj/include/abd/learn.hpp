#pragma once

// Training tracks: PPO for policies, supervised next-state regression, and
// mass-shift retention evaluation.

#include <abd/abdnet.hpp>
#include <abd/autodiff.hpp>
#include <abd/envs.hpp>
#include <abd/errors.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace abd {

/// True when ABD_DETERMINISTIC=1: single worker, wall-clock columns zeroed.
inline bool deterministic_mode() {
  const char* v = std::getenv("ABD_DETERMINISTIC");
  return v && std::string(v) == "1";
}

struct TrainConfig {
  // PPO
  double gamma = 0.99;
  double lambda_gae = 0.95;
  double clip = 0.2;
  int epochs = 4;
  int minibatch = 256;
  double lr = 3e-4;
  double lambda_orth = 1e-2;
  double entropy_coef = 0.0;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  bool normalize_advantages = true;
  long total_steps = 200000;
  int n_envs = 8;
  int rollout_steps = 256;  // per env per iteration
  int eval_interval = 10;   // iterations between checkpoints
  int eval_episodes = 10;
  std::uint64_t seed = 0;
  int d = 32;
  bool per_sample_orth = false;
  int workers = 1;
  // dynamics regression
  int reg_samples = 20000;
  int reg_epochs = 40;
  int reg_batch = 128;
  double reg_lr = 3e-3;

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (!(gamma >= 0.0 && gamma < 1.0)) bad("gamma must be in [0, 1)");
    if (!(lambda_gae >= 0.0 && lambda_gae <= 1.0)) bad("lambda_gae must be in [0, 1]");
    if (!(clip > 0.0)) bad("clip must be positive");
    if (epochs < 1) bad("epochs must be >= 1");
    if (minibatch < 1) bad("minibatch must be >= 1");
    if (!(lr > 0.0)) bad("lr must be positive");
    if (lambda_orth < 0.0) bad("lambda_orth must be >= 0");
    if (total_steps < 1) bad("total_steps must be >= 1");
    if (n_envs < 1) bad("n_envs must be >= 1");
    if (rollout_steps < 1) bad("rollout_steps must be >= 1");
    if (eval_interval < 1) bad("eval_interval must be >= 1");
    if (eval_episodes < 1) bad("eval_episodes must be >= 1");
    if (d < 1) bad("d must be >= 1");
    if (workers < 1) bad("workers must be >= 1");
    if (reg_samples < 1 || reg_epochs < 1 || reg_batch < 1 || !(reg_lr > 0.0)) bad("regression settings must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"gamma", c.gamma},
          {"lambda_gae", c.lambda_gae},
          {"clip", c.clip},
          {"epochs", c.epochs},
          {"minibatch", c.minibatch},
          {"lr", c.lr},
          {"lambda_orth", c.lambda_orth},
          {"entropy_coef", c.entropy_coef},
          {"value_coef", c.value_coef},
          {"max_grad_norm", c.max_grad_norm},
          {"normalize_advantages", c.normalize_advantages},
          {"total_steps", c.total_steps},
          {"n_envs", c.n_envs},
          {"rollout_steps", c.rollout_steps},
          {"eval_interval", c.eval_interval},
          {"eval_episodes", c.eval_episodes},
          {"seed", c.seed},
          {"d", c.d},
          {"per_sample_orth", c.per_sample_orth},
          {"workers", c.workers},
          {"reg_samples", c.reg_samples},
          {"reg_epochs", c.reg_epochs},
          {"reg_batch", c.reg_batch},
          {"reg_lr", c.reg_lr}};
}

/// Overlays `j` on `base`; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  nlohmann::json merged = to_json(base);
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!merged.contains(it.key())) throw ConfigError("config: unknown key '" + it.key() + "'");
    merged[it.key()] = it.value();
  }
  try {
    TrainConfig c;
    c.gamma = merged["gamma"];
    c.lambda_gae = merged["lambda_gae"];
    c.clip = merged["clip"];
    c.epochs = merged["epochs"];
    c.minibatch = merged["minibatch"];
    c.lr = merged["lr"];
    c.lambda_orth = merged["lambda_orth"];
    c.entropy_coef = merged["entropy_coef"];
    c.value_coef = merged["value_coef"];
    c.max_grad_norm = merged["max_grad_norm"];
    c.normalize_advantages = merged["normalize_advantages"];
    c.total_steps = merged["total_steps"];
    c.n_envs = merged["n_envs"];
    c.rollout_steps = merged["rollout_steps"];
    c.eval_interval = merged["eval_interval"];
    c.eval_episodes = merged["eval_episodes"];
    c.seed = merged["seed"];
    c.d = merged["d"];
    c.per_sample_orth = merged["per_sample_orth"];
    c.workers = merged["workers"];
    c.reg_samples = merged["reg_samples"];
    c.reg_epochs = merged["reg_epochs"];
    c.reg_batch = merged["reg_batch"];
    c.reg_lr = merged["reg_lr"];
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Advantages.

/// GAE over one environment's step sequence. `next_values[t]` is V of the
/// observation actually reached by step t (before any reset). Terminal steps
/// do not bootstrap; truncated steps bootstrap but stop the recursion.
inline void compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                        const std::vector<double>& next_values, const std::vector<bool>& dones,
                        const std::vector<bool>& truncs, double gamma, double lambda, std::vector<double>& adv,
                        std::vector<double>& ret) {
  const std::size_t T = rewards.size();
  if (values.size() != T || next_values.size() != T || dones.size() != T || truncs.size() != T)
    throw ShapeError("compute_gae: sequence lengths differ");
  adv.assign(T, 0.0);
  ret.assign(T, 0.0);
  double next_adv = 0.0;
  for (std::size_t k = T; k-- > 0;) {
    const double boot = dones[k] ? 0.0 : gamma * next_values[k];
    const double delta = rewards[k] + boot - values[k];
    const bool cut = dones[k] || truncs[k];
    adv[k] = delta + (cut ? 0.0 : gamma * lambda * next_adv);
    next_adv = adv[k];
    ret[k] = adv[k] + values[k];
  }
}

// ---------------------------------------------------------------------------
// Batches and the PPO loss.

struct TrajectoryBatch {
  ad::Tensor<double> obs;      // N x obs_dim
  ad::Tensor<double> actions;  // N x A (sampled, unclamped)
  std::vector<double> rewards, log_probs, values, advantages, returns;
  std::vector<bool> dones, truncations;

  std::size_t size() const { return rewards.size(); }
};

constexpr double kLog2Pi = 1.8378770664093453;

/// Diagonal Gaussian log-density of each row of `actions`.
template <class T>
ad::Var<T> gaussian_log_prob(ad::Var<T> mean, ad::Var<T> log_std, ad::Var<T> actions) {
  const std::size_t B = mean.shape().rows, A = mean.shape().cols;
  ad::Tape<T>& tape = *mean.tape;
  if (A == 0) return tape.zeros(B, 1);
  ad::Var<T> inv_var = ad::broadcast_rows(ad::exp(ad::scalar_mul(log_std, T(-2))), B);
  ad::Var<T> quad = ad::sum_cols(ad::mul(ad::square(ad::sub(actions, mean)), inv_var));
  ad::Var<T> norm = ad::broadcast_rows(ad::add_scalar(ad::sum(log_std), T(0.5 * kLog2Pi * A)), B);
  return ad::sub(ad::scalar_mul(quad, T(-0.5)), norm);
}

template <class T>
struct PpoLoss {
  ad::Var<T> total;
  ad::Var<T> policy;
  ad::Var<T> value;
  ad::Var<T> entropy;
  std::optional<ad::Var<T>> orth;
};

/// Minibatch view: rows of a TrajectoryBatch.
template <class T>
struct MiniBatch {
  ad::Tensor<T> obs, actions, old_log_prob, advantages, returns;
};

template <class T>
MiniBatch<T> gather(const TrajectoryBatch& b, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  const std::size_t n = end - begin, O = b.obs.cols(), A = b.actions.cols();
  MiniBatch<T> m{ad::Tensor<T>(n, O), ad::Tensor<T>(n, A), ad::Tensor<T>(n, 1), ad::Tensor<T>(n, 1), ad::Tensor<T>(n, 1)};
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = idx[begin + r];
    for (std::size_t c = 0; c < O; ++c) m.obs(r, c) = static_cast<T>(b.obs(i, c));
    for (std::size_t c = 0; c < A; ++c) m.actions(r, c) = static_cast<T>(b.actions(i, c));
    m.old_log_prob(r, 0) = static_cast<T>(b.log_probs[i]);
    m.advantages(r, 0) = static_cast<T>(b.advantages[i]);
    m.returns(r, 0) = static_cast<T>(b.returns[i]);
  }
  return m;
}

/// policy + c_v * value - c_e * entropy (+ lambda_orth * orth for ABD-Net).
template <class T>
PpoLoss<T> ppo_loss(const NetSpec& actor, const ad::Bound<T>& ap, const NetSpec& critic, const ad::Bound<T>& cp,
                    const MiniBatch<T>& mb, const TrainConfig& cfg) {
  ad::Tape<T>& tape = *ap.vars().front().tape;
  const bool want_orth = actor.kind == ActorKind::kAbdNet && cfg.lambda_orth > 0.0;
  ad::Var<T> obs = tape.constant(mb.obs);
  NetOutput<T> out = forward(actor, ap, obs, want_orth);
  ad::Var<T> log_std = ap["log_std"];
  ad::Var<T> logp = gaussian_log_prob(out.out, log_std, tape.constant(mb.actions));
  ad::Var<T> ratio = ad::exp(ad::sub(logp, tape.constant(mb.old_log_prob)));
  ad::Var<T> adv = tape.constant(mb.advantages);
  ad::Var<T> s1 = ad::mul(ratio, adv);
  ad::Var<T> s2 = ad::mul(ad::clamp(ratio, T(1 - cfg.clip), T(1 + cfg.clip)), adv);
  PpoLoss<T> L;
  L.policy = ad::scalar_mul(ad::mean(ad::minimum(s1, s2)), T(-1));
  ad::Var<T> v = forward(critic, cp, obs).out;
  L.value = ad::mean(ad::square(ad::sub(v, tape.constant(mb.returns))));
  const double A = static_cast<double>(actor.out_dim);
  L.entropy = ad::add_scalar(ad::sum(log_std), T(0.5 * (kLog2Pi + 1.0) * A));
  L.total = ad::add(L.policy, ad::scalar_mul(L.value, T(cfg.value_coef)));
  if (cfg.entropy_coef != 0.0) L.total = ad::sub(L.total, ad::scalar_mul(L.entropy, T(cfg.entropy_coef)));
  if (want_orth) {
    L.orth = out.orth;
    L.total = ad::add(L.total, ad::scalar_mul(*out.orth, T(cfg.lambda_orth)));
  }
  return L;
}

// ---------------------------------------------------------------------------
// Policies.

struct PolicyModel {
  NetSpec actor;
  ad::ParamSet<float> actor_params;
  NetSpec critic;
  ad::ParamSet<float> critic_params;
};

/// Fresh actor and critic for `kind` on `env`; baselines are width-matched to ABD-Net.
inline PolicyModel make_policy(const EnvSpec& env, ActorKind kind, const TrainConfig& cfg) {
  NetSpec abd = policy_spec(env.tree, ActorKind::kAbdNet, cfg.d, env.obs_dim);
  abd.per_sample_orth = cfg.per_sample_orth;
  NetSpec s = matched_spec(abd, kind);
  if (kind == ActorKind::kMlp) {
    s = mlp_spec(env.obs_dim, env.action_dim, s.width, true);
    s.tree_hash = abd.tree_hash;
  }
  PolicyModel m;
  m.actor = s;
  m.actor_params = init_params(s, splitmix64(cfg.seed * 2 + 1));
  m.critic = critic_spec(env.obs_dim);
  m.critic_params = init_params(m.critic, splitmix64(cfg.seed * 2 + 2));
  return m;
}

/// Deterministic (mean-action) policy.
inline Policy mean_policy(const NetSpec& actor, const ad::ParamSet<float>& params) {
  return [&actor, &params](const VecX& obs, std::mt19937_64&) {
    ad::Tensor<float> x(1, obs.size());
    for (Eigen::Index k = 0; k < obs.size(); ++k) x.data[k] = static_cast<float>(obs[k]);
    ad::Tensor<float> y = predict(actor, params, x);
    VecX a(y.size());
    for (std::size_t k = 0; k < y.size(); ++k) a[k] = y.data[k];
    return a;
  };
}

inline nlohmann::json policy_manifest(const PolicyModel& m, const EnvSpec& env) {
  return {{"format", "abd-checkpoint"},
          {"role", "policy"},
          {"kind", to_string(m.actor.kind)},
          {"tree_hash", tree_hash(env.tree)},
          {"d", m.actor.d},
          {"obs_dim", env.obs_dim},
          {"action_dim", env.action_dim},
          {"env", env.name},
          {"net", to_json(m.actor)},
          {"critic", to_json(m.critic)}};
}

inline void save_policy(const std::string& path, const PolicyModel& m, const EnvSpec& env, nlohmann::json extra = {}) {
  nlohmann::json man = policy_manifest(m, env);
  if (extra.is_object()) man.update(extra);
  ad::ParamSet<float> all;
  merge_into(all, "actor/", m.actor_params);
  merge_into(all, "critic/", m.critic_params);
  save_checkpoint(path, man, all);
}

inline PolicyModel load_policy(const std::string& path, const std::optional<std::string>& expected_tree_hash = {}) {
  Checkpoint ck = load_checkpoint(path, expected_tree_hash);
  if (ck.manifest.value("role", "") != "policy") throw ParseError("checkpoint " + path + " does not hold a policy");
  PolicyModel m;
  m.actor = net_spec_from_json(ck.manifest.at("net"));
  m.critic = net_spec_from_json(ck.manifest.at("critic"));
  m.actor_params = subset(ck.params, "actor/");
  m.critic_params = subset(ck.params, "critic/");
  if (m.actor_params.count() != param_count(m.actor) || m.critic_params.count() != param_count(m.critic))
    throw ParseError("checkpoint " + path + " parameters do not match its network spec");
  return m;
}

// ---------------------------------------------------------------------------
// PPO.

struct MetricsRow {
  int iter = 0;
  long env_steps = 0;
  double mean_return = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double orth_loss = 0.0;
  long wall_ms = 0;
};

inline const char* kMetricsHeader = "iter,env_steps,mean_return,policy_loss,value_loss,entropy,orth_loss,wall_ms";

inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

inline std::string metrics_csv_line(const MetricsRow& r) {
  return std::to_string(r.iter) + "," + std::to_string(r.env_steps) + "," + format_double(r.mean_return) + "," +
         format_double(r.policy_loss) + "," + format_double(r.value_loss) + "," + format_double(r.entropy) + "," +
         format_double(r.orth_loss) + "," + std::to_string(r.wall_ms);
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  os << kMetricsHeader << "\n";
  for (const auto& r : rows) os << metrics_csv_line(r) << "\n";
}

struct PpoResult {
  PolicyModel model;
  std::vector<MetricsRow> metrics;
};

/// Called after iterations that fall on the eval interval and after the last one.
using CheckpointHook = std::function<void(int iter, const PolicyModel&)>;

namespace detail {

inline ad::Tensor<float> rows_to_tensor(const std::vector<VecX>& rows) {
  ad::Tensor<float> t(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (Eigen::Index c = 0; c < rows[r].size(); ++c) t(r, c) = static_cast<float>(rows[r][c]);
  return t;
}

inline std::vector<double> critic_values(const PolicyModel& m, const std::vector<VecX>& obs) {
  if (obs.empty()) return {};
  ad::Tensor<float> v = predict(m.critic, m.critic_params, rows_to_tensor(obs));
  return {v.data.begin(), v.data.end()};
}

}  // namespace detail

/// Runs PPO on `env`; deterministic given cfg.seed.
inline PpoResult ppo_train(const EnvSpec& env, ActorKind kind, const TrainConfig& cfg, const CheckpointHook& hook = {},
                           std::optional<PolicyModel> init = std::nullopt) {
  cfg.validate();
  PpoResult res;
  res.model = init ? *init : make_policy(env, kind, cfg);
  PolicyModel& m = res.model;
  const int N = cfg.n_envs, T = cfg.rollout_steps, A = env.action_dim;
  const long per_iter = static_cast<long>(N) * T;
  const int iterations = static_cast<int>((cfg.total_steps + per_iter - 1) / per_iter);
  VecEnv venv(env, N, cfg.seed);
  std::mt19937_64 rng(splitmix64(cfg.seed + 101));
  std::normal_distribution<double> normal(0.0, 1.0);
  ad::AdamConfig adam{cfg.lr};
  ad::AdamState<float> actor_opt, critic_opt;
  const bool det = deterministic_mode();
  double last_return = std::nan("");
  long steps = 0;

  for (int it = 1; it <= iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    // --- collect
    std::vector<std::vector<VecX>> obs(N), next_obs(N), acts(N);
    std::vector<std::vector<double>> rew(N), logp(N);
    std::vector<std::vector<bool>> done(N), trunc(N);
    const std::vector<float> log_std = m.actor_params.get("log_std").data;
    for (int t = 0; t < T; ++t) {
      std::vector<VecX> cur(N);
      for (int i = 0; i < N; ++i) cur[i] = venv.observation(i);
      ad::Tensor<float> mean = predict(m.actor, m.actor_params, detail::rows_to_tensor(cur));
      for (int i = 0; i < N; ++i) {
        VecX a(A);
        double lp = -0.5 * kLog2Pi * A;
        for (int k = 0; k < A; ++k) {
          const double sd = std::exp(static_cast<double>(log_std[k]));
          const double eps = normal(rng);
          a[k] = mean(i, k) + sd * eps;
          lp += -0.5 * eps * eps - log_std[k];
        }
        Transition tr = venv.step(i, a);
        obs[i].push_back(cur[i]);
        acts[i].push_back(a);
        rew[i].push_back(tr.reward);
        logp[i].push_back(lp);
        done[i].push_back(tr.done);
        trunc[i].push_back(tr.truncated);
        next_obs[i].push_back(tr.next_obs);
      }
    }
    steps += per_iter;
    const std::vector<double> finished = venv.take_finished();
    if (!finished.empty())
      last_return = std::accumulate(finished.begin(), finished.end(), 0.0) / static_cast<double>(finished.size());
    // --- advantages
    TrajectoryBatch batch;
    batch.obs = ad::Tensor<double>(per_iter, env.obs_dim);
    batch.actions = ad::Tensor<double>(per_iter, A);
    std::size_t row = 0;
    for (int i = 0; i < N; ++i) {
      std::vector<double> values = detail::critic_values(m, obs[i]);
      // V of the reached observation: next row's value unless the episode ended or the segment stops
      std::vector<VecX> boot_obs;
      std::vector<int> boot_at;
      for (int t = 0; t < T; ++t)
        if (trunc[i][t] || (t == T - 1 && !done[i][t])) boot_obs.push_back(next_obs[i][t]), boot_at.push_back(t);
      std::vector<double> boot = detail::critic_values(m, boot_obs);
      std::vector<double> nv(T, 0.0);
      for (int t = 0; t + 1 < T; ++t) nv[t] = values[t + 1];
      for (std::size_t k = 0; k < boot_at.size(); ++k) nv[boot_at[k]] = boot[k];
      std::vector<double> adv, ret;
      compute_gae(rew[i], values, nv, done[i], trunc[i], cfg.gamma, cfg.lambda_gae, adv, ret);
      for (int t = 0; t < T; ++t, ++row) {
        for (int c = 0; c < env.obs_dim; ++c) batch.obs(row, c) = obs[i][t][c];
        for (int c = 0; c < A; ++c) batch.actions(row, c) = acts[i][t][c];
        batch.rewards.push_back(rew[i][t]);
        batch.log_probs.push_back(logp[i][t]);
        batch.values.push_back(values[t]);
        batch.advantages.push_back(adv[t]);
        batch.returns.push_back(ret[t]);
        batch.dones.push_back(done[i][t]);
        batch.truncations.push_back(trunc[i][t]);
      }
    }
    if (cfg.normalize_advantages && batch.size() > 1) {
      double mu = std::accumulate(batch.advantages.begin(), batch.advantages.end(), 0.0) / batch.size();
      double var = 0.0;
      for (double a : batch.advantages) var += (a - mu) * (a - mu);
      double sd = std::sqrt(var / batch.size()) + 1e-8;
      for (double& a : batch.advantages) a = (a - mu) / sd;
    }
    // --- update
    MetricsRow mr;
    mr.iter = it;
    mr.env_steps = steps;
    int updates = 0;
    std::vector<std::size_t> idx(batch.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (int ep = 0; ep < cfg.epochs; ++ep) {
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t b = 0; b < idx.size(); b += cfg.minibatch) {
        const std::size_t e = std::min(idx.size(), b + cfg.minibatch);
        MiniBatch<float> mb = gather<float>(batch, idx, b, e);
        ad::Tape<float> tape;
        ad::Bound<float> ap(tape, m.actor_params), cp(tape, m.critic_params);
        PpoLoss<float> L = ppo_loss(m.actor, ap, m.critic, cp, mb, cfg);
        const double total = L.total.scalar();
        if (!std::isfinite(total)) throw NaNLossError("non-finite PPO loss", it);
        tape.backward(L.total);
        auto ga = ap.grads(), gc = cp.grads();
        ad::clip_grad_norm(ga, cfg.max_grad_norm);
        ad::clip_grad_norm(gc, cfg.max_grad_norm);
        ad::adam_step(m.actor_params, ga, actor_opt, adam);
        ad::adam_step(m.critic_params, gc, critic_opt, adam);
        mr.policy_loss += L.policy.scalar();
        mr.value_loss += L.value.scalar();
        mr.entropy += L.entropy.scalar();
        mr.orth_loss += L.orth ? static_cast<double>(L.orth->scalar()) : 0.0;
        ++updates;
      }
    }
    mr.policy_loss /= updates;
    mr.value_loss /= updates;
    mr.entropy /= updates;
    mr.orth_loss /= updates;
    mr.mean_return = last_return;
    mr.wall_ms = det ? 0
                     : std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.push_back(mr);
    if (hook && (it % cfg.eval_interval == 0 || it == iterations)) hook(it, m);
  }
  return res;
}

/// Mean deterministic return over `n` episodes with seeds from stream 7.
inline double evaluate_policy(const EnvSpec& env, const PolicyModel& m, int n, std::uint64_t seed,
                              std::vector<double>* returns = nullptr) {
  Policy pol = mean_policy(m.actor, m.actor_params);
  double sum = 0.0;
  for (int e = 0; e < n; ++e) {
    const double r = run_episode(env, pol, episode_seed(seed, 7, e));
    if (returns) returns->push_back(r);
    sum += r;
  }
  return sum / n;
}

/// Mean return of the uniform random policy.
inline double random_baseline(const EnvSpec& env, int n, std::uint64_t seed) {
  Policy pol = random_policy(env);
  double sum = 0.0;
  for (int e = 0; e < n; ++e) sum += run_episode(env, pol, episode_seed(seed, 5, e));
  return sum / n;
}

// ---------------------------------------------------------------------------
// Dynamics regression.

/// Predicts s' - s from [s, a]; inputs and targets are standardized with training statistics.
struct DynamicsModel {
  NetSpec spec;
  ad::ParamSet<float> params;
  std::vector<double> x_mean, x_std, y_mean, y_std;

  int state_dim() const { return static_cast<int>(y_mean.size()); }

  /// Next states for a batch of (state, action) pairs.
  std::vector<VecX> step(const std::vector<VecX>& s, const std::vector<VecX>& a) const {
    const std::size_t n = s.size(), S = y_mean.size(), in = x_mean.size();
    ad::Tensor<float> x(n, in);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < in; ++c) {
        const double raw = c < S ? s[r][c] : a[r][c - S];
        x(r, c) = static_cast<float>((raw - x_mean[c]) / x_std[c]);
      }
    ad::Tensor<float> y = predict(spec, params, x);
    std::vector<VecX> out(n, VecX(S));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < S; ++c) out[r][c] = s[r][c] + y(r, c) * y_std[c] + y_mean[c];
    return out;
  }
};

struct RegressionResult {
  DynamicsModel model;
  double val_mse = 0.0;
  std::vector<int> horizons{1, 3, 5};
  std::vector<double> rollout_error;  // one per horizon
  std::vector<double> epoch_loss;     // standardized training MSE per epoch
  std::size_t train_samples = 0, val_samples = 0;
};

namespace detail {

inline void mean_std(const std::vector<std::vector<double>>& rows, std::vector<double>& mu, std::vector<double>& sd) {
  const std::size_t D = rows.empty() ? 0 : rows[0].size();
  mu.assign(D, 0.0);
  sd.assign(D, 0.0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < D; ++c) mu[c] += r[c];
  for (double& m : mu) m /= rows.size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < D; ++c) sd[c] += (r[c] - mu[c]) * (r[c] - mu[c]);
  for (double& v : sd) {
    v = std::sqrt(v / rows.size());
    if (v < 1e-6) v = 1.0;  // constant column
  }
  // stored as float32 in checkpoints; keep the in-memory copy identical
  for (double& m : mu) m = static_cast<float>(m);
  for (double& v : sd) v = static_cast<float>(v);
}

}  // namespace detail

/// Fresh dynamics model of `kind` for `env`; non-ABD kinds match ABD-Net's parameter count.
inline NetSpec dynamics_model_spec(const EnvSpec& env, ActorKind kind, int d) {
  const int S = env.state_dim(), in = S + env.action_dim;
  NetSpec abd = dynamics_spec(env.tree, ActorKind::kAbdNet, d, in, S, env.state_columns_per_link());
  NetSpec s = matched_spec(abd, kind);
  if (kind == ActorKind::kMlp) {
    s = mlp_spec(in, S, s.width, false);
    s.tree_hash = abd.tree_hash;
  }
  return s;
}

/// Trains a next-state model on `data`, split 90/10 by episode.
inline RegressionResult regress_dynamics(const EnvSpec& env, const Rollout& data, ActorKind kind,
                                         const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw EmptyDatasetError("regression dataset is empty");
  const int E = data.episodes();
  if (E < 2) throw EmptyDatasetError("regression needs at least two episodes to split train and validation");
  std::mt19937_64 rng(splitmix64(cfg.seed + 303));
  std::vector<int> eps(E);
  std::iota(eps.begin(), eps.end(), 0);
  std::shuffle(eps.begin(), eps.end(), rng);
  const int n_val = std::max(1, static_cast<int>(std::lround(0.1 * E)));
  std::vector<bool> is_val(E, false);
  for (int k = 0; k < n_val; ++k) is_val[eps[k]] = true;

  const int S = env.state_dim(), A = env.action_dim;
  std::vector<std::size_t> train, val;
  for (std::size_t t = 0; t < data.size(); ++t) (is_val[data.episode[t]] ? val : train).push_back(t);
  if (train.empty() || val.empty()) throw EmptyDatasetError("regression split left an empty partition");

  auto x_row = [&](std::size_t t) {
    std::vector<double> r(S + A);
    for (int c = 0; c < S; ++c) r[c] = data.state[t][c];
    for (int c = 0; c < A; ++c) r[S + c] = data.steps[t].action[c];
    return r;
  };
  auto y_row = [&](std::size_t t) {
    std::vector<double> r(S);
    for (int c = 0; c < S; ++c) r[c] = data.next_state[t][c] - data.state[t][c];
    return r;
  };

  RegressionResult res;
  DynamicsModel& m = res.model;
  m.spec = dynamics_model_spec(env, kind, cfg.d);
  m.params = init_params(m.spec, splitmix64(cfg.seed * 2 + 7));
  {
    std::vector<std::vector<double>> xs, ys;
    for (std::size_t t : train) xs.push_back(x_row(t)), ys.push_back(y_row(t));
    detail::mean_std(xs, m.x_mean, m.x_std);
    detail::mean_std(ys, m.y_mean, m.y_std);
  }
  // standardized training arrays
  const std::size_t N = train.size(), in = S + A;
  ad::Tensor<float> X(N, in), Y(N, S);
  for (std::size_t r = 0; r < N; ++r) {
    auto x = x_row(train[r]);
    auto y = y_row(train[r]);
    for (std::size_t c = 0; c < in; ++c) X(r, c) = static_cast<float>((x[c] - m.x_mean[c]) / m.x_std[c]);
    for (int c = 0; c < S; ++c) Y(r, c) = static_cast<float>((y[c] - m.y_mean[c]) / m.y_std[c]);
  }

  ad::AdamConfig adam{cfg.reg_lr};
  ad::AdamState<float> opt;
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t per_epoch = (N + cfg.reg_batch - 1) / cfg.reg_batch;
  const double total_updates = static_cast<double>(per_epoch) * cfg.reg_epochs;
  std::size_t update = 0;
  for (int ep = 0; ep < cfg.reg_epochs; ++ep) {
    std::shuffle(idx.begin(), idx.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < N; b += cfg.reg_batch) {
      adam.lr = cfg.reg_lr * (1.0 - static_cast<double>(update++) / total_updates);  // linear anneal
      const std::size_t e = std::min(N, b + cfg.reg_batch), n = e - b;
      ad::Tensor<float> xb(n, in), yb(n, S);
      for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(&X(idx[b + r], 0), in, &xb(r, 0));
        std::copy_n(&Y(idx[b + r], 0), S, &yb(r, 0));
      }
      ad::Tape<float> tape;
      ad::Bound<float> bp(tape, m.params);
      NetOutput<float> out = forward(m.spec, bp, tape.constant(xb));
      ad::Var<float> loss = ad::mean(ad::square(ad::sub(out.out, tape.constant(yb))));
      if (!std::isfinite(loss.scalar())) throw NaNLossError("non-finite regression loss", ep + 1);
      tape.backward(loss);
      auto g = bp.grads();
      ad::adam_step(m.params, g, opt, adam);
      loss_sum += loss.scalar() * static_cast<double>(n);
    }
    res.epoch_loss.push_back(loss_sum / N);
  }

  res.train_samples = N;
  res.val_samples = val.size();
  // k-step open-loop error from every validation start with k steps left in its episode
  for (int k : res.horizons) {
    std::vector<std::size_t> starts;
    for (std::size_t t : val)
      if (t + k <= data.size() && data.episode[t + k - 1] == data.episode[t]) starts.push_back(t);
    if (starts.empty()) {
      res.rollout_error.push_back(std::nan(""));
      continue;
    }
    std::vector<VecX> s(starts.size()), a(starts.size());
    for (std::size_t j = 0; j < starts.size(); ++j) s[j] = data.state[starts[j]];
    for (int h = 0; h < k; ++h) {
      for (std::size_t j = 0; j < starts.size(); ++j) a[j] = data.steps[starts[j] + h].action;
      s = m.step(s, a);
    }
    double err = 0.0;
    for (std::size_t j = 0; j < starts.size(); ++j)
      err += (s[j] - data.next_state[starts[j] + k - 1]).squaredNorm() / S;
    res.rollout_error.push_back(err / starts.size());
  }
  res.val_mse = res.rollout_error.front();
  return res;
}

inline void save_dynamics(const std::string& path, const DynamicsModel& m, const EnvSpec& env,
                          nlohmann::json extra = {}) {
  nlohmann::json man = {{"format", "abd-checkpoint"},
                        {"role", "dynamics"},
                        {"kind", to_string(m.spec.kind)},
                        {"tree_hash", tree_hash(env.tree)},
                        {"d", m.spec.d},
                        {"env", env.name},
                        {"net", to_json(m.spec)}};
  if (extra.is_object()) man.update(extra);
  ad::ParamSet<float> all;
  merge_into(all, "model/", m.params);
  auto vec = [](const std::vector<double>& v) {
    ad::Tensor<float> t(1, v.size());
    for (std::size_t k = 0; k < v.size(); ++k) t.data[k] = static_cast<float>(v[k]);
    return t;
  };
  all.add("norm/x_mean", vec(m.x_mean));
  all.add("norm/x_std", vec(m.x_std));
  all.add("norm/y_mean", vec(m.y_mean));
  all.add("norm/y_std", vec(m.y_std));
  save_checkpoint(path, man, all);
}

inline DynamicsModel load_dynamics(const std::string& path, const std::optional<std::string>& expected_tree_hash = {}) {
  Checkpoint ck = load_checkpoint(path, expected_tree_hash);
  if (ck.manifest.value("role", "") != "dynamics") throw ParseError("checkpoint " + path + " does not hold a dynamics model");
  DynamicsModel m;
  m.spec = net_spec_from_json(ck.manifest.at("net"));
  m.params = subset(ck.params, "model/");
  auto vec = [&](const std::string& n) {
    const auto& t = ck.params.get(n).data;
    return std::vector<double>(t.begin(), t.end());
  };
  m.x_mean = vec("norm/x_mean");
  m.x_std = vec("norm/x_std");
  m.y_mean = vec("norm/y_mean");
  m.y_std = vec("norm/y_std");
  return m;
}

// ---------------------------------------------------------------------------
// Retention under mass shift.

struct Interval {
  double lo = 0.0, hi = 0.0;
};

/// Percentile bootstrap 95% interval of the mean.
inline Interval bootstrap_ci(const std::vector<double>& xs, std::uint64_t seed, int resamples = 1000) {
  if (xs.empty()) throw EmptyDatasetError("bootstrap of an empty sample");
  std::mt19937_64 rng(splitmix64(seed + 909));
  std::uniform_int_distribution<std::size_t> pick(0, xs.size() - 1);
  std::vector<double> means(resamples);
  for (int b = 0; b < resamples; ++b) {
    double s = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) s += xs[pick(rng)];
    means[b] = s / xs.size();
  }
  std::sort(means.begin(), means.end());
  auto at = [&](double q) { return means[static_cast<std::size_t>(std::floor(q * (resamples - 1)))]; };
  return {at(0.025), at(0.975)};
}

struct ShiftResult {
  double factor = 1.0;
  double mean_return = 0.0;
  Interval ci;
  double retention_pct = 0.0;
};

struct RetentionReport {
  int episodes = 0;
  double nominal_return = 0.0;
  Interval nominal_ci;
  double random_return = 0.0;
  bool not_comparable = false;  // nominal below twice the random baseline
  std::vector<ShiftResult> shifts;
};

/// Evaluates the mean-action policy on nominal and mass-scaled copies of `env`,
/// using the same episode seeds for every factor.
inline RetentionReport eval_retention(const PolicyModel& m, const EnvSpec& env, const std::vector<double>& factors,
                                      int n_episodes, std::uint64_t seed) {
  if (m.actor.tree_hash != tree_hash(env.tree))
    throw TreeMismatchError("policy was trained on a different kinematic tree than " + env.name);
  if (m.actor.in_dim != env.obs_dim || m.actor.out_dim != env.action_dim)
    throw TreeMismatchError("policy dimensions do not match " + env.name);
  if (n_episodes < 1) throw ConfigError("episodes must be >= 1");
  RetentionReport rep;
  rep.episodes = n_episodes;
  std::vector<double> nominal;
  rep.nominal_return = evaluate_policy(env, m, n_episodes, seed, &nominal);
  rep.nominal_ci = bootstrap_ci(nominal, seed);
  rep.random_return = random_baseline(env, n_episodes, seed);
  rep.not_comparable = rep.nominal_return < 2.0 * rep.random_return;
  for (double f : factors) {
    EnvSpec shifted = with_mass_scale(env, f);
    std::vector<double> rs;
    ShiftResult sr;
    sr.factor = f;
    sr.mean_return = evaluate_policy(shifted, m, n_episodes, seed, &rs);
    sr.ci = bootstrap_ci(rs, seed);
    sr.retention_pct = 100.0 * (sr.mean_return / rep.nominal_return);
    rep.shifts.push_back(sr);
  }
  return rep;
}

inline nlohmann::json to_json(const RetentionReport& r) {
  nlohmann::json shifts = nlohmann::json::array();
  for (const auto& s : r.shifts)
    shifts.push_back({{"factor", s.factor},
                      {"mean_return", s.mean_return},
                      {"ci95", {s.ci.lo, s.ci.hi}},
                      {"retention_pct", s.retention_pct}});
  return {{"episodes", r.episodes},
          {"nominal_return", r.nominal_return},
          {"nominal_ci95", {r.nominal_ci.lo, r.nominal_ci.hi}},
          {"random_return", r.random_return},
          {"comparable", !r.not_comparable},
          {"shifts", shifts}};
}

// ---------------------------------------------------------------------------
// Ablations.

struct Variant {
  std::string name;
  ActorKind kind;
  double lambda_orth;
};

inline std::vector<Variant> default_variants(double lambda_orth) {
  return {{"abdnet", ActorKind::kAbdNet, lambda_orth},
          {"abdnet-no-orth-loss", ActorKind::kAbdNet, 0.0},
          {"abdnet-noorth", ActorKind::kAbdNetNoOrth, 0.0},
          {"gnn", ActorKind::kGnn, 0.0},
          {"mlp", ActorKind::kMlp, 0.0}};
}

struct AblationRow {
  std::string variant;
  std::uint64_t seed;
  std::string metric;
  double value;
};

inline const char* kAblationHeader = "variant,seed,metric,value";

/// Trains every variant for every seed with identical budgets.
inline std::vector<AblationRow> ablation_suite(const EnvSpec& env, const TrainConfig& base,
                                               const std::vector<Variant>& variants,
                                               const std::vector<std::uint64_t>& seeds) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants)
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.lambda_orth = v.lambda_orth;
      PpoResult r = ppo_train(env, v.kind, cfg);
      const MetricsRow& last = r.metrics.back();
      rows.push_back({v.name, seed, "eval_return", evaluate_policy(env, r.model, cfg.eval_episodes, seed)});
      rows.push_back({v.name, seed, "train_return", last.mean_return});
      rows.push_back({v.name, seed, "orth_loss", last.orth_loss});
      rows.push_back({v.name, seed, "params", static_cast<double>(param_count(r.model.actor))});
    }
  return rows;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  os << kAblationHeader << "\n";
  for (const auto& r : rows) os << r.variant << "," << r.seed << "," << r.metric << "," << format_double(r.value) << "\n";
}

}  // namespace abd
