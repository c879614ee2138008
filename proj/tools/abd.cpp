// abd: command-line entry point for dynamics checks, training, evaluation,
// ablations and FLOPs reports.

#include <abd/abdnet.hpp>
#include <abd/dynamics.hpp>
#include <abd/envs.hpp>
#include <abd/errors.hpp>
#include <abd/learn.hpp>
#include <abd/morphology.hpp>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#ifndef ABD_VERSION
#define ABD_VERSION "dev"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace abd::cli {
namespace {

std::string utc_timestamp() {
  std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + p.string());
  os << text;
}

fs::path prepare_out(const json& args) {
  if (!args.contains("out") || args["out"].get<std::string>().empty()) throw ConfigError("--out is required");
  fs::path out = args["out"].get<std::string>();
  fs::create_directories(out);
  return out;
}

/// RunManifest: everything needed to re-run the command.
void write_manifest(const fs::path& out, const std::string& command, const json& args, const json& config,
                    std::uint64_t seed, const std::string& morphology_hash) {
  json m = {{"command", command},
            {"args", args},
            {"config", config},
            {"seed", seed},
            {"morphology_hash", morphology_hash},
            {"out", out.string()},
            {"timestamp", utc_timestamp()},
            {"version", ABD_VERSION}};
  write_text(out / "manifest.json", m.dump(2) + "\n");
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + item + "'");
    }
  }
  if (v.empty()) throw ConfigError("empty list '" + s + "'");
  return v;
}

/// Defaults < config file < explicit flags. A manifest replay passes the
/// resolved config inline.
TrainConfig resolve_config(const json& args) {
  TrainConfig cfg;
  if (args.contains("config_resolved")) return train_config_from_json(args["config_resolved"]);
  if (args.value("config", "") != "") {
    std::ifstream is(args["config"].get<std::string>());
    if (!is) throw ConfigError("cannot read config " + args["config"].get<std::string>());
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError("config " + args["config"].get<std::string>() + ": " + e.what());
    }
    cfg = train_config_from_json(j);
  }
  json overrides = json::object();
  for (const char* k : {"seed", "total_steps", "workers", "lambda_orth", "reg_samples", "reg_epochs", "d"})
    if (args.contains(k) && !args[k].is_null()) overrides[k] = args[k];
  cfg = train_config_from_json(overrides, cfg);
  if (deterministic_mode()) cfg.workers = 1;
  return cfg;
}

// --- commands ------------------------------------------------------------------------

int cmd_dyncheck(const json& args) {
  const int n = args["n_random"];
  if (n < 1) throw ConfigError("--n-random must be >= 1");
  const double tol = args["tol"];
  const std::uint64_t seed = args["seed"];
  KinematicTree tree = load_tree(args["tree"]);
  fs::path out;
  if (args.value("out", "") != "") {
    out = prepare_out(args);
    write_manifest(out, "dyncheck", args, json::object(), seed, tree_hash(tree));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uq(-3.14159, 3.14159), uv(-2.0, 2.0), ut(-5.0, 5.0);
  const Vec3 g(0, 0, -9.81);
  double worst = 0.0;
  int worst_k = -1;
  JointState worst_s;
  for (int k = 0; k < n; ++k) {
    JointState s{VecX(tree.dof()), VecX(tree.dof())};
    VecX tau(tree.dof());
    for (int i = 0; i < tree.dof(); ++i) s.q[i] = uq(rng), s.qd[i] = uv(rng), tau[i] = ut(rng);
    const double dev =
        tree.dof() ? (aba_forward_dynamics(tree, s, tau, g) - crba_oracle_dynamics(tree, s, tau, g)).cwiseAbs().maxCoeff()
                   : 0.0;
    if (!std::isfinite(dev)) throw NumericalError("non-finite acceleration in sample " + std::to_string(k));
    if (dev >= worst) worst = dev, worst_k = k, worst_s = s;
  }
  std::cout << "dyncheck " << tree.size() << " links, " << tree.dof() << " dof, " << n << " samples\n";
  std::cout << "max |qdd_aba - qdd_oracle| = " << worst << " (sample " << worst_k << ")\n";
  if (worst_k >= 0 && tree.dof())
    std::cout << "worst q = [" << worst_s.q.transpose() << "]  qd = [" << worst_s.qd.transpose() << "]\n";
  if (!out.empty())
    write_text(out / "dyncheck.csv", "samples,max_abs_dev,tol,pass\n" + std::to_string(n) + "," +
                                         format_double(worst) + "," + format_double(tol) + "," +
                                         (worst <= tol ? "1" : "0") + "\n");
  if (worst > tol) {
    std::cout << "FAIL: deviation exceeds tolerance " << tol << "\n";
    return static_cast<int>(ExitCode::kNumerical);
  }
  std::cout << "OK (tol " << tol << ")\n";
  return 0;
}

int cmd_train_policy(const json& args) {
  EnvSpec env = load_env(args["env"]);
  ActorKind kind = parse_actor_kind(args["actor"]);
  TrainConfig cfg = resolve_config(args);
  fs::path out = prepare_out(args);
  write_manifest(out, "train-policy", args, to_json(cfg), cfg.seed, tree_hash(env.tree));
  fs::create_directories(out / "checkpoints");
  PpoResult r;
  try {
    r = ppo_train(env, kind, cfg, [&](int it, const PolicyModel& m) {
      char name[64];
      std::snprintf(name, sizeof name, "iter_%06d.abd", it);
      save_policy((out / "checkpoints" / name).string(), m, env, {{"iteration", it}});
    });
  } catch (const NaNLossError& e) {
    std::cerr << "error: " << e.what() << " at iteration " << e.iteration() << "\n";
    write_text(out / "failure.json", json{{"error", e.what()}, {"iteration", e.iteration()}}.dump(2) + "\n");
    return static_cast<int>(ExitCode::kNumerical);
  }
  write_metrics_csv((out / "metrics.csv").string(), r.metrics);
  save_policy((out / "policy.abd").string(), r.model, env, {{"iteration", r.metrics.back().iter}});
  const double random = random_baseline(env, cfg.eval_episodes, cfg.seed);
  const double eval = evaluate_policy(env, r.model, cfg.eval_episodes, cfg.seed);
  json summary = {{"env", env.name},
                  {"actor", to_string(kind)},
                  {"params", param_count(r.model.actor)},
                  {"env_steps", r.metrics.back().env_steps},
                  {"eval_return", eval},
                  {"random_return", random},
                  {"eval_episodes", cfg.eval_episodes}};
  write_text(out / "eval.json", summary.dump(2) + "\n");
  std::cout << "trained " << to_string(kind) << " on " << env.name << ": " << r.metrics.back().env_steps
            << " steps, eval return " << eval << " (random " << random << ")\n";
  return 0;
}

int cmd_train_dynamics(const json& args) {
  EnvSpec env = load_env(args["env"]);
  ActorKind kind = parse_actor_kind(args["model"]);
  TrainConfig cfg = resolve_config(args);
  fs::path out = prepare_out(args);
  write_manifest(out, "train-dynamics", args, to_json(cfg), cfg.seed, tree_hash(env.tree));
  Rollout data = rollout_dataset(env, random_policy(env), cfg.reg_samples, cfg.seed);
  RegressionResult r = regress_dynamics(env, data, kind, cfg);
  std::string losses = "epoch,train_loss\n";
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e)
    losses += std::to_string(e + 1) + "," + format_double(r.epoch_loss[e]) + "\n";
  write_text(out / "losses.csv", losses);
  std::string eval = "metric,value\nval_mse," + format_double(r.val_mse) + "\n";
  for (std::size_t k = 0; k < r.horizons.size(); ++k)
    eval += "rollout_error_k" + std::to_string(r.horizons[k]) + "," + format_double(r.rollout_error[k]) + "\n";
  eval += "params," + std::to_string(param_count(r.model.spec)) + "\n";
  write_text(out / "eval.csv", eval);
  save_dynamics((out / "model.abd").string(), r.model, env);
  std::cout << "trained " << to_string(kind) << " dynamics model on " << env.name << " (" << r.train_samples
            << " train / " << r.val_samples << " val samples)\n";
  std::cout << "val_mse " << r.val_mse;
  for (std::size_t k = 0; k < r.horizons.size(); ++k)
    std::cout << "  k" << r.horizons[k] << " " << r.rollout_error[k];
  std::cout << "\n";
  return 0;
}

int cmd_eval_shift(const json& args) {
  const std::string ckpt = args["ckpt"];
  Checkpoint raw = load_checkpoint(ckpt);
  const std::string env_name = args.value("env", "") != "" ? args["env"].get<std::string>()
                                                            : raw.manifest.value("env", std::string());
  if (env_name.empty()) throw ConfigError("checkpoint names no environment; pass --env");
  EnvSpec env = load_env(env_name);
  PolicyModel m = load_policy(ckpt, tree_hash(env.tree));
  const std::vector<double> factors = parse_doubles(args["factors"]);
  const int episodes = args["episodes"];
  if (episodes < 1) throw ConfigError("--episodes must be >= 1");
  const std::uint64_t seed = args["seed"];
  fs::path out = prepare_out(args);
  write_manifest(out, "eval-shift", args, json::object(), seed, tree_hash(env.tree));
  RetentionReport rep = eval_retention(m, env, factors, episodes, seed);
  const std::string comparable = rep.not_comparable ? "0" : "1";
  std::string csv = "factor,mean_return,ci_lo,ci_hi,retention_pct,comparable\n";
  csv += "nominal," + format_double(rep.nominal_return) + "," + format_double(rep.nominal_ci.lo) + "," +
         format_double(rep.nominal_ci.hi) + ",100," + comparable + "\n";
  for (const auto& s : rep.shifts)
    csv += format_double(s.factor) + "," + format_double(s.mean_return) + "," + format_double(s.ci.lo) + "," +
           format_double(s.ci.hi) + "," + format_double(s.retention_pct) + "," + comparable + "\n";
  write_text(out / "retention.csv", csv);
  write_text(out / "retention.json", to_json(rep).dump(2) + "\n");
  std::cout << "nominal return " << rep.nominal_return << " [" << rep.nominal_ci.lo << ", " << rep.nominal_ci.hi
            << "] over " << episodes << " episodes (random " << rep.random_return << ")\n";
  for (const auto& s : rep.shifts) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", s.retention_pct);
    std::cout << "factor " << s.factor << " return " << s.mean_return << " [" << s.ci.lo << ", " << s.ci.hi
              << "] retention " << buf << (rep.not_comparable ? " (N/C)" : "") << "\n";
  }
  if (rep.not_comparable) std::cout << "N/C: nominal return is below twice the random baseline\n";
  return 0;
}

int cmd_flops(const json& args) {
  KinematicTree tree = load_tree(args["tree"]);
  ActorKind kind = parse_actor_kind(args["actor"]);
  const int d = args["d"];
  if (d < 1) throw ConfigError("--d must be >= 1");
  const int obs = args["obs_dim"].is_null() ? 2 * tree.dof() : args["obs_dim"].get<int>();
  if (obs < 1) throw ConfigError("--obs-dim must be >= 1");
  NetSpec abd = policy_spec(tree, ActorKind::kAbdNet, d, obs);
  NetSpec s = matched_spec(abd, kind);
  if (kind == ActorKind::kMlp) s = mlp_spec(obs, abd.out_dim, s.width, true);
  FlopCount f = flops_count(s);
  FlopCount measured = instrumented_flops(s, init_params(s, 0));
  std::cout << "actor " << to_string(kind) << ", " << tree.size() << " links, d " << d << ", params "
            << param_count(s) << "\n";
  std::cout << "flops encode " << f.encode << " message " << f.message << " decode " << f.decode << " total "
            << f.total() << "\n";
  std::cout << "instrumented total " << measured.total() << (measured.total() == f.total() ? " (match)" : " (MISMATCH)")
            << "\n";
  if (args.value("out", "") != "") {
    fs::path out = prepare_out(args);
    write_manifest(out, "flops", args, json::object(), 0, tree_hash(tree));
    write_text(out / "flops.csv", "actor,links,d,params,encode,message,decode,total,instrumented\n" +
                                      std::string(to_string(kind)) + "," + std::to_string(tree.size()) + "," +
                                      std::to_string(d) + "," + std::to_string(param_count(s)) + "," +
                                      std::to_string(f.encode) + "," + std::to_string(f.message) + "," +
                                      std::to_string(f.decode) + "," + std::to_string(f.total()) + "," +
                                      std::to_string(measured.total()) + "\n");
  }
  return measured.total() == f.total() ? 0 : static_cast<int>(ExitCode::kNumerical);
}

int cmd_ablate(const json& args) {
  EnvSpec env = load_env(args["env"]);
  TrainConfig cfg = resolve_config(args);
  std::vector<std::uint64_t> seeds;
  for (double s : parse_doubles(args["seeds"])) {
    if (s < 0 || s != std::floor(s)) throw ConfigError("seeds must be non-negative integers");
    seeds.push_back(static_cast<std::uint64_t>(s));
  }
  std::vector<Variant> variants = default_variants(cfg.lambda_orth);
  if (args.value("variants", "") != "") {
    std::vector<Variant> keep;
    std::stringstream ss(args["variants"].get<std::string>());
    std::string name;
    while (std::getline(ss, name, ',')) {
      auto it = std::find_if(variants.begin(), variants.end(), [&](const Variant& v) { return v.name == name; });
      if (it == variants.end()) {
        std::string all;
        for (const auto& v : variants) all += (all.empty() ? "" : ", ") + v.name;
        throw ConfigError("unknown variant '" + name + "' (choose from " + all + ")");
      }
      keep.push_back(*it);
    }
    variants = keep;
  }
  fs::path out = prepare_out(args);
  write_manifest(out, "ablate", args, to_json(cfg), cfg.seed, tree_hash(env.tree));
  auto rows = ablation_suite(env, cfg, variants, seeds);
  write_ablation_csv((out / "ablation.csv").string(), rows);
  for (const auto& r : rows)
    if (r.metric == "eval_return") std::cout << r.variant << " seed " << r.seed << " eval_return " << r.value << "\n";
  return 0;
}

int dispatch(const std::string& command, const json& args) {
  if (command == "dyncheck") return cmd_dyncheck(args);
  if (command == "train-policy") return cmd_train_policy(args);
  if (command == "train-dynamics") return cmd_train_dynamics(args);
  if (command == "eval-shift") return cmd_eval_shift(args);
  if (command == "flops") return cmd_flops(args);
  if (command == "ablate") return cmd_ablate(args);
  throw ConfigError("unknown command '" + command + "'");
}

int cmd_replay(const std::string& manifest_path, const std::string& out_override) {
  std::ifstream is(manifest_path);
  if (!is) throw ConfigError("cannot read manifest " + manifest_path);
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw ParseError("manifest " + manifest_path + ": " + e.what());
  }
  if (!m.contains("command") || !m.contains("args")) throw ParseError("manifest " + manifest_path + " lacks command/args");
  json args = m["args"];
  if (m.contains("config") && !m["config"].empty()) args["config_resolved"] = m["config"];
  if (!out_override.empty()) args["out"] = out_override;
  return dispatch(m["command"], args);
}

}  // namespace
}  // namespace abd::cli

int main(int argc, char** argv) {
  using namespace abd::cli;
  CLI::App app{"ABD-Net: articulated-body-dynamics networks for policy learning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ABD_VERSION);

  json args;
  std::string command;
  auto opt_seed = [&](CLI::App* sub, std::uint64_t* seed) { sub->add_option("--seed", *seed, "random seed"); };

  // dyncheck
  std::string tree;
  int n_random = 200;
  double tol = 1e-8;
  std::uint64_t seed = 0;
  std::string out;
  auto* dyn = app.add_subcommand("dyncheck", "compare ABA against the CRBA/RNEA oracle on random states");
  dyn->add_option("--tree", tree, "morphology file (.json or .urdf)")->required();
  dyn->add_option("--n-random", n_random, "number of random states")->capture_default_str();
  dyn->add_option("--tol", tol, "max-abs tolerance")->capture_default_str();
  dyn->add_option("--out", out, "optional output directory");
  opt_seed(dyn, &seed);

  // train-policy
  std::string env, actor, config;
  std::optional<long> total_steps;
  std::optional<double> lambda_orth;
  std::optional<int> workers, samples, epochs, d_opt;
  std::optional<std::uint64_t> seed_opt;
  auto* tp = app.add_subcommand("train-policy", "train a policy with PPO");
  tp->add_option("--env", env, "environment preset or file")->required();
  tp->add_option("--actor", actor, "abdnet | abdnet-noorth | gnn | mlp")->required();
  tp->add_option("--config", config, "JSON training config");
  tp->add_option("--out", out, "output directory")->required();
  tp->add_option("--seed", seed_opt, "random seed (overrides config)");
  tp->add_option("--total-steps", total_steps, "environment steps (overrides config)");
  tp->add_option("--lambda-orth", lambda_orth, "orthogonality weight (overrides config)");
  tp->add_option("--d", d_opt, "link representation width (overrides config)");
  tp->add_option("--workers", workers, "parallelism cap");

  // train-dynamics
  std::string model = "abdnet";
  auto* td = app.add_subcommand("train-dynamics", "fit a next-state model on random-policy rollouts");
  td->add_option("--env", env, "environment preset or file")->required();
  td->add_option("--model", model, "abdnet | abdnet-noorth | gnn | mlp")->capture_default_str();
  td->add_option("--config", config, "JSON training config");
  td->add_option("--out", out, "output directory")->required();
  td->add_option("--seed", seed_opt, "random seed (overrides config)");
  td->add_option("--samples", samples, "dataset size in control steps (overrides config)");
  td->add_option("--epochs", epochs, "training epochs (overrides config)");
  td->add_option("--d", d_opt, "link representation width (overrides config)");
  td->add_option("--workers", workers, "parallelism cap");

  // eval-shift
  std::string ckpt, factors = "1.5,2.0";
  int episodes = 500;
  auto* es = app.add_subcommand("eval-shift", "evaluate a policy under scaled link mass");
  es->add_option("--ckpt", ckpt, "policy checkpoint")->required();
  es->add_option("--env", env, "environment preset (default: the one recorded in the checkpoint)");
  es->add_option("--factors", factors, "comma-separated mass factors")->capture_default_str();
  es->add_option("--episodes", episodes, "evaluation episodes")->capture_default_str();
  es->add_option("--out", out, "output directory")->required();
  opt_seed(es, &seed);

  // flops
  int d = 32;
  std::optional<int> obs_dim;
  auto* fl = app.add_subcommand("flops", "analytic and instrumented forward-pass cost");
  fl->add_option("--tree", tree, "morphology file")->required();
  fl->add_option("--actor", actor, "abdnet | abdnet-noorth | gnn | mlp")->required();
  fl->add_option("--d", d, "link representation width")->capture_default_str();
  fl->add_option("--obs-dim", obs_dim, "observation width (default 2 x dof)");
  fl->add_option("--out", out, "optional output directory");

  // ablate
  std::string seeds = "0,1,2", variants;
  auto* ab = app.add_subcommand("ablate", "train every variant on every seed and tabulate");
  ab->add_option("--env", env, "environment preset or file")->required();
  ab->add_option("--config", config, "JSON training config");
  ab->add_option("--out", out, "output directory")->required();
  ab->add_option("--seeds", seeds, "comma-separated seeds")->capture_default_str();
  ab->add_option("--variants", variants, "subset of abdnet,abdnet-no-orth-loss,abdnet-noorth,gnn,mlp");
  ab->add_option("--total-steps", total_steps, "environment steps per run (overrides config)");
  ab->add_option("--workers", workers, "parallelism cap");

  // replay
  std::string manifest;
  auto* rp = app.add_subcommand("replay", "re-run a command from its manifest");
  rp->add_option("--manifest", manifest, "manifest.json written by a previous run")->required();
  rp->add_option("--out", out, "output directory (default: the recorded one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(abd::ExitCode::kUsage);
  }

  auto opt = [](const auto& o) { return o ? json(*o) : json(nullptr); };
  try {
    if (*dyn) return dispatch("dyncheck", {{"tree", tree}, {"n_random", n_random}, {"tol", tol}, {"seed", seed}, {"out", out}});
    if (*tp)
      return dispatch("train-policy", {{"env", env},
                                       {"actor", actor},
                                       {"config", config},
                                       {"out", out},
                                       {"seed", opt(seed_opt)},
                                       {"total_steps", opt(total_steps)},
                                       {"lambda_orth", opt(lambda_orth)},
                                       {"d", opt(d_opt)},
                                       {"workers", opt(workers)}});
    if (*td)
      return dispatch("train-dynamics", {{"env", env},
                                         {"model", model},
                                         {"config", config},
                                         {"out", out},
                                         {"seed", opt(seed_opt)},
                                         {"reg_samples", opt(samples)},
                                         {"reg_epochs", opt(epochs)},
                                         {"d", opt(d_opt)},
                                         {"workers", opt(workers)}});
    if (*es)
      return dispatch("eval-shift",
                      {{"ckpt", ckpt}, {"env", env}, {"factors", factors}, {"episodes", episodes}, {"seed", seed}, {"out", out}});
    if (*fl) return dispatch("flops", {{"tree", tree}, {"actor", actor}, {"d", d}, {"obs_dim", opt(obs_dim)}, {"out", out}});
    if (*ab)
      return dispatch("ablate", {{"env", env},
                                 {"config", config},
                                 {"out", out},
                                 {"seeds", seeds},
                                 {"variants", variants},
                                 {"total_steps", opt(total_steps)},
                                 {"workers", opt(workers)}});
    if (*rp) return cmd_replay(manifest, out);
  } catch (const abd::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(abd::ExitCode::kDataError);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(abd::ExitCode::kUsage);
  }
  return static_cast<int>(abd::ExitCode::kUsage);
}
