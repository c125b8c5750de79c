#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <ostream>
#include <sstream>
#include <thread>

namespace dualcrl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json matrix_json(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index k = 0; k < m.cols(); ++k) row[static_cast<std::size_t>(k)] = m(i, k);
    out.push_back(row);
  }
  return out;
}

json multipliers_json(const ConstraintMultipliers& m) {
  json j{{"kind", m.kind}, {"w", m.w}};
  if (m.lower.size()) j["lower"] = matrix_json(m.lower);
  if (m.upper.size()) j["upper"] = matrix_json(m.upper);
  if (m.cost.size()) j["cost"] = matrix_json(m.cost);
  if (!m.transition_cost.empty()) j["transition_cost"] = m.transition_cost;
  return j;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setw(2) << j << "\n";
}

TrainConfig train_defaults(EnvKind env) {
  return env == EnvKind::Pendulum ? pendulum_train_defaults() : cliff_train_defaults();
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    require(!item.empty() && item.find_first_not_of("0123456789") == std::string::npos, "bad seed '" + item + "'");
    out.push_back(std::stoull(item));
  }
  require(!out.empty(), "--seed needs at least one value");
  return out;
}

// Runs jobs [0, n) on worker_count(n) threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& job) {
  const int workers = worker_count(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  for (auto& t : pool) t.join();
}

fs::path seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed));
}

TabularAgent tabular_agent_from(const ExperimentConfig& cfg, const std::vector<NamedTensor>& tensors) {
  const TabularMdp mdp = cfg.tabular_mdp();
  const int S = mdp.num_states(), A = mdp.num_actions();
  TabularAgent agent;
  agent.mode = cfg.mode;
  agent.q = tensor_matrix(find_tensor(tensors, "q"));
  require(agent.q.rows() == S && agent.q.cols() == A, "checkpoint q table does not match the environment");
  if (cfg.mode == TrainMode::ActorCritic) {
    agent.logits = tensor_matrix(find_tensor(tensors, "logits"));
    require(agent.logits.rows() == S && agent.logits.cols() == A, "checkpoint logits do not match the environment");
  }
  agent.bank = RewardModifierBank(cfg.resolved_constraints(), S, A);
  agent.bank.set_alpha(tensor_matrix(find_tensor(tensors, "alpha"))(0));
  if (const EntropySpec* e = agent.bank.entropy()) agent.teacher = e->teacher.probs;
  return agent;
}

// Discounted visit counts of `episodes` rollouts of at most `steps` steps.
Vector tabular_visitation(const TabularTask& task, const TabularPolicy& policy, int episodes, int steps,
                          std::uint64_t seed) {
  TabularEnv env(task.mdp, task.terminal, steps);
  DiscountedCounter counter(task.mdp.num_states(), task.mdp.discount(), 1.0);
  Rng rng(seed);
  for (int e = 0; e < episodes; ++e) {
    int s = env.reset(rng);
    counter.visit(s, 0);
    for (int t = 0; t < steps; ++t) {
      const Eigen::RowVectorXd row = policy.probs.row(s);
      const auto st = env.step(rng.categorical(std::span<const double>(row.data(), static_cast<std::size_t>(row.size()))), rng);
      if (st.done) {
        counter.absorb(st.s_next, env.episode_step());
        break;
      }
      if (st.truncated) break;
      s = st.s_next;
      counter.visit(s, env.episode_step());
    }
  }
  return counter.normalized();
}

json record_json(const MetricsRecord& r) {
  return json{{"step", r.step}, {"return", r.avg_return}, {"violations", r.violations},
              {"modifier_norms", r.modifier_norms}};
}

}  // namespace

std::string to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::Cliff: return "cliff";
    case EnvKind::Pendulum: return "pendulum";
    case EnvKind::Mdp: return "mdp";
  }
  return "?";
}

EnvKind env_kind_from_string(const std::string& name) {
  if (name == "cliff") return EnvKind::Cliff;
  if (name == "pendulum") return EnvKind::Pendulum;
  if (name == "mdp") return EnvKind::Mdp;
  throw std::invalid_argument("unknown env '" + name + "' (cliff, pendulum, mdp)");
}

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  require(!seeds.empty(), "seeds must not be empty");
  require(!output_dir.empty(), "output_dir must not be empty");
  require(evaluation.episodes > 0 && evaluation.steps > 0, "evaluation episodes and steps must be positive");
  require(evaluation.resolution >= 2, "evaluation resolution must be at least 2");
  require(constraint_preset == "none" || constraint_preset == "density_and_transition_cost" ||
              constraint_preset == "entropy_and_action_bound",
          "unknown constraint_preset '" + constraint_preset + "'");
  train.validate();
  switch (env) {
    case EnvKind::Cliff: cliff.validate(); break;
    case EnvKind::Pendulum: pendulum.validate(); break;
    case EnvKind::Mdp:
      require(mdp.has_value(), "env 'mdp' needs an 'mdp' object");
      require(episode_steps > 0, "episode_steps must be positive");
      break;
  }
  if (env != EnvKind::Cliff) require(constraint_preset == "none", "constraint_preset needs env 'cliff'");
  if (env == EnvKind::Pendulum) {
    require(constraints.empty(), "tabular constraints need a tabular env");
    return;
  }
  const TabularMdp m = tabular_mdp();
  require(std::abs(m.discount() - train.gamma) < 1e-12, "train.gamma must equal the environment discount");
  for (const ConstraintSpec& c : resolved_constraints()) validate_constraint(m, c);
}

TabularMdp ExperimentConfig::tabular_mdp() const {
  require(tabular(), "the pendulum env is not tabular");
  return env == EnvKind::Cliff ? cliff_mdp(cliff) : *mdp;
}

TabularTask ExperimentConfig::task() const {
  require(tabular(), "the pendulum env is not tabular");
  return env == EnvKind::Cliff ? cliff_task(cliff) : continuing_task(*mdp, episode_steps);
}

std::vector<ConstraintSpec> ExperimentConfig::resolved_constraints() const {
  std::vector<ConstraintSpec> out;
  if (constraint_preset == "density_and_transition_cost")
    out = cliff_constraints(cliff, CliffExperiment::DensityAndTransitionCost);
  else if (constraint_preset == "entropy_and_action_bound")
    out = cliff_constraints(cliff, CliffExperiment::EntropyAndActionBound, train.alpha_start);
  out.insert(out.end(), constraints.begin(), constraints.end());
  return out;
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"env", to_string(c.env)},
           {"cliff", c.cliff},
           {"pendulum", c.pendulum},
           {"episode_steps", c.episode_steps},
           {"constraint_preset", c.constraint_preset},
           {"constraints", json::array()},
           {"pendulum_constraints", c.pendulum_constraints},
           {"train", c.train},
           {"mode", to_string(c.mode)},
           {"output_dir", c.output_dir},
           {"seeds", c.seeds},
           {"evaluation",
            {{"episodes", c.evaluation.episodes}, {"steps", c.evaluation.steps},
             {"resolution", c.evaluation.resolution}}}};
  j["mdp"] = c.mdp ? json(*c.mdp) : json(nullptr);
  for (const ConstraintSpec& s : c.constraints) j["constraints"].push_back(s);
}

void from_json(const json& j, ExperimentConfig& c) {
  static const std::vector<std::string> keys{"env",  "cliff",       "pendulum", "mdp",        "episode_steps",
                                             "constraint_preset", "constraints", "pendulum_constraints",
                                             "train", "mode",     "output_dir", "seeds",      "evaluation"};
  require(j.is_object(), "config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    require(std::find(keys.begin(), keys.end(), it.key()) != keys.end(), "config: unknown key '" + it.key() + "'");

  ExperimentConfig out;
  if (j.contains("env")) out.env = env_kind_from_string(j.at("env").get<std::string>());
  out.train = train_defaults(out.env);
  if (j.contains("cliff")) j.at("cliff").get_to(out.cliff);
  if (j.contains("pendulum")) j.at("pendulum").get_to(out.pendulum);
  if (j.contains("mdp") && !j.at("mdp").is_null()) out.mdp = mdp_from_json(j.at("mdp"));
  out.episode_steps = j.value("episode_steps", out.episode_steps);
  out.constraint_preset = j.value("constraint_preset", out.constraint_preset);
  if (j.contains("constraints"))
    for (const json& s : j.at("constraints")) out.constraints.push_back(constraint_from_json(s));
  if (j.contains("pendulum_constraints")) j.at("pendulum_constraints").get_to(out.pendulum_constraints);
  if (j.contains("train")) from_json(j.at("train"), out.train);
  if (j.contains("mode")) out.mode = train_mode_from_string(j.at("mode").get<std::string>());
  out.output_dir = j.value("output_dir", out.output_dir);
  if (j.contains("seeds")) out.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("evaluation")) {
    const json& e = j.at("evaluation");
    for (auto it = e.begin(); it != e.end(); ++it)
      require(it.key() == "episodes" || it.key() == "steps" || it.key() == "resolution",
              "evaluation: unknown key '" + it.key() + "'");
    out.evaluation.episodes = e.value("episodes", out.evaluation.episodes);
    out.evaluation.steps = e.value("steps", out.evaluation.steps);
    out.evaluation.resolution = e.value("resolution", out.evaluation.resolution);
  }
  c = std::move(out);
}

void apply_overrides(json& doc, const std::vector<std::string>& assignments) {
  for (const std::string& a : assignments) {
    const auto eq = a.find('=');
    require(eq != std::string::npos && eq > 0, "--set expects key=value, got '" + a + "'");
    const std::string path = a.substr(0, eq), text = a.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    json* node = &doc;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      require(!parts[i].empty(), "bad --set path '" + path + "'");
      if (node->is_array()) {
        require(parts[i].find_first_not_of("0123456789") == std::string::npos, "bad array index in '" + path + "'");
        const std::size_t idx = std::stoul(parts[i]);
        require(idx < node->size(), "array index out of range in '" + path + "'");
        node = &(*node)[idx];
      } else {
        if (node->is_null()) *node = json::object();
        require(node->is_object(), "cannot descend into '" + parts[i] + "' of '" + path + "'");
        node = &(*node)[parts[i]];
      }
    }
    *node = std::move(value);
  }
}

// ---------------------------------------------------------------- presets

const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = [] {
    std::vector<Preset> out;
    ExperimentConfig c;
    out.push_back({"cliff-baseline", "CliffWalking, no constraints, value-based", c});

    c = ExperimentConfig{};
    c.cliff = cliff_hazard_spec();
    c.constraint_preset = "density_and_transition_cost";
    c.seeds = {0, 1, 2, 3, 4};
    out.push_back({"cliff-vdb-tc", "CliffWalking hazards: state density bound and ridge transition cost, value-based", c});

    c = ExperimentConfig{};
    c.constraint_preset = "entropy_and_action_bound";
    c.mode = TrainMode::ActorCritic;
    c.seeds = {0, 1, 2, 3, 4};
    out.push_back({"cliff-er-adb", "CliffWalking: teacher entropy regularization and action density bound, actor-critic", c});

    c = ExperimentConfig{};
    c.env = EnvKind::Pendulum;
    c.train = pendulum_train_defaults();
    c.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    out.push_back({"pendulum-er", "Pendulum: entropy regularization only (baseline)", c});

    c.pendulum_constraints.density = SectorDensityBound{AngleSector{}, kPendulumSectorEpsilon};
    c.pendulum_constraints.velocity = VelocityValueConstraint{kPendulumVelocityThreshold};
    out.push_back({"pendulum-er-vdb-crl", "Pendulum: entropy, sector density bound and velocity value constraint", c});
    return out;
  }();
  return all;
}

const Preset& find_preset(const std::string& name) {
  for (const Preset& p : presets())
    if (p.name == name) return p;
  throw std::invalid_argument("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------- density grid

DensityGrid pendulum_density_grid(const std::vector<Eigen::Vector2d>& states, int resolution, double max_speed) {
  require(!states.empty(), "density grid needs states");
  require(resolution >= 2, "density grid resolution must be at least 2");
  KdeEstimator kde(2, states.size());
  for (const auto& s : states) kde.push(Vector(s));
  kde.refit();
  const double h_theta = kde.bandwidth()(0), h_vel = kde.bandwidth()(1);
  const double v_max = max_speed + 4.0 * h_vel;
  const double pi = std::numbers::pi;

  DensityGrid g;
  g.theta = Vector::LinSpaced(resolution, -pi, pi);
  g.theta_dot = Vector::LinSpaced(resolution, -v_max, v_max);
  const Eigen::Index n = static_cast<Eigen::Index>(states.size());
  auto gauss = [pi](double x, double h) { return std::exp(-0.5 * x * x / (h * h)) / (std::sqrt(2.0 * pi) * h); };
  // product kernel: density = K_theta * K_vel^T / n
  Matrix k_theta(resolution, n), k_vel(resolution, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double th = states[static_cast<std::size_t>(k)](0), v = states[static_cast<std::size_t>(k)](1);
    for (int i = 0; i < resolution; ++i) {
      double acc = 0.0;
      for (int image = -1; image <= 1; ++image) acc += gauss(g.theta(i) - th - 2.0 * pi * image, h_theta);
      k_theta(i, k) = acc;
      k_vel(i, k) = gauss(g.theta_dot(i) - v, h_vel);
    }
  }
  const Matrix density = (k_vel * k_theta.transpose()) / static_cast<double>(n);
  g.log_density = density.array().max(1e-300).log().matrix();
  return g;
}

// ---------------------------------------------------------------- commands

int worker_count(std::size_t jobs) {
  int cap = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("DUALCRL_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) cap = v;
  }
  return static_cast<int>(std::max<std::size_t>(1, std::min<std::size_t>(jobs, static_cast<std::size_t>(cap))));
}

int cmd_solve(const ExperimentConfig& cfg, std::ostream& log) {
  require(cfg.tabular(), "solve needs a tabular env");
  const TabularMdp mdp = cfg.tabular_mdp();
  const auto constraints = cfg.resolved_constraints();
  fs::create_directories(cfg.output_dir);
  const fs::path path = fs::path(cfg.output_dir) / "solution.json";
  try {
    const ConstrainedSolution sol = solve_constrained(mdp, constraints);
    const TheoremReport report = verify_solution(mdp, constraints, sol, 1e-6);
    json j{{"status", "optimal"},
           {"objective", sol.objective},
           {"occupancy", {{"d", vector_json(sol.occupancy.d)}, {"p", matrix_json(sol.occupancy.p)}}},
           {"policy", matrix_json(sol.policy.probs)},
           {"values", vector_json(sol.values)},
           {"multipliers", json::array()},
           {"report", report}};
    for (const auto& m : sol.multipliers) j["multipliers"].push_back(multipliers_json(m));
    write_json(path, j);
    log << "optimal: objective " << std::setprecision(10) << sol.objective << " -> " << path.string() << "\n";
    return kExitOk;
  } catch (const InfeasibleConstraints& e) {
    write_json(path, json{{"status", "infeasible"}, {"group", e.group()}, {"message", e.what()}});
    log << "infeasible (" << e.group() << "): " << e.what() << "\n";
    return kExitInfeasible;
  }
}

int cmd_verify(const ExperimentConfig& cfg, std::ostream& log) {
  require(cfg.tabular(), "verify needs a tabular env");
  fs::create_directories(cfg.output_dir);
  const fs::path path = fs::path(cfg.output_dir) / "report.json";
  try {
    const TheoremReport report = verify_theorems(cfg.tabular_mdp(), cfg.resolved_constraints(), 1e-6);
    write_json(path, report);
    log << (report.passed ? "passed" : "FAILED") << ": gap " << report.duality_gap << ", slackness "
        << report.complementary_slackness << " -> " << path.string() << "\n";
    for (const std::string& f : report.failures) log << "  " << f << "\n";
    return report.passed ? kExitOk : kExitError;
  } catch (const InfeasibleConstraints& e) {
    log << "infeasible (" << e.group() << "): " << e.what() << "\n";
    return kExitInfeasible;
  }
}

int cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  fs::create_directories(cfg.output_dir);
  write_json(fs::path(cfg.output_dir) / "config.json", cfg);
  std::optional<TabularTask> task;
  std::vector<ConstraintSpec> constraints;
  if (cfg.tabular()) {
    task = cfg.task();
    constraints = cfg.resolved_constraints();
  }

  std::mutex mu;
  std::vector<json> runs(cfg.seeds.size());
  bool diverged = false;
  parallel_for(cfg.seeds.size(), [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    const fs::path dir = seed_dir(cfg, seed);
    fs::create_directories(dir);
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    json run{{"seed", seed}};
    try {
      TrainMetrics metrics;
      std::vector<NamedTensor> tensors;
      if (cfg.tabular()) {
        TabularTrainResult res = train(*task, constraints, tc, cfg.mode);
        run["average_reward"] = average_reward(task->mdp, res.agent.policy());
        metrics = std::move(res.metrics);
        tensors = res.agent.tensors();
      } else {
        PendulumTrainResult res = train_pendulum(cfg.pendulum, cfg.pendulum_constraints, tc);
        const PendulumEvaluation ev =
            evaluate_pendulum(cfg.pendulum, res.agent, cfg.evaluation.episodes, cfg.evaluation.steps, 1000 + seed);
        double ret = 0.0;
        for (double r : ev.returns) ret += r / static_cast<double>(ev.returns.size());
        run["evaluation_return"] = ret;
        metrics = std::move(res.metrics);
        tensors = res.agent.tensors();
      }
      std::ofstream csv(dir / "metrics.csv");
      metrics.write_csv(csv);
      write_checkpoint((dir / "checkpoint.bin").string(), tensors);
      run["status"] = "ok";
      run["constraints"] = metrics.constraint_names;
      run["warnings"] = metrics.warnings;
      run["final"] = metrics.records.empty() ? json(nullptr) : record_json(metrics.records.back());
      std::lock_guard lock(mu);
      log << "seed " << seed << ": done -> " << dir.string() << "\n";
    } catch (const TrainingDiverged& e) {
      std::ofstream(dir / "divergence.txt") << e.what() << "\n" << e.dump() << "\n";
      run["status"] = "diverged";
      run["message"] = e.what();
      std::lock_guard lock(mu);
      diverged = true;
      log << "seed " << seed << ": diverged: " << e.what() << "\n";
    }
    runs[i] = std::move(run);
  });

  json summary{{"runs", runs}};
  double total = 0.0;
  int count = 0;
  for (const json& r : runs)
    if (r.contains("final") && !r["final"].is_null()) {
      total += r["final"]["return"].get<double>();
      ++count;
    }
  summary["mean_final_return"] = count ? json(total / count) : json(nullptr);
  write_json(fs::path(cfg.output_dir) / "summary.json", summary);
  return diverged ? kExitDiverged : kExitOk;
}

int cmd_density_grid(const ExperimentConfig& cfg, const std::vector<std::string>& checkpoints, std::ostream& log) {
  std::vector<std::string> paths = checkpoints;
  if (paths.empty())
    for (std::uint64_t seed : cfg.seeds) paths.push_back((seed_dir(cfg, seed) / "checkpoint.bin").string());
  fs::create_directories(cfg.output_dir);
  const fs::path out_path = fs::path(cfg.output_dir) / "density_grid.csv";
  std::ofstream out(out_path);
  out << "# schema=1\n" << std::setprecision(10);

  if (!cfg.tabular()) {
    std::vector<Eigen::Vector2d> states;
    double ret = 0.0;
    for (std::size_t i = 0; i < paths.size(); ++i) {
      const PendulumAgent agent = PendulumAgent::from_tensors(read_checkpoint(paths[i]));
      const PendulumEvaluation ev =
          evaluate_pendulum(cfg.pendulum, agent, cfg.evaluation.episodes, cfg.evaluation.steps, 1000 + i);
      states.insert(states.end(), ev.states.begin(), ev.states.end());
      for (double r : ev.returns) ret += r;
    }
    const int R = cfg.evaluation.resolution;
    const DensityGrid g = pendulum_density_grid(states, R, cfg.pendulum.max_speed);
    out << "theta_dot\\theta";
    for (int i = 0; i < R; ++i) out << ',' << g.theta(i);
    out << "\n";
    for (int r = 0; r < R; ++r) {
      out << g.theta_dot(r);
      for (int c = 0; c < R; ++c) out << ',' << g.log_density(r, c);
      out << "\n";
    }
    log << paths.size() << " models, " << states.size() << " states, mean return "
        << ret / static_cast<double>(paths.size() * static_cast<std::size_t>(cfg.evaluation.episodes)) << " -> "
        << out_path.string() << "\n";
    return kExitOk;
  }

  const TabularTask task = cfg.task();
  const int S = task.mdp.num_states();
  Vector pooled = Vector::Zero(S);
  out << "model";
  for (int s = 0; s < S; ++s) out << ",s" << s;
  out << "\n";
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const TabularAgent agent = tabular_agent_from(cfg, read_checkpoint(paths[i]));
    const Vector d = tabular_visitation(task, agent.policy(), cfg.evaluation.episodes, cfg.evaluation.steps, 1000 + i);
    pooled += d / static_cast<double>(paths.size());
    out << "model_" << i;
    for (int s = 0; s < S; ++s) out << ',' << d(s);
    out << "\n";
  }
  out << "pooled";
  for (int s = 0; s < S; ++s) out << ',' << pooled(s);
  out << "\n";
  log << paths.size() << " models -> " << out_path.string() << "\n";
  return kExitOk;
}

int cmd_list_presets(std::ostream& out) {
  for (const Preset& p : presets()) out << std::left << std::setw(22) << p.name << p.description << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- entry point

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Constrained reinforcement learning by reward modification"};
  app.require_subcommand(1);

  std::string config_path, preset_name, seeds_text, out_dir;
  std::vector<std::string> overrides, checkpoints;
  int resolution = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config JSON");
    sub->add_option("--preset", preset_name, "named preset (see list-presets)");
    sub->add_option("--seed", seeds_text, "seed list, e.g. 0,1,2");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--set", overrides, "key.path=value override")->take_all();
  };
  auto* solve = app.add_subcommand("solve", "solve the constrained LP of a tabular env");
  auto* verify = app.add_subcommand("verify", "check duality and slackness of the constrained LP");
  auto* trn = app.add_subcommand("train", "train one model per seed");
  auto* grid = app.add_subcommand("density-grid", "evaluate trained models and dump a state density");
  auto* list = app.add_subcommand("list-presets", "print the embedded presets");
  for (CLI::App* sub : {solve, verify, trn, grid}) add_common(sub);
  grid->add_option("--checkpoint", checkpoints, "checkpoint files (default: one per seed)")->take_all();
  grid->add_option("--resolution", resolution, "grid nodes per axis")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitError;
  }
  if (list->parsed()) return cmd_list_presets(out);

  try {
    require(config_path.empty() || preset_name.empty(), "--config and --preset are exclusive");
    json doc;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      require(static_cast<bool>(in), "cannot read " + config_path);
      doc = json::parse(in);
    } else {
      doc = find_preset(preset_name.empty() ? "cliff-baseline" : preset_name).config;
    }
    apply_overrides(doc, overrides);
    ExperimentConfig cfg = doc.get<ExperimentConfig>();
    if (!seeds_text.empty()) cfg.seeds = parse_seeds(seeds_text);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (resolution > 0) cfg.evaluation.resolution = resolution;
    cfg.validate();

    if (solve->parsed()) return cmd_solve(cfg, out);
    if (verify->parsed()) return cmd_verify(cfg, out);
    if (trn->parsed()) return cmd_train(cfg, out);
    return cmd_density_grid(cfg, checkpoints, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace dualcrl::cli
