#pragma once

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dualcrl/dualcrl.hpp"

namespace dualcrl::cli {

enum class EnvKind { Cliff, Pendulum, Mdp };

std::string to_string(EnvKind kind);
EnvKind env_kind_from_string(const std::string& name);

/// Evaluation protocol of `density-grid` and the training summary.
struct EvaluationConfig {
  int episodes = 4;
  int steps = 200;
  int resolution = 200;
};

struct ExperimentConfig {
  EnvKind env = EnvKind::Cliff;
  CliffSpec cliff = cliff_default_spec();
  PendulumSpec pendulum;
  std::optional<TabularMdp> mdp;  // env == Mdp
  int episode_steps = 100;        // episode cut of a continuing MDP
  /// "none", "density_and_transition_cost" or "entropy_and_action_bound";
  /// expanded on the CliffWalking spec before the explicit constraints.
  std::string constraint_preset = "none";
  std::vector<ConstraintSpec> constraints;
  PendulumConstraints pendulum_constraints;
  TrainConfig train = cliff_train_defaults();
  TrainMode mode = TrainMode::ValueBased;
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds{0};
  EvaluationConfig evaluation;

  bool tabular() const { return env != EnvKind::Pendulum; }
  /// Throws std::invalid_argument.
  void validate() const;
  TabularMdp tabular_mdp() const;
  TabularTask task() const;
  std::vector<ConstraintSpec> resolved_constraints() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Unknown keys throw std::invalid_argument.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Applies "a.b.c=value" assignments; the value is parsed as JSON and taken
/// as a string when that fails.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& assignments);

struct Preset {
  std::string name;
  std::string description;
  ExperimentConfig config;
};

const std::vector<Preset>& presets();
const Preset& find_preset(const std::string& name);

/// Sector bound and velocity threshold of the constrained Pendulum preset.
/// The bound is the uniform density over [-pi, pi] x [-8, 8]; the threshold
/// is about twice the discounted velocity cost of a balancing policy.
inline constexpr double kPendulumSectorEpsilon = 0.01;
inline constexpr double kPendulumVelocityThreshold = -600.0;

/// Log-density of a KDE over (theta, theta_dot) on a resolution x resolution
/// node grid. theta is periodic; theta_dot spans max_speed plus four
/// bandwidths on each side.
struct DensityGrid {
  Vector theta;
  Vector theta_dot;
  Matrix log_density;  // rows theta_dot, columns theta
};

DensityGrid pendulum_density_grid(const std::vector<Eigen::Vector2d>& states, int resolution, double max_speed);

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitInfeasible = 2;
inline constexpr int kExitDiverged = 3;

/// Workers for `jobs` independent runs: DUALCRL_THREADS or the hardware
/// concurrency, at most `jobs`.
int worker_count(std::size_t jobs);

int cmd_solve(const ExperimentConfig& cfg, std::ostream& log);
int cmd_verify(const ExperimentConfig& cfg, std::ostream& log);
int cmd_train(const ExperimentConfig& cfg, std::ostream& log);
/// `checkpoints` defaults to <output_dir>/seed_<n>/checkpoint.bin per seed.
int cmd_density_grid(const ExperimentConfig& cfg, const std::vector<std::string>& checkpoints, std::ostream& log);
int cmd_list_presets(std::ostream& out);

/// Full command line entry point.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace dualcrl::cli
