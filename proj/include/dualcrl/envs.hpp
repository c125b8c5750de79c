#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <array>
#include <utility>
#include <vector>

#include "dualcrl/mdp.hpp"
#include "dualcrl/oracle.hpp"
#include "dualcrl/rng.hpp"

namespace dualcrl {

// ---------------------------------------------------------------- CliffWalking

using Cell = std::pair<int, int>;  // (row, col)

enum CliffAction : int { kUp = 0, kRight = 1, kDown = 2, kLeft = 3 };

struct CliffSpec {
  int rows = 4;
  int cols = 12;
  std::vector<Cell> cliff_cells;  // empty -> bottom row between start and goal
  std::vector<Cell> unstable_cells;
  std::vector<Cell> ridge_cells;
  Cell start_cell{3, 0};
  Cell goal_cell{3, 11};
  double step_reward = -1.0;
  double cliff_reward = -100.0;
  double ridge_cost = 1.0;
  double epsilon = 1e-3;
  /// Mass of iota spread uniformly over non-cliff states.
  double initial_smoothing = 1e-3;
  double gamma = 0.99;
  /// Probability of the teacher's preferred action.
  double teacher_confidence = 0.9;
  /// Top-row lower bound on pi(down|s) for the action-density preset.
  double down_lower_bound = 0.5;
  /// Episode cap for model-free rollouts.
  int max_episode_steps = 200;

  int num_states() const { return rows * cols; }
  int id(Cell c) const { return c.first * cols + c.second; }
  int id(int r, int c) const { return r * cols + c; }
  Cell cell(int s) const { return {s / cols, s % cols}; }
  /// Cliff cells after applying the default.
  std::vector<Cell> cliffs() const;
  /// Throws std::invalid_argument on cells outside the grid or start/goal on the cliff.
  void validate() const;
};

/// 4 x 12 grid without hazards.
CliffSpec cliff_default_spec();
/// Unstable cells and ridges of the density-bound / transition-cost experiment.
CliffSpec cliff_hazard_spec();

void to_json(nlohmann::json& j, const CliffSpec& spec);
void from_json(const nlohmann::json& j, CliffSpec& spec);

/// Cliff entry costs cliff_reward and returns to start; the goal is absorbing
/// with zero reward.
TabularMdp cliff_mdp(const CliffSpec& spec);

/// Safe teacher: up to the top row, right along it, down in the goal column.
TabularPolicy cliff_teacher(const CliffSpec& spec);

enum class CliffExperiment { DensityAndTransitionCost, EntropyAndActionBound };

/// Constraint presets of the two CliffWalking experiments. `alpha` is the
/// entropy temperature for the second experiment.
std::vector<ConstraintSpec> cliff_constraints(const CliffSpec& spec, CliffExperiment experiment,
                                              double alpha = 1.0);

/// c(s,a,s') = ridge_cost for horizontal moves between ridge cells.
Tensor3 cliff_ridge_cost(const CliffSpec& spec);

/// Top-row states carrying the pi(down|s) lower bound (first and last column excluded).
std::vector<int> cliff_bounded_top_row(const CliffSpec& spec);

std::vector<bool> cliff_terminals(const CliffSpec& spec);

/// Steps taken from the start by the most likely action of `policy` until the
/// goal is reached; -1 when the walk loops or leaves via the cliff.
int cliff_path_length(const CliffSpec& spec, const TabularPolicy& policy);

/// Episodic wrapper of a tabular MDP for model-free training.
class TabularEnv {
 public:
  struct Step {
    int s_next;
    double r;
    bool done;       // terminal state reached
    bool truncated;  // episode cap reached
  };

  TabularEnv(TabularMdp mdp, std::vector<bool> terminal, int max_episode_steps);

  const TabularMdp& mdp() const { return mdp_; }
  int num_states() const { return mdp_.num_states(); }
  int num_actions() const { return mdp_.num_actions(); }
  int state() const { return state_; }
  int episode_step() const { return t_; }

  int reset(Rng& rng);
  Step step(int action, Rng& rng);

 private:
  TabularMdp mdp_;
  std::vector<bool> terminal_;
  int max_steps_;
  int state_ = 0;
  int t_ = 0;
};

// ---------------------------------------------------------------- Pendulum

struct PendulumSpec {
  double mass = 1.0;
  double length = 1.0;
  double gravity = 10.0;
  double dt = 0.05;
  double max_torque = 2.0;
  double max_speed = 8.0;
  std::array<double, 3> reward_coeffs{1.0, 0.1, 0.001};
  int episode_length = 200;

  void validate() const;
};

void to_json(nlohmann::json& j, const PendulumSpec& spec);
void from_json(const nlohmann::json& j, PendulumSpec& spec);

/// theta = 0 is upright.
struct PendulumState {
  double theta = 0.0;
  double theta_dot = 0.0;
};

struct PendulumStep {
  PendulumState state;
  Eigen::Vector3d observation;
  double reward;
};

/// Wraps an angle to (-pi, pi].
double wrap_angle(double theta);

Eigen::Vector3d pendulum_observation(const PendulumState& state);

/// Semi-implicit Euler step; the reward is evaluated at the pre-step state.
PendulumStep pendulum_step(const PendulumSpec& spec, const PendulumState& state, double torque);

/// Angular acceleration without clamping (used by reference integrators).
double pendulum_acceleration(const PendulumSpec& spec, double theta, double torque);

class PendulumEnv {
 public:
  explicit PendulumEnv(PendulumSpec spec);

  const PendulumSpec& spec() const { return spec_; }
  const PendulumState& state() const { return state_; }
  int episode_step() const { return t_; }

  /// theta ~ U(-pi, pi], theta_dot ~ U(-1, 1).
  Eigen::Vector3d reset(Rng& rng);
  /// Returns (observation, reward, truncated).
  std::tuple<Eigen::Vector3d, double, bool> step(double torque);

 private:
  PendulumSpec spec_;
  PendulumState state_;
  int t_ = 0;
};

/// Angular sector (lo, hi) in wrapped theta; used for the density bound.
struct AngleSector {
  double lo = 0.0;
  double hi = 1.5707963267948966;
  bool contains(double theta) const {
    const double w = wrap_angle(theta);
    return w > lo && w < hi;
  }
};

}  // namespace dualcrl
