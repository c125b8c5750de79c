#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <array>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualcrl/envs.hpp"
#include "dualcrl/mdp.hpp"
#include "dualcrl/models.hpp"
#include "dualcrl/oracle.hpp"
#include "dualcrl/rng.hpp"

namespace dualcrl {

enum class TrainMode { ValueBased, ActorCritic };

std::string to_string(TrainMode mode);
/// "value_based" or "actor_critic".
TrainMode train_mode_from_string(const std::string& name);

// ---------------------------------------------------------------- config

struct TrainConfig {
  long total_steps = 50000;
  long warmup_steps = 640;
  std::size_t buffer_capacity = 10000;
  int batch_size = 32;
  double gamma = 0.99;
  double lr_q = 2e-2;
  int stride_q = 1;
  double lr_pi = 4e-3;
  int stride_pi = 2;
  /// Tabular counting forgets 1 - lr_d per episode.
  double lr_d = 4e-3;
  int stride_d = 1;
  double lr_r = 1e-2;
  int stride_r = 10;
  double target_tau = 1e-3;
  int target_stride = 2;
  double alpha_start = 1.0;
  double alpha_end = 1e-2;
  /// epsilon-greedy exploration of the value-based learner, decayed linearly
  /// over the first `epsilon_fraction` of training.
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_fraction = 0.5;
  std::vector<int> hidden{50, 10};
  std::size_t kde_window = 5000;
  long log_every = 1000;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument.
  void validate() const;
};

/// CliffWalking column of the hyperparameter table.
TrainConfig cliff_train_defaults();
/// Pendulum column of the hyperparameter table.
TrainConfig pendulum_train_defaults();

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// alpha_start * (alpha_end / alpha_start)^(step / total_steps).
double alpha_at(const TrainConfig& cfg, long step);
double epsilon_at(const TrainConfig& cfg, long step);

// ---------------------------------------------------------------- modifier bank

/// Learnable reward modifiers of one constraint. Unused members are empty.
struct ModifierTables {
  TabularTable w;      // 1 x 1, value constraints
  TabularTable lower;  // S x 1 for state bounds, S x A otherwise
  TabularTable upper;
  TabularTable cost;   // S x A (average costs) or SA x SA (immediate costs)

  std::vector<TabularTable*> all();
  std::vector<const TabularTable*> all() const;
  double norm() const;
};

class RewardModifierBank {
 public:
  RewardModifierBank() = default;
  /// All modifiers start at zero.
  RewardModifierBank(std::vector<ConstraintSpec> constraints, int num_states, int num_actions);

  int num_states() const { return num_states_; }
  int num_actions() const { return num_actions_; }
  const std::vector<ConstraintSpec>& constraints() const { return constraints_; }
  std::vector<ModifierTables>& tables() { return tables_; }
  const std::vector<ModifierTables>& tables() const { return tables_; }

  /// First entropy constraint or nullptr.
  const EntropySpec* entropy() const;
  /// Current entropy temperature; starts at the spec's alpha.
  double alpha() const { return alpha_; }
  void set_alpha(double alpha) { alpha_ = alpha; }

  bool needs_density() const;
  /// Constraint names in the "kind#index" form.
  std::vector<std::string> names() const;
  std::vector<double> norms() const;
  bool nonnegative() const;

 private:
  std::vector<ConstraintSpec> constraints_;
  std::vector<ModifierTables> tables_;
  int num_states_ = 0;
  int num_actions_ = 0;
  double alpha_ = 0.0;
};

/// Sum of the reward modifications at (s, a, s'). `policy` is required when
/// entropy or immediate transition costs are attached; the entropy term is
/// left out with `include_entropy = false`.
double modified_reward(const RewardModifierBank& bank, int s, int a, int s_next,
                       const Matrix* policy = nullptr, bool include_entropy = true);

// ---------------------------------------------------------------- tabular losses

struct TableLoss {
  double loss = 0.0;
  Matrix grad;
};

/// Mean squared Bellman residual of the online table against a constant
/// target. Value-based: max backup, or the soft backup when entropy is
/// attached. Actor-critic: expectation under `policy` with the entropy term.
TableLoss critic_loss(const Matrix& q, const Matrix& q_target, const RewardModifierBank& bank,
                      const std::vector<ExperienceTuple>& batch, double gamma, TrainMode mode,
                      const Matrix* policy);

/// -mean_s sum_a pi(a|s) [q(s,a) - alpha log(pi/pi_T)] with pi = softmax(logits).
TableLoss actor_loss(const Matrix& logits, const Matrix& q, const RewardModifierBank& bank,
                     const std::vector<ExperienceTuple>& batch);

/// -mean log d(s) over the batch states.
double density_loss(const SoftmaxDensity& density, const std::vector<ExperienceTuple>& batch, Vector* grad);

/// Lagrangian reward loss summed over the attached constraints. `density`
/// is d(s) per state and `policy` the pi used for p(s,a) = d(s) pi(a|s).
/// Gradients have the layout of bank.tables().
double reward_loss(const RewardModifierBank& bank, const std::vector<ExperienceTuple>& batch, double gamma,
                   const Vector* density, const Matrix* policy, std::vector<ModifierTables>* grads);

inline constexpr double kDensityFloor = 1e-8;

/// Uniform over the argmax set, ties within 1e-9.
TabularPolicy derive_policy(const Matrix& q);
/// pi proportional to teacher * exp(q / alpha).
Matrix boltzmann_policy(const Matrix& q, const Matrix& teacher, double alpha);
Matrix softmax_rows(const Matrix& logits);

// ---------------------------------------------------------------- metrics

struct MetricsRecord {
  long step = 0;
  double avg_return = 0.0;
  double alpha = 0.0;
  double loss_q = 0.0;
  double loss_pi = 0.0;
  double loss_d = 0.0;
  double loss_r = 0.0;
  std::vector<double> violations;
  std::vector<double> modifier_norms;
};

struct TrainMetrics {
  std::vector<std::string> constraint_names;
  std::vector<MetricsRecord> records;
  std::vector<std::string> warnings;

  /// "# schema=1", a header row, one row per record.
  void write_csv(std::ostream& out) const;
};

/// NaN or Inf in a loss. `dump` describes the state at the time.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::string dump)
      : std::runtime_error(what), dump_(std::move(dump)) {}
  const std::string& dump() const { return dump_; }

 private:
  std::string dump_;
};

// ---------------------------------------------------------------- tabular training

struct TabularTask {
  TabularMdp mdp;
  std::vector<bool> terminal;
  int max_episode_steps = 200;
};

TabularTask cliff_task(const CliffSpec& spec);
/// Continuing MDP cut into episodes of fixed length.
TabularTask continuing_task(const TabularMdp& mdp, int episode_steps);

struct TabularAgent {
  TrainMode mode = TrainMode::ValueBased;
  Matrix q;
  Matrix q_target;
  Matrix logits;  // actor-critic only
  RewardModifierBank bank;
  Vector density;
  Matrix teacher;  // entropy teacher or empty

  /// Greedy (value-based), Boltzmann (value-based with entropy) or softmax(logits).
  TabularPolicy policy() const;
  std::vector<NamedTensor> tensors() const;
};

using TabularObserver = std::function<void(long step, const TabularAgent& agent)>;

struct TabularTrainResult {
  TabularAgent agent;
  TrainMetrics metrics;
};

/// Warmup collection with uniform actions, then `total_steps` iterations of
/// one environment step followed by the strided updates.
TabularTrainResult train(const TabularTask& task, const std::vector<ConstraintSpec>& constraints,
                         const TrainConfig& config, TrainMode mode, const TabularObserver& observer = {});

// ---------------------------------------------------------------- pendulum

/// d(theta, theta_dot) <= epsilon inside an angular sector.
struct SectorDensityBound {
  AngleSector sector;
  double epsilon = 0.01;
};

/// Expected discounted sum of -theta_dot^2 at least `threshold`.
struct VelocityValueConstraint {
  double threshold = 0.0;
};

struct PendulumConstraints {
  bool entropy = true;  // uniform teacher over the torque range
  std::optional<SectorDensityBound> density;
  std::optional<VelocityValueConstraint> velocity;

  std::vector<std::string> names() const;
};

void to_json(nlohmann::json& j, const PendulumConstraints& c);
void from_json(const nlohmann::json& j, PendulumConstraints& c);

struct PendulumTransition {
  Eigen::Vector3d obs;
  double action = 0.0;
  double reward = 0.0;
  Eigen::Vector3d obs_next;
};

/// (theta, theta_dot) recovered from an observation.
Eigen::Vector2d pendulum_state_of(const Eigen::Vector3d& obs);

struct PendulumModifiers {
  PendulumConstraints constraints;
  Mlp upper;       // r_upper(s) before softplus
  double w = 0.0;  // value-constraint multiplier

  /// r~ without the entropy term.
  double reward(const Eigen::Vector3d& obs) const;
  double upper_value(const Eigen::Vector3d& obs) const;
};

struct PendulumAgent {
  Mlp actor;  // obs -> (mean, log_std)
  std::array<Mlp, 2> critics;
  std::array<Mlp, 2> targets;
  PendulumModifiers modifiers;
  double max_torque = 2.0;
  double alpha = 0.0;

  double act(const Eigen::Vector3d& obs) const;
  std::vector<NamedTensor> tensors() const;
  static PendulumAgent from_tensors(const std::vector<NamedTensor>& tensors);
};

/// Builds networks for `hidden`; the critics take [obs; action].
PendulumAgent make_pendulum_agent(const std::vector<int>& hidden, const PendulumConstraints& constraints,
                                  double max_torque, Rng& rng);

/// log of the uniform teacher density over [-max_torque, max_torque].
double pendulum_log_teacher(double max_torque);

struct CriticLoss {
  double loss = 0.0;
  std::array<Vector, 2> grads;
};

/// Twin-critic loss; `xi` holds the standard normal draws for a' ~ pi(s').
CriticLoss pendulum_critic_loss(const PendulumAgent& agent, const std::vector<PendulumTransition>& batch,
                                const Vector& xi, double gamma, double alpha);

/// alpha (log pi - log pi_T) - min_j q_j at reparametrized actions.
double pendulum_actor_loss(const PendulumAgent& agent, const std::vector<PendulumTransition>& batch,
                           const Vector& xi, double alpha, Vector* grad);

struct ModifierGrads {
  Vector upper;
  double w = 0.0;
};

/// Lagrangian reward loss; `density` holds d(s) per batch entry.
double pendulum_reward_loss(const PendulumModifiers& mods, const std::vector<PendulumTransition>& batch,
                            const Vector& density, double gamma, ModifierGrads* grads);

using PendulumObserver = std::function<void(long step, const PendulumAgent& agent)>;

struct PendulumTrainResult {
  PendulumAgent agent;
  TrainMetrics metrics;
};

PendulumTrainResult train_pendulum(const PendulumSpec& spec, const PendulumConstraints& constraints,
                                   const TrainConfig& config, const PendulumObserver& observer = {});

struct PendulumEvaluation {
  std::vector<Eigen::Vector2d> states;  // (theta, theta_dot)
  std::vector<double> returns;
};

/// Deterministic rollouts of `episodes` x `steps` from random initial states.
PendulumEvaluation evaluate_pendulum(const PendulumSpec& spec, const PendulumAgent& agent, int episodes,
                                     int steps, std::uint64_t seed);

}  // namespace dualcrl
