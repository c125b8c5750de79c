#pragma once

#include <json.hpp>

#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dualcrl/lp.hpp"
#include "dualcrl/mdp.hpp"

namespace dualcrl {

/// Entropy regularization towards a teacher policy (not LP-expressible).
struct EntropySpec {
  TabularPolicy teacher;
  double alpha = 1.0;
};

/// E_p[r_k] >= (1 - gamma) V_k for an extra reward signal r_k.
struct ValueConstraint {
  Tensor3 extra_reward;
  double threshold = 0.0;
};

/// lower(s) <= d(s) <= upper(s).
struct StateDensityBound {
  Vector lower;
  Vector upper;
};

/// lower(s,a) <= p(s,a) <= upper(s,a).
struct StateActionDensityBound {
  Matrix lower;
  Matrix upper;
};

/// d(s) lower(s,a) <= p(s,a) <= d(s) upper(s,a), i.e. bounds on pi(a|s).
struct ActionDensityBound {
  Matrix lower;
  Matrix upper;
};

/// p(s,a) E_{s'}[c(s,a,s')] <= 0 with c >= 0.
struct AvgTransitionCost {
  Tensor3 cost;
};

/// p(s,a) tau(s'|s,a) pi(a'|s') c(s,a,s',a') <= 0; policy evaluation form only.
struct ImmediateTransitionCost {
  int num_states = 0;
  int num_actions = 0;
  std::vector<double> cost;  // row-major (s, a, s', a')

  ImmediateTransitionCost() = default;
  ImmediateTransitionCost(int S, int A)
      : num_states(S), num_actions(A), cost(static_cast<std::size_t>(S) * A * S * A, 0.0) {}
  double& operator()(int s, int a, int sn, int an) {
    return cost[((static_cast<std::size_t>(s) * num_actions + a) * num_states + sn) * num_actions + an];
  }
  double operator()(int s, int a, int sn, int an) const {
    return cost[((static_cast<std::size_t>(s) * num_actions + a) * num_states + sn) * num_actions + an];
  }
};

using ConstraintSpec =
    std::variant<EntropySpec, ValueConstraint, StateDensityBound, StateActionDensityBound,
                 ActionDensityBound, AvgTransitionCost, ImmediateTransitionCost>;

/// Short identifier: "entropy", "value", "state_density", "state_action_density",
/// "action_density", "avg_transition_cost", "immediate_transition_cost".
std::string constraint_kind(const ConstraintSpec& spec);

/// Shape and parameter checks against `mdp`; throws std::invalid_argument.
void validate_constraint(const TabularMdp& mdp, const ConstraintSpec& spec);

void to_json(nlohmann::json& j, const ConstraintSpec& spec);
ConstraintSpec constraint_from_json(const nlohmann::json& j);

class UnsupportedConstraint : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InfeasibleConstraints : public std::runtime_error {
 public:
  InfeasibleConstraints(std::string group, const std::string& what)
      : std::runtime_error(what), group_(std::move(group)) {}
  /// Row group that is infeasible on its own, or "combination".
  const std::string& group() const { return group_; }

 private:
  std::string group_;
};

/// Contiguous block of <= rows generated by one constraint.
struct RowGroup {
  std::string name;
  int constraint_index = -1;
  int first_row = 0;
  int num_rows = 0;
  /// Flat (s,a,s',a') index per row; only used by immediate transition costs,
  /// whose all-zero rows are dropped.
  std::vector<std::size_t> entries;
};

/// Occupancy LP plus the bookkeeping needed to read it back.
struct OccupancyLp {
  lp::LinearProgram program;
  int num_states = 0;
  int num_actions = 0;
  std::vector<RowGroup> groups;
  /// True for the policy-evaluation form where only d is a variable.
  bool evaluation_form = false;

  int d_index(int s) const { return s; }
  int p_index(int s, int a) const { return num_states + s * num_actions + a; }
};

/// Dual (occupancy) LP for value learning with the given constraints.
/// Variables are d (free) followed by p >= 0. Equality rows: the S rows
/// sum_a p(s,a) - d(s) = 0 and then the S flow rows
/// d(s) - gamma sum p tau = (1-gamma) iota(s).
OccupancyLp build_vl_dual(const TabularMdp& mdp, const std::vector<ConstraintSpec>& constraints);

/// Policy-evaluation form: p(s,a) = d(s) pi(a|s) substituted, d >= 0 the only
/// variables, equality rows are the flow rows. Accepts ImmediateTransitionCost.
OccupancyLp build_pe_dual(const TabularMdp& mdp, const TabularPolicy& policy,
                          const std::vector<ConstraintSpec>& constraints);

/// Lagrange multipliers of one constraint under their reward-modification names.
struct ConstraintMultipliers {
  std::string kind;
  double w = 0.0;  // value constraint
  Matrix lower;    // S x 1 for state bounds, S x A otherwise
  Matrix upper;
  Matrix cost;                             // avg transition cost, S x A
  std::vector<double> transition_cost;     // immediate transition cost, (s,a,s',a')
};

struct ConstrainedSolution {
  OccupancyMeasure occupancy;
  TabularPolicy policy;
  std::vector<ConstraintMultipliers> multipliers;
  /// Flow-row multipliers v(s) (optimal adjusted values).
  Vector values;
  double objective = 0.0;
  lp::LpSolution lp;
};

/// Solves the constrained value-learning LP. Throws InfeasibleConstraints,
/// UnsupportedConstraint for Entropy / ImmediateTransitionCost.
ConstrainedSolution solve_constrained(const TabularMdp& mdp,
                                      const std::vector<ConstraintSpec>& constraints);

/// Policy-evaluation counterpart. The occupancy is fixed by `policy`; the
/// result reports whether the constraints admit it and the multipliers.
ConstrainedSolution evaluate_constrained(const TabularMdp& mdp, const TabularPolicy& policy,
                                         const std::vector<ConstraintSpec>& constraints);

/// Expected reward modification r~(s,a) implied by the multipliers (S x A).
Matrix reward_modification(const TabularMdp& mdp, const std::vector<ConstraintSpec>& constraints,
                           const std::vector<ConstraintMultipliers>& multipliers);

/// Constant term of the primal objective: -sum w_k (1-gamma) V_k plus the
/// bound products.
double modification_offset(const TabularMdp& mdp, const std::vector<ConstraintSpec>& constraints,
                           const std::vector<ConstraintMultipliers>& multipliers);

ValueFunctions value_iteration(const TabularMdp& mdp, double tol);

/// Uniform over argmax_a q(s,a) within `tie_tol`.
TabularPolicy greedy_policy(const Matrix& q, double tie_tol = 1e-9);

struct SoftSolution {
  ValueFunctions values;
  TabularPolicy policy;
};

SoftSolution soft_value_iteration(const TabularMdp& mdp, const TabularPolicy& teacher, double alpha,
                                  double tol);

/// Average reward minus alpha times the occupancy-weighted KL to the teacher.
double soft_objective(const TabularMdp& mdp, const TabularPolicy& policy,
                      const TabularPolicy& teacher, double alpha);

struct TheoremReport {
  bool passed = false;
  double tol = 0.0;
  double primal_objective = 0.0;
  double dual_objective = 0.0;
  double duality_gap = 0.0;
  double complementary_slackness = 0.0;
  double greedy_violation = 0.0;
  double adjusted_bellman_residual = 0.0;
  double constraint_violation = 0.0;
  int tight_rows = 0;
  std::vector<std::string> failures;
};

void to_json(nlohmann::json& j, const TheoremReport& report);
void from_json(const nlohmann::json& j, TheoremReport& report);

/// Solves and checks duality, complementary slackness, greedy containment
/// w.r.t. the adjusted values and constraint satisfaction.
TheoremReport verify_theorems(const TabularMdp& mdp, const std::vector<ConstraintSpec>& constraints,
                              double tol);

/// Same checks for an already solved instance.
TheoremReport verify_solution(const TabularMdp& mdp, const std::vector<ConstraintSpec>& constraints,
                              const ConstrainedSolution& sol, double tol);

/// Slack below which a row counts as tight.
inline constexpr double kTightSlack = 1e-6;
/// d(s) at or below this is treated as unvisited.
inline constexpr double kVisitedTol = 1e-10;

}  // namespace dualcrl
