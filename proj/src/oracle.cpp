#include "dualcrl/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace dualcrl {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

bool shape_is(const Matrix& m, int rows, int cols) { return m.rows() == rows && m.cols() == cols; }

bool tensor_shape_is(const Tensor3& t, int S, int A) {
  return t.dim0() == S && t.dim1() == A && t.dim2() == S;
}

std::string group_name(const ConstraintSpec& spec, int index) {
  return constraint_kind(spec) + "#" + std::to_string(index);
}

lp::Vector zero_row(int n) { return lp::Vector::Zero(n); }

// Rows of one constraint in the value-learning LP (variables d then p).
void append_vl_rows(const TabularMdp& mdp, const ConstraintSpec& spec, int index, OccupancyLp& out) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  const double g = mdp.discount();
  lp::LinearProgram& prob = out.program;
  const int n = prob.num_vars();
  RowGroup group{group_name(spec, index), index, prob.num_ub(), 0, {}};
  std::visit(
      overloaded{
          [&](const EntropySpec&) {
            throw UnsupportedConstraint(
                "entropy regularization is not expressible as a linear program; use "
                "soft_value_iteration");
          },
          [&](const ImmediateTransitionCost&) {
            throw UnsupportedConstraint(
                "immediate transition costs are only supported in the policy-evaluation form");
          },
          [&](const ValueConstraint& c) {
            const Matrix rk = mdp.expected(c.extra_reward);
            lp::Vector row = zero_row(n);
            for (int s = 0; s < S; ++s)
              for (int a = 0; a < A; ++a) row(out.p_index(s, a)) = -rk(s, a);
            prob.add_ub(row, -(1.0 - g) * c.threshold);
          },
          [&](const StateDensityBound& c) {
            for (int s = 0; s < S; ++s) {
              lp::Vector row = zero_row(n);
              row(out.d_index(s)) = -1.0;
              prob.add_ub(row, -c.lower(s));
            }
            for (int s = 0; s < S; ++s) {
              lp::Vector row = zero_row(n);
              row(out.d_index(s)) = 1.0;
              prob.add_ub(row, c.upper(s));
            }
          },
          [&](const StateActionDensityBound& c) {
            for (int s = 0; s < S; ++s)
              for (int a = 0; a < A; ++a) {
                lp::Vector row = zero_row(n);
                row(out.p_index(s, a)) = -1.0;
                prob.add_ub(row, -c.lower(s, a));
              }
            for (int s = 0; s < S; ++s)
              for (int a = 0; a < A; ++a) {
                lp::Vector row = zero_row(n);
                row(out.p_index(s, a)) = 1.0;
                prob.add_ub(row, c.upper(s, a));
              }
          },
          [&](const ActionDensityBound& c) {
            for (int s = 0; s < S; ++s)
              for (int a = 0; a < A; ++a) {
                lp::Vector row = zero_row(n);
                row(out.d_index(s)) = c.lower(s, a);
                row(out.p_index(s, a)) = -1.0;
                prob.add_ub(row, 0.0);
              }
            for (int s = 0; s < S; ++s)
              for (int a = 0; a < A; ++a) {
                lp::Vector row = zero_row(n);
                row(out.d_index(s)) = -c.upper(s, a);
                row(out.p_index(s, a)) = 1.0;
                prob.add_ub(row, 0.0);
              }
          },
          [&](const AvgTransitionCost& c) {
            const Matrix cbar = mdp.expected(c.cost);
            for (int s = 0; s < S; ++s)
              for (int a = 0; a < A; ++a) {
                lp::Vector row = zero_row(n);
                row(out.p_index(s, a)) = cbar(s, a);
                prob.add_ub(row, 0.0);
              }
          }},
      spec);
  group.num_rows = prob.num_ub() - group.first_row;
  out.groups.push_back(group);
}

// Re-solves each constraint alone to name the one responsible for infeasibility.
[[noreturn]] void raise_infeasible(const std::vector<ConstraintSpec>& constraints,
                                   const std::function<lp::Status(const std::vector<ConstraintSpec>&)>& status_of) {
  for (std::size_t i = 0; i < constraints.size(); ++i) {
    if (std::holds_alternative<EntropySpec>(constraints[i])) continue;
    if (status_of({constraints[i]}) == lp::Status::Infeasible) {
      const std::string name = group_name(constraints[i], static_cast<int>(i));
      throw InfeasibleConstraints(name, "constraints are infeasible: " + name);
    }
  }
  throw InfeasibleConstraints("combination", "constraints are jointly infeasible");
}

std::vector<ConstraintMultipliers> map_multipliers(const TabularMdp& mdp,
                                                   const std::vector<ConstraintSpec>& constraints,
                                                   const OccupancyLp& olp, const lp::Vector& mu) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  std::vector<ConstraintMultipliers> out(constraints.size());
  for (std::size_t i = 0; i < constraints.size(); ++i) out[i].kind = constraint_kind(constraints[i]);
  for (const RowGroup& grp : olp.groups) {
    ConstraintMultipliers& m = out[grp.constraint_index];
    const double* u = mu.data() + grp.first_row;
    std::visit(overloaded{[&](const EntropySpec&) {},
                          [&](const ValueConstraint&) { m.w = u[0]; },
                          [&](const StateDensityBound&) {
                            m.lower = Eigen::Map<const Vector>(u, S);
                            m.upper = Eigen::Map<const Vector>(u + S, S);
                          },
                          [&](const StateActionDensityBound&) {
                            m.lower = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(u, S, A);
                            m.upper = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(u + S * A, S, A);
                          },
                          [&](const ActionDensityBound&) {
                            m.lower = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(u, S, A);
                            m.upper = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(u + S * A, S, A);
                          },
                          [&](const AvgTransitionCost&) {
                            m.cost = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(u, S, A);
                          },
                          [&](const ImmediateTransitionCost& c) {
                            m.transition_cost.assign(c.cost.size(), 0.0);
                            for (int r = 0; r < grp.num_rows; ++r) m.transition_cost[grp.entries[r]] = u[r];
                          }},
               constraints[grp.constraint_index]);
  }
  return out;
}

TabularPolicy policy_from_occupancy(const Vector& d, const Matrix& p) {
  const int S = static_cast<int>(p.rows()), A = static_cast<int>(p.cols());
  TabularPolicy pi{Matrix::Constant(S, A, 1.0 / A)};
  for (int s = 0; s < S; ++s) {
    if (d(s) <= kVisitedTol) continue;
    Eigen::RowVectorXd row = p.row(s).cwiseMax(0.0);
    const double total = row.sum();
    if (total <= 0.0) continue;
    pi.probs.row(s) = row / total;
  }
  return pi;
}

// Occupancy as an LP variable vector in the value-learning layout.
lp::Vector occupancy_vector(const OccupancyLp& olp, const OccupancyMeasure& occ) {
  lp::Vector x(olp.program.num_vars());
  for (int s = 0; s < olp.num_states; ++s) {
    x(olp.d_index(s)) = occ.d(s);
    for (int a = 0; a < olp.num_actions; ++a) x(olp.p_index(s, a)) = occ.p(s, a);
  }
  return x;
}

}  // namespace

std::string constraint_kind(const ConstraintSpec& spec) {
  return std::visit(overloaded{[](const EntropySpec&) { return std::string("entropy"); },
                               [](const ValueConstraint&) { return std::string("value"); },
                               [](const StateDensityBound&) { return std::string("state_density"); },
                               [](const StateActionDensityBound&) {
                                 return std::string("state_action_density");
                               },
                               [](const ActionDensityBound&) { return std::string("action_density"); },
                               [](const AvgTransitionCost&) { return std::string("avg_transition_cost"); },
                               [](const ImmediateTransitionCost&) {
                                 return std::string("immediate_transition_cost");
                               }},
                    spec);
}

void validate_constraint(const TabularMdp& mdp, const ConstraintSpec& spec) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  constexpr double tol = 1e-12;
  std::visit(
      overloaded{
          [&](const EntropySpec& c) {
            require(shape_is(c.teacher.probs, S, A), "entropy: teacher must be S x A");
            c.teacher.validate();
            require((c.teacher.probs.array() > 0.0).all(), "entropy: teacher must be strictly positive");
            require(c.alpha > 0.0, "entropy: alpha must be positive");
          },
          [&](const ValueConstraint& c) {
            require(tensor_shape_is(c.extra_reward, S, A), "value: extra reward must be S x A x S");
            require(std::isfinite(c.threshold), "value: threshold must be finite");
          },
          [&](const StateDensityBound& c) {
            require(c.lower.size() == S && c.upper.size() == S, "state_density: bounds must have length S");
            require((c.lower.array() >= 0.0).all() && (c.lower.array() <= c.upper.array()).all(),
                    "state_density: need 0 <= lower <= upper");
            require(c.lower.sum() <= 1.0 + tol && c.upper.sum() >= 1.0 - tol,
                    "state_density: need sum(lower) <= 1 <= sum(upper)");
          },
          [&](const StateActionDensityBound& c) {
            require(shape_is(c.lower, S, A) && shape_is(c.upper, S, A),
                    "state_action_density: bounds must be S x A");
            require((c.lower.array() >= 0.0).all() && (c.lower.array() <= c.upper.array()).all(),
                    "state_action_density: need 0 <= lower <= upper");
            require(c.lower.sum() <= 1.0 + tol && c.upper.sum() >= 1.0 - tol,
                    "state_action_density: need sum(lower) <= 1 <= sum(upper)");
          },
          [&](const ActionDensityBound& c) {
            require(shape_is(c.lower, S, A) && shape_is(c.upper, S, A), "action_density: bounds must be S x A");
            require((c.lower.array() >= 0.0).all() && (c.lower.array() <= c.upper.array()).all(),
                    "action_density: need 0 <= lower <= upper");
            for (int s = 0; s < S; ++s)
              require(c.lower.row(s).sum() <= 1.0 + tol && c.upper.row(s).sum() >= 1.0 - tol,
                      "action_density: need sum_a lower <= 1 <= sum_a upper in state " + std::to_string(s));
          },
          [&](const AvgTransitionCost& c) {
            require(tensor_shape_is(c.cost, S, A), "avg_transition_cost: cost must be S x A x S");
            for (double x : c.cost.data()) require(x >= 0.0, "avg_transition_cost: cost must be >= 0");
          },
          [&](const ImmediateTransitionCost& c) {
            require(c.num_states == S && c.num_actions == A &&
                        c.cost.size() == static_cast<std::size_t>(S) * A * S * A,
                    "immediate_transition_cost: cost must be S x A x S x A");
            for (double x : c.cost) require(x >= 0.0, "immediate_transition_cost: cost must be >= 0");
          }},
      spec);
}

OccupancyLp build_vl_dual(const TabularMdp& mdp, const std::vector<ConstraintSpec>& constraints) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  const double g = mdp.discount();
  for (const auto& c : constraints) {
    if (std::holds_alternative<EntropySpec>(c))
      throw UnsupportedConstraint(
          "entropy regularization is not expressible as a linear program; use soft_value_iteration");
    if (std::holds_alternative<ImmediateTransitionCost>(c))
      throw UnsupportedConstraint(
          "immediate transition costs are only supported in the policy-evaluation form");
    validate_constraint(mdp, c);
  }
  OccupancyLp out;
  out.num_states = S;
  out.num_actions = A;
  const int n = S + S * A;
  lp::LinearProgram& prob = out.program;
  prob = lp::LinearProgram::with_vars(n);
  prob.names.resize(n);
  const Matrix rbar = mdp.expected_reward();
  for (int s = 0; s < S; ++s) {
    prob.lower_bounds(out.d_index(s)) = -kInf;
    prob.names[out.d_index(s)] = "d[" + std::to_string(s) + "]";
    for (int a = 0; a < A; ++a) {
      prob.objective(out.p_index(s, a)) = rbar(s, a);
      prob.names[out.p_index(s, a)] = "p[" + std::to_string(s) + "," + std::to_string(a) + "]";
    }
  }
  for (int s = 0; s < S; ++s) {
    lp::Vector row = zero_row(n);
    for (int a = 0; a < A; ++a) row(out.p_index(s, a)) = 1.0;
    row(out.d_index(s)) = -1.0;
    prob.add_eq(row, 0.0);
  }
  for (int s = 0; s < S; ++s) {
    lp::Vector row = zero_row(n);
    row(out.d_index(s)) = 1.0;
    for (int sp = 0; sp < S; ++sp)
      for (int a = 0; a < A; ++a) row(out.p_index(sp, a)) -= g * mdp.tau(sp, a, s);
    prob.add_eq(row, (1.0 - g) * mdp.initial_dist()(s));
  }
  prob.ub_matrix.resize(0, n);
  for (std::size_t i = 0; i < constraints.size(); ++i)
    append_vl_rows(mdp, constraints[i], static_cast<int>(i), out);
  return out;
}

OccupancyLp build_pe_dual(const TabularMdp& mdp, const TabularPolicy& policy,
                          const std::vector<ConstraintSpec>& constraints) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  require(shape_is(policy.probs, S, A), "policy shape does not match MDP");
  policy.validate();
  std::vector<ConstraintSpec> linear;
  std::vector<int> linear_index;
  for (std::size_t i = 0; i < constraints.size(); ++i) {
    if (std::holds_alternative<EntropySpec>(constraints[i]))
      throw UnsupportedConstraint("entropy regularization is not expressible as a linear program");
    validate_constraint(mdp, constraints[i]);
    if (!std::holds_alternative<ImmediateTransitionCost>(constraints[i])) {
      linear.push_back(constraints[i]);
      linear_index.push_back(static_cast<int>(i));
    }
  }
  const OccupancyLp vl = build_vl_dual(mdp, linear);
  // x_vl = M d with p(s,a) = pi(a|s) d(s)
  lp::Matrix M = lp::Matrix::Zero(vl.program.num_vars(), S);
  for (int s = 0; s < S; ++s) {
    M(vl.d_index(s), s) = 1.0;
    for (int a = 0; a < A; ++a) M(vl.p_index(s, a), s) = policy.probs(s, a);
  }
  OccupancyLp out;
  out.num_states = S;
  out.num_actions = A;
  out.evaluation_form = true;
  lp::LinearProgram& prob = out.program;
  prob = lp::LinearProgram::with_vars(S);
  prob.objective = M.transpose() * vl.program.objective;
  prob.eq_matrix = vl.program.eq_matrix.bottomRows(S) * M;
  prob.eq_rhs = vl.program.eq_rhs.tail(S);
  prob.ub_matrix = vl.program.ub_matrix * M;
  prob.ub_rhs = vl.program.ub_rhs;
  for (int s = 0; s < S; ++s) prob.names.push_back("d[" + std::to_string(s) + "]");
  for (RowGroup grp : vl.groups) {
    grp.constraint_index = linear_index[grp.constraint_index];
    grp.name = group_name(constraints[grp.constraint_index], grp.constraint_index);
    out.groups.push_back(grp);
  }
  for (std::size_t i = 0; i < constraints.size(); ++i) {
    const auto* itc = std::get_if<ImmediateTransitionCost>(&constraints[i]);
    if (!itc) continue;
    RowGroup grp{group_name(constraints[i], static_cast<int>(i)), static_cast<int>(i), prob.num_ub(), 0, {}};
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a)
        for (int sn = 0; sn < S; ++sn)
          for (int an = 0; an < A; ++an) {
            const double coef = policy.probs(s, a) * mdp.tau(s, a, sn) * policy.probs(sn, an) * (*itc)(s, a, sn, an);
            if (coef == 0.0) continue;
            lp::Vector row = zero_row(S);
            row(s) = coef;
            prob.add_ub(row, 0.0);
            grp.entries.push_back(((static_cast<std::size_t>(s) * A + a) * S + sn) * A + an);
          }
    grp.num_rows = prob.num_ub() - grp.first_row;
    out.groups.push_back(std::move(grp));
  }
  return out;
}

ConstrainedSolution solve_constrained(const TabularMdp& mdp,
                                      const std::vector<ConstraintSpec>& constraints) {
  const OccupancyLp olp = build_vl_dual(mdp, constraints);
  lp::LpSolution sol = lp::solve(olp.program);
  if (sol.status == lp::Status::Infeasible)
    raise_infeasible(constraints, [&](const std::vector<ConstraintSpec>& only) {
      return lp::solve(build_vl_dual(mdp, only).program).status;
    });
  if (sol.status == lp::Status::Unbounded)
    throw std::runtime_error("occupancy LP reported unbounded; the MDP data is inconsistent");
  const int S = mdp.num_states(), A = mdp.num_actions();
  ConstrainedSolution out;
  out.occupancy.d = sol.x.head(S);
  out.occupancy.p = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(sol.x.data() + S, S, A);
  out.policy = policy_from_occupancy(out.occupancy.d, out.occupancy.p);
  out.multipliers = map_multipliers(mdp, constraints, olp, sol.ub_duals);
  out.values = sol.eq_duals.tail(S);
  out.objective = sol.objective_value;
  out.lp = std::move(sol);
  return out;
}

ConstrainedSolution evaluate_constrained(const TabularMdp& mdp, const TabularPolicy& policy,
                                         const std::vector<ConstraintSpec>& constraints) {
  const OccupancyLp olp = build_pe_dual(mdp, policy, constraints);
  lp::LpSolution sol = lp::solve(olp.program);
  if (sol.status == lp::Status::Infeasible)
    raise_infeasible(constraints, [&](const std::vector<ConstraintSpec>& only) {
      return lp::solve(build_pe_dual(mdp, policy, only).program).status;
    });
  if (sol.status == lp::Status::Unbounded)
    throw std::runtime_error("occupancy LP reported unbounded; the MDP data is inconsistent");
  ConstrainedSolution out;
  out.occupancy.d = sol.x;
  out.occupancy.p = sol.x.asDiagonal() * policy.probs;
  out.policy = policy;
  out.multipliers = map_multipliers(mdp, constraints, olp, sol.ub_duals);
  out.values = sol.eq_duals;
  out.objective = sol.objective_value;
  out.lp = std::move(sol);
  return out;
}

Matrix reward_modification(const TabularMdp& mdp, const std::vector<ConstraintSpec>& constraints,
                           const std::vector<ConstraintMultipliers>& multipliers) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  require(multipliers.size() == constraints.size(), "one multiplier set per constraint expected");
  Matrix mod = Matrix::Zero(S, A);
  for (std::size_t i = 0; i < constraints.size(); ++i) {
    const ConstraintMultipliers& m = multipliers[i];
    std::visit(
        overloaded{
            [&](const EntropySpec&) {
              throw UnsupportedConstraint("entropy modification depends on the policy");
            },
            [&](const ImmediateTransitionCost&) {
              throw UnsupportedConstraint("immediate transition cost modification depends on the policy");
            },
            [&](const ValueConstraint& c) { mod += m.w * mdp.expected(c.extra_reward); },
            [&](const StateDensityBound&) { mod.colwise() += m.lower.col(0) - m.upper.col(0); },
            [&](const StateActionDensityBound&) { mod += m.lower - m.upper; },
            [&](const ActionDensityBound& c) {
              const Vector lo = (m.lower.array() * c.lower.array()).rowwise().sum();
              const Vector hi = (m.upper.array() * c.upper.array()).rowwise().sum();
              mod += m.lower - m.upper;
              mod.colwise() += hi - lo;
            },
            [&](const AvgTransitionCost& c) { mod -= (m.cost.array() * mdp.expected(c.cost).array()).matrix(); }},
        constraints[i]);
  }
  return mod;
}

double modification_offset(const TabularMdp& mdp, const std::vector<ConstraintSpec>& constraints,
                           const std::vector<ConstraintMultipliers>& multipliers) {
  const double g = mdp.discount();
  double off = 0.0;
  for (std::size_t i = 0; i < constraints.size(); ++i) {
    const ConstraintMultipliers& m = multipliers[i];
    std::visit(overloaded{[&](const ValueConstraint& c) { off -= m.w * (1.0 - g) * c.threshold; },
                          [&](const StateDensityBound& c) {
                            off += -m.lower.col(0).dot(c.lower) + m.upper.col(0).dot(c.upper);
                          },
                          [&](const StateActionDensityBound& c) {
                            off += -(m.lower.array() * c.lower.array()).sum() +
                                   (m.upper.array() * c.upper.array()).sum();
                          },
                          [&](const auto&) {}},
               constraints[i]);
  }
  return off;
}

ValueFunctions value_iteration(const TabularMdp& mdp, double tol) {
  require(tol > 0.0, "value_iteration: tol must be positive");
  const int S = mdp.num_states(), A = mdp.num_actions();
  const double g = mdp.discount();
  const Matrix rbar = mdp.expected_reward();
  auto backup = [&](const Vector& v) {
    Matrix q = rbar;
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a) {
        const double* t = mdp.transition().slice(s, a);
        double acc = 0.0;
        for (int sn = 0; sn < S; ++sn) acc += t[sn] * v(sn);
        q(s, a) += g * acc;
      }
    return q;
  };
  ValueFunctions vf;
  vf.v = Vector::Zero(S);
  vf.q = backup(vf.v);
  for (;;) {
    const Vector next = vf.q.rowwise().maxCoeff();
    const double change = (next - vf.v).cwiseAbs().maxCoeff();
    vf.v = next;
    vf.q = backup(vf.v);
    if (change <= tol) break;
  }
  // Exact evaluation of the greedy policy removes the geometric tail when it
  // is already optimal.
  const ValueFunctions exact = policy_value(mdp, greedy_policy(vf.q));
  if (bellman_optimality_residual(mdp, exact) <= bellman_optimality_residual(mdp, vf)) return exact;
  return vf;
}

TabularPolicy greedy_policy(const Matrix& q, double tie_tol) {
  const int S = static_cast<int>(q.rows()), A = static_cast<int>(q.cols());
  TabularPolicy pi{Matrix::Zero(S, A)};
  for (int s = 0; s < S; ++s) {
    const double best = q.row(s).maxCoeff();
    int count = 0;
    for (int a = 0; a < A; ++a)
      if (q(s, a) >= best - tie_tol) ++count;
    for (int a = 0; a < A; ++a)
      if (q(s, a) >= best - tie_tol) pi.probs(s, a) = 1.0 / count;
  }
  return pi;
}

SoftSolution soft_value_iteration(const TabularMdp& mdp, const TabularPolicy& teacher, double alpha,
                                  double tol) {
  require(alpha > 0.0, "soft_value_iteration: alpha must be positive");
  require(tol > 0.0, "soft_value_iteration: tol must be positive");
  const int S = mdp.num_states(), A = mdp.num_actions();
  require(shape_is(teacher.probs, S, A), "soft_value_iteration: teacher must be S x A");
  require((teacher.probs.array() > 0.0).all(), "soft_value_iteration: teacher must be strictly positive");
  const double g = mdp.discount();
  const Matrix rbar = mdp.expected_reward();
  const Matrix log_teacher = teacher.probs.array().log().matrix();
  auto backup = [&](const Vector& v) {
    Matrix q = rbar;
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a) {
        const double* t = mdp.transition().slice(s, a);
        double acc = 0.0;
        for (int sn = 0; sn < S; ++sn) acc += t[sn] * v(sn);
        q(s, a) += g * acc;
      }
    return q;
  };
  // alpha log sum_a pi_T exp(q / alpha), shifted by the row maximum
  auto soft_max = [&](const Matrix& q) {
    Vector v(S);
    for (int s = 0; s < S; ++s) {
      const Eigen::RowVectorXd z = q.row(s) / alpha + log_teacher.row(s);
      const double m = z.maxCoeff();
      v(s) = alpha * (m + std::log((z.array() - m).exp().sum()));
    }
    return v;
  };
  SoftSolution out;
  Vector v = Vector::Zero(S);
  Matrix q = backup(v);
  for (;;) {
    const Vector next = soft_max(q);
    const double change = (next - v).cwiseAbs().maxCoeff();
    v = next;
    q = backup(v);
    if (change <= tol) break;
  }
  out.values.v = v;
  out.values.q = q;
  out.policy.probs.resize(S, A);
  for (int s = 0; s < S; ++s) {
    const Eigen::RowVectorXd z = q.row(s) / alpha + log_teacher.row(s);
    const Eigen::RowVectorXd e = (z.array() - z.maxCoeff()).exp();
    out.policy.probs.row(s) = e / e.sum();
  }
  return out;
}

double soft_objective(const TabularMdp& mdp, const TabularPolicy& policy, const TabularPolicy& teacher,
                      double alpha) {
  const OccupancyMeasure occ = state_visitation(mdp, policy);
  double value = (occ.p.array() * mdp.expected_reward().array()).sum();
  for (int s = 0; s < mdp.num_states(); ++s) {
    double kl = 0.0;
    for (int a = 0; a < mdp.num_actions(); ++a) {
      const double pa = policy.probs(s, a);
      if (pa > 0.0) kl += pa * std::log(pa / teacher.probs(s, a));
    }
    value -= alpha * occ.d(s) * kl;
  }
  return value;
}

void to_json(nlohmann::json& j, const TheoremReport& r) {
  j = nlohmann::json{{"passed", r.passed},
                     {"tol", r.tol},
                     {"primal_objective", r.primal_objective},
                     {"dual_objective", r.dual_objective},
                     {"duality_gap", r.duality_gap},
                     {"complementary_slackness", r.complementary_slackness},
                     {"greedy_violation", r.greedy_violation},
                     {"adjusted_bellman_residual", r.adjusted_bellman_residual},
                     {"constraint_violation", r.constraint_violation},
                     {"tight_rows", r.tight_rows},
                     {"failures", r.failures}};
}

void from_json(const nlohmann::json& j, TheoremReport& r) {
  j.at("passed").get_to(r.passed);
  j.at("tol").get_to(r.tol);
  j.at("primal_objective").get_to(r.primal_objective);
  j.at("dual_objective").get_to(r.dual_objective);
  j.at("duality_gap").get_to(r.duality_gap);
  j.at("complementary_slackness").get_to(r.complementary_slackness);
  j.at("greedy_violation").get_to(r.greedy_violation);
  j.at("adjusted_bellman_residual").get_to(r.adjusted_bellman_residual);
  j.at("constraint_violation").get_to(r.constraint_violation);
  j.at("tight_rows").get_to(r.tight_rows);
  j.at("failures").get_to(r.failures);
}

TheoremReport verify_solution(const TabularMdp& mdp, const std::vector<ConstraintSpec>& constraints,
                              const ConstrainedSolution& sol, double tol) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  const double g = mdp.discount();
  TheoremReport rep;
  rep.tol = tol;

  // (a) strong duality through the adjusted value function of the extracted policy
  const Matrix mod = reward_modification(mdp, constraints, sol.multipliers);
  Tensor3 adjusted = mdp.reward();
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a)
      for (int sn = 0; sn < S; ++sn) adjusted(s, a, sn) += mod(s, a);
  const TabularMdp adjusted_mdp = mdp.with_reward(std::move(adjusted));
  const ValueFunctions adj = policy_value(adjusted_mdp, sol.policy);
  rep.primal_objective =
      (1.0 - g) * mdp.initial_dist().dot(adj.v) + modification_offset(mdp, constraints, sol.multipliers);
  rep.dual_objective = sol.objective;
  rep.duality_gap = std::max(std::abs(rep.primal_objective - rep.dual_objective),
                             std::abs(sol.lp.dual_objective - sol.lp.objective_value));

  // (b) complementary slackness: slack rows carry no multiplier
  const OccupancyLp olp = build_vl_dual(mdp, constraints);
  const lp::Vector slack = olp.program.ub_rhs - olp.program.ub_matrix * sol.lp.x;
  for (int i = 0; i < olp.program.num_ub(); ++i) {
    const double mu = sol.lp.ub_duals(i);
    rep.complementary_slackness = std::max(rep.complementary_slackness, -mu);
    if (slack(i) > kTightSlack)
      rep.complementary_slackness = std::max(rep.complementary_slackness, std::abs(mu));
    else
      ++rep.tight_rows;
  }

  // (c) greedy containment on visited states
  const Vector& d = sol.occupancy.d;
  for (int s = 0; s < S; ++s) {
    if (d(s) <= kVisitedTol) continue;
    const double best = adj.q.row(s).maxCoeff();
    for (int a = 0; a < A; ++a)
      if (sol.policy.probs(s, a) > tol) rep.greedy_violation = std::max(rep.greedy_violation, best - adj.q(s, a));
  }
  const Matrix rbar = mdp.expected_reward();
  for (int s = 0; s < S; ++s) {
    if (d(s) <= kVisitedTol) continue;
    double best = -kInf;
    for (int a = 0; a < A; ++a) {
      const double* t = mdp.transition().slice(s, a);
      double acc = 0.0;
      for (int sn = 0; sn < S; ++sn) acc += t[sn] * sol.values(sn);
      best = std::max(best, rbar(s, a) + mod(s, a) + g * acc);
    }
    rep.adjusted_bellman_residual = std::max(rep.adjusted_bellman_residual, std::abs(sol.values(s) - best));
  }

  // (d) constraints on the occupancy actually induced by the extracted policy
  const OccupancyMeasure occ = state_visitation(mdp, sol.policy);
  const lp::Vector x = occupancy_vector(olp, occ);
  if (olp.program.num_ub() > 0)
    rep.constraint_violation =
        std::max(0.0, (olp.program.ub_matrix * x - olp.program.ub_rhs).maxCoeff());
  rep.constraint_violation = std::max(rep.constraint_violation, occupancy_flow_residual(mdp, sol.occupancy));
  rep.constraint_violation = std::max(rep.constraint_violation, (occ.p - sol.occupancy.p).cwiseAbs().maxCoeff());

  auto check = [&](const char* name, double value) {
    if (!(value <= tol)) rep.failures.push_back(std::string(name) + "=" + std::to_string(value));
  };
  check("duality_gap", rep.duality_gap);
  check("complementary_slackness", rep.complementary_slackness);
  check("greedy_violation", rep.greedy_violation);
  check("adjusted_bellman_residual", rep.adjusted_bellman_residual);
  check("constraint_violation", rep.constraint_violation);
  rep.passed = rep.failures.empty();
  return rep;
}

TheoremReport verify_theorems(const TabularMdp& mdp, const std::vector<ConstraintSpec>& constraints,
                              double tol) {
  return verify_solution(mdp, constraints, solve_constrained(mdp, constraints), tol);
}

// JSON

namespace {

nlohmann::json tensor_json(const Tensor3& t) {
  nlohmann::json out = nlohmann::json::array();
  for (int i = 0; i < t.dim0(); ++i) {
    nlohmann::json rows = nlohmann::json::array();
    for (int k = 0; k < t.dim1(); ++k) rows.push_back(std::vector<double>(t.slice(i, k), t.slice(i, k) + t.dim2()));
    out.push_back(std::move(rows));
  }
  return out;
}

Tensor3 tensor_from(const nlohmann::json& j) {
  const int n0 = static_cast<int>(j.size());
  const int n1 = n0 ? static_cast<int>(j[0].size()) : 0;
  const int n2 = n1 ? static_cast<int>(j[0][0].size()) : 0;
  Tensor3 t(n0, n1, n2);
  for (int i = 0; i < n0; ++i) {
    require(static_cast<int>(j[i].size()) == n1, "ragged tensor in constraint");
    for (int k = 0; k < n1; ++k) {
      const auto row = j[i][k].get<std::vector<double>>();
      require(static_cast<int>(row.size()) == n2, "ragged tensor in constraint");
      std::copy(row.begin(), row.end(), &t(i, k, 0));
    }
  }
  return t;
}

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json out = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (int k = 0; k < m.cols(); ++k) row[k] = m(i, k);
    out.push_back(row);
  }
  return out;
}

Matrix matrix_from(const nlohmann::json& j) {
  const int rows = static_cast<int>(j.size());
  const int cols = rows ? static_cast<int>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    const auto row = j[i].get<std::vector<double>>();
    require(static_cast<int>(row.size()) == cols, "ragged matrix in constraint");
    for (int k = 0; k < cols; ++k) m(i, k) = row[k];
  }
  return m;
}

nlohmann::json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from(const nlohmann::json& j) {
  const auto xs = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}

}  // namespace

void to_json(nlohmann::json& j, const ConstraintSpec& spec) {
  j = nlohmann::json{{"type", constraint_kind(spec)}};
  std::visit(overloaded{[&](const EntropySpec& c) {
                          j["teacher"] = matrix_json(c.teacher.probs);
                          j["alpha"] = c.alpha;
                        },
                        [&](const ValueConstraint& c) {
                          j["extra_reward"] = tensor_json(c.extra_reward);
                          j["threshold"] = c.threshold;
                        },
                        [&](const StateDensityBound& c) {
                          j["lower"] = vector_json(c.lower);
                          j["upper"] = vector_json(c.upper);
                        },
                        [&](const StateActionDensityBound& c) {
                          j["lower"] = matrix_json(c.lower);
                          j["upper"] = matrix_json(c.upper);
                        },
                        [&](const ActionDensityBound& c) {
                          j["lower"] = matrix_json(c.lower);
                          j["upper"] = matrix_json(c.upper);
                        },
                        [&](const AvgTransitionCost& c) { j["cost"] = tensor_json(c.cost); },
                        [&](const ImmediateTransitionCost& c) {
                          j["num_states"] = c.num_states;
                          j["num_actions"] = c.num_actions;
                          j["cost"] = c.cost;
                        }},
             spec);
}

ConstraintSpec constraint_from_json(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "entropy") return EntropySpec{{matrix_from(j.at("teacher"))}, j.at("alpha").get<double>()};
  if (type == "value") return ValueConstraint{tensor_from(j.at("extra_reward")), j.at("threshold").get<double>()};
  if (type == "state_density") return StateDensityBound{vector_from(j.at("lower")), vector_from(j.at("upper"))};
  if (type == "state_action_density")
    return StateActionDensityBound{matrix_from(j.at("lower")), matrix_from(j.at("upper"))};
  if (type == "action_density") return ActionDensityBound{matrix_from(j.at("lower")), matrix_from(j.at("upper"))};
  if (type == "avg_transition_cost") return AvgTransitionCost{tensor_from(j.at("cost"))};
  if (type == "immediate_transition_cost") {
    ImmediateTransitionCost c(j.at("num_states").get<int>(), j.at("num_actions").get<int>());
    const auto cost = j.at("cost").get<std::vector<double>>();
    require(cost.size() == c.cost.size(), "immediate_transition_cost: wrong cost length");
    c.cost = cost;
    return c;
  }
  throw std::invalid_argument("unknown constraint type '" + type + "'");
}

}  // namespace dualcrl
