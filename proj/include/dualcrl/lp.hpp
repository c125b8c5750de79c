#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace dualcrl::lp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// maximize c^T x  s.t.  A x = b,  G x <= h,  x >= l  (l_j may be -inf).
struct LinearProgram {
  Vector objective;
  Matrix eq_matrix;
  Vector eq_rhs;
  Matrix ub_matrix;
  Vector ub_rhs;
  Vector lower_bounds;
  std::vector<std::string> names;

  int num_vars() const { return static_cast<int>(objective.size()); }
  int num_eq() const { return static_cast<int>(eq_rhs.size()); }
  int num_ub() const { return static_cast<int>(ub_rhs.size()); }

  /// Creates an LP over `n` variables with no rows and x >= 0.
  static LinearProgram with_vars(int n);
  /// Appends rows; returns the index of the first appended row.
  int add_eq(const Vector& row, double rhs);
  int add_ub(const Vector& row, double rhs);

  /// Throws std::invalid_argument on inconsistent dimensions.
  void validate() const;
};

enum class Status { Optimal, Infeasible, Unbounded };

const char* to_string(Status status);

/// Solver output. Multipliers follow the Lagrangian
///   L = c^T x - y^T (A x - b) - mu^T (G x - h) + nu^T (x - l),
/// so at an optimum c = A^T y + G^T mu - nu with mu, nu >= 0.
struct LpSolution {
  Status status = Status::Infeasible;
  Vector x;
  Vector eq_duals;
  Vector ub_duals;
  Vector bound_duals;
  double objective_value = 0.0;
  /// b^T y + h^T mu - l^T nu over finite bounds.
  double dual_objective = 0.0;
  int pivots = 0;
};

struct SolverOptions {
  double pivot_tol = 1e-10;
  double optimality_tol = 1e-10;
  double feasibility_tol = 1e-9;
  int max_pivots = 200000;
};

/// Two-phase dense tableau simplex with Bland's rule.
LpSolution solve(const LinearProgram& lp, const SolverOptions& options = {});

struct KktReport {
  double stationarity = 0.0;
  double primal_feasibility = 0.0;
  double dual_feasibility = 0.0;
  double complementary_slackness = 0.0;

  double worst() const;
  bool passed(double tol) const { return worst() <= tol; }
};

/// Violation of each KKT block for (x, y, mu, nu) taken from `sol`.
/// Stationarity measures |c - A^T y - G^T mu + nu| including the implicit
/// zero multiplier of free variables.
KktReport check_kkt(const LinearProgram& lp, const LpSolution& sol);

}  // namespace dualcrl::lp
