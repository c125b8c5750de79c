#include "dualcrl/lp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dualcrl::lp {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kInf = std::numeric_limits<double>::infinity();

// Standard-form column: which original variable it represents and with which sign.
struct Column {
  enum Kind { Shifted, Positive, Negative, Slack, Artificial } kind;
  int index;  // variable for Shifted/Positive/Negative, row for Slack/Artificial
};

// Dense tableau over the standard form  M u = rhs, u >= 0.
class Tableau {
 public:
  Tableau(RowMatrix body, Vector rhs, std::vector<int> basis, const SolverOptions& opts)
      : t_(body.rows() + 1, body.cols() + 1), basis_(std::move(basis)), opts_(opts) {
    const auto m = body.rows(), n = body.cols();
    t_.topLeftCorner(m, n) = body;
    t_.topRightCorner(m, 1) = rhs;
    t_.row(m).setZero();
  }

  int rows() const { return static_cast<int>(t_.rows()) - 1; }
  int cols() const { return static_cast<int>(t_.cols()) - 1; }
  const std::vector<int>& basis() const { return basis_; }
  int pivots() const { return pivots_; }
  double value() const { return -t_(rows(), cols()); }
  double entry(int i, int j) const { return t_(i, j); }

  // Installs cost vector (minimization) and prices out the current basis.
  void set_costs(const Vector& cost) {
    const int m = rows(), n = cols();
    t_.row(m).head(n) = cost.transpose();
    t_(m, n) = 0.0;
    for (int i = 0; i < m; ++i) {
      const double cb = cost(basis_[i]);
      if (cb != 0.0) t_.row(m) -= cb * t_.row(i);
    }
  }

  enum class Outcome { Optimal, Unbounded, IterationLimit };

  // Bland's rule: lowest-index improving column, ties in the ratio test go to
  // the lowest-index basic variable.
  Outcome run(const std::vector<bool>& allowed) {
    const int m = rows(), n = cols();
    while (true) {
      if (pivots_ >= opts_.max_pivots) return Outcome::IterationLimit;
      int enter = -1;
      for (int j = 0; j < n; ++j)
        if (allowed[j] && t_(m, j) < -opts_.optimality_tol) {
          enter = j;
          break;
        }
      if (enter < 0) return Outcome::Optimal;
      int leave = -1;
      double best = kInf;
      for (int i = 0; i < m; ++i) {
        const double a = t_(i, enter);
        if (a <= opts_.pivot_tol) continue;
        const double ratio = std::max(t_(i, n), 0.0) / a;
        if (ratio < best - 1e-14 ||
            (std::abs(ratio - best) <= 1e-14 && basis_[i] < basis_[leave])) {
          best = ratio;
          leave = i;
        }
      }
      if (leave < 0) return Outcome::Unbounded;
      pivot(leave, enter);
    }
  }

  void pivot(int r, int c) {
    const double inv = 1.0 / t_(r, c);
    t_.row(r) *= inv;
    t_(r, c) = 1.0;
    for (int i = 0; i < t_.rows(); ++i) {
      if (i == r) continue;
      const double f = t_(i, c);
      if (f != 0.0) {
        t_.row(i) -= f * t_.row(r);
        t_(i, c) = 0.0;
      }
    }
    basis_[r] = c;
    ++pivots_;
  }

 private:
  RowMatrix t_;
  std::vector<int> basis_;
  SolverOptions opts_;
  int pivots_ = 0;
};

}  // namespace

LinearProgram LinearProgram::with_vars(int n) {
  LinearProgram lp;
  lp.objective = Vector::Zero(n);
  lp.eq_matrix = Matrix::Zero(0, n);
  lp.eq_rhs = Vector::Zero(0);
  lp.ub_matrix = Matrix::Zero(0, n);
  lp.ub_rhs = Vector::Zero(0);
  lp.lower_bounds = Vector::Zero(n);
  return lp;
}

namespace {
int append_row(Matrix& m, Vector& rhs, const Vector& row, double value) {
  if (row.size() != m.cols()) throw std::invalid_argument("LP row has wrong length");
  const auto k = m.rows();
  m.conservativeResize(k + 1, Eigen::NoChange);
  m.row(k) = row.transpose();
  rhs.conservativeResize(k + 1);
  rhs(k) = value;
  return static_cast<int>(k);
}
}  // namespace

int LinearProgram::add_eq(const Vector& row, double rhs) { return append_row(eq_matrix, eq_rhs, row, rhs); }
int LinearProgram::add_ub(const Vector& row, double rhs) { return append_row(ub_matrix, ub_rhs, row, rhs); }

void LinearProgram::validate() const {
  const auto n = objective.size();
  auto fail = [](const char* what) { throw std::invalid_argument(what); };
  if (eq_matrix.cols() != n || ub_matrix.cols() != n) fail("LP matrix column count differs from objective");
  if (eq_matrix.rows() != eq_rhs.size()) fail("LP equality rows and rhs disagree");
  if (ub_matrix.rows() != ub_rhs.size()) fail("LP inequality rows and rhs disagree");
  if (lower_bounds.size() != n) fail("LP lower bounds have wrong length");
  if (!names.empty() && static_cast<Eigen::Index>(names.size()) != n) fail("LP names have wrong length");
  for (Eigen::Index j = 0; j < n; ++j)
    if (std::isnan(lower_bounds(j)) || lower_bounds(j) == kInf) fail("LP lower bound must be finite or -inf");
}

const char* to_string(Status status) {
  switch (status) {
    case Status::Optimal: return "Optimal";
    case Status::Infeasible: return "Infeasible";
    case Status::Unbounded: return "Unbounded";
  }
  return "Unknown";
}

LpSolution solve(const LinearProgram& lp, const SolverOptions& options) {
  lp.validate();
  const int n = lp.num_vars(), me = lp.num_eq(), mu = lp.num_ub();
  const int m = me + mu;

  // Column layout: structural columns, then one slack per <= row, then artificials.
  std::vector<Column> cols;
  Vector shift = Vector::Zero(n);
  for (int j = 0; j < n; ++j) {
    if (std::isfinite(lp.lower_bounds(j))) {
      cols.push_back({Column::Shifted, j});
      shift(j) = lp.lower_bounds(j);
    } else {
      cols.push_back({Column::Positive, j});
      cols.push_back({Column::Negative, j});
    }
  }
  const int n_struct = static_cast<int>(cols.size());
  for (int i = 0; i < mu; ++i) cols.push_back({Column::Slack, me + i});

  Matrix rows(m, n);
  Vector rhs(m);
  if (me > 0) {
    rows.topRows(me) = lp.eq_matrix;
    rhs.head(me) = lp.eq_rhs - lp.eq_matrix * shift;
  }
  if (mu > 0) {
    rows.bottomRows(mu) = lp.ub_matrix;
    rhs.tail(mu) = lp.ub_rhs - lp.ub_matrix * shift;
  }

  // Flip rows so that rhs >= 0.
  Vector sign = Vector::Ones(m);
  for (int i = 0; i < m; ++i)
    if (rhs(i) < 0.0) sign(i) = -1.0;

  // Rows whose slack can start basic need no artificial.
  std::vector<int> basis(m, -1);
  for (int i = 0; i < mu; ++i)
    if (sign(me + i) > 0.0) basis[me + i] = n_struct + i;
  for (int i = 0; i < m; ++i)
    if (basis[i] < 0) {
      basis[i] = static_cast<int>(cols.size());
      cols.push_back({Column::Artificial, i});
    }
  const int N = static_cast<int>(cols.size());

  RowMatrix body = RowMatrix::Zero(m, N);
  Vector max_cost = Vector::Zero(N);  // maximization costs in standard form
  for (int c = 0; c < N; ++c) {
    const Column& col = cols[c];
    switch (col.kind) {
      case Column::Shifted:
      case Column::Positive:
        body.col(c) = rows.col(col.index);
        max_cost(c) = lp.objective(col.index);
        break;
      case Column::Negative:
        body.col(c) = -rows.col(col.index);
        max_cost(c) = -lp.objective(col.index);
        break;
      case Column::Slack:
      case Column::Artificial:
        body(col.index, c) = 1.0;
        break;
    }
  }
  // Artificial columns are added after flipping so they keep a +1 entry.
  for (int i = 0; i < m; ++i) {
    body.row(i).head(n_struct + mu) *= sign(i);
    rhs(i) *= sign(i);
  }

  Tableau tab(body, rhs, basis, options);
  std::vector<bool> is_artificial(N, false);
  for (int c = 0; c < N; ++c) is_artificial[c] = cols[c].kind == Column::Artificial;

  LpSolution sol;
  sol.x = Vector::Zero(n);
  sol.eq_duals = Vector::Zero(me);
  sol.ub_duals = Vector::Zero(mu);
  sol.bound_duals = Vector::Zero(n);

  const double scale = 1.0 + (rhs.size() ? rhs.cwiseAbs().maxCoeff() : 0.0);
  const bool has_artificial = N > n_struct + mu;
  if (has_artificial) {
    Vector phase1 = Vector::Zero(N);
    for (int c = 0; c < N; ++c)
      if (is_artificial[c]) phase1(c) = 1.0;
    tab.set_costs(phase1);
    const auto outcome = tab.run(std::vector<bool>(N, true));
    if (outcome == Tableau::Outcome::IterationLimit)
      throw std::runtime_error("simplex: pivot limit reached in phase 1");
    if (tab.value() > options.feasibility_tol * scale) {
      sol.status = Status::Infeasible;
      sol.pivots = tab.pivots();
      return sol;
    }
    // Drive zero-level artificials out of the basis; rows where that is
    // impossible are linearly dependent and keep their artificial at zero.
    for (int i = 0; i < m; ++i) {
      if (!is_artificial[tab.basis()[i]]) continue;
      for (int c = 0; c < n_struct + mu; ++c)
        if (std::abs(tab.entry(i, c)) > 1e-9) {
          tab.pivot(i, c);
          break;
        }
    }
  }

  Vector phase2 = -max_cost;
  tab.set_costs(phase2);
  std::vector<bool> allowed(N);
  for (int c = 0; c < N; ++c) allowed[c] = !is_artificial[c];
  const auto outcome = tab.run(allowed);
  sol.pivots = tab.pivots();
  if (outcome == Tableau::Outcome::IterationLimit)
    throw std::runtime_error("simplex: pivot limit reached in phase 2");
  if (outcome == Tableau::Outcome::Unbounded) {
    sol.status = Status::Unbounded;
    return sol;
  }

  // Refactor the final basis against the original data for clean primal and
  // dual values.
  const auto& final_basis = tab.basis();
  Matrix B(m, m);
  Vector cB(m);
  for (int i = 0; i < m; ++i) {
    B.col(i) = body.col(final_basis[i]);
    cB(i) = max_cost(final_basis[i]);
  }
  Vector u = Vector::Zero(N);
  Vector y_std = Vector::Zero(m);
  if (m > 0) {
    Eigen::PartialPivLU<Matrix> lu(B);
    const Vector uB = lu.solve(rhs);
    for (int i = 0; i < m; ++i) u(final_basis[i]) = std::max(uB(i), 0.0);
    y_std = lu.transpose().solve(cB);
  }

  for (int c = 0; c < n_struct; ++c) {
    const Column& col = cols[c];
    switch (col.kind) {
      case Column::Shifted: sol.x(col.index) = shift(col.index) + u(c); break;
      case Column::Positive: sol.x(col.index) += u(c); break;
      case Column::Negative: sol.x(col.index) -= u(c); break;
      default: break;
    }
  }
  for (int i = 0; i < me; ++i) sol.eq_duals(i) = sign(i) * y_std(i);
  for (int i = 0; i < mu; ++i) sol.ub_duals(i) = sign(me + i) * y_std(me + i);

  Vector reduced = Vector::Zero(n);
  if (me > 0) reduced += lp.eq_matrix.transpose() * sol.eq_duals;
  if (mu > 0) reduced += lp.ub_matrix.transpose() * sol.ub_duals;
  reduced -= lp.objective;
  for (int j = 0; j < n; ++j)
    if (std::isfinite(lp.lower_bounds(j))) sol.bound_duals(j) = reduced(j);

  sol.status = Status::Optimal;
  sol.objective_value = lp.objective.dot(sol.x);
  sol.dual_objective = lp.eq_rhs.dot(sol.eq_duals) + lp.ub_rhs.dot(sol.ub_duals);
  for (int j = 0; j < n; ++j)
    if (std::isfinite(lp.lower_bounds(j))) sol.dual_objective -= lp.lower_bounds(j) * sol.bound_duals(j);
  return sol;
}

double KktReport::worst() const {
  return std::max({stationarity, primal_feasibility, dual_feasibility, complementary_slackness});
}

KktReport check_kkt(const LinearProgram& lp, const LpSolution& sol) {
  lp.validate();
  KktReport rep;
  const int n = lp.num_vars();
  const Vector& x = sol.x;

  Vector grad = lp.objective + sol.bound_duals;
  if (lp.num_eq() > 0) grad -= lp.eq_matrix.transpose() * sol.eq_duals;
  if (lp.num_ub() > 0) grad -= lp.ub_matrix.transpose() * sol.ub_duals;
  for (int j = 0; j < n; ++j) {
    double g = grad(j);
    // free variables carry no bound multiplier
    if (!std::isfinite(lp.lower_bounds(j))) g = grad(j) - sol.bound_duals(j);
    rep.stationarity = std::max(rep.stationarity, std::abs(g));
  }

  if (lp.num_eq() > 0)
    rep.primal_feasibility = (lp.eq_matrix * x - lp.eq_rhs).cwiseAbs().maxCoeff();
  Vector slack = lp.num_ub() > 0 ? Vector(lp.ub_rhs - lp.ub_matrix * x) : Vector::Zero(0);
  for (int i = 0; i < lp.num_ub(); ++i) rep.primal_feasibility = std::max(rep.primal_feasibility, -slack(i));
  for (int j = 0; j < n; ++j)
    if (std::isfinite(lp.lower_bounds(j)))
      rep.primal_feasibility = std::max(rep.primal_feasibility, lp.lower_bounds(j) - x(j));

  for (int i = 0; i < lp.num_ub(); ++i) {
    rep.dual_feasibility = std::max(rep.dual_feasibility, -sol.ub_duals(i));
    rep.complementary_slackness = std::max(rep.complementary_slackness, std::abs(sol.ub_duals(i) * slack(i)));
  }
  for (int j = 0; j < n; ++j) {
    if (!std::isfinite(lp.lower_bounds(j))) continue;
    rep.dual_feasibility = std::max(rep.dual_feasibility, -sol.bound_duals(j));
    rep.complementary_slackness =
        std::max(rep.complementary_slackness, std::abs(sol.bound_duals(j) * (x(j) - lp.lower_bounds(j))));
  }
  return rep;
}

}  // namespace dualcrl::lp
