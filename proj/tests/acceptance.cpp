// Acceptance run: one PASS/FAIL line per criterion. Arguments select a
// subset by number; the exit code counts failures.

#include "cli.hpp"
#include "dualcrl/dualcrl.hpp"
#include "gradcheck.hpp"
#include "instances.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

using namespace dualcrl;
using namespace testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(4);
  s << x;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1, 2

Outcome strong_duality() {
  Rng rng(101);
  const double gammas[] = {0.5, 0.9, 0.99};
  double worst = 0.0;
  int solved = 0;
  for (int i = 0; i < 200; ++i) {
    const int S = 2 + rng.uniform_int(5), A = 2 + rng.uniform_int(2);
    const TabularMdp mdp = random_mdp(rng, S, A, gammas[rng.uniform_int(3)]);
    for (const std::string& family : lp_families()) {
      const std::vector<ConstraintSpec> cons{feasible_constraint(rng, mdp, family)};
      const TheoremReport rep = verify_solution(mdp, cons, solve_constrained(mdp, cons), 1e-6);
      worst = std::max(worst, std::abs(rep.primal_objective - rep.dual_objective));
      ++solved;
    }
  }
  return {worst <= 1e-8, std::to_string(solved) + " instances, max |primal - dual| " + fmt(worst)};
}

Outcome theorem_suite() {
  Rng rng(202);
  int passed = 0, total = 0;
  std::string first_failure;
  for (const std::string& family : lp_families())
    for (int i = 0; i < 50; ++i) {
      const TabularMdp mdp = random_mdp(rng, 2 + rng.uniform_int(5), 2 + rng.uniform_int(2), 0.9);
      const TheoremReport rep = verify_theorems(mdp, {feasible_constraint(rng, mdp, family)}, 1e-6);
      ++total;
      if (rep.passed) ++passed;
      else if (first_failure.empty() && !rep.failures.empty()) first_failure = family + ": " + rep.failures[0];
    }
  return {passed == total,
          std::to_string(passed) + "/" + std::to_string(total) + " pass" +
              (first_failure.empty() ? "" : ", first failure " + first_failure)};
}

// ---------------------------------------------------------------- 3, 4

Outcome oracle_equivalence() {
  double worst = 0.0;
  for (int k = 1; k <= 5; ++k) {
    Rng rng(1000 + k);
    const TabularMdp mdp = random_mdp(rng, 4, 2 + k % 2, 0.9);
    const double vi = average_reward(mdp, greedy_policy(value_iteration(mdp, 1e-12).q));
    const double lp = average_reward(mdp, solve_constrained(mdp, {}).policy);
    TrainConfig cfg = cliff_train_defaults();
    cfg.gamma = 0.9;
    cfg.total_steps = 30000;
    cfg.seed = static_cast<std::uint64_t>(k);
    const TabularTrainResult res = train(continuing_task(mdp, 100), {}, cfg, TrainMode::ValueBased);
    const double learned = average_reward(mdp, res.agent.policy());
    worst = std::max({worst, std::abs(vi - lp), std::abs(vi - learned), std::abs(lp - learned)});
  }
  return {worst <= 1e-2, "5 MDPs, max pairwise avg-reward difference " + fmt(worst)};
}

// Average reward plus alpha times the entropy relative to the uniform teacher,
// from the exact occupancy.
double regularized_return(const TabularMdp& mdp, const Matrix& pi, double alpha) {
  const OccupancyMeasure occ = state_visitation(mdp, TabularPolicy{pi});
  const Matrix rbar = mdp.expected(mdp.reward());
  double total = 0.0;
  for (int s = 0; s < mdp.num_states(); ++s)
    for (int a = 0; a < mdp.num_actions(); ++a)
      if (pi(s, a) > 0.0)
        total += occ.p(s, a) * (rbar(s, a) - alpha * std::log(pi(s, a) * mdp.num_actions()));
  return total;
}

Outcome soft_limit() {
  Rng rng(404);
  double worst_v = 0.0, worst_gap = -1.0;
  for (int i = 0; i < 20; ++i) {
    const TabularMdp mdp = random_mdp(rng, 2 + rng.uniform_int(3), 2, 0.9);
    const TabularPolicy uniform = TabularPolicy::uniform(mdp.num_states(), mdp.num_actions());
    const SoftSolution soft = soft_value_iteration(mdp, uniform, 1e-6, 1e-12);
    worst_v = std::max(worst_v, (soft.values.v - value_iteration(mdp, 1e-12).v).cwiseAbs().maxCoeff());
  }
  for (int i = 0; i < 20; ++i) {
    const TabularMdp mdp = random_mdp(rng, 2, 2, 0.9);
    const SoftSolution soft = soft_value_iteration(mdp, TabularPolicy::uniform(2, 2), 1.0, 1e-12);
    const double found = regularized_return(mdp, soft.policy.probs, 1.0);
    double best = -1e300;
    for (int x = 0; x <= 20; ++x)
      for (int y = 0; y <= 20; ++y) {
        Matrix pi(2, 2);
        pi << x / 20.0, 1.0 - x / 20.0, y / 20.0, 1.0 - y / 20.0;
        best = std::max(best, regularized_return(mdp, pi, 1.0));
      }
    worst_gap = std::max(worst_gap, best - found);
  }
  return {worst_v <= 1e-4 && worst_gap <= 1e-4,
          "alpha=1e-6 max |v - v*| " + fmt(worst_v) + ", alpha=1 grid beats policy by " + fmt(worst_gap)};
}

// ---------------------------------------------------------------- 5, 6

Outcome cliff_hazards() {
  const CliffSpec spec = cliff_hazard_spec();
  const auto cons = cliff_constraints(spec, CliffExperiment::DensityAndTransitionCost);
  const TabularMdp mdp = cliff_mdp(spec);
  const Tensor3 ridge = cliff_ridge_cost(spec);
  int ok = 0;
  double slowest = 0.0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cfg = cliff_train_defaults();
    cfg.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    const TabularTrainResult res = train(cliff_task(spec), cons, cfg, TrainMode::ValueBased);
    slowest = std::max(slowest, seconds_since(t0));
    const OccupancyMeasure occ = state_visitation(mdp, res.agent.policy());
    double unstable = 0.0, crossing = 0.0;
    for (const Cell& c : spec.unstable_cells) unstable = std::max(unstable, occ.d(spec.id(c.first, c.second)));
    for (int s = 0; s < mdp.num_states(); ++s)
      for (int a : {kRight, kLeft})
        for (int sn = 0; sn < mdp.num_states(); ++sn)
          if (ridge(s, a, sn) > 0.0 && mdp.tau(s, a, sn) > 0.0) {
            crossing += occ.p(s, a);
            break;
          }
    const bool good = unstable <= spec.epsilon + 1e-3 && crossing <= 1e-12;
    ok += good;
    per_seed += " " + std::string(good ? "ok" : "x") + "(d=" + fmt(unstable) + ",ridge=" + fmt(crossing) + ")";
  }
  return {ok >= 4 && slowest < 300.0,
          std::to_string(ok) + "/5 seeds:" + per_seed + ", slowest " + fmt(slowest) + " s"};
}

Outcome cliff_teacher_shortcut() {
  const CliffSpec spec = cliff_default_spec();
  TrainConfig base = cliff_train_defaults();
  const auto cons = cliff_constraints(spec, CliffExperiment::EntropyAndActionBound, base.alpha_start);
  const int teacher_len = cliff_path_length(spec, cliff_teacher(spec));
  int ok = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cfg = base;
    cfg.seed = seed;
    const TabularTrainResult res = train(cliff_task(spec), cons, cfg, TrainMode::ActorCritic);
    const TabularPolicy pi = res.agent.policy();
    double min_down = 1.0;
    for (int s : cliff_bounded_top_row(spec)) min_down = std::min(min_down, pi.probs(s, kDown));
    const int len = cliff_path_length(spec, pi);
    const bool good = min_down >= 0.45 && len > 0 && len < teacher_len;
    ok += good;
    per_seed += " " + std::string(good ? "ok" : "x") + "(down=" + fmt(min_down) + ",len=" + std::to_string(len) + ")";
  }
  return {ok >= 4, std::to_string(ok) + "/5 seeds, teacher path " + std::to_string(teacher_len) + ":" + per_seed};
}

// ---------------------------------------------------------------- 7, 9

struct PendulumRuns {
  std::vector<Eigen::Vector2d> baseline_states, constrained_states;
  std::vector<double> baseline_returns, constrained_returns;
  double slowest = 0.0;
};

const PendulumRuns& pendulum_runs() {
  static std::optional<PendulumRuns> runs;
  if (runs) return *runs;
  runs.emplace();
  const PendulumSpec spec;
  const cli::ExperimentConfig& base = cli::find_preset("pendulum-er").config;
  const cli::ExperimentConfig& crl = cli::find_preset("pendulum-er-vdb-crl").config;
  for (const cli::ExperimentConfig* cfg : {&base, &crl}) {
    const bool constrained = cfg == &crl;
    for (std::uint64_t seed : cfg->seeds) {
      TrainConfig tc = cfg->train;
      tc.seed = seed;
      const auto t0 = std::chrono::steady_clock::now();
      const PendulumTrainResult res = train_pendulum(spec, cfg->pendulum_constraints, tc);
      runs->slowest = std::max(runs->slowest, seconds_since(t0));
      const PendulumEvaluation ev =
          evaluate_pendulum(spec, res.agent, cfg->evaluation.episodes, cfg->evaluation.steps, 1000 + seed);
      auto& states = constrained ? runs->constrained_states : runs->baseline_states;
      auto& returns = constrained ? runs->constrained_returns : runs->baseline_returns;
      states.insert(states.end(), ev.states.begin(), ev.states.end());
      returns.insert(returns.end(), ev.returns.begin(), ev.returns.end());
      std::fprintf(stderr, "  pendulum %s seed %llu: %.1f s\n", constrained ? "constrained" : "baseline",
                   static_cast<unsigned long long>(seed), seconds_since(t0));
    }
  }
  return *runs;
}

Outcome pendulum_properties() {
  const PendulumRuns& r = pendulum_runs();
  const AngleSector sector = cli::find_preset("pendulum-er-vdb-crl").config.pendulum_constraints.density->sector;
  auto stats = [&](const std::vector<Eigen::Vector2d>& states, double* frac, double* vel2) {
    double in = 0.0, v2 = 0.0;
    for (const auto& s : states) {
      in += sector.contains(s(0));
      v2 += s(1) * s(1);
    }
    *frac = in / static_cast<double>(states.size());
    *vel2 = v2 / static_cast<double>(states.size());
  };
  double fb, vb, fc, vc;
  stats(r.baseline_states, &fb, &vb);
  stats(r.constrained_states, &fc, &vc);
  double ret = 0.0;
  for (double x : r.constrained_returns) ret += x / static_cast<double>(r.constrained_returns.size());
  double ret_b = 0.0;
  for (double x : r.baseline_returns) ret_b += x / static_cast<double>(r.baseline_returns.size());
  const bool a = fc <= 0.5 * fb, b = vc < vb, c = ret > -600.0;
  return {a && b && c && r.slowest < 900.0,
          std::string("(a) sector fraction ") + fmt(fc) + " vs baseline " + fmt(fb) + (a ? " ok" : " x") +
              "; (b) mean theta_dot^2 " + fmt(vc) + " vs " + fmt(vb) + (b ? " ok" : " x") + "; (c) mean return " +
              fmt(ret) + " (baseline " + fmt(ret_b) + ")" + (c ? " ok" : " x") + "; slowest run " +
              fmt(r.slowest) + " s"};
}

double trapezoid_integral(const cli::DensityGrid& g) {
  double total = 0.0;
  const Eigen::Index R = g.theta.size();
  for (Eigen::Index r = 1; r < g.theta_dot.size(); ++r)
    for (Eigen::Index k = 1; k < R; ++k) {
      const double cell = std::exp(g.log_density(r, k)) + std::exp(g.log_density(r - 1, k)) +
                          std::exp(g.log_density(r, k - 1)) + std::exp(g.log_density(r - 1, k - 1));
      total += 0.25 * cell * (g.theta(k) - g.theta(k - 1)) * (g.theta_dot(r) - g.theta_dot(r - 1));
    }
  return total;
}

Outcome estimator_fidelity() {
  const PendulumRuns& r = pendulum_runs();
  const double kde = trapezoid_integral(cli::pendulum_density_grid(r.constrained_states, 200, PendulumSpec{}.max_speed));

  // 2-state chain: action 0 stays, action 1 switches, each with a 10% slip
  Tensor3 tau(2, 2, 2), reward(2, 2, 2);
  for (int s = 0; s < 2; ++s) {
    tau(s, 0, s) = 0.9;
    tau(s, 0, 1 - s) = 0.1;
    tau(s, 1, 1 - s) = 0.9;
    tau(s, 1, s) = 0.1;
  }
  Vector iota(2);
  iota << 1.0, 0.0;
  const TabularMdp chain(iota, tau, reward, 0.8);
  Matrix probs(2, 2);
  probs << 0.7, 0.3, 0.4, 0.6;
  const TabularPolicy pi{probs};
  const Vector exact = state_visitation(chain, pi).d;

  TabularEnv env(chain, {false, false}, 50);
  DiscountedCounter counter(2, chain.discount(), 1.0);
  Rng rng(909);
  int s = env.reset(rng);
  counter.visit(s, 0);
  for (long t = 0; t < 100000; ++t) {
    const Eigen::RowVectorXd row = probs.row(s);
    const auto st = env.step(rng.categorical(std::span<const double>(row.data(), 2)), rng);
    if (st.truncated) {
      s = env.reset(rng);
      counter.visit(s, 0);
    } else {
      s = st.s_next;
      counter.visit(s, env.episode_step());
    }
  }
  const double count_err = (counter.normalized() - exact).cwiseAbs().maxCoeff();
  return {kde >= 0.98 && kde <= 1.02 && count_err <= 1e-2,
          "KDE grid integral " + fmt(kde) + "; 2-state counting error " + fmt(count_err)};
}

// ---------------------------------------------------------------- 8

Outcome gradient_correctness() {
  const double tab = tabular_gradient_error(801, 20);
  const double pend = pendulum_gradient_error(802, 20, pendulum_train_defaults().hidden);
  return {tab <= 1e-4 && pend <= 1e-4, "max relative error tabular " + fmt(tab) + ", pendulum " + fmt(pend)};
}

// ---------------------------------------------------------------- 10

// Norm of constraint 0's modifiers after every update of the last `window` steps.
std::vector<double> final_norms(const TabularMdp& mdp, const ConstraintSpec& c, long steps, long window) {
  TrainConfig cfg = cliff_train_defaults();
  cfg.gamma = mdp.discount();
  cfg.total_steps = steps;
  std::vector<double> norms;
  train(continuing_task(mdp, 100), {c}, cfg, TrainMode::ActorCritic, [&](long t, const TabularAgent& agent) {
    if (t >= steps - window) norms.push_back(agent.bank.tables()[0].norm());
  });
  return norms;
}

Outcome infeasibility_signaling() {
  Rng rng(1010);
  const TabularMdp mdp = random_mdp(rng, 3, 2, 0.9, 1.0);
  const int S = mdp.num_states(), A = mdp.num_actions();

  Tensor3 rk(S, A, S);
  for (double& x : rk.data()) x = rng.uniform(-1.0, 1.0);
  const TabularMdp mdp_k = mdp.with_reward(rk);
  const double best = average_reward(mdp_k, greedy_policy(value_iteration(mdp_k, 1e-12).q));
  const ConstraintSpec crl = ValueConstraint{rk, (best + 0.1) / (1.0 - mdp.discount())};
  // every policy visits state 0 at least min_d; cap it at half of that
  Tensor3 visit0(S, A, S);
  for (int a = 0; a < A; ++a)
    for (int sn = 0; sn < S; ++sn) visit0(0, a, sn) = -1.0;
  const TabularMdp mdp_0 = mdp.with_reward(visit0);
  const double min_d = -average_reward(mdp_0, greedy_policy(value_iteration(mdp_0, 1e-12).q));
  StateDensityBound bound{Vector::Zero(S), Vector::Ones(S)};
  bound.upper(0) = 0.5 * min_d;
  const ConstraintSpec vdb = bound;

  std::string detail;
  bool pass = true;
  for (const auto& [name, c] : {std::pair{"value", crl}, std::pair{"state density", vdb}}) {
    bool infeasible = false;
    try {
      solve_constrained(mdp, {c});
    } catch (const InfeasibleConstraints&) {
      infeasible = true;
    }
    const std::vector<double> norms = final_norms(mdp, c, 40000, 10000);
    int drops = 0;
    for (std::size_t i = 1; i < norms.size(); ++i) drops += norms[i] < norms[i - 1];
    const bool grows = drops == 0 && norms.back() > norms.front();
    pass = pass && infeasible && grows;
    detail += std::string(detail.empty() ? "" : "; ") + name + ": oracle " + (infeasible ? "infeasible" : "FEASIBLE") +
              ", norm " + fmt(norms.front()) + " -> " + fmt(norms.back()) + " with " + std::to_string(drops) + " drops";
  }
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"strong duality on 200 random MDPs", strong_duality},
      {"theorem suite, 50 instances per family", theorem_suite},
      {"value iteration, LP and model-free learner agree", oracle_equivalence},
      {"soft value iteration limits", soft_limit},
      {"CliffWalking hazards avoided", cliff_hazards},
      {"CliffWalking teacher shortcut with action bound", cliff_teacher_shortcut},
      {"Pendulum sector and velocity constraints", pendulum_properties},
      {"loss gradients match finite differences", gradient_correctness},
      {"density estimator fidelity", estimator_fidelity},
      {"infeasibility signaling", infeasibility_signaling},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << o.detail << " ("
              << fmt(seconds_since(t0)) << " s)" << std::endl;
  }
  return failures;
}
