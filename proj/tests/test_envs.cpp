#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dualcrl/envs.hpp"
#include "dualcrl/oracle.hpp"

#include <cmath>
#include <numbers>

using namespace dualcrl;

namespace {

int argmax_next(const TabularMdp& mdp, int s, int a) {
  int best = 0;
  for (int sn = 1; sn < mdp.num_states(); ++sn)
    if (mdp.tau(s, a, sn) > mdp.tau(s, a, best)) best = sn;
  return best;
}

double energy(const PendulumSpec& p, double theta, double theta_dot) {
  // kinetic of a rod about its pivot plus potential with theta = 0 upright
  const double inertia = p.mass * p.length * p.length / 3.0;
  return 0.5 * inertia * theta_dot * theta_dot + p.mass * p.gravity * 0.5 * p.length * std::cos(theta);
}

}  // namespace

TEST_CASE("cliff transitions") {
  const CliffSpec spec = cliff_default_spec();
  const TabularMdp mdp = cliff_mdp(spec);
  REQUIRE(mdp.num_states() == 48);
  REQUIRE(mdp.num_actions() == 4);
  const int start = spec.id(spec.start_cell);

  SUBCASE("stepping into the cliff resets with -100") {
    // start is directly left of the first cliff cell
    CHECK(argmax_next(mdp, start, kRight) == start);
    CHECK(mdp.tau(start, kRight, start) == 1.0);
    CHECK(mdp.r(start, kRight, start) == -100.0);
    // from above the cliff, moving down
    const int above = spec.id(2, 5);
    CHECK(mdp.tau(above, kDown, start) == 1.0);
    CHECK(mdp.r(above, kDown, start) == -100.0);
  }
  SUBCASE("border keeps position") {
    const int s = spec.id(1, 0);
    CHECK(mdp.tau(s, kLeft, s) == 1.0);
    CHECK(mdp.r(s, kLeft, s) == -1.0);
    CHECK(mdp.tau(spec.id(0, 4), kUp, spec.id(0, 4)) == 1.0);
  }
  SUBCASE("ordinary moves cost one step") {
    CHECK(mdp.tau(start, kUp, spec.id(2, 0)) == 1.0);
    CHECK(mdp.r(start, kUp, spec.id(2, 0)) == -1.0);
    CHECK(mdp.tau(spec.id(1, 3), kRight, spec.id(1, 4)) == 1.0);
  }
  SUBCASE("rows are distributions") {
    for (int s = 0; s < 48; ++s)
      for (int a = 0; a < 4; ++a) {
        double total = 0.0;
        for (int sn = 0; sn < 48; ++sn) total += mdp.tau(s, a, sn);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
      }
  }
  SUBCASE("initial distribution") {
    CHECK(mdp.initial_dist().sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(mdp.initial_dist()(start) > 0.99);
    for (Cell c : spec.cliffs()) CHECK(mdp.initial_dist()(spec.id(c)) == 0.0);
    CHECK(mdp.initial_dist()(spec.id(0, 0)) > 0.0);
  }
}

TEST_CASE("cliff spec validation") {
  CliffSpec spec = cliff_default_spec();
  spec.start_cell = {3, 4};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = cliff_default_spec();
  spec.unstable_cells = {{4, 0}};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = cliff_default_spec();
  spec.ridge_cost = 0.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);

  const CliffSpec hazard = cliff_hazard_spec();
  nlohmann::json j = hazard;
  const CliffSpec back = j.get<CliffSpec>();
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("cliff constraint presets") {
  SUBCASE("no unstable cells gives a vacuous bound") {
    const auto cs = cliff_constraints(cliff_default_spec(), CliffExperiment::DensityAndTransitionCost);
    REQUIRE(cs.size() == 2);
    const auto& vdb = std::get<StateDensityBound>(cs[0]);
    CHECK(vdb.upper.minCoeff() == 1.0);
    CHECK(vdb.lower.maxCoeff() == 0.0);
    CHECK(std::get<AvgTransitionCost>(cs[1]).cost.data() == std::vector<double>(48 * 4 * 48, 0.0));
  }
  SUBCASE("hazard preset") {
    const CliffSpec spec = cliff_hazard_spec();
    const auto cs = cliff_constraints(spec, CliffExperiment::DensityAndTransitionCost);
    const auto& vdb = std::get<StateDensityBound>(cs[0]);
    CHECK((vdb.upper.array() < 1.0).count() == 2);
    CHECK(vdb.upper(spec.id(2, 2)) == spec.epsilon);
    const Tensor3& c = std::get<AvgTransitionCost>(cs[1]).cost;
    CHECK(c(spec.id(2, 4), kRight, spec.id(2, 5)) == spec.ridge_cost);
    CHECK(c(spec.id(2, 5), kLeft, spec.id(2, 4)) == spec.ridge_cost);
    CHECK(c(spec.id(2, 4), kUp, spec.id(1, 4)) == 0.0);
    CHECK(c(spec.id(2, 3), kRight, spec.id(2, 4)) == 0.0);
  }
  SUBCASE("entropy and action bound preset") {
    const CliffSpec spec = cliff_default_spec();
    const auto cs = cliff_constraints(spec, CliffExperiment::EntropyAndActionBound, 0.5);
    REQUIRE(cs.size() == 2);
    CHECK(std::get<EntropySpec>(cs[0]).alpha == 0.5);
    const auto& adb = std::get<ActionDensityBound>(cs[1]);
    const auto top = cliff_bounded_top_row(spec);
    CHECK(top.size() == 10);
    for (int s : top) CHECK(adb.lower(s, kDown) == 0.5);
    CHECK(adb.lower(spec.id(0, 0), kDown) == 0.0);
    CHECK(adb.lower.sum() == doctest::Approx(5.0));
  }
}

TEST_CASE("cliff teacher") {
  const CliffSpec spec = cliff_default_spec();
  const TabularPolicy teacher = cliff_teacher(spec);
  teacher.validate();
  CHECK(teacher.probs(spec.id(spec.start_cell), kUp) == doctest::Approx(0.9));
  CHECK(teacher.probs(spec.id(0, 5), kRight) == doctest::Approx(0.9));
  CHECK(teacher.probs(spec.id(0, 11), kDown) == doctest::Approx(0.9));
  CHECK(teacher.probs(spec.id(1, 11), kDown) == doctest::Approx(0.9));
  // up 3, right 11, down 3
  CHECK(cliff_path_length(spec, teacher) == 17);
  // greedy optimum hugs the cliff: up 1, right 11, down 1
  const ValueFunctions vf = value_iteration(cliff_mdp(spec), 1e-12);
  CHECK(cliff_path_length(spec, greedy_policy(vf.q)) == 13);
  // walking right from the start falls off
  CHECK(cliff_path_length(spec, TabularPolicy::deterministic(std::vector<int>(48, kRight), 4)) == -1);
}

TEST_CASE("tabular episodes") {
  const CliffSpec spec = cliff_default_spec();
  TabularEnv env(cliff_mdp(spec), cliff_terminals(spec), 5);
  Rng rng(3);
  int s = env.reset(rng);
  CHECK_FALSE(cliff_terminals(spec)[s]);
  // force the start to test the cap
  for (int k = 0; k < 200; ++k) {
    s = env.reset(rng);
    if (s == spec.id(spec.start_cell)) break;
  }
  REQUIRE(s == spec.id(spec.start_cell));
  TabularEnv::Step st{};
  for (int t = 0; t < 5; ++t) st = env.step(kLeft, rng);
  CHECK(st.s_next == s);
  CHECK(st.truncated);
  CHECK_FALSE(st.done);

  env.reset(rng);
  // from (2, 11) moving down reaches the goal
  TabularEnv near(cliff_mdp(spec), cliff_terminals(spec), 100);
  bool reached = false;
  for (int k = 0; k < 2000 && !reached; ++k) {
    int x = near.reset(rng);
    if (x != spec.id(2, 11)) continue;
    const auto step = near.step(kDown, rng);
    CHECK(step.done);
    CHECK(step.r == -1.0);
    reached = true;
  }
}

TEST_CASE("iota smoothing sensitivity") {
  // the hazard preset's oracle solution keeps its shape across smoothing masses
  for (double mass : {1e-2, 1e-3, 1e-4}) {
    CliffSpec spec = cliff_hazard_spec();
    spec.initial_smoothing = mass;
    const TabularMdp mdp = cliff_mdp(spec);
    const auto cs = cliff_constraints(spec, CliffExperiment::DensityAndTransitionCost);
    const ConstrainedSolution sol = solve_constrained(mdp, cs);
    const OccupancyMeasure occ = state_visitation(mdp, sol.policy);
    CAPTURE(mass);
    for (Cell c : spec.unstable_cells) CHECK(occ.d(spec.id(c)) <= spec.epsilon + 1e-9);
    const Tensor3& cost = std::get<AvgTransitionCost>(cs[1]).cost;
    CHECK((occ.p.array() * mdp.expected(cost).array()).sum() <= 1e-9);
    const int len = cliff_path_length(spec, sol.policy);
    CHECK(len > 13);
    CHECK(len <= 17);
  }
  // objectives differ only by the smoothing mass scale
  auto objective = [](double mass) {
    CliffSpec spec = cliff_hazard_spec();
    spec.initial_smoothing = mass;
    return solve_constrained(cliff_mdp(spec), cliff_constraints(spec, CliffExperiment::DensityAndTransitionCost))
        .objective;
  };
  const double base = objective(1e-3);
  CHECK(std::abs(objective(1e-4) - base) < 1e-2);
  CHECK(std::abs(objective(1e-2) - base) < 1e-1);
}

TEST_CASE("pendulum reward and observation") {
  const PendulumSpec spec;
  const auto up = pendulum_step(spec, {0.0, 0.0}, 0.0);
  CHECK(up.reward == 0.0);
  CHECK(pendulum_observation({0.0, 0.0}) == Eigen::Vector3d(1.0, 0.0, 0.0));
  CHECK(up.state.theta == 0.0);
  CHECK(up.state.theta_dot == 0.0);

  const auto down = pendulum_step(spec, {std::numbers::pi, 0.0}, 0.0);
  CHECK(down.reward == doctest::Approx(-std::numbers::pi * std::numbers::pi).epsilon(1e-12));

  const auto mixed = pendulum_step(spec, {0.5, -2.0}, 1.5);
  CHECK(mixed.reward == doctest::Approx(-(0.25 + 0.1 * 4.0 + 0.001 * 2.25)).epsilon(1e-12));

  // torque beyond the limit is clamped
  const auto a = pendulum_step(spec, {0.3, 0.0}, 50.0);
  const auto b = pendulum_step(spec, {0.3, 0.0}, 2.0);
  CHECK(a.state.theta_dot == b.state.theta_dot);
  CHECK(a.reward == b.reward);

  // wrapping
  CHECK(wrap_angle(std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(-std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(wrap_angle(3 * std::numbers::pi / 2) == doctest::Approx(-std::numbers::pi / 2));

  // sector
  AngleSector sector;
  CHECK(sector.contains(0.7));
  CHECK_FALSE(sector.contains(-0.7));
  CHECK(sector.contains(0.7 + 2 * std::numbers::pi));
}

TEST_CASE("pendulum clamps and observation norm") {
  const PendulumSpec spec;
  Rng rng(11);
  PendulumState st{rng.uniform(-3.0, 3.0), rng.uniform(-1.0, 1.0)};
  for (int t = 0; t < 5000; ++t) {
    const double u = rng.uniform(-10.0, 10.0);
    const auto out = pendulum_step(spec, st, u);
    st = out.state;
    CHECK(std::abs(st.theta_dot) <= spec.max_speed);
    CHECK(st.theta > -std::numbers::pi);
    CHECK(st.theta <= std::numbers::pi);
    const Eigen::Vector3d o = out.observation;
    CHECK(o(0) * o(0) + o(1) * o(1) == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("pendulum energy matches a fine integrator") {
  const PendulumSpec spec;
  const int steps = static_cast<int>(std::round(1.0 / spec.dt));
  PendulumState coarse{std::numbers::pi - 0.01, 0.0};
  double th = coarse.theta, thd = 0.0;
  const double h = spec.dt / 100.0;
  for (int t = 0; t < steps; ++t) {
    coarse = pendulum_step(spec, coarse, 0.0).state;
    for (int k = 0; k < 100; ++k) {
      thd += h * pendulum_acceleration(spec, th, 0.0);
      th += h * thd;
    }
    const double e_fine = energy(spec, th, thd);
    const double e_coarse = energy(spec, coarse.theta, coarse.theta_dot);
    // energy is negative near the bottom; compare against its magnitude
    CHECK(std::abs(e_coarse - e_fine) <= 0.01 * std::abs(e_fine));
  }
  CHECK(std::abs(wrap_angle(th) - coarse.theta) < 0.05);
}

TEST_CASE("pendulum env") {
  PendulumSpec spec;
  spec.episode_length = 3;
  PendulumEnv env(spec);
  Rng rng(5);
  for (int k = 0; k < 100; ++k) {
    const Eigen::Vector3d o = env.reset(rng);
    CHECK(std::abs(o(2)) <= 1.0);
    CHECK(std::abs(env.state().theta) <= std::numbers::pi);
  }
  auto [o1, r1, t1] = env.step(0.0);
  auto [o2, r2, t2] = env.step(0.0);
  auto [o3, r3, t3] = env.step(0.0);
  CHECK_FALSE(t1);
  CHECK_FALSE(t2);
  CHECK(t3);
  CHECK(r1 <= 0.0);
  CHECK_THROWS_AS([] { PendulumSpec bad; bad.mass = 0.0; bad.validate(); }(), std::invalid_argument);
}
