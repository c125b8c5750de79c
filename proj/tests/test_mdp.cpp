#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dualcrl/mdp.hpp"

#include <json.hpp>

#include <cmath>

using namespace dualcrl;

namespace {

// Two states, one action, deterministic swap, reward 1 on leaving state 0.
TabularMdp swap_chain(double gamma) {
  Vector iota(2);
  iota << 1.0, 0.0;
  Tensor3 tau(2, 1, 2), r(2, 1, 2);
  tau(0, 0, 1) = 1.0;
  tau(1, 0, 0) = 1.0;
  r(0, 0, 1) = 1.0;
  return TabularMdp(iota, tau, r, gamma);
}

TabularMdp random_mdp(Rng& rng, int S, int A, double gamma) {
  Vector iota(S);
  for (int s = 0; s < S; ++s) iota(s) = rng.uniform(0.1, 1.0);
  iota /= iota.sum();
  Tensor3 tau(S, A, S), r(S, A, S);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) {
      double total = 0.0;
      for (int sn = 0; sn < S; ++sn) {
        tau(s, a, sn) = rng.uniform() < 0.5 ? rng.uniform() : 0.0;
        total += tau(s, a, sn);
        r(s, a, sn) = rng.uniform(-1.0, 1.0);
      }
      if (total == 0.0) {
        tau(s, a, rng.uniform_int(S)) = 1.0;
        total = 1.0;
      }
      for (int sn = 0; sn < S; ++sn) tau(s, a, sn) /= total;
    }
  return TabularMdp(iota, tau, r, gamma);
}

TabularPolicy random_policy(Rng& rng, int S, int A) {
  Matrix probs(S, A);
  for (int s = 0; s < S; ++s) {
    for (int a = 0; a < A; ++a) probs(s, a) = rng.uniform(0.01, 1.0);
    probs.row(s) /= probs.row(s).sum();
  }
  return {probs};
}

// Truncated series (1-g) sum_t g^t iota^T P^t.
Vector series_visitation(const TabularMdp& mdp, const TabularPolicy& pi, int horizon) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  Vector mass = mdp.initial_dist();
  Vector d = Vector::Zero(S);
  double w = 1.0 - mdp.discount();
  for (int t = 0; t < horizon; ++t) {
    d += w * mass;
    Vector next = Vector::Zero(S);
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a)
        for (int sn = 0; sn < S; ++sn) next(sn) += mass(s) * pi.probs(s, a) * mdp.tau(s, a, sn);
    mass = next;
    w *= mdp.discount();
  }
  return d;
}

}  // namespace

TEST_CASE("swap chain closed form") {
  const double g = 0.5;
  const TabularMdp mdp = swap_chain(g);
  const auto pi = TabularPolicy::uniform(2, 1);
  const auto occ = state_visitation(mdp, pi);
  // d(0) = (1-g)(1 + g^2 + g^4 + ...) = (1-g)/(1-g^2)
  CHECK(occ.d(0) == doctest::Approx(1.0 / (1.0 + g)));
  CHECK(occ.d(1) == doctest::Approx(g / (1.0 + g)));
  const auto vf = policy_value(mdp, pi);
  CHECK(vf.v(0) == doctest::Approx(1.0 / (1.0 - g * g)));
  CHECK(vf.v(1) == doctest::Approx(g / (1.0 - g * g)));
  CHECK(average_reward(mdp, pi) == doctest::Approx((1.0 - g) * vf.v(0)));
}

TEST_CASE("visitation matches the geometric series") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const TabularMdp mdp = random_mdp(rng, 6, 3, 0.9);
    const auto pi = random_policy(rng, 6, 3);
    const auto occ = state_visitation(mdp, pi);
    const Vector oracle = series_visitation(mdp, pi, 600);
    CHECK((occ.d - oracle).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(occ.d.sum() == doctest::Approx(1.0));
    CHECK(occupancy_flow_residual(mdp, occ) < 1e-12);
  }
}

TEST_CASE("average reward is the occupancy-weighted reward and (1-g) iota^T v") {
  Rng rng(4);
  const TabularMdp mdp = random_mdp(rng, 5, 2, 0.8);
  const auto pi = random_policy(rng, 5, 2);
  const auto vf = policy_value(mdp, pi);
  const double via_values = (1.0 - mdp.discount()) * mdp.initial_dist().dot(vf.v);
  CHECK(average_reward(mdp, pi) == doctest::Approx(via_values).epsilon(1e-12));
}

TEST_CASE("policy value agrees with Monte Carlo rollouts") {
  Rng rng(7);
  const TabularMdp mdp = random_mdp(rng, 4, 2, 0.7);
  const auto pi = random_policy(rng, 4, 2);
  const auto vf = policy_value(mdp, pi);
  Rng sim(99);
  const int episodes = 40000, horizon = 60;
  for (int s0 = 0; s0 < 4; ++s0) {
    double total = 0.0;
    for (int e = 0; e < episodes; ++e) {
      int s = s0;
      double disc = 1.0, ret = 0.0;
      for (int t = 0; t < horizon; ++t) {
        const std::vector<double> row{pi.probs(s, 0), pi.probs(s, 1)};
        const int a = sim.categorical(row);
        const int sn = sample_next_state(mdp, s, a, sim);
        ret += disc * mdp.r(s, a, sn);
        disc *= mdp.discount();
        s = sn;
      }
      total += ret;
    }
    // returns are bounded by 1/(1-g); the standard error is well below 0.02
    CHECK(std::abs(total / episodes - vf.v(s0)) < 0.03);
  }
}

TEST_CASE("collected experience follows the discounted occupancy") {
  Rng rng(8);
  const TabularMdp mdp = random_mdp(rng, 5, 2, 0.9);
  const auto pi = random_policy(rng, 5, 2);
  ReplayBuffer<ExperienceTuple> buffer(200000, 1);
  collect_experience(mdp, pi, buffer, 200000, 17);
  REQUIRE(buffer.size() == 200000);
  Vector counts = Vector::Zero(5);
  for (std::size_t i = 0; i < buffer.size(); ++i) counts(buffer.at(i).s) += 1.0;
  counts /= static_cast<double>(buffer.size());
  const auto occ = state_visitation(mdp, pi);
  CHECK((counts - occ.d).cwiseAbs().maxCoeff() < 0.01);
}

TEST_CASE("optimal values have zero Bellman residual") {
  const TabularMdp mdp = swap_chain(0.9);
  const auto vf = policy_value(mdp, TabularPolicy::uniform(2, 1));
  CHECK(bellman_optimality_residual(mdp, vf) < 1e-12);
  auto off = vf;
  off.v(1) += 0.5;
  CHECK(bellman_optimality_residual(mdp, off) > 0.4);
}

TEST_CASE("constructor validation") {
  Vector iota(2);
  iota << 0.7, 0.2;
  Tensor3 tau(2, 1, 2), r(2, 1, 2);
  tau(0, 0, 0) = 1.0;
  tau(1, 0, 1) = 1.0;
  CHECK_THROWS_AS(TabularMdp(iota, tau, r, 0.9), std::invalid_argument);
  iota << 0.8, 0.2;
  CHECK_NOTHROW(TabularMdp(iota, tau, r, 0.9));
  CHECK_THROWS_AS(TabularMdp(iota, tau, r, 1.0), std::invalid_argument);
  tau(1, 0, 0) = 0.5;
  CHECK_THROWS_AS(TabularMdp(iota, tau, r, 0.9), std::invalid_argument);
}

TEST_CASE("zero initial mass is allowed but reported") {
  const TabularMdp mdp = swap_chain(0.9);
  CHECK_FALSE(mdp.has_full_initial_support());
}

TEST_CASE("json round trip") {
  Rng rng(12);
  const TabularMdp mdp = random_mdp(rng, 3, 2, 0.95);
  nlohmann::json j = mdp;
  const TabularMdp back = mdp_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.num_states() == 3);
  CHECK(back.discount() == 0.95);
  CHECK(back.transition().data() == mdp.transition().data());
  CHECK(back.reward().data() == mdp.reward().data());
  j["tau"][0][0] = std::vector<double>{0.5, 0.5};
  CHECK_THROWS_AS(mdp_from_json(j), std::invalid_argument);
}

TEST_CASE("replay buffer overwrites oldest entries") {
  ReplayBuffer<int> buf(3, 0);
  for (int i = 0; i < 5; ++i) buf.push(i);
  CHECK(buf.size() == 3);
  CHECK(buf.at(0) == 2);
  CHECK(buf.back() == 4);
  for (int x : buf.sample(50)) CHECK((x >= 2 && x <= 4));
}
