#pragma once

// Finite-difference checks of every training loss.

#include "dualcrl/dualcrl.hpp"
#include "instances.hpp"

#include <cmath>
#include <functional>

namespace testing {

using namespace dualcrl;

inline double rel_error(const Vector& a, const Vector& b) {
  return (a - b).norm() / std::max(1e-10, a.norm() + b.norm());
}

// Central differences of f around x.
inline Vector numeric_gradient(const std::function<double(const Vector&)>& f, Vector x, double h = 1e-6) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double x0 = x(i);
    x(i) = x0 + h;
    const double fp = f(x);
    x(i) = x0 - h;
    const double fm = f(x);
    x(i) = x0;
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline Vector flat(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }
inline Matrix unflat(const Vector& v, Eigen::Index rows, Eigen::Index cols) { return Eigen::Map<const Matrix>(v.data(), rows, cols); }

inline std::vector<ExperienceTuple> random_batch(Rng& rng, int S, int A, int B) {
  std::vector<ExperienceTuple> batch;
  for (int i = 0; i < B; ++i)
    batch.push_back({rng.uniform_int(S), rng.uniform_int(A), rng.uniform(-1.0, 1.0), rng.uniform_int(S),
                     rng.uniform() < 0.2});
  return batch;
}

inline Matrix random_policy_matrix(Rng& rng, int S, int A) { return random_policy(rng, S, A).probs; }

inline EntropySpec random_entropy(Rng& rng, int S, int A, double alpha) {
  return EntropySpec{TabularPolicy{random_policy_matrix(rng, S, A)}, alpha};
}

inline void randomize_modifiers(RewardModifierBank& bank, Rng& rng) {
  for (ModifierTables& t : bank.tables())
    for (TabularTable* x : t.all())
      for (Eigen::Index i = 0; i < x->values.size(); ++i) x->values.data()[i] = rng.uniform(0.0, 1.0);
}

// Every constraint family on an S x A problem with random parameters.
inline std::vector<ConstraintSpec> all_families(Rng& rng, int S, int A) {
  Tensor3 rk(S, A, S), cost(S, A, S);
  for (double& x : rk.data()) x = rng.uniform(-1.0, 1.0);
  for (double& x : cost.data()) x = rng.uniform() < 0.5 ? rng.uniform(0.0, 2.0) : 0.0;
  ImmediateTransitionCost itc(S, A);
  for (double& x : itc.cost) x = rng.uniform() < 0.5 ? rng.uniform(0.0, 2.0) : 0.0;
  Vector dl = Vector::Constant(S, 0.1), du = Vector::Constant(S, 0.6);
  Matrix pl = Matrix::Constant(S, A, 0.05), pu = Matrix::Constant(S, A, 0.3);
  Matrix al = Matrix::Constant(S, A, 0.1), au = Matrix::Constant(S, A, 0.8);
  return {ValueConstraint{rk, 0.2},          StateDensityBound{dl, du},
          StateActionDensityBound{pl, pu},   ActionDensityBound{al, au},
          AvgTransitionCost{cost},           itc};
}

inline PendulumTransition random_transition(Rng& rng) {
  auto obs = [&] {
    const double th = rng.uniform(-M_PI, M_PI), dth = rng.uniform(-8.0, 8.0);
    return Eigen::Vector3d(std::cos(th), std::sin(th), dth);
  };
  return {obs(), rng.uniform(-2.0, 2.0), rng.uniform(-16.0, 0.0), obs()};
}

inline Vector normal_draws(Rng& rng, Eigen::Index n) {
  Vector xi(n);
  for (Eigen::Index i = 0; i < n; ++i) xi(i) = rng.normal();
  return xi;
}

/// Worst relative error of the tabular critic, actor, density and reward
/// gradients over `draws` random draws.
inline double tabular_gradient_error(std::uint64_t seed, int draws) {
  Rng rng(seed);
  const int S = 4, A = 3;
  double worst = 0.0;
  for (int draw = 0; draw < draws; ++draw) {
    auto cons = all_families(rng, S, A);
    cons.push_back(random_entropy(rng, S, A, rng.uniform(0.1, 1.0)));
    RewardModifierBank bank(cons, S, A);
    randomize_modifiers(bank, rng);
    const auto batch = random_batch(rng, S, A, 24);
    const Matrix pi = random_policy_matrix(rng, S, A);
    const Matrix q0 = Matrix::Random(S, A), qt = Matrix::Random(S, A);
    const Vector density = random_policy(rng, 1, S).probs.row(0).transpose();

    for (TrainMode mode : {TrainMode::ValueBased, TrainMode::ActorCritic}) {
      const TableLoss c = critic_loss(q0, qt, bank, batch, 0.95, mode, &pi);
      const Vector fd = numeric_gradient(
          [&](const Vector& x) { return critic_loss(unflat(x, S, A), qt, bank, batch, 0.95, mode, &pi).loss; },
          flat(q0));
      worst = std::max(worst, rel_error(flat(c.grad), fd));
    }

    const Matrix logits = Matrix::Random(S, A);
    const TableLoss a = actor_loss(logits, q0, bank, batch);
    const Vector fd_a = numeric_gradient(
        [&](const Vector& x) { return actor_loss(unflat(x, S, A), q0, bank, batch).loss; }, flat(logits));
    worst = std::max(worst, rel_error(flat(a.grad), fd_a));

    SoftmaxDensity dens(S);
    dens.logits = Vector::Random(S);
    Vector gd;
    density_loss(dens, batch, &gd);
    const Vector fd_d = numeric_gradient(
        [&](const Vector& x) {
          SoftmaxDensity d2(S);
          d2.logits = x;
          return density_loss(d2, batch, nullptr);
        },
        dens.logits);
    worst = std::max(worst, rel_error(gd, fd_d));

    std::vector<ModifierTables> grads;
    reward_loss(bank, batch, 0.95, &density, &pi, &grads);
    for (std::size_t k = 0; k < grads.size(); ++k)
      for (std::size_t i = 0; i < 4; ++i) {
        const TabularTable* g = grads[k].all()[i];
        if (g->values.size() == 0) continue;
        TabularTable* target = bank.tables()[k].all()[i];
        const Matrix saved = target->values;
        const Vector fd_r = numeric_gradient(
            [&](const Vector& x) {
              target->values = unflat(x, saved.rows(), saved.cols());
              return reward_loss(bank, batch, 0.95, &density, &pi, nullptr);
            },
            flat(saved));
        target->values = saved;
        worst = std::max(worst, rel_error(flat(g->values), fd_r));
      }
  }
  return worst;
}

/// Same for the twin critics, the reparametrized actor and the Pendulum
/// reward modifiers.
inline double pendulum_gradient_error(std::uint64_t seed, int draws, const std::vector<int>& hidden) {
  Rng rng(seed);
  PendulumConstraints cons;
  cons.density = SectorDensityBound{AngleSector{-1.0, 1.5}, 0.02};
  cons.velocity = VelocityValueConstraint{-5.0};
  double worst = 0.0;
  for (int draw = 0; draw < draws; ++draw) {
    PendulumAgent agent = make_pendulum_agent(hidden, cons, 2.0, rng);
    for (int j = 0; j < 2; ++j) agent.targets[j] = make_pendulum_agent(hidden, cons, 2.0, rng).critics[j];
    agent.modifiers.w = rng.uniform(0.0, 1.0);
    agent.modifiers.upper.params() = Vector::Random(agent.modifiers.upper.params().size());
    std::vector<PendulumTransition> batch;
    for (int b = 0; b < 16; ++b) batch.push_back(random_transition(rng));
    const Vector xi = normal_draws(rng, 16);
    const double alpha = rng.uniform(0.01, 0.5);

    const CriticLoss c = pendulum_critic_loss(agent, batch, xi, 0.99, alpha);
    for (int j = 0; j < 2; ++j) {
      const Vector fd = numeric_gradient(
          [&](const Vector& x) {
            PendulumAgent a2 = agent;
            a2.critics[j].params() = x;
            return pendulum_critic_loss(a2, batch, xi, 0.99, alpha).loss;
          },
          agent.critics[j].params());
      worst = std::max(worst, rel_error(c.grads[j], fd));
    }

    Vector ga;
    pendulum_actor_loss(agent, batch, xi, alpha, &ga);
    const Vector fd_a = numeric_gradient(
        [&](const Vector& x) {
          PendulumAgent a2 = agent;
          a2.actor.params() = x;
          return pendulum_actor_loss(a2, batch, xi, alpha, nullptr);
        },
        agent.actor.params());
    worst = std::max(worst, rel_error(ga, fd_a));

    Vector density(16);
    for (int b = 0; b < 16; ++b) density(b) = rng.uniform(0.001, 0.05);
    ModifierGrads gr;
    pendulum_reward_loss(agent.modifiers, batch, density, 0.99, &gr);
    const Vector fd_u = numeric_gradient(
        [&](const Vector& x) {
          PendulumModifiers m2 = agent.modifiers;
          m2.upper.params() = x;
          return pendulum_reward_loss(m2, batch, density, 0.99, nullptr);
        },
        agent.modifiers.upper.params());
    worst = std::max(worst, rel_error(gr.upper, fd_u));
    Vector w0(1);
    w0 << agent.modifiers.w;
    const Vector fd_w = numeric_gradient(
        [&](const Vector& x) {
          PendulumModifiers m2 = agent.modifiers;
          m2.w = x(0);
          return pendulum_reward_loss(m2, batch, density, 0.99, nullptr);
        },
        w0);
    worst = std::max(worst, rel_error(Vector::Constant(1, gr.w), fd_w));
  }
  return worst;
}

}  // namespace testing
