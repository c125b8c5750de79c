#include "dualcrl/dualcrl.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <sstream>

namespace dualcrl {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::vector<int> with_ends(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

Matrix obs_matrix(const std::vector<PendulumTransition>& batch, bool next) {
  Matrix X(3, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b)
    X.col(static_cast<Eigen::Index>(b)) = next ? batch[b].obs_next : batch[b].obs;
  return X;
}

Matrix critic_input(const Matrix& obs, const Eigen::RowVectorXd& actions) {
  Matrix X(4, obs.cols());
  X.topRows(3) = obs;
  X.row(3) = actions;
  return X;
}

double velocity_reward(const Eigen::Vector3d& obs) { return -obs(2) * obs(2); }

}  // namespace

std::vector<std::string> PendulumConstraints::names() const {
  std::vector<std::string> out;
  if (entropy) out.push_back("entropy#" + std::to_string(out.size()));
  if (density) out.push_back("sector_density#" + std::to_string(out.size()));
  if (velocity) out.push_back("velocity_value#" + std::to_string(out.size()));
  return out;
}

void to_json(nlohmann::json& j, const PendulumConstraints& c) {
  j = nlohmann::json{{"entropy", c.entropy}};
  if (c.density)
    j["density"] = {{"sector", {c.density->sector.lo, c.density->sector.hi}}, {"epsilon", c.density->epsilon}};
  if (c.velocity) j["velocity"] = {{"threshold", c.velocity->threshold}};
}

void from_json(const nlohmann::json& j, PendulumConstraints& c) {
  PendulumConstraints out;
  out.entropy = j.value("entropy", true);
  if (j.contains("density") && !j.at("density").is_null()) {
    SectorDensityBound d;
    const auto& jd = j.at("density");
    if (jd.contains("sector")) {
      d.sector.lo = jd.at("sector").at(0).get<double>();
      d.sector.hi = jd.at("sector").at(1).get<double>();
    }
    d.epsilon = jd.value("epsilon", d.epsilon);
    require(d.epsilon > 0.0, "sector density bound: epsilon must be positive");
    require(d.sector.lo < d.sector.hi, "sector density bound: empty sector");
    out.density = d;
  }
  if (j.contains("velocity") && !j.at("velocity").is_null())
    out.velocity = VelocityValueConstraint{j.at("velocity").value("threshold", 0.0)};
  c = out;
}

Eigen::Vector2d pendulum_state_of(const Eigen::Vector3d& obs) { return {std::atan2(obs(1), obs(0)), obs(2)}; }

double PendulumModifiers::upper_value(const Eigen::Vector3d& obs) const {
  if (!constraints.density) return 0.0;
  if (!constraints.density->sector.contains(pendulum_state_of(obs)(0))) return 0.0;
  return softplus(upper.forward_one(obs)(0));
}

double PendulumModifiers::reward(const Eigen::Vector3d& obs) const {
  double r = 0.0;
  if (constraints.velocity) r += w * velocity_reward(obs);
  if (constraints.density) r -= upper_value(obs);
  return r;
}

double pendulum_log_teacher(double max_torque) { return -std::log(2.0 * max_torque); }

double PendulumAgent::act(const Eigen::Vector3d& obs) const {
  return max_torque * std::tanh(actor.forward_one(obs)(0));
}

PendulumAgent make_pendulum_agent(const std::vector<int>& hidden, const PendulumConstraints& constraints,
                                  double max_torque, Rng& rng) {
  PendulumAgent agent;
  agent.actor = Mlp(with_ends(3, hidden, 2), rng);
  for (int j = 0; j < 2; ++j) {
    agent.critics[j] = Mlp(with_ends(4, hidden, 1), rng);
    agent.targets[j] = agent.critics[j];
  }
  agent.modifiers.constraints = constraints;
  agent.modifiers.upper = Mlp(with_ends(3, hidden, 1), rng);
  // start the modifier near zero: softplus(-5) ~ 7e-3
  agent.modifiers.upper.bias(agent.modifiers.upper.num_layers() - 1)(0) = -5.0;
  agent.max_torque = max_torque;
  return agent;
}

std::vector<NamedTensor> PendulumAgent::tensors() const {
  auto dims_tensor = [](const std::string& name, const Mlp& m) {
    Vector d(static_cast<Eigen::Index>(m.dims().size()));
    for (std::size_t i = 0; i < m.dims().size(); ++i) d(static_cast<Eigen::Index>(i)) = m.dims()[i];
    return make_tensor(name, d);
  };
  std::vector<NamedTensor> out;
  out.push_back(dims_tensor("actor.dims", actor));
  out.push_back(make_tensor("actor", actor.params()));
  for (int j = 0; j < 2; ++j) {
    out.push_back(make_tensor("critic" + std::to_string(j), critics[j].params()));
    out.push_back(make_tensor("target" + std::to_string(j), targets[j].params()));
  }
  out.push_back(dims_tensor("critic.dims", critics[0]));
  out.push_back(dims_tensor("upper.dims", modifiers.upper));
  out.push_back(make_tensor("upper", modifiers.upper.params()));
  Vector scalars(3);
  scalars << modifiers.w, max_torque, alpha;
  out.push_back(make_tensor("scalars", scalars));
  const auto& c = modifiers.constraints;
  Vector cons(6);
  cons << (c.entropy ? 1.0 : 0.0), (c.density ? 1.0 : 0.0), c.density ? c.density->sector.lo : 0.0,
      c.density ? c.density->sector.hi : 0.0, c.density ? c.density->epsilon : 0.0,
      c.velocity ? c.velocity->threshold : std::nan("");
  out.push_back(make_tensor("constraints", cons));
  return out;
}

PendulumAgent PendulumAgent::from_tensors(const std::vector<NamedTensor>& tensors) {
  auto dims_of = [&](const std::string& name) {
    const Matrix d = tensor_matrix(find_tensor(tensors, name));
    std::vector<int> out;
    for (Eigen::Index i = 0; i < d.size(); ++i) out.push_back(static_cast<int>(std::lround(d.data()[i])));
    return out;
  };
  auto load = [&](Mlp& m, const std::string& name) {
    const Matrix p = tensor_matrix(find_tensor(tensors, name));
    if (p.size() != m.params().size()) throw std::invalid_argument("checkpoint tensor '" + name + "' has the wrong size");
    m.params() = Eigen::Map<const Vector>(p.data(), p.size());
  };
  PendulumAgent a;
  a.actor = Mlp(dims_of("actor.dims"));
  load(a.actor, "actor");
  for (int j = 0; j < 2; ++j) {
    a.critics[j] = Mlp(dims_of("critic.dims"));
    a.targets[j] = Mlp(dims_of("critic.dims"));
    load(a.critics[j], "critic" + std::to_string(j));
    load(a.targets[j], "target" + std::to_string(j));
  }
  a.modifiers.upper = Mlp(dims_of("upper.dims"));
  load(a.modifiers.upper, "upper");
  const Matrix sc = tensor_matrix(find_tensor(tensors, "scalars"));
  a.modifiers.w = sc(0);
  a.max_torque = sc(1);
  a.alpha = sc(2);
  const Matrix c = tensor_matrix(find_tensor(tensors, "constraints"));
  a.modifiers.constraints.entropy = c(0) != 0.0;
  if (c(1) != 0.0) a.modifiers.constraints.density = SectorDensityBound{AngleSector{c(2), c(3)}, c(4)};
  if (!std::isnan(c(5))) a.modifiers.constraints.velocity = VelocityValueConstraint{c(5)};
  if (a.actor.input_dim() != 3 || a.actor.output_dim() != 2 || a.critics[0].input_dim() != 4)
    throw std::invalid_argument("checkpoint is not a pendulum agent");
  return a;
}

// ---------------------------------------------------------------- losses

CriticLoss pendulum_critic_loss(const PendulumAgent& agent, const std::vector<PendulumTransition>& batch,
                                const Vector& xi, double gamma, double alpha) {
  require(!batch.empty(), "critic loss: empty batch");
  const auto B = static_cast<Eigen::Index>(batch.size());
  require(xi.size() == B, "critic loss: one noise draw per batch entry");
  const bool er = agent.modifiers.constraints.entropy;
  const double log_t = pendulum_log_teacher(agent.max_torque);

  const Matrix obs = obs_matrix(batch, false), next = obs_matrix(batch, true);
  const Matrix head = agent.actor.forward(next);
  Eigen::RowVectorXd a_next(B), logp(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const SquashedSample smp = squashed_gaussian(head(0, b), head(1, b), xi(b), agent.max_torque);
    a_next(b) = smp.action;
    logp(b) = smp.log_prob;
  }
  const Matrix xn = critic_input(next, a_next);
  const Eigen::RowVectorXd q0 = agent.targets[0].forward(xn).row(0), q1 = agent.targets[1].forward(xn).row(0);
  Eigen::RowVectorXd y(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    double boot = std::min(q0(b), q1(b));
    if (er) boot -= alpha * (logp(b) - log_t);
    y(b) = batch[static_cast<std::size_t>(b)].reward + agent.modifiers.reward(batch[static_cast<std::size_t>(b)].obs) +
           gamma * boot;
  }
  Eigen::RowVectorXd act(B);
  for (Eigen::Index b = 0; b < B; ++b) act(b) = batch[static_cast<std::size_t>(b)].action;
  const Matrix x = critic_input(obs, act);
  CriticLoss out;
  for (int j = 0; j < 2; ++j) {
    Mlp::Cache cache;
    const Eigen::RowVectorXd q = agent.critics[j].forward(x, &cache).row(0);
    const Eigen::RowVectorXd diff = q - y;
    out.loss += diff.squaredNorm() / static_cast<double>(B);
    out.grads[j] = agent.critics[j].backward(cache, Matrix(2.0 * diff / static_cast<double>(B)));
  }
  return out;
}

double pendulum_actor_loss(const PendulumAgent& agent, const std::vector<PendulumTransition>& batch, const Vector& xi,
                           double alpha, Vector* grad) {
  require(!batch.empty(), "actor loss: empty batch");
  const auto B = static_cast<Eigen::Index>(batch.size());
  require(xi.size() == B, "actor loss: one noise draw per batch entry");
  const bool er = agent.modifiers.constraints.entropy;
  const double a_coef = er ? alpha : 0.0;
  const double log_t = pendulum_log_teacher(agent.max_torque);
  const double inv_b = 1.0 / static_cast<double>(B);

  const Matrix obs = obs_matrix(batch, false);
  Mlp::Cache actor_cache;
  const Matrix head = agent.actor.forward(obs, &actor_cache);
  std::vector<SquashedSample> smp;
  smp.reserve(static_cast<std::size_t>(B));
  Eigen::RowVectorXd acts(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    smp.push_back(squashed_gaussian(head(0, b), head(1, b), xi(b), agent.max_torque));
    acts(b) = smp.back().action;
  }
  const Matrix x = critic_input(obs, acts);
  std::array<Mlp::Cache, 2> caches;
  std::array<Eigen::RowVectorXd, 2> q;
  for (int j = 0; j < 2; ++j) q[j] = agent.critics[j].forward(x, &caches[j]).row(0);

  double loss = 0.0;
  std::array<Matrix, 2> dq{Matrix::Zero(1, B), Matrix::Zero(1, B)};
  for (Eigen::Index b = 0; b < B; ++b) {
    const int j = q[0](b) <= q[1](b) ? 0 : 1;
    loss += (a_coef * (smp[static_cast<std::size_t>(b)].log_prob - log_t) - q[j](b)) * inv_b;
    dq[j](0, b) = -inv_b;
  }
  if (grad != nullptr) {
    Eigen::RowVectorXd dlda = Eigen::RowVectorXd::Zero(B);
    for (int j = 0; j < 2; ++j) {
      Matrix dX;
      agent.critics[j].backward(caches[j], dq[j], &dX);
      dlda += dX.row(3);
    }
    Matrix dhead(2, B);
    for (Eigen::Index b = 0; b < B; ++b) {
      const SquashedSample& s = smp[static_cast<std::size_t>(b)];
      dhead(0, b) = a_coef * s.dlogp_dmean * inv_b + dlda(b) * s.daction_dmean;
      dhead(1, b) = a_coef * s.dlogp_dlogstd * inv_b + dlda(b) * s.daction_dlogstd;
    }
    *grad = agent.actor.backward(actor_cache, dhead);
  }
  return loss;
}

double pendulum_reward_loss(const PendulumModifiers& mods, const std::vector<PendulumTransition>& batch,
                            const Vector& density, double gamma, ModifierGrads* grads) {
  require(!batch.empty(), "reward loss: empty batch");
  const auto B = static_cast<Eigen::Index>(batch.size());
  require(density.size() == B, "reward loss: one density value per batch entry");
  const double inv_b = 1.0 / static_cast<double>(B);
  double loss = 0.0;
  if (grads != nullptr) {
    grads->upper = Vector::Zero(mods.upper.params().size());
    grads->w = 0.0;
  }
  if (mods.constraints.velocity) {
    double mean = 0.0;
    for (const PendulumTransition& e : batch)
      mean += (velocity_reward(e.obs) - (1.0 - gamma) * mods.constraints.velocity->threshold) * inv_b;
    loss += mods.w * mean;
    if (grads != nullptr) grads->w = mean;
  }
  if (mods.constraints.density) {
    const SectorDensityBound& bound = *mods.constraints.density;
    const Matrix obs = obs_matrix(batch, false);
    Mlp::Cache cache;
    const Matrix u = mods.upper.forward(obs, &cache);
    Matrix dY = Matrix::Zero(1, B);
    for (Eigen::Index b = 0; b < B; ++b) {
      if (!bound.sector.contains(pendulum_state_of(obs.col(b))(0))) continue;
      const double coef = bound.epsilon / std::max(density(b), kDensityFloor) - 1.0;
      loss += softplus(u(0, b)) * coef * inv_b;
      dY(0, b) = sigmoid(u(0, b)) * coef * inv_b;
    }
    if (grads != nullptr) grads->upper = mods.upper.backward(cache, dY);
  }
  return loss;
}

// ---------------------------------------------------------------- training

namespace {

std::string pendulum_dump(long step, const PendulumAgent& agent, double lq, double lpi, double lr) {
  std::ostringstream os;
  os << "step " << step << "\nloss_q " << lq << "\nloss_pi " << lpi << "\nloss_r " << lr << "\n";
  os << "actor |params| " << agent.actor.params().norm() << "\n";
  for (int j = 0; j < 2; ++j) os << "critic" << j << " |params| " << agent.critics[j].params().norm() << "\n";
  os << "w " << agent.modifiers.w << "\nalpha " << agent.alpha << "\n";
  return os.str();
}

}  // namespace

PendulumTrainResult train_pendulum(const PendulumSpec& spec, const PendulumConstraints& constraints,
                                   const TrainConfig& cfg, const PendulumObserver& observer) {
  cfg.validate();
  spec.validate();
  Rng root(cfg.seed);
  Rng init_rng = root.split(0), env_rng = root.split(1), act_rng = root.split(2), noise_rng = root.split(4);

  PendulumTrainResult result;
  PendulumAgent& agent = result.agent;
  agent = make_pendulum_agent(cfg.hidden, constraints, spec.max_torque, init_rng);
  TrainMetrics& metrics = result.metrics;
  metrics.constraint_names = constraints.names();

  PendulumEnv env(spec);
  ReplayBuffer<PendulumTransition> buffer(cfg.buffer_capacity, root.split(3).engine()());
  KdeEstimator kde(2, cfg.kde_window);
  bool kde_fitted = false;

  std::array<Adam, 2> opt_q{Adam(cfg.lr_q), Adam(cfg.lr_q)};
  Adam opt_pi(cfg.lr_pi), opt_upper(cfg.lr_r), opt_w(cfg.lr_r);

  std::deque<double> recent_returns;
  double episode_return = 0.0;
  Eigen::Vector3d obs = env.reset(env_rng);

  auto env_step = [&](double torque) {
    kde.push(Vector(pendulum_state_of(obs)));
    auto [next, reward, truncated] = env.step(torque);
    buffer.push(PendulumTransition{obs, torque, reward, next});
    episode_return += reward;
    if (truncated) {
      recent_returns.push_back(episode_return);
      if (recent_returns.size() > 10) recent_returns.pop_front();
      episode_return = 0.0;
      obs = env.reset(env_rng);
    } else {
      obs = next;
    }
  };

  for (long t = 0; t < cfg.warmup_steps; ++t) env_step(act_rng.uniform(-spec.max_torque, spec.max_torque));

  double lq = 0.0, lpi = 0.0, lr = 0.0;
  auto check = [&](long step, double v, const char* what) {
    if (!std::isfinite(v))
      throw TrainingDiverged(std::string("non-finite ") + what + " at step " + std::to_string(step),
                             pendulum_dump(step, agent, lq, lpi, lr));
  };
  const auto B = static_cast<Eigen::Index>(cfg.batch_size);
  auto noise = [&] {
    Vector xi(B);
    for (Eigen::Index b = 0; b < B; ++b) xi(b) = noise_rng.normal();
    return xi;
  };

  for (long t = 1; t <= cfg.total_steps; ++t) {
    agent.alpha = constraints.entropy ? alpha_at(cfg, t) : 0.0;
    const Vector head = agent.actor.forward_one(obs);
    env_step(squashed_gaussian(head(0), head(1), act_rng.normal(), spec.max_torque).action);

    const std::vector<PendulumTransition> batch = buffer.sample(static_cast<std::size_t>(cfg.batch_size));
    if (t % cfg.stride_q == 0) {
      const CriticLoss c = pendulum_critic_loss(agent, batch, noise(), cfg.gamma, agent.alpha);
      lq = c.loss;
      check(t, lq, "critic loss");
      for (int j = 0; j < 2; ++j) opt_q[j].step(agent.critics[j].params(), c.grads[j]);
    }
    if (t % cfg.stride_pi == 0) {
      Vector g;
      lpi = pendulum_actor_loss(agent, batch, noise(), agent.alpha, &g);
      check(t, lpi, "actor loss");
      opt_pi.step(agent.actor.params(), g);
    }
    if (t % cfg.stride_r == 0 && (constraints.density || constraints.velocity)) {
      Vector dens = Vector::Zero(B);
      if (constraints.density) {
        // bandwidth follows the window every 100 steps
        if (t % 100 == 0 || !kde_fitted) {
          kde.refit();
          kde_fitted = true;
        }
        for (Eigen::Index b = 0; b < B; ++b) {
          const Eigen::Vector2d st = pendulum_state_of(batch[static_cast<std::size_t>(b)].obs);
          if (constraints.density->sector.contains(st(0))) dens(b) = kde.density(Vector(st));
        }
      }
      ModifierGrads g;
      lr = pendulum_reward_loss(agent.modifiers, batch, dens, cfg.gamma, &g);
      check(t, lr, "reward loss");
      if (constraints.density) opt_upper.step(agent.modifiers.upper.params(), g.upper);
      if (constraints.velocity) {
        Vector w(1);
        w << agent.modifiers.w;
        Vector gw(1);
        gw << g.w;
        opt_w.step(w, gw);
        agent.modifiers.w = std::max(0.0, w(0));
      }
    }
    if (t % cfg.target_stride == 0)
      for (int j = 0; j < 2; ++j) polyak_update(agent.targets[j].params(), agent.critics[j].params(), cfg.target_tau);

    if (t % cfg.log_every == 0) {
      MetricsRecord rec;
      rec.step = t;
      rec.avg_return = recent_returns.empty()
                           ? 0.0
                           : std::accumulate(recent_returns.begin(), recent_returns.end(), 0.0) /
                                 static_cast<double>(recent_returns.size());
      rec.alpha = agent.alpha;
      rec.loss_q = lq;
      rec.loss_pi = lpi;
      rec.loss_r = lr;
      const Matrix pts = kde.points();
      if (constraints.entropy) {
        // mean log(pi / pi_T) over a fresh batch
        const Vector xi = noise();
        const Matrix heads = agent.actor.forward(obs_matrix(batch, false));
        double kl = 0.0;
        for (Eigen::Index b = 0; b < B; ++b)
          kl += (squashed_gaussian(heads(0, b), heads(1, b), xi(b), spec.max_torque).log_prob -
                 pendulum_log_teacher(spec.max_torque)) /
                static_cast<double>(B);
        rec.violations.push_back(kl);
        rec.modifier_norms.push_back(0.0);
      }
      if (constraints.density) {
        double worst = 0.0;
        const Eigen::Index stride = std::max<Eigen::Index>(1, pts.cols() / 200);
        for (Eigen::Index i = 0; i < pts.cols(); i += stride)
          if (constraints.density->sector.contains(pts(0, i)))
            worst = std::max(worst, kde.density(pts.col(i)) - constraints.density->epsilon);
        rec.violations.push_back(worst);
        rec.modifier_norms.push_back(agent.modifiers.upper.params().norm());
      }
      if (constraints.velocity) {
        const double mean = pts.cols() > 0 ? -pts.row(1).squaredNorm() / static_cast<double>(pts.cols()) : 0.0;
        rec.violations.push_back(std::max(0.0, (1.0 - cfg.gamma) * constraints.velocity->threshold - mean));
        rec.modifier_norms.push_back(agent.modifiers.w);
      }
      metrics.records.push_back(std::move(rec));
    }
    if (observer) observer(t, agent);
  }
  return result;
}

PendulumEvaluation evaluate_pendulum(const PendulumSpec& spec, const PendulumAgent& agent, int episodes, int steps,
                                     std::uint64_t seed) {
  require(episodes > 0 && steps > 0, "evaluate_pendulum: episodes and steps must be positive");
  PendulumSpec s = spec;
  s.episode_length = steps;
  PendulumEnv env(s);
  Rng rng(seed);
  PendulumEvaluation out;
  for (int e = 0; e < episodes; ++e) {
    Eigen::Vector3d obs = env.reset(rng);
    double ret = 0.0;
    for (int t = 0; t < steps; ++t) {
      out.states.emplace_back(wrap_angle(env.state().theta), env.state().theta_dot);
      auto [next, reward, truncated] = env.step(agent.act(obs));
      ret += reward;
      obs = next;
      if (truncated) break;
    }
    out.returns.push_back(ret);
  }
  return out;
}

}  // namespace dualcrl
