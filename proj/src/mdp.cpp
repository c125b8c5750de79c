#include "dualcrl/mdp.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace dualcrl {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

bool is_distribution(const double* p, int n) {
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!(p[i] >= 0.0)) return false;
    total += p[i];
  }
  return std::abs(total - 1.0) <= kProbTol * std::max(1, n);
}

// Row-stochastic transition matrix under pi: P(s, s') = sum_a pi(a|s) tau(s'|s,a).
Matrix policy_transition(const TabularMdp& mdp, const TabularPolicy& policy) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  Matrix P = Matrix::Zero(S, S);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) {
      const double w = policy.probs(s, a);
      if (w == 0.0) continue;
      const double* row = mdp.transition().slice(s, a);
      for (int sn = 0; sn < S; ++sn) P(s, sn) += w * row[sn];
    }
  return P;
}

void check_policy(const TabularMdp& mdp, const TabularPolicy& policy) {
  require(policy.probs.rows() == mdp.num_states() && policy.probs.cols() == mdp.num_actions(),
          "policy shape does not match MDP");
}

}  // namespace

TabularMdp::TabularMdp(Vector initial_dist, Tensor3 transition, Tensor3 reward, double discount)
    : num_states_(static_cast<int>(initial_dist.size())),
      num_actions_(transition.dim1()),
      initial_dist_(std::move(initial_dist)),
      transition_(std::move(transition)),
      reward_(std::move(reward)),
      discount_(discount) {
  const int S = num_states_, A = num_actions_;
  require(S > 0 && A > 0, "MDP needs at least one state and one action");
  require(transition_.dim0() == S && transition_.dim2() == S, "transition tensor must be S x A x S");
  require(reward_.dim0() == S && reward_.dim1() == A && reward_.dim2() == S,
          "reward tensor must be S x A x S");
  require(discount_ >= 0.0 && discount_ < 1.0, "discount must lie in [0, 1)");
  require(is_distribution(initial_dist_.data(), S), "initial distribution is not a probability vector");
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a)
      require(is_distribution(transition_.slice(s, a), S),
              "transition row (" + std::to_string(s) + "," + std::to_string(a) +
                  ") is not a probability vector");
  for (double x : reward_.data()) require(std::isfinite(x), "reward entries must be finite");
}

Matrix TabularMdp::expected(const Tensor3& f) const {
  Matrix out(num_states_, num_actions_);
  for (int s = 0; s < num_states_; ++s)
    for (int a = 0; a < num_actions_; ++a) {
      const double* t = transition_.slice(s, a);
      const double* v = f.slice(s, a);
      double acc = 0.0;
      for (int sn = 0; sn < num_states_; ++sn) acc += t[sn] * v[sn];
      out(s, a) = acc;
    }
  return out;
}

Matrix TabularMdp::expected_reward() const { return expected(reward_); }

bool TabularMdp::has_full_initial_support() const { return (initial_dist_.array() > 0.0).all(); }

TabularMdp TabularMdp::with_reward(Tensor3 reward) const {
  return TabularMdp(initial_dist_, transition_, std::move(reward), discount_);
}

void to_json(nlohmann::json& j, const TabularMdp& mdp) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  auto tensor = [&](const Tensor3& t) {
    nlohmann::json out = nlohmann::json::array();
    for (int s = 0; s < S; ++s) {
      nlohmann::json rows = nlohmann::json::array();
      for (int a = 0; a < A; ++a) rows.push_back(std::vector<double>(t.slice(s, a), t.slice(s, a) + S));
      out.push_back(std::move(rows));
    }
    return out;
  };
  j = nlohmann::json{{"num_states", S},
                     {"num_actions", A},
                     {"gamma", mdp.discount()},
                     {"iota", std::vector<double>(mdp.initial_dist().data(),
                                                  mdp.initial_dist().data() + S)},
                     {"tau", tensor(mdp.transition())},
                     {"reward", tensor(mdp.reward())}};
}

TabularMdp mdp_from_json(const nlohmann::json& j) {
  const int S = j.at("num_states").get<int>();
  const int A = j.at("num_actions").get<int>();
  const auto iota = j.at("iota").get<std::vector<double>>();
  require(static_cast<int>(iota.size()) == S, "iota length must equal num_states");
  auto tensor = [&](const nlohmann::json& src, const char* name) {
    Tensor3 t(S, A, S);
    require(src.is_array() && static_cast<int>(src.size()) == S, std::string(name) + " must be S x A x S");
    for (int s = 0; s < S; ++s) {
      require(static_cast<int>(src[s].size()) == A, std::string(name) + " must be S x A x S");
      for (int a = 0; a < A; ++a) {
        const auto row = src[s][a].get<std::vector<double>>();
        require(static_cast<int>(row.size()) == S, std::string(name) + " must be S x A x S");
        std::copy(row.begin(), row.end(), &t(s, a, 0));
      }
    }
    return t;
  };
  return TabularMdp(Eigen::Map<const Vector>(iota.data(), S), tensor(j.at("tau"), "tau"),
                    tensor(j.at("reward"), "reward"), j.at("gamma").get<double>());
}

TabularPolicy TabularPolicy::uniform(int num_states, int num_actions) {
  return {Matrix::Constant(num_states, num_actions, 1.0 / num_actions)};
}

TabularPolicy TabularPolicy::deterministic(const std::vector<int>& actions, int num_actions) {
  Matrix probs = Matrix::Zero(static_cast<int>(actions.size()), num_actions);
  for (std::size_t s = 0; s < actions.size(); ++s) probs(static_cast<int>(s), actions[s]) = 1.0;
  return {probs};
}

void TabularPolicy::validate() const {
  for (int s = 0; s < probs.rows(); ++s) {
    Vector row = probs.row(s).transpose();
    require(is_distribution(row.data(), static_cast<int>(row.size())),
            "policy row " + std::to_string(s) + " is not a probability vector");
  }
}

OccupancyMeasure state_visitation(const TabularMdp& mdp, const TabularPolicy& policy) {
  check_policy(mdp, policy);
  const int S = mdp.num_states();
  const double g = mdp.discount();
  const Matrix P = policy_transition(mdp, policy);
  // (I - g P^T) d = (1-g) iota
  Matrix system = Matrix::Identity(S, S) - g * P.transpose();
  Vector d = system.partialPivLu().solve((1.0 - g) * mdp.initial_dist());
  if (!d.allFinite()) throw std::runtime_error("state_visitation: singular occupancy system");
  OccupancyMeasure occ;
  occ.d = d;
  occ.p = d.asDiagonal() * policy.probs;
  return occ;
}

ValueFunctions policy_value(const TabularMdp& mdp, const TabularPolicy& policy) {
  check_policy(mdp, policy);
  const int S = mdp.num_states();
  const double g = mdp.discount();
  const Matrix P = policy_transition(mdp, policy);
  const Matrix rbar = mdp.expected_reward();
  const Vector r_pi = (policy.probs.array() * rbar.array()).rowwise().sum();
  Matrix system = Matrix::Identity(S, S) - g * P;
  ValueFunctions vf;
  vf.v = system.partialPivLu().solve(r_pi);
  if (!vf.v.allFinite()) throw std::runtime_error("policy_value: singular Bellman system");
  vf.q = rbar;
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < mdp.num_actions(); ++a) {
      const double* t = mdp.transition().slice(s, a);
      double acc = 0.0;
      for (int sn = 0; sn < S; ++sn) acc += t[sn] * vf.v(sn);
      vf.q(s, a) += g * acc;
    }
  return vf;
}

double average_reward(const TabularMdp& mdp, const TabularPolicy& policy) {
  const OccupancyMeasure occ = state_visitation(mdp, policy);
  return (occ.p.array() * mdp.expected_reward().array()).sum();
}

double bellman_optimality_residual(const TabularMdp& mdp, const ValueFunctions& vf) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  const double g = mdp.discount();
  double worst = 0.0;
  for (int s = 0; s < S; ++s) {
    double best = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < A; ++a) {
      double acc = 0.0;
      for (int sn = 0; sn < S; ++sn) acc += mdp.tau(s, a, sn) * (mdp.r(s, a, sn) + g * vf.v(sn));
      best = std::max(best, acc);
    }
    worst = std::max(worst, std::abs(vf.v(s) - best));
  }
  return worst;
}

double occupancy_flow_residual(const TabularMdp& mdp, const OccupancyMeasure& occ) {
  const int S = mdp.num_states(), A = mdp.num_actions();
  const double g = mdp.discount();
  Vector inflow = (1.0 - g) * mdp.initial_dist();
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) {
      const double w = occ.p(s, a);
      if (w == 0.0) continue;
      const double* t = mdp.transition().slice(s, a);
      for (int sn = 0; sn < S; ++sn) inflow(sn) += g * w * t[sn];
    }
  return (occ.d - inflow).cwiseAbs().maxCoeff();
}

int sample_next_state(const TabularMdp& mdp, int s, int a, Rng& rng) {
  const double* t = mdp.transition().slice(s, a);
  return rng.categorical(std::span<const double>(t, static_cast<std::size_t>(mdp.num_states())));
}

void collect_experience(const TabularMdp& mdp, const TabularPolicy& behavior,
                        ReplayBuffer<ExperienceTuple>& buffer, int steps, std::uint64_t seed) {
  if (steps < 0) throw std::invalid_argument("collect_experience: steps must be non-negative");
  check_policy(mdp, behavior);
  if (steps == 0) return;
  Rng rng(seed);
  const auto& iota = mdp.initial_dist();
  const std::span<const double> iota_span(iota.data(), static_cast<std::size_t>(iota.size()));
  int s = rng.categorical(iota_span);
  const int A = mdp.num_actions();
  std::vector<double> row(static_cast<std::size_t>(A));
  for (int t = 0; t < steps; ++t) {
    for (int a = 0; a < A; ++a) row[a] = behavior.probs(s, a);
    const int a = rng.categorical(row);
    const int sn = sample_next_state(mdp, s, a, rng);
    buffer.push({s, a, mdp.r(s, a, sn), sn, false});
    s = rng.bernoulli(1.0 - mdp.discount()) ? rng.categorical(iota_span) : sn;
  }
}

}  // namespace dualcrl
