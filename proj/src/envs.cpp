#include "dualcrl/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dualcrl {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

bool contains(const std::vector<Cell>& cells, Cell c) {
  return std::find(cells.begin(), cells.end(), c) != cells.end();
}

Cell move(const CliffSpec& spec, Cell c, int action) {
  static constexpr int dr[4] = {-1, 0, 1, 0};
  static constexpr int dc[4] = {0, 1, 0, -1};
  const int r = c.first + dr[action], col = c.second + dc[action];
  if (r < 0 || r >= spec.rows || col < 0 || col >= spec.cols) return c;
  return {r, col};
}

nlohmann::json cells_json(const std::vector<Cell>& cells) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [r, c] : cells) out.push_back({r, c});
  return out;
}

std::vector<Cell> cells_from(const nlohmann::json& j) {
  std::vector<Cell> out;
  for (const auto& e : j) out.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
  return out;
}

}  // namespace

std::vector<Cell> CliffSpec::cliffs() const {
  if (!cliff_cells.empty()) return cliff_cells;
  std::vector<Cell> out;
  for (int c = 1; c < cols - 1; ++c) out.emplace_back(rows - 1, c);
  return out;
}

void CliffSpec::validate() const {
  require(rows > 0 && cols > 0, "cliff: grid dimensions must be positive");
  auto inside = [&](Cell c) { return c.first >= 0 && c.first < rows && c.second >= 0 && c.second < cols; };
  const auto cl = cliffs();
  for (const auto* group : {&cl, &unstable_cells, &ridge_cells})
    for (Cell c : *group) require(inside(c), "cliff: cell outside the grid");
  require(inside(start_cell) && inside(goal_cell), "cliff: start/goal outside the grid");
  require(start_cell != goal_cell, "cliff: start and goal coincide");
  require(!contains(cl, start_cell) && !contains(cl, goal_cell), "cliff: start/goal on the cliff");
  require(ridge_cost > 0.0, "cliff: ridge_cost must be positive");
  require(epsilon > 0.0, "cliff: epsilon must be positive");
  require(initial_smoothing >= 0.0 && initial_smoothing < 1.0, "cliff: initial_smoothing must be in [0,1)");
  require(gamma >= 0.0 && gamma < 1.0, "cliff: gamma must be in [0,1)");
  require(teacher_confidence > 0.0 && teacher_confidence < 1.0, "cliff: teacher_confidence must be in (0,1)");
  require(down_lower_bound >= 0.0 && down_lower_bound <= 1.0, "cliff: down_lower_bound must be in [0,1]");
  require(max_episode_steps > 0, "cliff: max_episode_steps must be positive");
}

CliffSpec cliff_default_spec() { return CliffSpec{}; }

CliffSpec cliff_hazard_spec() {
  CliffSpec spec;
  spec.unstable_cells = {{2, 2}, {2, 7}};
  spec.ridge_cells = {{2, 4}, {2, 5}, {2, 9}, {2, 10}};
  return spec;
}

void to_json(nlohmann::json& j, const CliffSpec& s) {
  j = nlohmann::json{{"rows", s.rows},
                     {"cols", s.cols},
                     {"cliff_cells", cells_json(s.cliff_cells)},
                     {"unstable_cells", cells_json(s.unstable_cells)},
                     {"ridge_cells", cells_json(s.ridge_cells)},
                     {"start_cell", {s.start_cell.first, s.start_cell.second}},
                     {"goal_cell", {s.goal_cell.first, s.goal_cell.second}},
                     {"step_reward", s.step_reward},
                     {"cliff_reward", s.cliff_reward},
                     {"ridge_cost", s.ridge_cost},
                     {"epsilon", s.epsilon},
                     {"initial_smoothing", s.initial_smoothing},
                     {"gamma", s.gamma},
                     {"teacher_confidence", s.teacher_confidence},
                     {"down_lower_bound", s.down_lower_bound},
                     {"max_episode_steps", s.max_episode_steps}};
}

void from_json(const nlohmann::json& j, CliffSpec& s) {
  s = CliffSpec{};
  s.rows = j.value("rows", s.rows);
  s.cols = j.value("cols", s.cols);
  if (j.contains("cliff_cells")) s.cliff_cells = cells_from(j["cliff_cells"]);
  if (j.contains("unstable_cells")) s.unstable_cells = cells_from(j["unstable_cells"]);
  if (j.contains("ridge_cells")) s.ridge_cells = cells_from(j["ridge_cells"]);
  if (j.contains("start_cell")) s.start_cell = {j["start_cell"].at(0).get<int>(), j["start_cell"].at(1).get<int>()};
  if (j.contains("goal_cell")) s.goal_cell = {j["goal_cell"].at(0).get<int>(), j["goal_cell"].at(1).get<int>()};
  s.step_reward = j.value("step_reward", s.step_reward);
  s.cliff_reward = j.value("cliff_reward", s.cliff_reward);
  s.ridge_cost = j.value("ridge_cost", s.ridge_cost);
  s.epsilon = j.value("epsilon", s.epsilon);
  s.initial_smoothing = j.value("initial_smoothing", s.initial_smoothing);
  s.gamma = j.value("gamma", s.gamma);
  s.teacher_confidence = j.value("teacher_confidence", s.teacher_confidence);
  s.down_lower_bound = j.value("down_lower_bound", s.down_lower_bound);
  s.max_episode_steps = j.value("max_episode_steps", s.max_episode_steps);
}

TabularMdp cliff_mdp(const CliffSpec& spec) {
  spec.validate();
  const int S = spec.num_states(), A = 4;
  const auto cl = spec.cliffs();
  const int start = spec.id(spec.start_cell), goal = spec.id(spec.goal_cell);
  Tensor3 tau(S, A, S), r(S, A, S);
  for (int s = 0; s < S; ++s) {
    const Cell c = spec.cell(s);
    for (int a = 0; a < A; ++a) {
      if (s == goal) {
        tau(s, a, goal) = 1.0;
        continue;
      }
      if (contains(cl, c)) {  // unreachable except through iota = 0
        tau(s, a, start) = 1.0;
        r(s, a, start) = spec.step_reward;
        continue;
      }
      const Cell next = move(spec, c, a);
      if (contains(cl, next)) {
        tau(s, a, start) = 1.0;
        r(s, a, start) = spec.cliff_reward;
      } else {
        tau(s, a, spec.id(next)) = 1.0;
        r(s, a, spec.id(next)) = spec.step_reward;
      }
    }
  }
  Vector iota = Vector::Zero(S);
  int free_cells = 0;
  for (int s = 0; s < S; ++s)
    if (!contains(cl, spec.cell(s))) ++free_cells;
  for (int s = 0; s < S; ++s)
    if (!contains(cl, spec.cell(s))) iota(s) = spec.initial_smoothing / free_cells;
  iota(start) += 1.0 - spec.initial_smoothing;
  return TabularMdp(iota, tau, r, spec.gamma);
}

TabularPolicy cliff_teacher(const CliffSpec& spec) {
  const int S = spec.num_states();
  const auto cl = spec.cliffs();
  TabularPolicy pi = TabularPolicy::uniform(S, 4);
  const double rest = (1.0 - spec.teacher_confidence) / 3.0;
  const int goal_col = spec.goal_cell.second;
  for (int s = 0; s < S; ++s) {
    const Cell c = spec.cell(s);
    if (c == spec.goal_cell || contains(cl, c)) continue;
    int preferred;
    if (c.second == goal_col)
      preferred = c.first < spec.goal_cell.first ? kDown : kUp;
    else if (c.first > 0)
      preferred = kUp;
    else
      preferred = c.second < goal_col ? kRight : kLeft;
    pi.probs.row(s).setConstant(rest);
    pi.probs(s, preferred) = spec.teacher_confidence;
  }
  return pi;
}

Tensor3 cliff_ridge_cost(const CliffSpec& spec) {
  const int S = spec.num_states();
  Tensor3 cost(S, 4, S);
  for (Cell c : spec.ridge_cells)
    for (int a : {kRight, kLeft}) {
      const Cell next = move(spec, c, a);
      if (next != c && contains(spec.ridge_cells, next)) cost(spec.id(c), a, spec.id(next)) = spec.ridge_cost;
    }
  return cost;
}

std::vector<int> cliff_bounded_top_row(const CliffSpec& spec) {
  std::vector<int> out;
  for (int c = 1; c < spec.cols - 1; ++c) out.push_back(spec.id(0, c));
  return out;
}

std::vector<ConstraintSpec> cliff_constraints(const CliffSpec& spec, CliffExperiment experiment, double alpha) {
  spec.validate();
  const int S = spec.num_states(), A = 4;
  std::vector<ConstraintSpec> out;
  if (experiment == CliffExperiment::DensityAndTransitionCost) {
    StateDensityBound vdb{Vector::Zero(S), Vector::Ones(S)};
    for (Cell c : spec.unstable_cells) vdb.upper(spec.id(c)) = spec.epsilon;
    out.emplace_back(std::move(vdb));
    out.emplace_back(AvgTransitionCost{cliff_ridge_cost(spec)});
  } else {
    out.emplace_back(EntropySpec{cliff_teacher(spec), alpha});
    ActionDensityBound adb{Matrix::Zero(S, A), Matrix::Ones(S, A)};
    for (int s : cliff_bounded_top_row(spec)) adb.lower(s, kDown) = spec.down_lower_bound;
    out.emplace_back(std::move(adb));
  }
  return out;
}

std::vector<bool> cliff_terminals(const CliffSpec& spec) {
  std::vector<bool> out(static_cast<std::size_t>(spec.num_states()), false);
  out[spec.id(spec.goal_cell)] = true;
  return out;
}

int cliff_path_length(const CliffSpec& spec, const TabularPolicy& policy) {
  const auto cl = spec.cliffs();
  Cell c = spec.start_cell;
  for (int steps = 0; steps <= spec.num_states(); ++steps) {
    if (c == spec.goal_cell) return steps;
    Eigen::Index a;
    policy.probs.row(spec.id(c)).maxCoeff(&a);
    const Cell next = move(spec, c, static_cast<int>(a));
    if (contains(cl, next)) return -1;
    c = next;
  }
  return -1;
}

TabularEnv::TabularEnv(TabularMdp mdp, std::vector<bool> terminal, int max_episode_steps)
    : mdp_(std::move(mdp)), terminal_(std::move(terminal)), max_steps_(max_episode_steps) {
  require(static_cast<int>(terminal_.size()) == mdp_.num_states(), "terminal mask must have length S");
  require(max_steps_ > 0, "max_episode_steps must be positive");
}

int TabularEnv::reset(Rng& rng) {
  const auto& iota = mdp_.initial_dist();
  do {
    state_ = rng.categorical(std::span<const double>(iota.data(), static_cast<std::size_t>(iota.size())));
  } while (terminal_[state_]);
  t_ = 0;
  return state_;
}

TabularEnv::Step TabularEnv::step(int action, Rng& rng) {
  const int sn = sample_next_state(mdp_, state_, action, rng);
  Step out{sn, mdp_.r(state_, action, sn), terminal_[sn], false};
  state_ = sn;
  ++t_;
  out.truncated = !out.done && t_ >= max_steps_;
  return out;
}

// ---------------------------------------------------------------- Pendulum

void PendulumSpec::validate() const {
  require(mass > 0 && length > 0 && gravity > 0 && dt > 0 && max_torque > 0 && max_speed > 0,
          "pendulum: physical constants must be positive");
  require(episode_length > 0, "pendulum: episode_length must be positive");
}

void to_json(nlohmann::json& j, const PendulumSpec& s) {
  j = nlohmann::json{{"mass", s.mass},
                     {"length", s.length},
                     {"gravity", s.gravity},
                     {"dt", s.dt},
                     {"max_torque", s.max_torque},
                     {"max_speed", s.max_speed},
                     {"reward_coeffs", s.reward_coeffs},
                     {"episode_length", s.episode_length}};
}

void from_json(const nlohmann::json& j, PendulumSpec& s) {
  s = PendulumSpec{};
  s.mass = j.value("mass", s.mass);
  s.length = j.value("length", s.length);
  s.gravity = j.value("gravity", s.gravity);
  s.dt = j.value("dt", s.dt);
  s.max_torque = j.value("max_torque", s.max_torque);
  s.max_speed = j.value("max_speed", s.max_speed);
  if (j.contains("reward_coeffs")) s.reward_coeffs = j["reward_coeffs"].get<std::array<double, 3>>();
  s.episode_length = j.value("episode_length", s.episode_length);
}

double wrap_angle(double theta) {
  double w = std::remainder(theta, 2.0 * std::numbers::pi);
  if (w <= -std::numbers::pi) w += 2.0 * std::numbers::pi;
  return w;
}

Eigen::Vector3d pendulum_observation(const PendulumState& state) {
  return {std::cos(state.theta), std::sin(state.theta), state.theta_dot};
}

double pendulum_acceleration(const PendulumSpec& spec, double theta, double torque) {
  return 3.0 * spec.gravity / (2.0 * spec.length) * std::sin(theta) +
         3.0 / (spec.mass * spec.length * spec.length) * torque;
}

PendulumStep pendulum_step(const PendulumSpec& spec, const PendulumState& state, double torque) {
  const double u = std::clamp(torque, -spec.max_torque, spec.max_torque);
  const double th = wrap_angle(state.theta);
  const auto& w = spec.reward_coeffs;
  const double reward = -(w[0] * th * th + w[1] * state.theta_dot * state.theta_dot + w[2] * u * u);
  PendulumState next;
  next.theta_dot = std::clamp(state.theta_dot + pendulum_acceleration(spec, th, u) * spec.dt, -spec.max_speed,
                              spec.max_speed);
  next.theta = wrap_angle(th + next.theta_dot * spec.dt);
  return {next, pendulum_observation(next), reward};
}

PendulumEnv::PendulumEnv(PendulumSpec spec) : spec_(spec) { spec_.validate(); }

Eigen::Vector3d PendulumEnv::reset(Rng& rng) {
  state_.theta = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
  state_.theta_dot = rng.uniform(-1.0, 1.0);
  t_ = 0;
  return pendulum_observation(state_);
}

std::tuple<Eigen::Vector3d, double, bool> PendulumEnv::step(double torque) {
  const PendulumStep out = pendulum_step(spec_, state_, torque);
  state_ = out.state;
  ++t_;
  return {out.observation, out.reward, t_ >= spec_.episode_length};
}

}  // namespace dualcrl
