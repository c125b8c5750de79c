#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cstddef>
#include <deque>
#include <stdexcept>
#include <vector>

#include "dualcrl/rng.hpp"

namespace dualcrl {

/// Tolerances shared by every module.
inline constexpr double kProbTol = 1e-12;
inline constexpr double kOccupancyTol = 1e-9;

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Dense S x A x S tensor, row-major in (s, a, s').
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(int n0, int n1, int n2, double fill = 0.0)
      : n0_(n0), n1_(n1), n2_(n2), data_(static_cast<std::size_t>(n0) * n1 * n2, fill) {}

  double& operator()(int i, int j, int k) { return data_[index(i, j, k)]; }
  double operator()(int i, int j, int k) const { return data_[index(i, j, k)]; }

  int dim0() const { return n0_; }
  int dim1() const { return n1_; }
  int dim2() const { return n2_; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  /// Contiguous slice over the last index.
  const double* slice(int i, int j) const { return data_.data() + index(i, j, 0); }

 private:
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * n1_ + j) * n2_ + k;
  }
  int n0_ = 0, n1_ = 0, n2_ = 0;
  std::vector<double> data_;
};

/// Finite MDP <S, A, iota, tau, r, gamma> stored as dense tables.
class TabularMdp {
 public:
  TabularMdp(Vector initial_dist, Tensor3 transition, Tensor3 reward, double discount);

  int num_states() const { return num_states_; }
  int num_actions() const { return num_actions_; }
  double discount() const { return discount_; }
  const Vector& initial_dist() const { return initial_dist_; }
  const Tensor3& transition() const { return transition_; }
  const Tensor3& reward() const { return reward_; }

  double tau(int s, int a, int s_next) const { return transition_(s, a, s_next); }
  double r(int s, int a, int s_next) const { return reward_(s, a, s_next); }

  /// E_{s'}[r(s,a,s')] for every (s,a).
  Matrix expected_reward() const;
  /// E_{s'}[f(s,a,s')] for an arbitrary S x A x S table.
  Matrix expected(const Tensor3& f) const;

  /// True when iota(s) > 0 for all states.
  bool has_full_initial_support() const;

  /// Same dynamics, different reward tensor.
  TabularMdp with_reward(Tensor3 reward) const;

 private:
  int num_states_;
  int num_actions_;
  Vector initial_dist_;
  Tensor3 transition_;
  Tensor3 reward_;
  double discount_;
};

void to_json(nlohmann::json& j, const TabularMdp& mdp);
TabularMdp mdp_from_json(const nlohmann::json& j);

/// Stochastic policy pi(a|s) as an S x A row-stochastic matrix.
struct TabularPolicy {
  Matrix probs;

  static TabularPolicy uniform(int num_states, int num_actions);
  static TabularPolicy deterministic(const std::vector<int>& actions, int num_actions);
  /// Throws std::invalid_argument when rows are not probability vectors.
  void validate() const;
};

struct ValueFunctions {
  Vector v;
  Matrix q;
};

/// Discounted visitation densities d(s) and p(s,a) = d(s) pi(a|s).
struct OccupancyMeasure {
  Vector d;
  Matrix p;
};

/// One transition. For tabular environments s and s_next are state ids.
struct ExperienceTuple {
  int s = 0;
  int a = 0;
  double r = 0.0;
  int s_next = 0;
  bool done = false;
};

/// Fixed-capacity ring buffer with uniform sampling.
template <typename T>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity, std::uint64_t rng_seed = 0)
      : capacity_(capacity), rng_(rng_seed) {
    if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
    entries_.reserve(capacity);
  }

  void push(T entry) {
    if (entries_.size() < capacity_) {
      entries_.push_back(std::move(entry));
    } else {
      entries_[head_] = std::move(entry);
      head_ = (head_ + 1) % capacity_;
    }
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }

  /// i-th entry in insertion order (0 = oldest retained).
  const T& at(std::size_t i) const { return entries_[(head_ + i) % entries_.size()]; }
  /// Most recent entry.
  const T& back() const { return at(entries_.size() - 1); }

  /// Uniform sample with replacement.
  std::vector<T> sample(std::size_t batch_size) {
    std::vector<T> batch;
    batch.reserve(batch_size);
    const int n = static_cast<int>(entries_.size());
    for (std::size_t b = 0; b < batch_size; ++b) batch.push_back(entries_[rng_.uniform_int(n)]);
    return batch;
  }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<T> entries_;
  Rng rng_;
};

/// Exact discounted occupancy of `policy`: d = (1-gamma) iota + gamma P_pi^T d.
OccupancyMeasure state_visitation(const TabularMdp& mdp, const TabularPolicy& policy);

/// Exact v^pi and q^pi from the Bellman linear system.
ValueFunctions policy_value(const TabularMdp& mdp, const TabularPolicy& policy);

/// E_{(s,a)~p, s'~tau}[r] = (1-gamma) nu^pi.
double average_reward(const TabularMdp& mdp, const TabularPolicy& policy);

/// max_s |v(s) - max_a E[r + gamma v(s')]|.
double bellman_optimality_residual(const TabularMdp& mdp, const ValueFunctions& vf);

/// Recursion residual of an occupancy measure (sup norm).
double occupancy_flow_residual(const TabularMdp& mdp, const OccupancyMeasure& occ);

/// Samples `steps` transitions under `behavior`. A fresh state is drawn from
/// iota at the start and, after every step, with probability 1-gamma; the
/// visited states are therefore distributed as the discounted occupancy.
void collect_experience(const TabularMdp& mdp, const TabularPolicy& behavior,
                        ReplayBuffer<ExperienceTuple>& buffer, int steps, std::uint64_t seed);

/// Sample s' ~ tau(.|s,a).
int sample_next_state(const TabularMdp& mdp, int s, int a, Rng& rng);

}  // namespace dualcrl
