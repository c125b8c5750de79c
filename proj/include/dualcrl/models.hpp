#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualcrl/mdp.hpp"
#include "dualcrl/rng.hpp"

namespace dualcrl {

// ---------------------------------------------------------------- tables

/// Tabular parameters; `nonneg` tables are projected onto [0, inf) after
/// every update.
struct TabularTable {
  Matrix values;
  bool nonneg = false;

  TabularTable() = default;
  TabularTable(int rows, int cols, double init = 0.0, bool nonneg_ = false)
      : values(Matrix::Constant(rows, cols, init)), nonneg(nonneg_) {}

  void project() {
    if (nonneg) values = values.cwiseMax(0.0);
  }
};

// ---------------------------------------------------------------- optimizer

/// Adam on a flat parameter vector.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return t_; }

  /// params -= lr * m_hat / (sqrt(v_hat) + eps).
  void step(Eigen::Ref<Vector> params, const Eigen::Ref<const Vector>& grad);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  Vector m_, v_;
};

/// Adam step on a table followed by the non-negativity projection.
void adam_table_step(Adam& opt, TabularTable& table, const Matrix& grad);

/// Adam for tables with sparse gradients: every entry keeps its own moments
/// and step count, advanced only when its gradient is nonzero.
class LazyAdam {
 public:
  explicit LazyAdam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void step(Eigen::Ref<Vector> params, const Eigen::Ref<const Vector>& grad);
  /// Steps a table and applies its projection.
  void step(TabularTable& table, const Matrix& grad);

 private:
  double lr_, beta1_, beta2_, eps_;
  Vector m_, v_;
  Eigen::VectorXi t_;
};

// ---------------------------------------------------------------- MLP

enum class OutputTransform { Identity, Softplus, Bounded };

double softplus(double x);
double sigmoid(double x);

/// Fully connected network: ReLU hidden layers, linear output layer. All
/// weights live in one flat vector (W_l column-major, then b_l, per layer).
class Mlp {
 public:
  Mlp() = default;
  /// dims = {input, hidden..., output}; weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Mlp(std::vector<int> dims, Rng& rng);
  /// Zero-initialized.
  explicit Mlp(std::vector<int> dims);

  const std::vector<int>& dims() const { return dims_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  int num_layers() const { return static_cast<int>(dims_.size()) - 1; }

  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  Eigen::Map<Matrix> weight(int layer);
  Eigen::Map<const Matrix> weight(int layer) const;
  Eigen::Map<Vector> bias(int layer);
  Eigen::Map<const Vector> bias(int layer) const;

  struct Cache {
    std::vector<Matrix> activations;  // layer inputs; activations[0] = X
    std::vector<Matrix> pre;          // pre-activations per layer
  };

  /// X is input_dim x batch; returns output_dim x batch (pre-transform).
  Matrix forward(const Matrix& X, Cache* cache = nullptr) const;
  Vector forward_one(const Vector& x) const;

  /// Gradient of sum(dY .* Y) w.r.t. the flat params; optionally w.r.t. X.
  Vector backward(const Cache& cache, const Matrix& dY, Matrix* dX = nullptr) const;

 private:
  std::vector<int> dims_;
  std::vector<std::size_t> offsets_;  // start of W_l; b_l follows
  Vector params_;
  void layout();
};

/// Elementwise output transform and its derivative.
double apply_transform(OutputTransform t, double x, double lo = 0.0, double hi = 1.0);
double transform_derivative(OutputTransform t, double x, double lo = 0.0, double hi = 1.0);

// ---------------------------------------------------------------- Gaussian head

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

/// One-dimensional tanh-squashed Gaussian, a = scale * tanh(mean + std * xi).
struct SquashedSample {
  double action;
  double log_prob;
  // partial derivatives w.r.t. the raw network outputs (mean, log_std before clamping)
  double daction_dmean;
  double daction_dlogstd;
  double dlogp_dmean;
  double dlogp_dlogstd;
  /// mean + std * xi before squashing.
  double pre_tanh;
};

SquashedSample squashed_gaussian(double mean, double raw_log_std, double xi, double scale);

/// log density of a given action under the squashed Gaussian.
double squashed_log_prob(double mean, double raw_log_std, double action, double scale);

// ---------------------------------------------------------------- densities

class EmptyWindow : public std::runtime_error {
 public:
  EmptyWindow() : std::runtime_error("KDE window is empty") {}
};

/// Gaussian product-kernel density over the most recent `capacity` points.
class KdeEstimator {
 public:
  KdeEstimator(int dim, std::size_t capacity);

  int dim() const { return dim_; }
  std::size_t size() const { return count_; }
  std::size_t capacity() const { return capacity_; }
  const Vector& bandwidth() const { return bandwidth_; }

  void push(const Eigen::Ref<const Vector>& x);
  /// Scott's rule: h_d = sigma_d * n^(-1/(dim+4)); zero spread falls back to 1e-3.
  void refit();
  void set_bandwidth(const Vector& h);

  /// (1/n) sum_i prod_d N(x_d; x_id, h_d^2). Throws EmptyWindow.
  double density(const Eigen::Ref<const Vector>& x) const;

  /// Stored points as a dim x n matrix in insertion order.
  Matrix points() const;

 private:
  int dim_;
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::size_t count_ = 0;
  Matrix window_;  // dim x capacity
  Vector bandwidth_;
};

/// Discounted visit counting with exponential forgetting per episode.
class DiscountedCounter {
 public:
  DiscountedCounter(int num_states, double gamma, double forgetting = 0.995);

  /// Adds (1-gamma) gamma^t to state s visited at episode step t.
  void visit(int s, int t);
  /// Remaining mass gamma^t of an absorbing state entered at step t.
  void absorb(int s, int t);
  /// Applies the forgetting factor once.
  void end_episode();
  /// Whole-episode update: forgetting then one visit per step.
  void add_episode(const std::vector<int>& states);

  const Vector& counts() const { return counts_; }
  /// Counts normalized to sum to 1 (uniform before any visit).
  Vector normalized() const;
  double density(int s) const;

 private:
  Vector counts_;
  double gamma_;
  double rho_;
  std::vector<double> gamma_pow_;
};

/// Softmax-parameterized tabular density trained by maximum likelihood.
struct SoftmaxDensity {
  Vector logits;

  explicit SoftmaxDensity(int num_states) : logits(Vector::Zero(num_states)) {}
  Vector probs() const;
  /// -mean log d(s) over the batch and its gradient w.r.t. the logits.
  double loss(const std::vector<int>& states, Vector* grad) const;
};

// ---------------------------------------------------------------- targets

/// target <- (1 - tau) target + tau online.
void polyak_update(Vector& target, const Vector& online, double tau);

/// Shadow copy updated on every `stride`-th step.
class TargetParams {
 public:
  TargetParams() = default;
  TargetParams(Vector init, double tau, int stride);

  const Vector& params() const { return shadow_; }
  Vector& params() { return shadow_; }
  /// Applies polyak_update when step % stride == 0; returns true if applied.
  bool update(long step, const Vector& online);

 private:
  Vector shadow_;
  double tau_ = 1.0;
  int stride_ = 1;
};

// ---------------------------------------------------------------- checkpoints

struct NamedTensor {
  std::string name;
  std::vector<std::int64_t> dims;
  std::vector<double> data;
};

NamedTensor make_tensor(std::string name, const Matrix& m);
NamedTensor make_tensor(std::string name, const Vector& v);
Matrix tensor_matrix(const NamedTensor& t);

/// Binary format: "DCRLCKPT", u32 version, u32 count, then per tensor
/// u32 name length, name bytes, u32 rank, i64 dims, f64 data; little endian.
void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::string& path);
const NamedTensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace dualcrl
