#include "dualcrl/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <bit>
#include <numbers>

namespace dualcrl {

// ---------------------------------------------------------------- optimizer

void Adam::step(Eigen::Ref<Vector> params, const Eigen::Ref<const Vector>& grad) {
  if (m_.size() != params.size()) {
    m_ = Vector::Zero(params.size());
    v_ = Vector::Zero(params.size());
    t_ = 0;
  }
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

void adam_table_step(Adam& opt, TabularTable& table, const Matrix& grad) {
  Eigen::Map<Vector> flat(table.values.data(), table.values.size());
  opt.step(flat, Eigen::Map<const Vector>(grad.data(), grad.size()));
  table.project();
}

void LazyAdam::step(Eigen::Ref<Vector> params, const Eigen::Ref<const Vector>& grad) {
  if (grad.size() != params.size()) throw std::invalid_argument("LazyAdam: gradient size mismatch");
  if (m_.size() != params.size()) {
    m_ = Vector::Zero(params.size());
    v_ = Vector::Zero(params.size());
    t_ = Eigen::VectorXi::Zero(params.size());
  }
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double g = grad(i);
    if (g == 0.0) continue;
    const int t = ++t_(i);
    m_(i) = beta1_ * m_(i) + (1.0 - beta1_) * g;
    v_(i) = beta2_ * v_(i) + (1.0 - beta2_) * g * g;
    const double mh = m_(i) / (1.0 - std::pow(beta1_, t));
    const double vh = v_(i) / (1.0 - std::pow(beta2_, t));
    params(i) -= lr_ * mh / (std::sqrt(vh) + eps_);
  }
}

void LazyAdam::step(TabularTable& table, const Matrix& grad) {
  Eigen::Map<Vector> flat(table.values.data(), table.values.size());
  step(flat, Eigen::Map<const Vector>(grad.data(), grad.size()));
  table.project();
}

// ---------------------------------------------------------------- MLP

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double apply_transform(OutputTransform t, double x, double lo, double hi) {
  switch (t) {
    case OutputTransform::Identity: return x;
    case OutputTransform::Softplus: return softplus(x);
    case OutputTransform::Bounded: return lo + (hi - lo) * sigmoid(x);
  }
  return x;
}

double transform_derivative(OutputTransform t, double x, double lo, double hi) {
  switch (t) {
    case OutputTransform::Identity: return 1.0;
    case OutputTransform::Softplus: return sigmoid(x);
    case OutputTransform::Bounded: {
      const double s = sigmoid(x);
      return (hi - lo) * s * (1.0 - s);
    }
  }
  return 1.0;
}

Mlp::Mlp(std::vector<int> dims) : dims_(std::move(dims)) { layout(); }

Mlp::Mlp(std::vector<int> dims, Rng& rng) : dims_(std::move(dims)) {
  layout();
  for (int l = 0; l < num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims_[l]));
    auto W = weight(l);
    auto b = bias(l);
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = rng.uniform(-bound, bound);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(-bound, bound);
  }
}

void Mlp::layout() {
  if (dims_.size() < 2) throw std::invalid_argument("Mlp needs at least input and output dims");
  for (int d : dims_)
    if (d <= 0) throw std::invalid_argument("Mlp dims must be positive");
  offsets_.clear();
  std::size_t off = 0;
  for (int l = 0; l + 1 < static_cast<int>(dims_.size()); ++l) {
    offsets_.push_back(off);
    off += static_cast<std::size_t>(dims_[l + 1]) * dims_[l] + dims_[l + 1];
  }
  params_ = Vector::Zero(static_cast<Eigen::Index>(off));
}

Eigen::Map<Matrix> Mlp::weight(int l) { return {params_.data() + offsets_[l], dims_[l + 1], dims_[l]}; }
Eigen::Map<const Matrix> Mlp::weight(int l) const {
  return {params_.data() + offsets_[l], dims_[l + 1], dims_[l]};
}
Eigen::Map<Vector> Mlp::bias(int l) {
  return {params_.data() + offsets_[l] + static_cast<std::size_t>(dims_[l + 1]) * dims_[l], dims_[l + 1]};
}
Eigen::Map<const Vector> Mlp::bias(int l) const {
  return {params_.data() + offsets_[l] + static_cast<std::size_t>(dims_[l + 1]) * dims_[l], dims_[l + 1]};
}

Matrix Mlp::forward(const Matrix& X, Cache* cache) const {
  if (X.rows() != input_dim()) throw std::invalid_argument("Mlp::forward: input dimension mismatch");
  if (cache) {
    cache->activations.clear();
    cache->pre.clear();
  }
  Matrix H = X;
  for (int l = 0; l < num_layers(); ++l) {
    Matrix Z = weight(l) * H;
    Z.colwise() += bias(l);
    if (cache) {
      cache->activations.push_back(H);
      cache->pre.push_back(Z);
    }
    H = (l + 1 < num_layers()) ? Matrix(Z.cwiseMax(0.0)) : Z;
  }
  return H;
}

Vector Mlp::forward_one(const Vector& x) const { return forward(Matrix(x)).col(0); }

Vector Mlp::backward(const Cache& cache, const Matrix& dY, Matrix* dX) const {
  Vector grad = Vector::Zero(params_.size());
  Matrix delta = dY;
  for (int l = num_layers() - 1; l >= 0; --l) {
    if (l + 1 < num_layers()) delta = delta.cwiseProduct((cache.pre[l].array() > 0.0).cast<double>().matrix());
    Eigen::Map<Matrix> gW(grad.data() + offsets_[l], dims_[l + 1], dims_[l]);
    Eigen::Map<Vector> gb(grad.data() + offsets_[l] + static_cast<std::size_t>(dims_[l + 1]) * dims_[l],
                          dims_[l + 1]);
    gW.noalias() = delta * cache.activations[l].transpose();
    gb = delta.rowwise().sum();
    if (l > 0 || dX) delta = weight(l).transpose() * delta;
  }
  if (dX) *dX = delta;
  return grad;
}

// ---------------------------------------------------------------- Gaussian head

namespace {

// log(1 - tanh(u)^2), stable for large |u|
double log_one_minus_tanh2(double u) {
  return 2.0 * (std::numbers::ln2 - u - softplus(-2.0 * u));
}

constexpr double kHalfLog2Pi = 0.91893853320467274178;

}  // namespace

SquashedSample squashed_gaussian(double mean, double raw_log_std, double xi, double scale) {
  const bool inside = raw_log_std > kLogStdMin && raw_log_std < kLogStdMax;
  const double ls = std::clamp(raw_log_std, kLogStdMin, kLogStdMax);
  const double dls = inside ? 1.0 : 0.0;
  const double sd = std::exp(ls);
  const double u = mean + sd * xi;
  const double t = std::tanh(u);
  const double jac = scale * (1.0 - t * t);
  SquashedSample out;
  out.action = scale * t;
  out.log_prob = -0.5 * xi * xi - ls - kHalfLog2Pi - std::log(scale) - log_one_minus_tanh2(u);
  out.daction_dmean = jac;
  out.daction_dlogstd = jac * sd * xi * dls;
  out.dlogp_dmean = 2.0 * t;
  out.dlogp_dlogstd = (-1.0 + 2.0 * t * sd * xi) * dls;
  out.pre_tanh = u;
  return out;
}

double squashed_log_prob(double mean, double raw_log_std, double action, double scale) {
  const double ls = std::clamp(raw_log_std, kLogStdMin, kLogStdMax);
  const double t = std::clamp(action / scale, -1.0 + 1e-12, 1.0 - 1e-12);
  const double u = std::atanh(t);
  const double xi = (u - mean) / std::exp(ls);
  return -0.5 * xi * xi - ls - kHalfLog2Pi - std::log(scale) - log_one_minus_tanh2(u);
}

// ---------------------------------------------------------------- KDE

KdeEstimator::KdeEstimator(int dim, std::size_t capacity)
    : dim_(dim), capacity_(capacity), window_(dim, static_cast<Eigen::Index>(capacity)),
      bandwidth_(Vector::Ones(dim)) {
  if (dim <= 0 || capacity == 0) throw std::invalid_argument("KDE needs positive dim and capacity");
}

void KdeEstimator::push(const Eigen::Ref<const Vector>& x) {
  if (x.size() != dim_) throw std::invalid_argument("KDE: point dimension mismatch");
  window_.col(static_cast<Eigen::Index>(head_)) = x;
  head_ = (head_ + 1) % capacity_;
  count_ = std::min(count_ + 1, capacity_);
}

void KdeEstimator::refit() {
  if (count_ == 0) throw EmptyWindow();
  const auto pts = window_.leftCols(static_cast<Eigen::Index>(count_));
  const Vector mean = pts.rowwise().mean();
  const double n = static_cast<double>(count_);
  const double factor = std::pow(n, -1.0 / (dim_ + 4.0));
  for (int d = 0; d < dim_; ++d) {
    const double var = count_ > 1 ? (pts.row(d).array() - mean(d)).square().sum() / (n - 1.0) : 0.0;
    const double sigma = std::sqrt(var);
    bandwidth_(d) = sigma > 0.0 ? sigma * factor : 1e-3;
  }
}

void KdeEstimator::set_bandwidth(const Vector& h) {
  if (h.size() != dim_ || (h.array() <= 0.0).any()) throw std::invalid_argument("KDE: invalid bandwidth");
  bandwidth_ = h;
}

double KdeEstimator::density(const Eigen::Ref<const Vector>& x) const {
  if (count_ == 0) throw EmptyWindow();
  double norm = 1.0;
  for (int d = 0; d < dim_; ++d) norm *= bandwidth_(d) * std::sqrt(2.0 * std::numbers::pi);
  const Vector inv_h = bandwidth_.cwiseInverse();
  double total = 0.0;
  for (std::size_t i = 0; i < count_; ++i) {
    double q = 0.0;
    for (int d = 0; d < dim_; ++d) {
      const double z = (x(d) - window_(d, static_cast<Eigen::Index>(i))) * inv_h(d);
      q += z * z;
    }
    total += std::exp(-0.5 * q);
  }
  return total / (static_cast<double>(count_) * norm);
}

Matrix KdeEstimator::points() const {
  Matrix out(dim_, static_cast<Eigen::Index>(count_));
  const std::size_t first = count_ < capacity_ ? 0 : head_;
  for (std::size_t i = 0; i < count_; ++i)
    out.col(static_cast<Eigen::Index>(i)) = window_.col(static_cast<Eigen::Index>((first + i) % capacity_));
  return out;
}

// ---------------------------------------------------------------- counting

DiscountedCounter::DiscountedCounter(int num_states, double gamma, double forgetting)
    : counts_(Vector::Zero(num_states)), gamma_(gamma), rho_(forgetting) {
  if (num_states <= 0) throw std::invalid_argument("DiscountedCounter needs states");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("DiscountedCounter: gamma must be in [0,1)");
  if (!(forgetting > 0.0 && forgetting <= 1.0))
    throw std::invalid_argument("DiscountedCounter: forgetting must be in (0,1]");
}

void DiscountedCounter::visit(int s, int t) {
  if (s < 0 || s >= counts_.size()) throw std::out_of_range("DiscountedCounter: state out of range");
  while (static_cast<int>(gamma_pow_.size()) <= t)
    gamma_pow_.push_back(gamma_pow_.empty() ? 1.0 : gamma_pow_.back() * gamma_);
  counts_(s) += (1.0 - gamma_) * gamma_pow_[t];
}

void DiscountedCounter::absorb(int s, int t) {
  if (s < 0 || s >= counts_.size()) throw std::out_of_range("DiscountedCounter: state out of range");
  counts_(s) += std::pow(gamma_, t);
}

void DiscountedCounter::end_episode() { counts_ *= rho_; }

void DiscountedCounter::add_episode(const std::vector<int>& states) {
  end_episode();
  for (std::size_t t = 0; t < states.size(); ++t) visit(states[t], static_cast<int>(t));
}

Vector DiscountedCounter::normalized() const {
  const double total = counts_.sum();
  if (total <= 0.0) return Vector::Constant(counts_.size(), 1.0 / static_cast<double>(counts_.size()));
  return counts_ / total;
}

double DiscountedCounter::density(int s) const {
  const double total = counts_.sum();
  if (total <= 0.0) return 1.0 / static_cast<double>(counts_.size());
  return counts_(s) / total;
}

Vector SoftmaxDensity::probs() const {
  const Vector e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

double SoftmaxDensity::loss(const std::vector<int>& states, Vector* grad) const {
  if (states.empty()) throw std::invalid_argument("density loss needs a non-empty batch");
  const Vector p = probs();
  double loss = 0.0;
  if (grad) *grad = Vector::Zero(logits.size());
  const double inv_n = 1.0 / static_cast<double>(states.size());
  for (int s : states) {
    loss -= std::log(p(s)) * inv_n;
    if (grad) {
      *grad += p * inv_n;
      (*grad)(s) -= inv_n;
    }
  }
  return loss;
}

// ---------------------------------------------------------------- targets

void polyak_update(Vector& target, const Vector& online, double tau) {
  if (target.size() != online.size()) throw std::invalid_argument("polyak_update: shape mismatch");
  target = (1.0 - tau) * target + tau * online;
}

TargetParams::TargetParams(Vector init, double tau, int stride) : shadow_(std::move(init)), tau_(tau), stride_(stride) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("TargetParams: tau must be in [0,1]");
  if (stride < 1) throw std::invalid_argument("TargetParams: stride must be >= 1");
}

bool TargetParams::update(long step, const Vector& online) {
  if (step % stride_ != 0) return false;
  polyak_update(shadow_, online, tau_);
  return true;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'D', 'C', 'R', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

NamedTensor make_tensor(std::string name, const Matrix& m) {
  NamedTensor t{std::move(name), {m.rows(), m.cols()}, {}};
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index k = 0; k < m.cols(); ++k) t.data.push_back(m(i, k));
  return t;
}

NamedTensor make_tensor(std::string name, const Vector& v) {
  return {std::move(name), {v.size()}, std::vector<double>(v.data(), v.data() + v.size())};
}

Matrix tensor_matrix(const NamedTensor& t) {
  const Eigen::Index rows = t.dims.empty() ? 0 : t.dims[0];
  const Eigen::Index cols = t.dims.size() > 1 ? t.dims[1] : 1;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = t.data[static_cast<std::size_t>(i * cols + k)];
  return m;
}

void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    std::int64_t expected = 1;
    for (auto d : t.dims) expected *= d;
    if (expected != static_cast<std::int64_t>(t.data.size()))
      throw std::invalid_argument("tensor " + t.name + " has inconsistent dims");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put<std::int64_t>(out, d);
    for (double x : t.data) put<double>(out, x);
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error(path + " is not a checkpoint file");
  if (get<std::uint32_t>(in) != kVersion) throw std::runtime_error("unsupported checkpoint version");
  const auto count = get<std::uint32_t>(in);
  std::vector<NamedTensor> out(count);
  for (auto& t : out) {
    t.name.resize(get<std::uint32_t>(in));
    in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    const auto rank = get<std::uint32_t>(in);
    std::int64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.dims.push_back(get<std::int64_t>(in));
      n *= t.dims.back();
    }
    if (n < 0 || n > (std::int64_t{1} << 32)) throw std::runtime_error("checkpoint tensor too large");
    t.data.resize(static_cast<std::size_t>(n));
    for (auto& x : t.data) x = get<double>(in);
  }
  return out;
}

const NamedTensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw std::runtime_error("checkpoint has no tensor '" + name + "'");
}

}  // namespace dualcrl
