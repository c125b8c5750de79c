#include "dualcrl/dualcrl.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <ostream>
#include <sstream>
#include <type_traits>

namespace dualcrl {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

Eigen::Index itc_index(int A, int s, int a) { return static_cast<Eigen::Index>(s) * A + a; }

double floored(double x) { return std::max(x, kDensityFloor); }

}  // namespace

std::string to_string(TrainMode mode) { return mode == TrainMode::ValueBased ? "value_based" : "actor_critic"; }

TrainMode train_mode_from_string(const std::string& name) {
  if (name == "value_based") return TrainMode::ValueBased;
  if (name == "actor_critic") return TrainMode::ActorCritic;
  throw std::invalid_argument("unknown train mode '" + name + "'");
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  require(total_steps >= 0 && warmup_steps >= 0, "train: step counts must be non-negative");
  require(buffer_capacity > 0, "train: buffer_capacity must be positive");
  require(batch_size > 0, "train: batch_size must be positive");
  require(gamma >= 0.0 && gamma < 1.0, "train: gamma must be in [0,1)");
  require(lr_q > 0 && lr_pi > 0 && lr_d > 0 && lr_r > 0, "train: learning rates must be positive");
  require(lr_d < 1.0, "train: lr_d must be below 1");
  require(stride_q >= 1 && stride_pi >= 1 && stride_d >= 1 && stride_r >= 1 && target_stride >= 1,
          "train: strides must be at least 1");
  require(target_tau > 0.0 && target_tau <= 1.0, "train: target_tau must be in (0,1]");
  require(alpha_start > 0.0 && alpha_end > 0.0, "train: alpha schedule must be positive");
  require(epsilon_start >= 0.0 && epsilon_start <= 1.0 && epsilon_end >= 0.0 && epsilon_end <= 1.0,
          "train: epsilon must be in [0,1]");
  require(epsilon_fraction > 0.0 && epsilon_fraction <= 1.0, "train: epsilon_fraction must be in (0,1]");
  require(kde_window > 0, "train: kde_window must be positive");
  require(log_every > 0, "train: log_every must be positive");
  for (int h : hidden) require(h > 0, "train: hidden sizes must be positive");
}

TrainConfig cliff_train_defaults() { return TrainConfig{}; }

TrainConfig pendulum_train_defaults() {
  TrainConfig c;
  c.total_steps = 50000;
  c.warmup_steps = 1000;
  c.buffer_capacity = 50000;
  c.batch_size = 64;
  c.gamma = 0.99;
  c.lr_q = 4e-4;
  c.lr_pi = 4e-4;
  c.lr_r = 4e-4;
  c.alpha_start = 1e-1;
  c.alpha_end = 1e-3;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"total_steps", c.total_steps},
                     {"warmup_steps", c.warmup_steps},
                     {"buffer_capacity", c.buffer_capacity},
                     {"batch_size", c.batch_size},
                     {"gamma", c.gamma},
                     {"lr_q", c.lr_q},
                     {"stride_q", c.stride_q},
                     {"lr_pi", c.lr_pi},
                     {"stride_pi", c.stride_pi},
                     {"lr_d", c.lr_d},
                     {"stride_d", c.stride_d},
                     {"lr_r", c.lr_r},
                     {"stride_r", c.stride_r},
                     {"target_tau", c.target_tau},
                     {"target_stride", c.target_stride},
                     {"alpha_start", c.alpha_start},
                     {"alpha_end", c.alpha_end},
                     {"epsilon_start", c.epsilon_start},
                     {"epsilon_end", c.epsilon_end},
                     {"epsilon_fraction", c.epsilon_fraction},
                     {"hidden", c.hidden},
                     {"kde_window", c.kde_window},
                     {"log_every", c.log_every},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d = c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("total_steps", d.total_steps);
  get("warmup_steps", d.warmup_steps);
  get("buffer_capacity", d.buffer_capacity);
  get("batch_size", d.batch_size);
  get("gamma", d.gamma);
  get("lr_q", d.lr_q);
  get("stride_q", d.stride_q);
  get("lr_pi", d.lr_pi);
  get("stride_pi", d.stride_pi);
  get("lr_d", d.lr_d);
  get("stride_d", d.stride_d);
  get("lr_r", d.lr_r);
  get("stride_r", d.stride_r);
  get("target_tau", d.target_tau);
  get("target_stride", d.target_stride);
  get("alpha_start", d.alpha_start);
  get("alpha_end", d.alpha_end);
  get("epsilon_start", d.epsilon_start);
  get("epsilon_end", d.epsilon_end);
  get("epsilon_fraction", d.epsilon_fraction);
  get("hidden", d.hidden);
  get("kde_window", d.kde_window);
  get("log_every", d.log_every);
  get("seed", d.seed);
  for (auto it = j.begin(); it != j.end(); ++it) {
    nlohmann::json probe;
    to_json(probe, d);
    if (!probe.contains(it.key())) throw std::invalid_argument("train config: unknown key '" + it.key() + "'");
  }
  c = d;
}

double alpha_at(const TrainConfig& cfg, long step) {
  if (cfg.total_steps <= 0) return cfg.alpha_start;
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(cfg.total_steps), 0.0, 1.0);
  return cfg.alpha_start * std::pow(cfg.alpha_end / cfg.alpha_start, frac);
}

double epsilon_at(const TrainConfig& cfg, long step) {
  if (cfg.total_steps <= 0) return cfg.epsilon_start;
  const double span = cfg.epsilon_fraction * static_cast<double>(cfg.total_steps);
  const double frac = std::clamp(static_cast<double>(step) / span, 0.0, 1.0);
  return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start);
}

// ---------------------------------------------------------------- modifier bank

std::vector<TabularTable*> ModifierTables::all() { return {&w, &lower, &upper, &cost}; }
std::vector<const TabularTable*> ModifierTables::all() const { return {&w, &lower, &upper, &cost}; }

double ModifierTables::norm() const {
  double sq = 0.0;
  for (const TabularTable* t : all()) sq += t->values.squaredNorm();
  return std::sqrt(sq);
}

RewardModifierBank::RewardModifierBank(std::vector<ConstraintSpec> constraints, int S, int A)
    : constraints_(std::move(constraints)), num_states_(S), num_actions_(A) {
  require(S > 0 && A > 0, "modifier bank needs states and actions");
  for (const ConstraintSpec& c : constraints_) {
    ModifierTables t;
    std::visit(overloaded{
                   [&](const EntropySpec& e) {
                     require(e.teacher.probs.rows() == S && e.teacher.probs.cols() == A,
                             "entropy teacher must be S x A");
                     require((e.teacher.probs.array() > 0.0).all(), "entropy teacher must be strictly positive");
                     if (alpha_ == 0.0) alpha_ = e.alpha;
                   },
                   [&](const ValueConstraint&) { t.w = TabularTable(1, 1, 0.0, true); },
                   [&](const StateDensityBound&) {
                     t.lower = TabularTable(S, 1, 0.0, true);
                     t.upper = TabularTable(S, 1, 0.0, true);
                   },
                   [&](const StateActionDensityBound&) {
                     t.lower = TabularTable(S, A, 0.0, true);
                     t.upper = TabularTable(S, A, 0.0, true);
                   },
                   [&](const ActionDensityBound&) {
                     t.lower = TabularTable(S, A, 0.0, true);
                     t.upper = TabularTable(S, A, 0.0, true);
                   },
                   [&](const AvgTransitionCost&) { t.cost = TabularTable(S, A, 0.0, true); },
                   [&](const ImmediateTransitionCost& c) {
                     require(c.num_states == S && c.num_actions == A, "immediate cost has the wrong shape");
                     t.cost = TabularTable(S * A, S * A, 0.0, true);
                   },
               },
               c);
    tables_.push_back(std::move(t));
  }
}

const EntropySpec* RewardModifierBank::entropy() const {
  for (const ConstraintSpec& c : constraints_)
    if (const auto* e = std::get_if<EntropySpec>(&c)) return e;
  return nullptr;
}

bool RewardModifierBank::needs_density() const {
  for (const ConstraintSpec& c : constraints_)
    if (std::holds_alternative<StateDensityBound>(c) || std::holds_alternative<StateActionDensityBound>(c) ||
        std::holds_alternative<ActionDensityBound>(c))
      return true;
  return false;
}

std::vector<std::string> RewardModifierBank::names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < constraints_.size(); ++i)
    out.push_back(constraint_kind(constraints_[i]) + "#" + std::to_string(i));
  return out;
}

std::vector<double> RewardModifierBank::norms() const {
  std::vector<double> out;
  for (const ModifierTables& t : tables_) out.push_back(t.norm());
  return out;
}

bool RewardModifierBank::nonnegative() const {
  for (const ModifierTables& t : tables_)
    for (const TabularTable* x : t.all())
      if (x->values.size() > 0 && x->values.minCoeff() < 0.0) return false;
  return true;
}

double modified_reward(const RewardModifierBank& bank, int s, int a, int sn, const Matrix* policy,
                       bool include_entropy) {
  const int A = bank.num_actions();
  double total = 0.0;
  const auto& cs = bank.constraints();
  for (std::size_t k = 0; k < cs.size(); ++k) {
    const ModifierTables& t = bank.tables()[k];
    total += std::visit(
        overloaded{
            [&](const EntropySpec& e) {
              if (!include_entropy) return 0.0;
              if (policy == nullptr) throw std::invalid_argument("modified_reward: entropy term needs a policy");
              return -bank.alpha() * std::log((*policy)(s, a) / e.teacher.probs(s, a));
            },
            [&](const ValueConstraint& c) { return t.w.values(0, 0) * c.extra_reward(s, a, sn); },
            [&](const StateDensityBound&) { return t.lower.values(s, 0) - t.upper.values(s, 0); },
            [&](const StateActionDensityBound&) { return t.lower.values(s, a) - t.upper.values(s, a); },
            [&](const ActionDensityBound& c) {
              return t.lower.values(s, a) - t.lower.values.row(s).dot(c.lower.row(s)) - t.upper.values(s, a) +
                     t.upper.values.row(s).dot(c.upper.row(s));
            },
            [&](const AvgTransitionCost& c) { return -t.cost.values(s, a) * c.cost(s, a, sn); },
            [&](const ImmediateTransitionCost& c) {
              if (policy == nullptr)
                throw std::invalid_argument("modified_reward: immediate transition costs need a policy");
              double acc = 0.0;
              const auto row = itc_index(A, s, a);
              for (int an = 0; an < A; ++an)
                acc += (*policy)(sn, an) * t.cost.values(row, itc_index(A, sn, an)) *
                       c(s, a, sn, an);
              return -acc;
            },
        },
        cs[k]);
  }
  return total;
}

// ---------------------------------------------------------------- tabular losses

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index s = 0; s < logits.rows(); ++s) {
    const auto e = (logits.row(s).array() - logits.row(s).maxCoeff()).exp();
    out.row(s) = e / e.sum();
  }
  return out;
}

Matrix boltzmann_policy(const Matrix& q, const Matrix& teacher, double alpha) {
  require(alpha > 0.0, "boltzmann_policy: alpha must be positive");
  return softmax_rows(q / alpha + teacher.array().log().matrix());
}

TabularPolicy derive_policy(const Matrix& q) {
  require(q.allFinite(), "derive_policy: q must be finite");
  return greedy_policy(q, 1e-9);
}

namespace {

// alpha log sum_a teacher exp(q / alpha), computed stably.
double soft_max_row(const Eigen::Ref<const Eigen::RowVectorXd>& q, const Eigen::Ref<const Eigen::RowVectorXd>& teacher,
                    double alpha) {
  const double m = q.maxCoeff();
  double acc = 0.0;
  for (Eigen::Index a = 0; a < q.size(); ++a) acc += teacher(a) * std::exp((q(a) - m) / alpha);
  return m + alpha * std::log(acc);
}

// sum_a pi (q - alpha log(pi / pi_T)); the entropy part is skipped without a teacher.
double policy_backup(const Eigen::Ref<const Eigen::RowVectorXd>& q, const Eigen::Ref<const Eigen::RowVectorXd>& pi,
                     const Matrix* teacher, int s, double alpha) {
  double acc = 0.0;
  for (Eigen::Index a = 0; a < q.size(); ++a) {
    if (pi(a) <= 0.0) continue;
    double g = q(a);
    if (teacher != nullptr) g -= alpha * std::log(pi(a) / (*teacher)(s, a));
    acc += pi(a) * g;
  }
  return acc;
}

}  // namespace

TableLoss critic_loss(const Matrix& q, const Matrix& q_target, const RewardModifierBank& bank,
                      const std::vector<ExperienceTuple>& batch, double gamma, TrainMode mode, const Matrix* policy) {
  require(!batch.empty(), "critic_loss: empty batch");
  require(q.rows() == q_target.rows() && q.cols() == q_target.cols(), "critic_loss: table shapes differ");
  const EntropySpec* er = bank.entropy();
  const Matrix* teacher = er != nullptr ? &er->teacher.probs : nullptr;
  if (mode == TrainMode::ActorCritic) require(policy != nullptr, "critic_loss: actor-critic needs a policy");
  const double alpha = bank.alpha();
  TableLoss out{0.0, Matrix::Zero(q.rows(), q.cols())};
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const ExperienceTuple& e : batch) {
    double boot = 0.0;
    if (!e.done) {
      if (mode == TrainMode::ValueBased)
        boot = teacher != nullptr ? soft_max_row(q_target.row(e.s_next), teacher->row(e.s_next), alpha)
                                  : q_target.row(e.s_next).maxCoeff();
      else
        boot = policy_backup(q_target.row(e.s_next), policy->row(e.s_next), teacher, e.s_next, alpha);
    }
    const double y = e.r + modified_reward(bank, e.s, e.a, e.s_next, policy, false) + gamma * boot;
    const double diff = q(e.s, e.a) - y;
    out.loss += diff * diff * inv_b;
    out.grad(e.s, e.a) += 2.0 * diff * inv_b;
  }
  return out;
}

TableLoss actor_loss(const Matrix& logits, const Matrix& q, const RewardModifierBank& bank,
                     const std::vector<ExperienceTuple>& batch) {
  require(!batch.empty(), "actor_loss: empty batch");
  const EntropySpec* er = bank.entropy();
  const Matrix* teacher = er != nullptr ? &er->teacher.probs : nullptr;
  const double alpha = bank.alpha();
  const Matrix pi = softmax_rows(logits);
  const Eigen::Index A = logits.cols();
  TableLoss out{0.0, Matrix::Zero(logits.rows(), A)};
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Eigen::RowVectorXd g(A);
  for (const ExperienceTuple& e : batch) {
    double f = 0.0;
    for (Eigen::Index a = 0; a < A; ++a) {
      g(a) = q(e.s, a);
      if (teacher != nullptr && pi(e.s, a) > 0.0) g(a) -= alpha * std::log(pi(e.s, a) / (*teacher)(e.s, a));
      f += pi(e.s, a) * g(a);
    }
    out.loss -= f * inv_b;
    for (Eigen::Index a = 0; a < A; ++a) out.grad(e.s, a) -= pi(e.s, a) * (g(a) - f) * inv_b;
  }
  return out;
}

double density_loss(const SoftmaxDensity& density, const std::vector<ExperienceTuple>& batch, Vector* grad) {
  std::vector<int> states;
  states.reserve(batch.size());
  for (const ExperienceTuple& e : batch) states.push_back(e.s);
  return density.loss(states, grad);
}

double reward_loss(const RewardModifierBank& bank, const std::vector<ExperienceTuple>& batch, double gamma,
                   const Vector* density, const Matrix* policy, std::vector<ModifierTables>* grads) {
  require(!batch.empty(), "reward_loss: empty batch");
  const int A = bank.num_actions();
  const auto& cs = bank.constraints();
  if (grads != nullptr) {
    grads->clear();
    for (const ModifierTables& t : bank.tables()) {
      ModifierTables g;
      auto src = t.all();
      auto dst = g.all();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i]->values = Matrix::Zero(src[i]->values.rows(), src[i]->values.cols());
      grads->push_back(std::move(g));
    }
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  auto need_density = [&] {
    if (density == nullptr) throw std::invalid_argument("reward_loss: density bounds need a density estimate");
  };
  auto need_policy = [&] {
    if (policy == nullptr) throw std::invalid_argument("reward_loss: this constraint needs a policy");
  };
  for (std::size_t k = 0; k < cs.size(); ++k) {
    const ModifierTables& t = bank.tables()[k];
    ModifierTables* g = grads != nullptr ? &(*grads)[k] : nullptr;
    std::visit(
        overloaded{
            [&](const EntropySpec&) {},
            [&](const ValueConstraint& c) {
              double mean = 0.0;
              for (const ExperienceTuple& e : batch)
                mean += (c.extra_reward(e.s, e.a, e.s_next) - (1.0 - gamma) * c.threshold) * inv_b;
              loss += t.w.values(0, 0) * mean;
              if (g != nullptr) g->w.values(0, 0) += mean;
            },
            [&](const StateDensityBound& c) {
              need_density();
              for (const ExperienceTuple& e : batch) {
                const double d = floored((*density)(e.s));
                const double cl = 1.0 - c.lower(e.s) / d, cu = c.upper(e.s) / d - 1.0;
                loss += (t.lower.values(e.s, 0) * cl + t.upper.values(e.s, 0) * cu) * inv_b;
                if (g != nullptr) {
                  g->lower.values(e.s, 0) += cl * inv_b;
                  g->upper.values(e.s, 0) += cu * inv_b;
                }
              }
            },
            [&](const StateActionDensityBound& c) {
              need_density();
              need_policy();
              for (const ExperienceTuple& e : batch) {
                const double p = floored((*density)(e.s) * (*policy)(e.s, e.a));
                const double cl = 1.0 - c.lower(e.s, e.a) / p, cu = c.upper(e.s, e.a) / p - 1.0;
                loss += (t.lower.values(e.s, e.a) * cl + t.upper.values(e.s, e.a) * cu) * inv_b;
                if (g != nullptr) {
                  g->lower.values(e.s, e.a) += cl * inv_b;
                  g->upper.values(e.s, e.a) += cu * inv_b;
                }
              }
            },
            [&](const ActionDensityBound& c) {
              need_density();
              need_policy();
              for (const ExperienceTuple& e : batch) {
                const double d = (*density)(e.s);
                const double p = floored(d * (*policy)(e.s, e.a));
                const double cl = 1.0 - d * c.lower(e.s, e.a) / p, cu = d * c.upper(e.s, e.a) / p - 1.0;
                loss += (t.lower.values(e.s, e.a) * cl + t.upper.values(e.s, e.a) * cu) * inv_b;
                if (g != nullptr) {
                  g->lower.values(e.s, e.a) += cl * inv_b;
                  g->upper.values(e.s, e.a) += cu * inv_b;
                }
              }
            },
            [&](const AvgTransitionCost& c) {
              for (const ExperienceTuple& e : batch) {
                const double cost = c.cost(e.s, e.a, e.s_next);
                loss -= t.cost.values(e.s, e.a) * cost * inv_b;
                if (g != nullptr) g->cost.values(e.s, e.a) -= cost * inv_b;
              }
            },
            [&](const ImmediateTransitionCost& c) {
              need_policy();
              for (const ExperienceTuple& e : batch) {
                const auto row = itc_index(A, e.s, e.a);
                for (int an = 0; an < A; ++an) {
                  const auto col = itc_index(A, e.s_next, an);
                  const double w = (*policy)(e.s_next, an) * c(e.s, e.a, e.s_next, an) * inv_b;
                  loss -= t.cost.values(row, col) * w;
                  if (g != nullptr) g->cost.values(row, col) -= w;
                }
              }
            },
        },
        cs[k]);
  }
  return loss;
}

// ---------------------------------------------------------------- metrics

void TrainMetrics::write_csv(std::ostream& out) const {
  out << "# schema=1\n";
  out << "step,return,alpha,loss_q,loss_pi,loss_d,loss_r";
  for (const std::string& n : constraint_names) out << ",viol_" << n;
  for (const std::string& n : constraint_names) out << ",norm_" << n;
  out << "\n";
  std::ostringstream row;
  row.precision(10);
  for (const MetricsRecord& r : records) {
    row.str("");
    row << r.step << ',' << r.avg_return << ',' << r.alpha << ',' << r.loss_q << ',' << r.loss_pi << ',' << r.loss_d
        << ',' << r.loss_r;
    for (double v : r.violations) row << ',' << v;
    for (double v : r.modifier_norms) row << ',' << v;
    out << row.str() << "\n";
  }
}

// ---------------------------------------------------------------- tabular training

TabularTask cliff_task(const CliffSpec& spec) {
  return TabularTask{cliff_mdp(spec), cliff_terminals(spec), spec.max_episode_steps};
}

TabularTask continuing_task(const TabularMdp& mdp, int episode_steps) {
  return TabularTask{mdp, std::vector<bool>(static_cast<std::size_t>(mdp.num_states()), false), episode_steps};
}

TabularPolicy TabularAgent::policy() const {
  if (mode == TrainMode::ActorCritic) return TabularPolicy{softmax_rows(logits)};
  if (teacher.size() > 0) return TabularPolicy{boltzmann_policy(q, teacher, bank.alpha())};
  return derive_policy(q);
}

std::vector<NamedTensor> TabularAgent::tensors() const {
  std::vector<NamedTensor> out{make_tensor("q", q), make_tensor("q_target", q_target), make_tensor("density", density)};
  if (mode == TrainMode::ActorCritic) out.push_back(make_tensor("logits", logits));
  out.push_back(make_tensor("alpha", Vector(Vector::Constant(1, bank.alpha()))));
  static const char* parts[] = {"w", "lower", "upper", "cost"};
  for (std::size_t k = 0; k < bank.tables().size(); ++k) {
    const auto tabs = bank.tables()[k].all();
    for (std::size_t i = 0; i < tabs.size(); ++i)
      if (tabs[i]->values.size() > 0)
        out.push_back(make_tensor("mod" + std::to_string(k) + "." + parts[i], tabs[i]->values));
  }
  return out;
}

namespace {

bool is_stochastic_only(const ConstraintSpec& c) {
  return std::holds_alternative<StateDensityBound>(c) || std::holds_alternative<StateActionDensityBound>(c) ||
         std::holds_alternative<ActionDensityBound>(c) || std::holds_alternative<ValueConstraint>(c);
}

int argmax_random_tie(const Eigen::Ref<const Eigen::RowVectorXd>& row, Rng& rng) {
  const double best = row.maxCoeff();
  int count = 0, pick = 0;
  for (Eigen::Index a = 0; a < row.size(); ++a)
    if (row(a) >= best - 1e-12) {
      ++count;
      if (rng.uniform_int(count) == 0) pick = static_cast<int>(a);
    }
  return pick;
}

int sample_row(const Matrix& probs, int s, Rng& rng) {
  Eigen::RowVectorXd row = probs.row(s);
  return rng.categorical(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
}

std::vector<double> tabular_violations(const RewardModifierBank& bank, const ReplayBuffer<ExperienceTuple>& buffer,
                                       const Vector& density, const Matrix& pi, double gamma) {
  const auto& cs = bank.constraints();
  std::vector<double> out;
  const std::size_t n = buffer.size();
  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  for (const ConstraintSpec& spec : cs) {
    out.push_back(std::visit(
        overloaded{
            [&](const EntropySpec& e) {
              double kl = 0.0;
              for (std::size_t i = 0; i < n; ++i) {
                const int s = buffer.at(i).s;
                for (Eigen::Index a = 0; a < pi.cols(); ++a)
                  if (pi(s, a) > 0.0) kl += pi(s, a) * std::log(pi(s, a) / e.teacher.probs(s, a)) * inv_n;
              }
              return kl;
            },
            [&](const ValueConstraint& c) {
              double mean = 0.0;
              for (std::size_t i = 0; i < n; ++i) {
                const auto& e = buffer.at(i);
                mean += c.extra_reward(e.s, e.a, e.s_next) * inv_n;
              }
              return std::max(0.0, (1.0 - gamma) * c.threshold - mean);
            },
            [&](const StateDensityBound& c) {
              return std::max({0.0, (c.lower - density).maxCoeff(), (density - c.upper).maxCoeff()});
            },
            [&](const StateActionDensityBound& c) {
              const Matrix p = density.asDiagonal() * pi;
              return std::max({0.0, (c.lower - p).maxCoeff(), (p - c.upper).maxCoeff()});
            },
            [&](const ActionDensityBound& c) {
              double worst = 0.0;
              for (Eigen::Index s = 0; s < pi.rows(); ++s) {
                if (density(s) <= 1e-6) continue;
                worst = std::max({worst, (c.lower.row(s) - pi.row(s)).maxCoeff(), (pi.row(s) - c.upper.row(s)).maxCoeff()});
              }
              return worst;
            },
            [&](const AvgTransitionCost& c) {
              double mean = 0.0;
              for (std::size_t i = 0; i < n; ++i) {
                const auto& e = buffer.at(i);
                mean += c.cost(e.s, e.a, e.s_next) * inv_n;
              }
              return mean;
            },
            [&](const ImmediateTransitionCost& c) {
              double mean = 0.0;
              for (std::size_t i = 0; i < n; ++i) {
                const auto& e = buffer.at(i);
                for (Eigen::Index an = 0; an < pi.cols(); ++an)
                  mean += pi(e.s_next, an) * c(e.s, e.a, e.s_next, static_cast<int>(an)) * inv_n;
              }
              return mean;
            },
        },
        spec));
  }
  return out;
}

std::string tabular_dump(long step, const TabularAgent& agent, double lq, double lpi, double lr) {
  std::ostringstream os;
  os << "step " << step << "\nloss_q " << lq << "\nloss_pi " << lpi << "\nloss_r " << lr << "\n";
  os << "q range [" << agent.q.minCoeff() << ", " << agent.q.maxCoeff() << "]\n";
  const auto names = agent.bank.names();
  const auto norms = agent.bank.norms();
  for (std::size_t k = 0; k < names.size(); ++k) os << "modifier " << names[k] << " norm " << norms[k] << "\n";
  return os.str();
}

}  // namespace

TabularTrainResult train(const TabularTask& task, const std::vector<ConstraintSpec>& constraints,
                         const TrainConfig& cfg, TrainMode mode, const TabularObserver& observer) {
  cfg.validate();
  const TabularMdp& mdp = task.mdp;
  const int S = mdp.num_states(), A = mdp.num_actions();
  for (const ConstraintSpec& c : constraints) validate_constraint(mdp, c);

  TabularTrainResult result;
  TrainMetrics& metrics = result.metrics;
  TabularAgent& agent = result.agent;
  agent.mode = mode;
  agent.q = Matrix::Zero(S, A);
  agent.q_target = agent.q;
  agent.logits = Matrix::Zero(S, A);
  agent.bank = RewardModifierBank(constraints, S, A);
  RewardModifierBank& bank = agent.bank;
  const EntropySpec* er = bank.entropy();
  if (er != nullptr) agent.teacher = er->teacher.probs;
  metrics.constraint_names = bank.names();
  if (mode == TrainMode::ValueBased)
    for (const ConstraintSpec& c : constraints)
      if (is_stochastic_only(c)) {
        metrics.warnings.push_back("value-based training learns a deterministic policy; " + constraint_kind(c) +
                                   " constraints may require a stochastic optimum");
        break;
      }

  Rng root(cfg.seed);
  Rng env_rng = root.split(1), act_rng = root.split(2);
  TabularEnv env(mdp, task.terminal, task.max_episode_steps);
  ReplayBuffer<ExperienceTuple> buffer(cfg.buffer_capacity, root.split(3).engine()());
  DiscountedCounter counter(S, cfg.gamma, 1.0 - cfg.lr_d);

  // table gradients are sparse; entries not in the batch keep their moments
  LazyAdam opt_q(cfg.lr_q), opt_pi(cfg.lr_pi);
  std::vector<std::array<LazyAdam, 4>> opt_r(bank.tables().size());
  for (auto& arr : opt_r)
    for (LazyAdam& o : arr) o = LazyAdam(cfg.lr_r);

  std::deque<double> recent_returns;
  double episode_return = 0.0;
  int state = env.reset(env_rng);
  counter.visit(state, 0);

  auto env_step = [&](int action) {
    const TabularEnv::Step st = env.step(action, env_rng);
    buffer.push(ExperienceTuple{state, action, st.r, st.s_next, st.done});
    episode_return += st.r;
    if (st.done) counter.absorb(st.s_next, env.episode_step());
    if (st.done || st.truncated) {
      recent_returns.push_back(episode_return);
      if (recent_returns.size() > 20) recent_returns.pop_front();
      episode_return = 0.0;
      counter.end_episode();
      state = env.reset(env_rng);
      counter.visit(state, 0);
    } else {
      state = st.s_next;
      counter.visit(state, env.episode_step());
    }
  };

  for (long t = 0; t < cfg.warmup_steps; ++t) env_step(act_rng.uniform_int(A));

  // current policy used for bootstrapping, exploration and density ratios
  auto current_policy = [&](double eps) -> Matrix {
    if (mode == TrainMode::ActorCritic) return softmax_rows(agent.logits);
    if (er != nullptr) return boltzmann_policy(agent.q, agent.teacher, bank.alpha());
    Matrix pi = derive_policy(agent.q).probs;
    return (1.0 - eps) * pi + Matrix::Constant(S, A, eps / A);
  };

  double lq = 0.0, lpi = 0.0, ld = 0.0, lr = 0.0;
  auto check = [&](long step, double v, const char* what) {
    if (!std::isfinite(v))
      throw TrainingDiverged(std::string("non-finite ") + what + " at step " + std::to_string(step),
                             tabular_dump(step, agent, lq, lpi, lr));
  };

  for (long t = 1; t <= cfg.total_steps; ++t) {
    bank.set_alpha(alpha_at(cfg, t));
    const double eps = epsilon_at(cfg, t);

    int action;
    if (mode == TrainMode::ValueBased && er == nullptr) {
      action = act_rng.bernoulli(eps) ? act_rng.uniform_int(A) : argmax_random_tie(agent.q.row(state), act_rng);
    } else {
      const Matrix pi = current_policy(eps);
      action = sample_row(pi, state, act_rng);
    }
    env_step(action);

    const std::vector<ExperienceTuple> batch = buffer.sample(static_cast<std::size_t>(cfg.batch_size));
    const Matrix pi = current_policy(eps);
    // the value-based learner bootstraps on its greedy (or Boltzmann) policy
    const Matrix pi_eval = mode == TrainMode::ValueBased && er == nullptr ? derive_policy(agent.q).probs : pi;

    if (t % cfg.stride_q == 0) {
      TableLoss c = critic_loss(agent.q, agent.q_target, bank, batch, cfg.gamma, mode, &pi_eval);
      lq = c.loss;
      check(t, lq, "critic loss");
      Eigen::Map<Vector> flat(agent.q.data(), agent.q.size());
      opt_q.step(flat, Eigen::Map<const Vector>(c.grad.data(), c.grad.size()));
    }
    if (mode == TrainMode::ActorCritic && t % cfg.stride_pi == 0) {
      TableLoss a = actor_loss(agent.logits, agent.q, bank, batch);
      lpi = a.loss;
      check(t, lpi, "actor loss");
      Eigen::Map<Vector> flat(agent.logits.data(), agent.logits.size());
      opt_pi.step(flat, Eigen::Map<const Vector>(a.grad.data(), a.grad.size()));
    }
    // counting already tracks every environment step; the loss is diagnostic
    agent.density = counter.normalized();
    if (t % cfg.stride_d == 0) {
      double acc = 0.0;
      for (const ExperienceTuple& e : batch) acc -= std::log(floored(agent.density(e.s)));
      ld = acc / static_cast<double>(batch.size());
    }
    if (t % cfg.stride_r == 0 && !bank.constraints().empty()) {
      std::vector<ModifierTables> grads;
      lr = reward_loss(bank, batch, cfg.gamma, &agent.density, &pi, &grads);
      check(t, lr, "reward loss");
      for (std::size_t k = 0; k < grads.size(); ++k) {
        auto dst = bank.tables()[k].all();
        auto src = grads[k].all();
        for (std::size_t i = 0; i < dst.size(); ++i)
          if (dst[i]->values.size() > 0) opt_r[k][i].step(*dst[i], src[i]->values);
      }
    }
    if (t % cfg.target_stride == 0) {
      Eigen::Map<Vector> tgt(agent.q_target.data(), agent.q_target.size());
      tgt = (1.0 - cfg.target_tau) * tgt + cfg.target_tau * Eigen::Map<const Vector>(agent.q.data(), agent.q.size());
    }
    if (t % cfg.log_every == 0) {
      MetricsRecord rec;
      rec.step = t;
      rec.avg_return = recent_returns.empty()
                           ? 0.0
                           : std::accumulate(recent_returns.begin(), recent_returns.end(), 0.0) /
                                 static_cast<double>(recent_returns.size());
      rec.alpha = bank.alpha();
      rec.loss_q = lq;
      rec.loss_pi = lpi;
      rec.loss_d = ld;
      rec.loss_r = lr;
      rec.violations = tabular_violations(bank, buffer, agent.density, agent.policy().probs, cfg.gamma);
      rec.modifier_norms = bank.norms();
      metrics.records.push_back(std::move(rec));
    }
    if (observer) observer(t, agent);
  }
  agent.density = counter.normalized();
  return result;
}

}  // namespace dualcrl
