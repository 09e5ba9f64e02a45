#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Core>

namespace softguard {

/// A column vector of dynamic size, templated on scalar type.
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// A dense matrix of dynamic size, templated on scalar type.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

template <typename Derived>
void require_logits(const Eigen::DenseBase<Derived>& v, const char* op) {
  if (v.size() == 0) {
    throw std::invalid_argument(std::string(op) + ": empty logit vector");
  }
  if (!v.derived().allFinite()) {
    throw std::invalid_argument(std::string(op) + ": non-finite logit");
  }
}

}  // namespace detail

/// Finite logits in R^k, k >= 1. Validated on construction.
class LogitVector {
 public:
  explicit LogitVector(VectorX<double> values) : values_(std::move(values)) {
    detail::require_logits(values_, "LogitVector");
  }
  LogitVector(std::initializer_list<double> values)
      : LogitVector(VectorX<double>(Eigen::Map<const VectorX<double>>(
            values.begin(), static_cast<Eigen::Index>(values.size())))) {}

  const VectorX<double>& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }
  double operator[](Eigen::Index i) const { return values_[i]; }

 private:
  VectorX<double> values_;
};

/// A point in the interior of the probability simplex.
///
/// Components are strictly positive and sum to one within 1e-12. Points
/// produced by softmax() skip the positivity check: a component whose logit
/// trails the maximum by more than ~745 underflows to zero in double
/// precision and is kept as such.
class SimplexPoint {
 public:
  static constexpr double kSumTolerance = 1e-12;

  explicit SimplexPoint(VectorX<double> probs) : probs_(std::move(probs)) {
    if (probs_.size() == 0) {
      throw std::invalid_argument("SimplexPoint: empty");
    }
    if ((probs_.array() <= 0.0).any()) {
      throw std::invalid_argument("SimplexPoint: component not strictly positive");
    }
    check_sum();
  }

  const VectorX<double>& probs() const { return probs_; }
  Eigen::Index size() const { return probs_.size(); }
  double operator[](Eigen::Index i) const { return probs_[i]; }

 private:
  struct Trusted {};
  SimplexPoint(VectorX<double> probs, Trusted) : probs_(std::move(probs)) {
    check_sum();
  }
  void check_sum() const {
    if (std::abs(probs_.sum() - 1.0) > kSumTolerance) {
      throw std::invalid_argument("SimplexPoint: components do not sum to 1");
    }
  }

  template <typename Derived>
  friend SimplexPoint softmax(const Eigen::MatrixBase<Derived>& v);

  VectorX<double> probs_;
};

/// log(sum_i exp(v_i)) by max-subtraction; never overflows for finite input.
/// Accumulates in double regardless of the input scalar.
template <typename Derived>
double logsumexp(const Eigen::MatrixBase<Derived>& v) {
  detail::require_logits(v, "logsumexp");
  const auto vd = v.template cast<double>().eval();
  const double m = vd.maxCoeff();
  return m + std::log((vd.array() - m).exp().sum());
}

inline double logsumexp(const LogitVector& v) { return logsumexp(v.values()); }

/// v - LSE(v). Every component is <= 0.
template <typename Derived>
VectorX<double> log_softmax(const Eigen::MatrixBase<Derived>& v) {
  const double lse = logsumexp(v);
  return (v.template cast<double>().array() - lse).matrix();
}

inline VectorX<double> log_softmax(const LogitVector& v) {
  return log_softmax(v.values());
}

template <typename Derived>
SimplexPoint softmax(const Eigen::MatrixBase<Derived>& v) {
  detail::require_logits(v, "softmax");
  const auto vd = v.template cast<double>().eval();
  VectorX<double> e = (vd.array() - vd.maxCoeff()).exp().matrix();
  e /= e.sum();
  return SimplexPoint(std::move(e), SimplexPoint::Trusted{});
}

inline SimplexPoint softmax(const LogitVector& v) { return softmax(v.values()); }

/// Index of the largest component; ties go to the lowest index.
template <typename Derived>
Eigen::Index argmax_class(const Eigen::DenseBase<Derived>& v) {
  detail::require_logits(v, "argmax_class");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v.derived().coeff(i) > v.derived().coeff(best)) best = i;
  }
  return best;
}

inline Eigen::Index argmax_class(const LogitVector& v) {
  return argmax_class(v.values());
}

/// Central-difference gradient of f at v with step h.
inline VectorX<double> finite_diff_grad(
    const std::function<double(const VectorX<double>&)>& f,
    const VectorX<double>& v, double h) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("finite_diff_grad: step must be positive");
  }
  VectorX<double> grad(v.size());
  VectorX<double> probe = v;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    probe[i] = v[i] + h;
    const double up = f(probe);
    probe[i] = v[i] - h;
    const double down = f(probe);
    probe[i] = v[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Column-wise kernels over logit fields stored as (classes x pixels).

/// Per-column logsumexp as a row vector.
template <typename Derived>
Eigen::Matrix<double, 1, Eigen::Dynamic> colwise_logsumexp(
    const Eigen::MatrixBase<Derived>& logits) {
  const auto x = logits.template cast<double>().eval();
  const Eigen::Matrix<double, 1, Eigen::Dynamic> m = x.colwise().maxCoeff();
  const auto shifted = (x.rowwise() - m).array().exp().matrix().eval();
  return m.array() + shifted.colwise().sum().array().log();
}

/// Per-column softmax.
template <typename Derived>
MatrixX<double> colwise_softmax(const Eigen::MatrixBase<Derived>& logits) {
  const auto x = logits.template cast<double>().eval();
  const Eigen::Matrix<double, 1, Eigen::Dynamic> m = x.colwise().maxCoeff();
  MatrixX<double> e = (x.rowwise() - m).array().exp().matrix();
  const Eigen::Matrix<double, 1, Eigen::Dynamic> inv =
      e.colwise().sum().cwiseInverse();
  return e * inv.asDiagonal();
}

/// Pairwise (cascade) summation over values[begin, end).
template <typename Range>
double pairwise_sum(const Range& values, std::size_t begin, std::size_t end) {
  const std::size_t n = end - begin;
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += static_cast<double>(values[i]);
    return s;
  }
  const std::size_t mid = begin + n / 2;
  return pairwise_sum(values, begin, mid) + pairwise_sum(values, mid, end);
}

}  // namespace softguard
