#pragma once

#include <string_view>

#include "softguard/numerics.hpp"
#include "softguard/tensor_field.hpp"

namespace softguard {

/// In-distribution logits x_1..x_{k-1}; length >= 1, all finite.
class IDLogits {
 public:
  explicit IDLogits(VectorX<double> values);
  IDLogits(std::initializer_list<double> values);

  const VectorX<double>& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }

 private:
  VectorX<double> values_;
};

/// k logits with the background component at index 0; length >= 2.
class CompositeLogits {
 public:
  explicit CompositeLogits(VectorX<double> values);
  CompositeLogits(std::initializer_list<double> values);

  const VectorX<double>& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }
  double background() const { return values_[0]; }
  auto in_distribution() const { return values_.tail(values_.size() - 1); }

 private:
  VectorX<double> values_;
};

enum class HeadKind { Explicit, Implicit };

std::string_view to_string(HeadKind kind);
HeadKind parse_head_kind(std::string_view name);

/// Number of raw model outputs the head consumes for k composite classes.
inline Eigen::Index head_input_channels(HeadKind kind, Eigen::Index classes) {
  return kind == HeadKind::Explicit ? classes : classes - 1;
}

/// [-LSE(v_ID), v_ID...].
CompositeLogits implicit_compose(const IDLogits& v_id);

/// Gradient over v_ID given upstream gradient g over the composite:
/// g[i+1] - g[0] * softmax(v_ID)[i].
VectorX<double> implicit_backward(const IDLogits& v_id,
                                  const VectorX<double>& upstream);

/// softmax(implicit_compose(v_ID))[0] in closed form, 1/(1+S^2) with
/// S = sum exp(v_ID), evaluated as a logistic in LSE(v_ID).
double bg_membership_closed_form(const IDLogits& v_id);

CompositeLogits apply_head(HeadKind kind, const VectorX<double>& raw);

// Column forms: raw model output as (channels x pixels) -> (k x pixels).

MatrixX<double> apply_head_columns(HeadKind kind, const MatrixX<double>& raw);

/// Gradient over the raw columns given the gradient over the composite.
MatrixX<double> head_backward_columns(HeadKind kind, const MatrixX<double>& raw,
                                      const MatrixX<double>& upstream);

// Field forms: raw model output (channels, H, W) -> composite (k, H, W).

Field apply_head(HeadKind kind, const Field& raw);

/// Backward through apply_head on a whole field; identity for Explicit.
Field head_backward(HeadKind kind, const Field& raw, const Field& upstream);

}  // namespace softguard
