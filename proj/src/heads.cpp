#include "softguard/heads.hpp"

#include <stdexcept>
#include <string>

namespace softguard {

namespace {

VectorX<double> from_list(std::initializer_list<double> values) {
  return Eigen::Map<const VectorX<double>>(
      values.begin(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace

IDLogits::IDLogits(VectorX<double> values) : values_(std::move(values)) {
  detail::require_logits(values_, "IDLogits");
}

IDLogits::IDLogits(std::initializer_list<double> values)
    : IDLogits(from_list(values)) {}

CompositeLogits::CompositeLogits(VectorX<double> values)
    : values_(std::move(values)) {
  if (values_.size() < 2) {
    throw std::invalid_argument(
        "CompositeLogits: need background plus at least one class");
  }
  detail::require_logits(values_, "CompositeLogits");
}

CompositeLogits::CompositeLogits(std::initializer_list<double> values)
    : CompositeLogits(from_list(values)) {}

std::string_view to_string(HeadKind kind) {
  return kind == HeadKind::Explicit ? "explicit" : "implicit";
}

HeadKind parse_head_kind(std::string_view name) {
  if (name == "explicit") return HeadKind::Explicit;
  if (name == "implicit") return HeadKind::Implicit;
  throw std::invalid_argument("unknown head kind '" + std::string(name) + "'");
}

CompositeLogits implicit_compose(const IDLogits& v_id) {
  VectorX<double> out(v_id.size() + 1);
  out[0] = -logsumexp(v_id.values());
  out.tail(v_id.size()) = v_id.values();
  return CompositeLogits(std::move(out));
}

VectorX<double> implicit_backward(const IDLogits& v_id,
                                  const VectorX<double>& upstream) {
  if (upstream.size() != v_id.size() + 1) {
    throw std::invalid_argument(
        "implicit_backward: upstream gradient length " +
        std::to_string(upstream.size()) + ", expected " +
        std::to_string(v_id.size() + 1));
  }
  const SimplexPoint s = softmax(v_id.values());
  return upstream.tail(v_id.size()) - upstream[0] * s.probs();
}

double bg_membership_closed_form(const IDLogits& v_id) {
  // 1/(1+S^2) = 1/(1+exp(2L)), L = log S.
  const double two_l = 2.0 * logsumexp(v_id.values());
  if (two_l > 0.0) {
    const double t = std::exp(-two_l);
    return t / (1.0 + t);
  }
  return 1.0 / (1.0 + std::exp(two_l));
}

CompositeLogits apply_head(HeadKind kind, const VectorX<double>& raw) {
  if (kind == HeadKind::Explicit) {
    if (raw.size() < 2) {
      throw std::invalid_argument(
          "apply_head: explicit head needs k >= 2 raw logits");
    }
    return CompositeLogits(raw);
  }
  if (raw.size() < 1) {
    throw std::invalid_argument(
        "apply_head: implicit head needs k-1 >= 1 raw logits");
  }
  return implicit_compose(IDLogits(raw));
}

MatrixX<double> apply_head_columns(HeadKind kind, const MatrixX<double>& raw) {
  if (kind == HeadKind::Explicit) {
    if (raw.rows() < 2) {
      throw std::invalid_argument(
          "apply_head: explicit head needs at least 2 channels");
    }
    return raw;
  }
  if (raw.rows() < 1) {
    throw std::invalid_argument("apply_head: implicit head needs 1 channel");
  }
  MatrixX<double> out(raw.rows() + 1, raw.cols());
  out.row(0) = -colwise_logsumexp(raw);
  out.bottomRows(raw.rows()) = raw;
  return out;
}

MatrixX<double> head_backward_columns(HeadKind kind, const MatrixX<double>& raw,
                                      const MatrixX<double>& upstream) {
  const Eigen::Index expected =
      raw.rows() + (kind == HeadKind::Implicit ? 1 : 0);
  if (upstream.rows() != expected || upstream.cols() != raw.cols()) {
    throw std::invalid_argument("head_backward: upstream shape mismatch");
  }
  if (kind == HeadKind::Explicit) return upstream;
  // d(-LSE)/dx_i = -softmax(x)_i
  const MatrixX<double> s = colwise_softmax(raw);
  return upstream.bottomRows(raw.rows()) -
         (s.array().rowwise() * upstream.row(0).array()).matrix();
}

Field apply_head(HeadKind kind, const Field& raw) {
  MatrixX<double> out = apply_head_columns(kind, raw.matrix());
  return Field(raw.height(), raw.width(), Field::Storage(std::move(out)));
}

Field head_backward(HeadKind kind, const Field& raw, const Field& upstream) {
  if (upstream.pixels() != raw.pixels()) {
    throw std::invalid_argument("head_backward: upstream shape mismatch");
  }
  MatrixX<double> g =
      head_backward_columns(kind, raw.matrix(), upstream.matrix());
  return Field(raw.height(), raw.width(), Field::Storage(std::move(g)));
}

}  // namespace softguard
