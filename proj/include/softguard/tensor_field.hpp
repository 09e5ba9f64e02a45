#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Core>

namespace softguard {

/// Dense (channels, height, width) field stored row-major, so the flat
/// index of (c, y, x) is c*H*W + y*W + x. The storage is exposed as a
/// channels x (H*W) matrix: one row per channel, one column per pixel.
template <typename Scalar>
class TensorField {
 public:
  using Storage =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  TensorField() = default;

  TensorField(Eigen::Index channels, Eigen::Index height, Eigen::Index width)
      : height_(height), width_(width) {
    check_shape(channels, height, width);
    data_ = Storage::Zero(channels, height * width);
  }

  TensorField(Eigen::Index height, Eigen::Index width, Storage data)
      : height_(height), width_(width), data_(std::move(data)) {
    check_shape(data_.rows(), height, width);
    if (data_.cols() != height * width) {
      throw std::invalid_argument("TensorField: data length does not match shape");
    }
  }

  static TensorField constant(Eigen::Index channels, Eigen::Index height,
                              Eigen::Index width, Scalar value) {
    TensorField f(channels, height, width);
    f.data_.setConstant(value);
    return f;
  }

  Eigen::Index channels() const { return data_.rows(); }
  Eigen::Index height() const { return height_; }
  Eigen::Index width() const { return width_; }
  Eigen::Index pixels() const { return height_ * width_; }

  Scalar& operator()(Eigen::Index c, Eigen::Index y, Eigen::Index x) {
    return data_(c, y * width_ + x);
  }
  Scalar operator()(Eigen::Index c, Eigen::Index y, Eigen::Index x) const {
    return data_(c, y * width_ + x);
  }

  Storage& matrix() { return data_; }
  const Storage& matrix() const { return data_; }

  /// Logit vector of one pixel.
  auto pixel(Eigen::Index y, Eigen::Index x) const {
    return data_.col(y * width_ + x);
  }

  bool same_shape(const TensorField& other) const {
    return channels() == other.channels() && height_ == other.height_ &&
           width_ == other.width_;
  }

  friend bool operator==(const TensorField& a, const TensorField& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  static void check_shape(Eigen::Index c, Eigen::Index h, Eigen::Index w) {
    if (c < 1 || h < 1 || w < 1) {
      throw std::invalid_argument("TensorField: shape (" + std::to_string(c) +
                                  ", " + std::to_string(h) + ", " +
                                  std::to_string(w) + ") has an empty axis");
    }
  }

  Eigen::Index height_ = 0;
  Eigen::Index width_ = 0;
  Storage data_;
};

using Field = TensorField<double>;

/// Per-pixel class labels, (height x width), row-major.
using LabelMap =
    Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::uint8_t kIgnoreLabel = 255;
inline constexpr int kBackgroundClass = 0;

/// Flat pixel view of a label map, in the same order as TensorField columns.
inline auto flat_labels(const LabelMap& labels) {
  return Eigen::Map<const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>>(
      labels.data(), labels.size());
}

/// Argmax class per pixel of a (classes, H, W) logit field; ties to lowest.
template <typename Scalar>
LabelMap argmax_labels(const TensorField<Scalar>& logits) {
  LabelMap out(logits.height(), logits.width());
  const auto& m = logits.matrix();
  for (Eigen::Index p = 0; p < logits.pixels(); ++p) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.rows(); ++c) {
      if (m(c, p) > m(best, p)) best = c;
    }
    out.data()[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace softguard
