#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "softguard/heads.hpp"
#include "softguard/png_io.hpp"
#include "softguard/tensor_field.hpp"

namespace softguard {

/// How max sigma(v_ID) is read: softmax renormalized over the k-1
/// in-distribution logits (SubVector), or the in-distribution entries of
/// the full k-way softmax (FullVector).
enum class IDSoftmaxMode { SubVector, FullVector };

std::string_view to_string(IDSoftmaxMode mode);
IDSoftmaxMode parse_id_softmax_mode(std::string_view name);

struct MembershipTriple {
  double mu_id = 0.0;
  double mu_bg = 0.0;
  double mu_nd = 0.0;
};

/// Per-pixel indicator maps, each of shape (1, H, W).
struct MembershipMaps {
  Field mu_id;
  Field mu_bg;
  Field mu_nd;

  Eigen::Index pixels() const { return mu_nd.pixels(); }
};

MembershipTriple membership(const CompositeLogits& v,
                            IDSoftmaxMode mode = IDSoftmaxMode::SubVector);

/// Applies membership() at every pixel of a (k, H, W) composite field.
MembershipMaps membership_field(const Field& logits,
                                IDSoftmaxMode mode = IDSoftmaxMode::SubVector);

/// Pooled mean of mu_ND over every pixel of every map, as a percentage.
double expected_nd(std::span<const MembershipMaps> maps);

/// Mergeable accumulator for expected_nd over a stream of images. Each image
/// contributes its pairwise-summed total; totals are combined in insertion
/// order, so the result only depends on the image sequence.
class NonDistinctAccumulator {
 public:
  void add(const MembershipMaps& maps);
  void add_image_total(double sum, std::int64_t pixels);
  void merge(const NonDistinctAccumulator& other);

  std::int64_t pixels() const { return pixels_; }
  /// Percentage; throws when empty.
  double percent() const;

 private:
  std::vector<double> image_sums_;
  std::int64_t pixels_ = 0;
};

/// round(255 * mu), half-up, clamped to [0, 255].
std::uint8_t quantize_unit(double mu);
Image8 quantize_gray(const Field& field);

/// round(255 * (a/255) * (b/255)) per pixel.
Image8 quantize_product(const Image8& a, const Image8& b);

/// Writes <dir>/<stem>_mu_id.png, _mu_bg.png, _mu_nd.png.
void render_membership_png(const MembershipMaps& maps,
                           const std::filesystem::path& dir,
                           const std::string& stem, const PngText& text = {});

}  // namespace softguard
