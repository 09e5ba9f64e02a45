#include "softguard/distinct.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "softguard/errors.hpp"

namespace softguard {

std::string_view to_string(IDSoftmaxMode mode) {
  return mode == IDSoftmaxMode::SubVector ? "sub" : "full";
}

IDSoftmaxMode parse_id_softmax_mode(std::string_view name) {
  if (name == "sub") return IDSoftmaxMode::SubVector;
  if (name == "full") return IDSoftmaxMode::FullVector;
  throw std::invalid_argument("unknown id-softmax mode '" + std::string(name) +
                              "' (expected sub or full)");
}

MembershipTriple membership(const CompositeLogits& v, IDSoftmaxMode mode) {
  const SimplexPoint full = softmax(v.values());
  MembershipTriple t;
  t.mu_bg = full[0];
  if (mode == IDSoftmaxMode::SubVector) {
    t.mu_id = softmax(v.in_distribution()).probs().maxCoeff();
  } else {
    t.mu_id = full.probs().tail(v.size() - 1).maxCoeff();
  }
  t.mu_nd = t.mu_bg * t.mu_id;
  return t;
}

MembershipMaps membership_field(const Field& logits, IDSoftmaxMode mode) {
  if (logits.channels() < 2) {
    throw std::invalid_argument(
        "membership_field: need at least 2 channels (background + 1 class)");
  }
  const auto& x = logits.matrix();
  const Eigen::Index k = x.rows();
  const MatrixX<double> full = colwise_softmax(x);

  MembershipMaps maps{Field(1, logits.height(), logits.width()),
                      Field(1, logits.height(), logits.width()),
                      Field(1, logits.height(), logits.width())};
  maps.mu_bg.matrix() = full.row(0);
  if (mode == IDSoftmaxMode::SubVector) {
    const MatrixX<double> sub = colwise_softmax(x.bottomRows(k - 1));
    maps.mu_id.matrix() = sub.colwise().maxCoeff();
  } else {
    maps.mu_id.matrix() = full.bottomRows(k - 1).colwise().maxCoeff();
  }
  maps.mu_nd.matrix() =
      maps.mu_bg.matrix().cwiseProduct(maps.mu_id.matrix());
  return maps;
}

void NonDistinctAccumulator::add(const MembershipMaps& maps) {
  const auto& row = maps.mu_nd.matrix();
  add_image_total(pairwise_sum(row.data(), 0, static_cast<std::size_t>(row.size())),
                  row.size());
}

void NonDistinctAccumulator::add_image_total(double sum, std::int64_t pixels) {
  if (pixels <= 0) {
    throw std::invalid_argument("NonDistinctAccumulator: image without pixels");
  }
  image_sums_.push_back(sum);
  pixels_ += pixels;
}

void NonDistinctAccumulator::merge(const NonDistinctAccumulator& other) {
  image_sums_.insert(image_sums_.end(), other.image_sums_.begin(),
                     other.image_sums_.end());
  pixels_ += other.pixels_;
}

double NonDistinctAccumulator::percent() const {
  if (pixels_ == 0) {
    throw std::invalid_argument("expected_nd: empty dataset");
  }
  return 100.0 * pairwise_sum(image_sums_, 0, image_sums_.size()) /
         static_cast<double>(pixels_);
}

double expected_nd(std::span<const MembershipMaps> maps) {
  NonDistinctAccumulator acc;
  for (const auto& m : maps) acc.add(m);
  return acc.percent();
}

std::uint8_t quantize_unit(double mu) {
  const double scaled = std::floor(255.0 * mu + 0.5);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

Image8 quantize_gray(const Field& field) {
  if (field.channels() != 1) {
    throw std::invalid_argument("quantize_gray: expected a single channel");
  }
  Image8 img{static_cast<int>(field.width()), static_cast<int>(field.height()),
             1, {}};
  img.bytes.resize(static_cast<std::size_t>(field.pixels()));
  for (Eigen::Index p = 0; p < field.pixels(); ++p) {
    const double mu = field.matrix()(0, p);
    if (!(mu >= 0.0 && mu <= 1.0)) {
      throw std::invalid_argument("quantize_gray: value outside [0, 1]");
    }
    img.bytes[static_cast<std::size_t>(p)] = quantize_unit(mu);
  }
  return img;
}

Image8 quantize_product(const Image8& a, const Image8& b) {
  if (a.channels != 1 || b.channels != 1 || a.width != b.width ||
      a.height != b.height) {
    throw std::invalid_argument("quantize_product: mismatched gray images");
  }
  Image8 out = a;
  for (std::size_t i = 0; i < out.bytes.size(); ++i) {
    out.bytes[i] = quantize_unit(a.bytes[i] / 255.0 * (b.bytes[i] / 255.0));
  }
  return out;
}

void render_membership_png(const MembershipMaps& maps,
                           const std::filesystem::path& dir,
                           const std::string& stem, const PngText& text) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  const Image8 id = quantize_gray(maps.mu_id);
  const Image8 bg = quantize_gray(maps.mu_bg);
  // Rounding each map independently can leave the rendered product up to
  // 1.42 levels away from the rendered mu_ND; rendering mu_ND from the
  // rendered factors keeps it within half a level.
  quantize_gray(maps.mu_nd);  // range check only
  write_gray_png(dir / (stem + "_mu_id.png"), id, text);
  write_gray_png(dir / (stem + "_mu_bg.png"), bg, text);
  write_gray_png(dir / (stem + "_mu_nd.png"), quantize_product(bg, id), text);
}

}  // namespace softguard
