#include "softguard/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "softguard/errors.hpp"
#include "softguard/hashing.hpp"
#include "softguard/rng.hpp"

namespace softguard {

using ordered_json = nlohmann::ordered_json;

namespace {

// Stream domains keep scene, noise and texture draws independent for the
// same (seed, index).
constexpr std::uint64_t kSceneDomain = 1;
constexpr std::uint64_t kNoiseDomain = 2;
constexpr std::uint64_t kTextureDomain = 3;

constexpr std::array<std::array<double, 3>, 4> kClassColors{{
    {0.85, 0.22, 0.20},  // disk
    {0.20, 0.72, 0.30},  // square
    {0.25, 0.35, 0.90},  // triangle
    {0.95, 0.80, 0.20},  // cross
}};

enum class Shape { Disk, Square, Triangle, Cross };

struct Placed {
  Shape shape;
  int cls;
  double x0, y0, size;  // bounding box corner and side length
};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

/// Lattice value noise with smoothstep interpolation, in [0, 1].
class ValueNoise {
 public:
  ValueNoise(Rng& rng, int height, int width, double cell)
      : cell_(cell),
        cols_(static_cast<int>(std::ceil(width / cell)) + 2),
        rows_(static_cast<int>(std::ceil(height / cell)) + 2),
        lattice_(static_cast<std::size_t>(cols_ * rows_)) {
    for (auto& v : lattice_) v = rng.uniform();
  }

  double operator()(double x, double y) const {
    const double gx = x / cell_;
    const double gy = y / cell_;
    const int ix = static_cast<int>(std::floor(gx));
    const int iy = static_cast<int>(std::floor(gy));
    const double tx = smoothstep(gx - ix);
    const double ty = smoothstep(gy - iy);
    const double a = at(ix, iy) + tx * (at(ix + 1, iy) - at(ix, iy));
    const double b = at(ix, iy + 1) + tx * (at(ix + 1, iy + 1) - at(ix, iy + 1));
    return a + ty * (b - a);
  }

 private:
  double at(int ix, int iy) const {
    return lattice_[static_cast<std::size_t>(iy * cols_ + ix)];
  }

  double cell_;
  int cols_;
  int rows_;
  std::vector<double> lattice_;
};

/// Sum of octaves, normalized back to [0, 1].
Eigen::MatrixXd fractal_noise(Rng& rng, int height, int width, double cell,
                              int octaves) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(height, width);
  double amplitude = 1.0;
  double total = 0.0;
  for (int o = 0; o < octaves; ++o) {
    const ValueNoise layer(rng, height, width, cell);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        out(y, x) += amplitude * layer(x + 0.5, y + 0.5);
      }
    }
    total += amplitude;
    amplitude *= 0.5;
    cell = std::max(1.0, cell * 0.5);
  }
  return out / total;
}

bool inside(const Placed& s, double px, double py) {
  const double lx = px - s.x0;
  const double ly = py - s.y0;
  if (lx < 0.0 || ly < 0.0 || lx > s.size || ly > s.size) return false;
  const double half = s.size / 2.0;
  switch (s.shape) {
    case Shape::Disk: {
      const double dx = lx - half;
      const double dy = ly - half;
      return dx * dx + dy * dy <= half * half;
    }
    case Shape::Square:
      return true;
    case Shape::Triangle:
      // Apex at the top center, base along the bottom edge.
      return std::abs(lx - half) <= (ly / s.size) * half;
    case Shape::Cross: {
      const double arm = s.size / 6.0;
      return std::abs(lx - half) <= arm || std::abs(ly - half) <= arm;
    }
  }
  return false;
}

/// Side of the bounding square that gives a shape the requested area.
double side_for_area(Shape shape, double area) {
  switch (shape) {
    case Shape::Disk:
      return 2.0 * std::sqrt(area / std::numbers::pi);
    case Shape::Square:
      return std::sqrt(area);
    case Shape::Triangle:
      return std::sqrt(2.0 * area);
    case Shape::Cross:
      return std::sqrt(9.0 * area / 5.0);
  }
  return 0.0;
}

std::array<double, 3> muted_color(Rng& rng) {
  const double base = rng.uniform(0.30, 0.60);
  return {clamp01(base + rng.uniform(-0.06, 0.06)),
          clamp01(base + rng.uniform(-0.06, 0.06)),
          clamp01(base + rng.uniform(-0.08, 0.04))};
}

/// A random color at least 0.35 (RGB distance) from every class color.
std::array<double, 3> ood_color(Rng& rng) {
  for (;;) {
    const std::array<double, 3> c{rng.uniform(), rng.uniform(), rng.uniform()};
    bool far = true;
    for (const auto& k : kClassColors) {
      const double d = std::hypot(c[0] - k[0], c[1] - k[1], c[2] - k[2]);
      if (d < 0.35) far = false;
    }
    if (far) return c;
  }
}

void fill_mix(Field& image, const Eigen::MatrixXd& t,
              const std::array<double, 3>& a, const std::array<double, 3>& b) {
  for (int c = 0; c < 3; ++c) {
    for (Eigen::Index y = 0; y < image.height(); ++y) {
      for (Eigen::Index x = 0; x < image.width(); ++x) {
        image(c, y, x) = clamp01(a[c] + t(y, x) * (b[c] - a[c]));
      }
    }
  }
}

std::optional<Scene> try_scene(const SceneSpec& spec, Rng& rng) {
  const int h = spec.height;
  const int w = spec.width;
  Scene scene{Field(3, h, w), LabelMap::Zero(h, w)};

  // Textured background: two muted colors blended by low-frequency noise.
  const Eigen::MatrixXd blend =
      fractal_noise(rng, h, w, std::max(4.0, w / 4.0), 3);
  fill_mix(scene.image, blend, muted_color(rng), muted_color(rng));

  const int n = rng.range(spec.min_shapes, spec.max_shapes);
  const int shape_classes = spec.classes - 1;
  const double foreground =
      (1.0 - spec.background_fraction) * static_cast<double>(h * w);
  // Occupancy dilated by one pixel keeps shapes from touching.
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> blocked =
      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(h, w, false);

  for (int s = 0; s < n; ++s) {
    const int cls = 1 + static_cast<int>(rng.below(shape_classes));
    const Shape shape = static_cast<Shape>(cls - 1);
    const double area = foreground / n * rng.uniform(0.8, 1.2);
    const double side = side_for_area(shape, area);
    if (side + 1.0 > std::min(h, w)) return std::nullopt;

    std::optional<Placed> placed;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const Placed cand{shape, cls, rng.uniform(0.5, w - side - 0.5),
                        rng.uniform(0.5, h - side - 0.5), side};
      bool clash = false;
      for (int y = 0; y < h && !clash; ++y) {
        for (int x = 0; x < w && !clash; ++x) {
          clash = blocked(y, x) && inside(cand, x + 0.5, y + 0.5);
        }
      }
      if (!clash) placed = cand;
    }
    if (!placed) return std::nullopt;

    const auto& base = kClassColors[static_cast<std::size_t>(cls - 1)];
    std::array<double, 3> color{};
    for (int c = 0; c < 3; ++c) {
      color[c] = clamp01(base[c] +
                         rng.uniform(-spec.color_jitter, spec.color_jitter));
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!inside(*placed, x + 0.5, y + 0.5)) continue;
        scene.mask(y, x) = static_cast<std::uint8_t>(cls);
        for (int c = 0; c < 3; ++c) scene.image(c, y, x) = color[c];
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy;
            const int xx = x + dx;
            if (yy >= 0 && yy < h && xx >= 0 && xx < w) blocked(yy, xx) = true;
          }
        }
      }
    }
  }

  if (n > 0) {
    const double bg = static_cast<double>((scene.mask == 0).count()) / (h * w);
    if (std::abs(bg - spec.background_fraction) >
        SceneSpec::kFractionTolerance) {
      return std::nullopt;
    }
  }

  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        scene.image(c, y, x) =
            clamp01(scene.image(c, y, x) + spec.noise_amplitude * rng.normal());
      }
    }
  }
  return scene;
}

std::uint8_t quantize_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(255.0 * v + 0.5), 0.0, 255.0));
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string item_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05zu.png", i);
  return buf;
}

}  // namespace

void SceneSpec::validate() const {
  if (classes < 2 || classes > kMaxClasses) {
    throw std::invalid_argument("SceneSpec: classes must be in [2, " +
                                std::to_string(kMaxClasses) + "]");
  }
  if (height < 16 || width < 16) {
    throw std::invalid_argument("SceneSpec: height and width must be >= 16");
  }
  if (!(background_fraction > 0.0 && background_fraction < 1.0)) {
    throw std::invalid_argument("SceneSpec: background fraction must be in (0, 1)");
  }
  if (min_shapes < 0 || max_shapes < min_shapes) {
    throw std::invalid_argument("SceneSpec: invalid shape count range");
  }
  if (color_jitter < 0.0 || noise_amplitude < 0.0) {
    throw std::invalid_argument("SceneSpec: jitter and noise must be >= 0");
  }
}

std::array<double, 3> class_color(int cls) {
  if (cls < 1 || cls > 4) {
    throw std::invalid_argument("class_color: class must be in [1, 4]");
  }
  return kClassColors[static_cast<std::size_t>(cls - 1)];
}

Scene gen_scene(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng = Rng::stream(spec.seed, index, kSceneDomain);
  for (int attempt = 0; attempt < 50; ++attempt) {
    if (auto scene = try_scene(spec, rng)) return std::move(*scene);
  }
  throw GenerationError("gen_scene: could not place shapes for index " +
                        std::to_string(index) + " after 50 attempts");
}

Field gen_noise(std::uint64_t seed, std::uint64_t index, int height, int width) {
  if (height < 1 || width < 1) {
    throw std::invalid_argument("gen_noise: size must be positive");
  }
  Rng rng = Rng::stream(seed, index, kNoiseDomain);
  Field image(3, height, width);
  for (Eigen::Index i = 0; i < image.matrix().size(); ++i) {
    image.matrix().data()[i] =
        clamp01(rng.normal(NoiseSpec::kMean, NoiseSpec::kStddev));
  }
  return image;
}

Field gen_texture(std::uint64_t seed, std::uint64_t index, int height,
                  int width, TextureInfo* info) {
  if (height < 8 || width < 8) {
    throw std::invalid_argument("gen_texture: size must be at least 8x8");
  }
  Rng rng = Rng::stream(seed, index, kTextureDomain);
  TextureInfo ti;
  ti.family = static_cast<TextureFamily>(rng.below(4));
  const auto a = ood_color(rng);
  const auto b = ood_color(rng);
  Eigen::MatrixXd t(height, width);

  switch (ti.family) {
    case TextureFamily::Grating: {
      ti.period = rng.uniform(4.0, 10.0);
      ti.orientation = rng.uniform(0.0, std::numbers::pi);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double cx = std::cos(ti.orientation);
      const double sy = std::sin(ti.orientation);
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          const double u = x * cx + y * sy;
          t(y, x) = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * u / ti.period + phase);
        }
      }
      break;
    }
    case TextureFamily::Checkerboard: {
      ti.period = rng.uniform(3.0, 8.0);
      ti.orientation = rng.uniform(0.0, std::numbers::pi / 2.0);
      const double c = std::cos(ti.orientation);
      const double s = std::sin(ti.orientation);
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          const double u = (x * c + y * s) / ti.period;
          const double v = (-x * s + y * c) / ti.period;
          const auto parity = static_cast<long long>(std::floor(u) + std::floor(v));
          t(y, x) = (parity % 2 == 0) ? 0.0 : 1.0;
        }
      }
      break;
    }
    case TextureFamily::ValueNoise: {
      ti.period = rng.uniform(3.0, 8.0);
      t = fractal_noise(rng, height, width, ti.period, 4);
      break;
    }
    case TextureFamily::Rings: {
      ti.period = rng.uniform(4.0, 10.0);
      const double cx = rng.uniform(0.0, width);
      const double cy = rng.uniform(0.0, height);
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          const double r = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
          t(y, x) = 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * r / ti.period);
        }
      }
      break;
    }
  }
  Field image(3, height, width);
  fill_mix(image, t, a, b);
  if (info) *info = ti;
  return image;
}

// ---------------------------------------------------------------------------

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::InDistribution:
      return "in-distribution";
    case DatasetKind::Noise:
      return "noise";
    case DatasetKind::Texture:
      return "texture";
  }
  return "";
}

DatasetKind parse_dataset_kind(std::string_view name) {
  if (name == "in-distribution") return DatasetKind::InDistribution;
  if (name == "noise") return DatasetKind::Noise;
  if (name == "texture") return DatasetKind::Texture;
  throw FormatError("unknown dataset kind '" + std::string(name) + "'");
}

std::string spec_hash(const DatasetSpec& spec) {
  ordered_json j;
  j["id"] = spec.id;
  j["kind"] = to_string(spec.kind);
  j["count"] = spec.count;
  j["first_index"] = spec.first_index;
  j["height"] = spec.scene.height;
  j["width"] = spec.scene.width;
  j["seed"] = spec.scene.seed;
  if (spec.kind == DatasetKind::InDistribution) {
    j["classes"] = spec.scene.classes;
    j["min_shapes"] = spec.scene.min_shapes;
    j["max_shapes"] = spec.scene.max_shapes;
    j["background_fraction"] = spec.scene.background_fraction;
    j["color_jitter"] = spec.scene.color_jitter;
    j["noise_amplitude"] = spec.scene.noise_amplitude;
  } else if (spec.kind == DatasetKind::Noise) {
    j["mean"] = NoiseSpec::kMean;
    j["stddev"] = NoiseSpec::kStddev;
  }
  return sha256_hex(j.dump());
}

LabelMap Dataset::ground_truth(std::size_t i) const {
  const DatasetItem& item = items.at(i);
  if (item.mask) return *item.mask;
  return LabelMap::Constant(item.image.height(), item.image.width(),
                            static_cast<std::uint8_t>(kBackgroundClass));
}

std::string Dataset::content_hash() const {
  Sha256 h;
  for (const auto& item : items) {
    const Image8 img = to_image8(item.image);
    const std::string dims = std::to_string(img.width) + "x" +
                             std::to_string(img.height) + ";";
    h.update(dims);
    h.update(img.bytes);
    if (item.mask) {
      h.update(std::string_view("mask;"));
      h.update(std::span<const unsigned char>(item.mask->data(),
                                              static_cast<std::size_t>(item.mask->size())));
    } else {
      h.update(std::string_view("all_background;"));
    }
  }
  return h.hex_digest();
}

Dataset generate_dataset(const DatasetSpec& spec) {
  if (spec.count < 0) {
    throw std::invalid_argument("generate_dataset: negative count");
  }
  Dataset ds;
  ds.id = spec.id;
  ds.kind = spec.kind;
  ds.generator_seed = spec.scene.seed;
  ds.spec_hash = spec_hash(spec);
  ds.items.reserve(static_cast<std::size_t>(spec.count));
  const int h = spec.scene.height;
  const int w = spec.scene.width;
  for (int i = 0; i < spec.count; ++i) {
    const std::uint64_t index = spec.first_index + static_cast<std::uint64_t>(i);
    DatasetItem item;
    switch (spec.kind) {
      case DatasetKind::InDistribution: {
        Scene s = gen_scene(spec.scene, index);
        item.image = std::move(s.image);
        item.mask = std::move(s.mask);
        break;
      }
      case DatasetKind::Noise:
        item.image = gen_noise(spec.scene.seed, index, h, w);
        break;
      case DatasetKind::Texture:
        item.image = gen_texture(spec.scene.seed, index, h, w);
        break;
    }
    item.image = from_image8(to_image8(item.image));
    ds.items.push_back(std::move(item));
  }
  return ds;
}

Image8 to_image8(const Field& rgb) {
  if (rgb.channels() != 3) {
    throw std::invalid_argument("to_image8: expected 3 channels");
  }
  Image8 img{static_cast<int>(rgb.width()), static_cast<int>(rgb.height()), 3, {}};
  img.bytes.resize(static_cast<std::size_t>(3 * rgb.pixels()));
  std::size_t i = 0;
  for (Eigen::Index y = 0; y < rgb.height(); ++y) {
    for (Eigen::Index x = 0; x < rgb.width(); ++x) {
      for (int c = 0; c < 3; ++c) img.bytes[i++] = quantize_byte(rgb(c, y, x));
    }
  }
  return img;
}

Field from_image8(const Image8& rgb) {
  if (rgb.channels != 3) {
    throw std::invalid_argument("from_image8: expected 3 channels");
  }
  Field f(3, rgb.height, rgb.width);
  std::size_t i = 0;
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      for (int c = 0; c < 3; ++c) f(c, y, x) = rgb.bytes[i++] / 255.0;
    }
  }
  return f;
}

Image8 mask_to_image8(const LabelMap& mask) {
  Image8 img{static_cast<int>(mask.cols()), static_cast<int>(mask.rows()), 1, {}};
  img.bytes.assign(mask.data(), mask.data() + mask.size());
  return img;
}

LabelMap mask_from_image8(const Image8& indices) {
  if (indices.channels != 1) {
    throw std::invalid_argument("mask_from_image8: expected 1 channel");
  }
  LabelMap m(indices.height, indices.width);
  std::copy(indices.bytes.begin(), indices.bytes.end(), m.data());
  return m;
}

DatasetManifest save_dataset(const Dataset& dataset,
                             const std::filesystem::path& dir,
                             const Provenance& provenance) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (!ec) fs::create_directories(dir / "masks", ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

  DatasetManifest manifest;
  manifest.dataset_id = dataset.id;
  manifest.kind = dataset.kind;
  manifest.generator_seed = dataset.generator_seed;
  manifest.spec_hash = dataset.spec_hash;
  manifest.content_hash = dataset.content_hash();

  ordered_json items = ordered_json::array();
  for (std::size_t i = 0; i < dataset.items.size(); ++i) {
    const auto& item = dataset.items[i];
    ManifestItem mi{"images/" + item_name(i), std::nullopt};
    write_rgb_png(dir / mi.image, to_image8(item.image));
    ordered_json ji;
    ji["image"] = mi.image;
    if (item.mask) {
      mi.mask = "masks/" + item_name(i);
      write_palette_png(dir / *mi.mask, mask_to_image8(*item.mask));
      ji["mask"] = *mi.mask;
    } else {
      ji["mask"] = nullptr;
    }
    items.push_back(std::move(ji));
    manifest.items.push_back(std::move(mi));
  }

  ordered_json j;
  j["format"] = "softguard-dataset";
  j["format_version"] = 1;
  j["tool_version"] = provenance.tool_version;
  j["config_hash"] = provenance.config_hash;
  j["dataset_id"] = manifest.dataset_id;
  j["kind"] = to_string(manifest.kind);
  j["generator_seed"] = manifest.generator_seed;
  j["spec_hash"] = manifest.spec_hash;
  j["content_hash"] = manifest.content_hash;
  j["ground_truth"] = dataset.kind == DatasetKind::InDistribution
                          ? "masks"
                          : "all_background";
  j["items"] = std::move(items);
  write_text_file(dir / "manifest.json", j.dump(2) + "\n");
  return manifest;
}

DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) {
    throw IoError("missing dataset manifest '" + manifest_path.string() + "'");
  }
  ordered_json j;
  try {
    j = ordered_json::parse(in);
    DatasetManifest m;
    if (j.at("format").get<std::string>() != "softguard-dataset" ||
        j.at("format_version").get<int>() != 1) {
      throw FormatError("unsupported manifest format in '" +
                        manifest_path.string() + "'");
    }
    m.dataset_id = j.at("dataset_id").get<std::string>();
    m.kind = parse_dataset_kind(j.at("kind").get<std::string>());
    m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
    m.spec_hash = j.at("spec_hash").get<std::string>();
    m.content_hash = j.at("content_hash").get<std::string>();
    for (const auto& ji : j.at("items")) {
      ManifestItem mi{ji.at("image").get<std::string>(), std::nullopt};
      if (!ji.at("mask").is_null()) mi.mask = ji.at("mask").get<std::string>();
      m.items.push_back(std::move(mi));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest '" + manifest_path.string() +
                      "': " + e.what());
  }
}

Dataset load_dataset(const std::filesystem::path& manifest_or_dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::is_directory(manifest_or_dir)
                                     ? manifest_or_dir / "manifest.json"
                                     : manifest_or_dir;
  const fs::path root = manifest_path.parent_path();
  const DatasetManifest m = read_manifest(manifest_path);

  Dataset ds;
  ds.id = m.dataset_id;
  ds.kind = m.kind;
  ds.generator_seed = m.generator_seed;
  ds.spec_hash = m.spec_hash;
  for (std::size_t i = 0; i < m.items.size(); ++i) {
    const auto& mi = m.items[i];
    DatasetItem item;
    try {
      item.image = from_image8(read_png_rgb(root / mi.image));
      if (mi.mask) {
        item.mask = mask_from_image8(read_png_indices(root / *mi.mask));
        if (item.mask->rows() != item.image.height() ||
            item.mask->cols() != item.image.width()) {
          throw IoError("mask size differs from image size");
        }
      }
    } catch (const std::exception& e) {
      throw IoError("dataset '" + m.dataset_id + "' item " + std::to_string(i) +
                    " (" + mi.image + "): " + e.what());
    }
    ds.items.push_back(std::move(item));
  }
  if (ds.content_hash() != m.content_hash) {
    throw IoError("dataset '" + m.dataset_id +
                  "': pixel content does not match manifest content_hash");
  }
  return ds;
}

}  // namespace softguard
