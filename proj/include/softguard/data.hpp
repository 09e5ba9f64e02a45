#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "softguard/png_io.hpp"
#include "softguard/tensor_field.hpp"

namespace softguard {

/// Parameters of the procedural in-distribution scenes.
///
/// Class c in 1..k-1 is drawn as shape c-1 of {disk, square, triangle,
/// cross} with a class-specific base color, so k is at most 5.
struct SceneSpec {
  int height = 32;
  int width = 32;
  int classes = 5;
  int min_shapes = 1;
  int max_shapes = 4;
  double background_fraction = 0.73;
  double color_jitter = 0.08;
  double noise_amplitude = 0.04;
  std::uint64_t seed = 7;

  static constexpr int kMaxClasses = 5;
  /// Allowed deviation of a scene's background fraction from the target.
  static constexpr double kFractionTolerance = 0.15;

  void validate() const;
};

/// Gaussian white noise parameters for OOD images.
struct NoiseSpec {
  static constexpr double kMean = 0.5;
  static constexpr double kStddev = 0.25;
};

struct Scene {
  Field image;     // (3, H, W), values in [0, 1]
  LabelMap mask;   // (H, W), labels in 0..k-1
};

Scene gen_scene(const SceneSpec& spec, std::uint64_t index);

/// i.i.d. N(0.5, 0.25^2) per channel and pixel, clipped to [0, 1].
Field gen_noise(std::uint64_t seed, std::uint64_t index, int height, int width);

enum class TextureFamily { Grating, Checkerboard, ValueNoise, Rings };

struct TextureInfo {
  TextureFamily family = TextureFamily::Grating;
  double period = 0.0;       // pixels; grating, checker cell, ring spacing
  double orientation = 0.0;  // radians; grating wave direction, checker rotation
};

Field gen_texture(std::uint64_t seed, std::uint64_t index, int height,
                  int width, TextureInfo* info = nullptr);

/// RGB base color of an in-distribution class (1..4).
std::array<double, 3> class_color(int cls);

// ---------------------------------------------------------------------------
// Datasets

enum class DatasetKind { InDistribution, Noise, Texture };

std::string_view to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(std::string_view name);

struct DatasetSpec {
  std::string id;
  DatasetKind kind = DatasetKind::InDistribution;
  SceneSpec scene;  // size and seed apply to every kind
  int count = 0;
  std::uint64_t first_index = 0;
};

/// SHA-256 of the canonical JSON of every generation parameter.
std::string spec_hash(const DatasetSpec& spec);

struct DatasetItem {
  Field image;
  /// Absent for OOD items, whose ground truth is all background.
  std::optional<LabelMap> mask;
};

struct Dataset {
  std::string id;
  DatasetKind kind = DatasetKind::InDistribution;
  std::uint64_t generator_seed = 0;
  std::string spec_hash;
  std::vector<DatasetItem> items;

  std::size_t size() const { return items.size(); }
  /// Ground truth for item i; materialized for OOD items.
  LabelMap ground_truth(std::size_t i) const;
  /// SHA-256 over the quantized pixel content; independent of file location.
  std::string content_hash() const;
};

/// Generates the dataset and quantizes images to 8 bits, so the in-memory
/// values equal what load_dataset(save_dataset(...)) returns.
Dataset generate_dataset(const DatasetSpec& spec);

struct ManifestItem {
  std::string image;
  std::optional<std::string> mask;
};

struct DatasetManifest {
  std::string dataset_id;
  DatasetKind kind = DatasetKind::InDistribution;
  std::uint64_t generator_seed = 0;
  std::string spec_hash;
  std::string content_hash;
  std::vector<ManifestItem> items;
};

struct Provenance {
  std::string tool_version;
  std::string config_hash;
};

/// Writes <dir>/{images,masks}/NNNNN.png and <dir>/manifest.json.
DatasetManifest save_dataset(const Dataset& dataset,
                             const std::filesystem::path& dir,
                             const Provenance& provenance = {});

/// Reads a manifest.json (or a directory containing one) and its items.
Dataset load_dataset(const std::filesystem::path& manifest_or_dir);
DatasetManifest read_manifest(const std::filesystem::path& manifest_path);

Image8 to_image8(const Field& rgb);
Field from_image8(const Image8& rgb);
Image8 mask_to_image8(const LabelMap& mask);
LabelMap mask_from_image8(const Image8& indices);

}  // namespace softguard
