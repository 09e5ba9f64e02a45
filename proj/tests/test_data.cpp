#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "doctest.h"
#include "json.hpp"
#include "softguard/data.hpp"
#include "softguard/errors.hpp"

using namespace softguard;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("softguard_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double background_fraction(const LabelMap& m) {
  return static_cast<double>((m == 0).count()) / static_cast<double>(m.size());
}

/// Bilinear sample of a single-channel plane; (x, y) in pixel coordinates.
double bilinear(const Eigen::MatrixXd& plane, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  return (1 - fx) * (1 - fy) * plane(y0, x0) + fx * (1 - fy) * plane(y0, x0 + 1) +
         (1 - fx) * fy * plane(y0 + 1, x0) + fx * fy * plane(y0 + 1, x0 + 1);
}

/// Autocorrelation of the plane along direction theta at each integer lag.
std::vector<double> directional_autocorrelation(const Eigen::MatrixXd& plane, double theta,
                                                int max_lag) {
  const double mean = plane.mean();
  const double dx = std::cos(theta);
  const double dy = std::sin(theta);
  const int h = static_cast<int>(plane.rows());
  const int w = static_cast<int>(plane.cols());
  std::vector<double> out(static_cast<std::size_t>(max_lag + 1), 0.0);
  for (int lag = 0; lag <= max_lag; ++lag) {
    double sum = 0.0;
    int n = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double sx = x + lag * dx;
        const double sy = y + lag * dy;
        if (sx < 0 || sy < 0 || sx > w - 2 || sy > h - 2) continue;
        sum += (plane(y, x) - mean) * (bilinear(plane, sx, sy) - mean);
        ++n;
      }
    }
    out[static_cast<std::size_t>(lag)] = n > 0 ? sum / n : 0.0;
  }
  return out;
}

}  // namespace

TEST_CASE("SceneSpec validation") {
  SceneSpec s;
  CHECK_NOTHROW(s.validate());
  s.classes = 1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = SceneSpec{};
  s.classes = 6;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = SceneSpec{};
  s.height = 15;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = SceneSpec{};
  s.background_fraction = 1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = SceneSpec{};
  s.min_shapes = 3;
  s.max_shapes = 2;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("gen_scene with no shapes is all background") {
  SceneSpec s;
  s.min_shapes = 0;
  s.max_shapes = 0;
  const Scene sc = gen_scene(s, 3);
  CHECK(background_fraction(sc.mask) == 1.0);
}

TEST_CASE("gen_scene is deterministic and label-safe") {
  SceneSpec s;
  const Scene a = gen_scene(s, 17);
  const Scene b = gen_scene(s, 17);
  CHECK(a.image == b.image);
  CHECK((a.mask == b.mask).all());
  CHECK(!(gen_scene(s, 18).image == a.image));
  for (int cls : {2, 3, 5}) {
    s.classes = cls;
    for (std::uint64_t i = 0; i < 20; ++i) {
      const Scene sc = gen_scene(s, i);
      CHECK(sc.mask.maxCoeff() < cls);
      CHECK((sc.image.matrix().array() >= 0.0).all());
      CHECK((sc.image.matrix().array() <= 1.0).all());
    }
  }
}

TEST_CASE("default scenes match the background fraction target") {
  SceneSpec s;
  double total = 0.0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    const Scene sc = gen_scene(s, i);
    const double f = background_fraction(sc.mask);
    CHECK(std::abs(f - s.background_fraction) <= SceneSpec::kFractionTolerance + 1e-12);
    CHECK(f < 1.0);
    total += f;
  }
  const double mean = total / 200.0;
  INFO("mean background fraction " << mean);
  CHECK(mean >= 0.68);
  CHECK(mean <= 0.78);
}

TEST_CASE("gen_noise statistics and determinism") {
  const Field n = gen_noise(7, 0, 64, 64);
  const double mean = n.matrix().mean();
  CHECK(mean >= 0.45);
  CHECK(mean <= 0.55);
  CHECK(gen_noise(7, 0, 64, 64) == n);
  CHECK(!(gen_noise(7, 1, 64, 64) == n));
  CHECK((n.matrix().array() >= 0.0).all());
  CHECK((n.matrix().array() <= 1.0).all());
  CHECK(gen_noise(7, 0, 1, 1).pixels() == 1);
}

TEST_CASE("gen_texture range, determinism and size check") {
  for (std::uint64_t i = 0; i < 40; ++i) {
    const Field t = gen_texture(7, i, 24, 20);
    CHECK(t.channels() == 3);
    CHECK((t.matrix().array() >= 0.0).all());
    CHECK((t.matrix().array() <= 1.0).all());
    CHECK(gen_texture(7, i, 24, 20) == t);
  }
  CHECK_THROWS_AS(gen_texture(7, 0, 7, 20), std::invalid_argument);
}

TEST_CASE("gratings peak in autocorrelation at their period") {
  int gratings = 0;
  for (std::uint64_t i = 0; i < 200 && gratings < 8; ++i) {
    TextureInfo info;
    const Field t = gen_texture(11, i, 64, 64, &info);
    if (info.family != TextureFamily::Grating) continue;
    ++gratings;
    // The channel with the widest range carries the wave most clearly.
    Eigen::Index best = 0;
    double spread = -1.0;
    for (Eigen::Index c = 0; c < 3; ++c) {
      const double s = t.matrix().row(c).maxCoeff() - t.matrix().row(c).minCoeff();
      if (s > spread) {
        spread = s;
        best = c;
      }
    }
    Eigen::MatrixXd plane(64, 64);
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) plane(y, x) = t(best, y, x);
    }
    const auto ac = directional_autocorrelation(plane, info.orientation, 16);
    // First local maximum after the zero lag.
    int peak = -1;
    for (int lag = 2; lag < 16; ++lag) {
      if (ac[lag] > ac[lag - 1] && ac[lag] >= ac[lag + 1]) {
        peak = lag;
        break;
      }
    }
    INFO("period " << info.period << " peak " << peak);
    CHECK(std::abs(peak - info.period) <= 1.0);
  }
  CHECK(gratings >= 4);
}

TEST_CASE("dataset kinds and spec hashes") {
  CHECK(to_string(DatasetKind::Texture) == "texture");
  CHECK(parse_dataset_kind("in-distribution") == DatasetKind::InDistribution);
  CHECK_THROWS_AS(parse_dataset_kind("dtd"), FormatError);

  DatasetSpec a{"val", DatasetKind::InDistribution, SceneSpec{}, 10, 0};
  DatasetSpec b = a;
  CHECK(spec_hash(a) == spec_hash(b));
  b.scene.color_jitter = 0.09;
  CHECK(spec_hash(a) != spec_hash(b));
  b = a;
  b.count = 11;
  CHECK(spec_hash(a) != spec_hash(b));
  b = a;
  b.scene.seed = 8;
  CHECK(spec_hash(a) != spec_hash(b));
}

TEST_CASE("save and load round trip") {
  SceneSpec s;
  s.height = 20;
  s.width = 24;
  const Dataset ds = generate_dataset({"val", DatasetKind::InDistribution, s, 4, 0});
  const fs::path dir = fresh_dir("roundtrip");
  const DatasetManifest m = save_dataset(ds, dir / "a", {"tool", "cfg"});
  CHECK(m.items.size() == 4);
  CHECK(fs::exists(dir / "a" / "images" / "00000.png"));
  CHECK(fs::exists(dir / "a" / "masks" / "00003.png"));
  CHECK(fs::exists(dir / "a" / "manifest.json"));

  const Dataset back = load_dataset(dir / "a");
  REQUIRE(back.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.items[i].image == ds.items[i].image);
    CHECK((*back.items[i].mask == *ds.items[i].mask).all());
  }
  CHECK(back.content_hash() == ds.content_hash());
  CHECK(back.spec_hash == ds.spec_hash);

  save_dataset(back, dir / "b", {"tool", "cfg"});
  for (const char* f : {"images/00001.png", "masks/00002.png", "manifest.json"}) {
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }

  const auto j = nlohmann::ordered_json::parse(slurp(dir / "a" / "manifest.json"));
  std::vector<std::string> keys;
  for (const auto& [k, _] : j.items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"format", "format_version", "tool_version",
                                         "config_hash", "dataset_id", "kind",
                                         "generator_seed", "spec_hash", "content_hash",
                                         "ground_truth", "items"});
  fs::remove_all(dir);
}

TEST_CASE("OOD datasets store no masks") {
  SceneSpec s;
  s.height = 16;
  s.width = 16;
  const Dataset ds = generate_dataset({"noise", DatasetKind::Noise, s, 3, 0});
  const fs::path dir = fresh_dir("ood");
  const DatasetManifest m = save_dataset(ds, dir);
  CHECK(!m.items[0].mask.has_value());
  CHECK(!fs::exists(dir / "masks" / "00000.png"));
  const Dataset back = load_dataset(dir / "manifest.json");
  CHECK(!back.items[0].mask.has_value());
  CHECK((back.ground_truth(1) == 0).all());
  CHECK(back.ground_truth(1).rows() == 16);
  fs::remove_all(dir);
}

TEST_CASE("empty dataset gives a valid empty manifest") {
  Dataset empty;
  empty.id = "nothing";
  const fs::path dir = fresh_dir("empty");
  const DatasetManifest m = save_dataset(empty, dir);
  CHECK(m.items.empty());
  CHECK(read_manifest(dir / "manifest.json").items.empty());
  CHECK(load_dataset(dir).size() == 0);
  fs::remove_all(dir);
}

TEST_CASE("missing or corrupt files name the item") {
  SceneSpec s;
  s.height = 16;
  s.width = 16;
  const Dataset ds = generate_dataset({"train", DatasetKind::InDistribution, s, 3, 0});
  const fs::path dir = fresh_dir("corrupt");
  save_dataset(ds, dir);

  fs::remove(dir / "images" / "00001.png");
  try {
    load_dataset(dir);
    FAIL("expected an I/O error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("00001.png") != std::string::npos);
  }

  save_dataset(ds, dir);
  std::ofstream(dir / "masks" / "00002.png", std::ios::binary) << "garbage";
  try {
    load_dataset(dir);
    FAIL("expected an I/O error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("00002.png") != std::string::npos);
  }

  CHECK_THROWS_AS(load_dataset(dir / "nowhere"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("quantization happens once") {
  const Field t = gen_texture(3, 1, 16, 16);
  const Field q = from_image8(to_image8(t));
  CHECK(from_image8(to_image8(q)) == q);
  CHECK((q.matrix() - t.matrix()).cwiseAbs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
}
