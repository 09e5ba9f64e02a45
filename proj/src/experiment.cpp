#include "softguard/experiment.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <set>
#include <sstream>

#include "json.hpp"
#include "softguard/errors.hpp"
#include "softguard/hashing.hpp"

namespace softguard {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  if (!j.is_object()) throw UsageError("config: '" + where + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) {
      throw UsageError("config: unknown key '" + where + (where.empty() ? "" : ".") +
                       key + "'");
    }
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

ordered_json optional_list(const std::vector<std::optional<double>>& v) {
  ordered_json out = ordered_json::array();
  for (const auto& x : v) {
    if (x) {
      out.push_back(*x);
    } else {
      out.push_back(nullptr);
    }
  }
  return out;
}

ordered_json row_json(const MetricRow& row) {
  ordered_json j;
  const auto& names = MetricRow::column_names();
  const auto values = row.values();
  for (std::size_t i = 0; i < names.size(); ++i) j[names[i]] = values[i];
  return j;
}

std::string provenance_line(const ExperimentConfig& config) {
  return std::string("# ") + kToolVersion + " config_hash=" + config.hash() + "\n";
}

struct EvalSets {
  Dataset val;
  std::vector<Dataset> ood;
};

EvalSets load_eval_sets(const ExperimentConfig& config) {
  EvalSets sets{load_dataset(config.dataset_dir("val") / "manifest.json"), {}};
  sets.ood.push_back(load_dataset(config.dataset_dir("texture") / "manifest.json"));
  sets.ood.push_back(load_dataset(config.dataset_dir("noise") / "manifest.json"));
  return sets;
}

MetricsReport evaluate_checkpoint(const ExperimentConfig& config,
                                  const fs::path& checkpoint,
                                  const EvalSets& sets) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  if (ck.params.classes != config.data.scene.classes) {
    throw FormatError("checkpoint '" + checkpoint.string() + "' has " +
                      std::to_string(ck.params.classes) +
                      " classes, config expects " +
                      std::to_string(config.data.scene.classes));
  }
  MetricsReport report = evaluate(ck.params, sets.val, sets.ood, config.eval_options());
  report.tool_version = kToolVersion;
  report.config_hash = config.hash();
  report.seed = ck.header.seed;
  report.checkpoint_sha256 = file_sha256(checkpoint);
  return report;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  ExperimentConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: invalid JSON: ") + e.what());
  }
  try {
    reject_unknown(j, {"data", "train", "metrics", "output_dir", "seeds"}, "");
    if (j.contains("data")) {
      const json& d = j.at("data");
      reject_unknown(d,
                     {"root", "train_size", "val_size", "noise_size",
                      "texture_size", "height", "width", "classes", "min_shapes",
                      "max_shapes", "background_fraction", "color_jitter",
                      "noise_amplitude", "seed"},
                     "data");
      read_opt(d, "root", c.data.root);
      read_opt(d, "train_size", c.data.train_size);
      read_opt(d, "val_size", c.data.val_size);
      read_opt(d, "noise_size", c.data.noise_size);
      read_opt(d, "texture_size", c.data.texture_size);
      read_opt(d, "height", c.data.scene.height);
      read_opt(d, "width", c.data.scene.width);
      read_opt(d, "classes", c.data.scene.classes);
      read_opt(d, "min_shapes", c.data.scene.min_shapes);
      read_opt(d, "max_shapes", c.data.scene.max_shapes);
      read_opt(d, "background_fraction", c.data.scene.background_fraction);
      read_opt(d, "color_jitter", c.data.scene.color_jitter);
      read_opt(d, "noise_amplitude", c.data.scene.noise_amplitude);
      read_opt(d, "seed", c.data.scene.seed);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t, {"learning_rate", "momentum", "epochs", "batch_size"},
                     "train");
      read_opt(t, "learning_rate", c.train.learning_rate);
      read_opt(t, "momentum", c.train.momentum);
      read_opt(t, "epochs", c.train.epochs);
      read_opt(t, "batch_size", c.train.batch_size);
    }
    if (j.contains("metrics")) {
      const json& m = j.at("metrics");
      reject_unknown(m, {"ece_bins", "id_softmax"}, "metrics");
      read_opt(m, "ece_bins", c.train.ece_bins);
      if (m.contains("id_softmax")) {
        c.train.id_softmax =
            parse_id_softmax_mode(m.at("id_softmax").get<std::string>());
      }
    }
    read_opt(j, "output_dir", c.output_dir);
    read_opt(j, "seeds", c.seeds);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  } catch (const UsageError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  return from_json_text(text);
}

std::string ExperimentConfig::to_json_text(int indent) const {
  ordered_json j;
  j["data"]["root"] = data.root;
  j["data"]["train_size"] = data.train_size;
  j["data"]["val_size"] = data.val_size;
  j["data"]["noise_size"] = data.noise_size;
  j["data"]["texture_size"] = data.texture_size;
  j["data"]["height"] = data.scene.height;
  j["data"]["width"] = data.scene.width;
  j["data"]["classes"] = data.scene.classes;
  j["data"]["min_shapes"] = data.scene.min_shapes;
  j["data"]["max_shapes"] = data.scene.max_shapes;
  j["data"]["background_fraction"] = data.scene.background_fraction;
  j["data"]["color_jitter"] = data.scene.color_jitter;
  j["data"]["noise_amplitude"] = data.scene.noise_amplitude;
  j["data"]["seed"] = data.scene.seed;
  j["train"]["learning_rate"] = train.learning_rate;
  j["train"]["momentum"] = train.momentum;
  j["train"]["epochs"] = train.epochs;
  j["train"]["batch_size"] = train.batch_size;
  j["metrics"]["ece_bins"] = train.ece_bins;
  j["metrics"]["id_softmax"] = to_string(train.id_softmax);
  j["output_dir"] = output_dir;
  j["seeds"] = seeds;
  return j.dump(indent);
}

std::string ExperimentConfig::hash() const { return sha256_hex(to_json_text()); }

void ExperimentConfig::validate() const {
  try {
    data.scene.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  if (data.train_size < 1 || data.val_size < 1 || data.noise_size < 1 ||
      data.texture_size < 1) {
    throw UsageError("config: dataset sizes must be >= 1");
  }
  if (seeds.empty()) throw UsageError("config: seed list is empty");
}

fs::path ExperimentConfig::dataset_dir(const std::string& split) const {
  return fs::path(data.root) / split;
}

fs::path ExperimentConfig::run_dir(HeadKind head, std::uint64_t seed) const {
  return fs::path(output_dir) /
         (std::string(to_string(head)) + "_seed" + std::to_string(seed));
}

fs::path ExperimentConfig::checkpoint_path(HeadKind head, std::uint64_t seed) const {
  return run_dir(head, seed) / "checkpoint.bin";
}

std::vector<DatasetSpec> ExperimentConfig::dataset_specs() const {
  // Validation scenes come from a disjoint index range of the same stream.
  return {
      {"train", DatasetKind::InDistribution, data.scene, data.train_size, 0},
      {"val", DatasetKind::InDistribution, data.scene, data.val_size, 1'000'000},
      {"noise", DatasetKind::Noise, data.scene, data.noise_size, 0},
      {"texture", DatasetKind::Texture, data.scene, data.texture_size, 0},
  };
}

EvalOptions ExperimentConfig::eval_options() const {
  return {train.ece_bins, train.id_softmax, thread_cap_from_env()};
}

int thread_cap_from_env() {
  const char* v = std::getenv("SOFTGUARD_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) {
    throw UsageError("SOFTGUARD_THREADS must be a positive integer");
  }
  return static_cast<int>(std::min<long>(n, 64));
}

// ---------------------------------------------------------------------------
// Commands

std::vector<DatasetManifest> cmd_generate(const ExperimentConfig& config,
                                          bool force) {
  const auto specs = config.dataset_specs();
  for (const auto& spec : specs) {
    const fs::path dir = config.dataset_dir(spec.id);
    if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir)) && !force) {
      throw UsageError("refusing to overwrite non-empty '" + dir.string() +
                       "' (use --force)");
    }
  }
  std::vector<DatasetManifest> manifests;
  for (const auto& spec : specs) {
    const fs::path dir = config.dataset_dir(spec.id);
    std::error_code ec;
    fs::remove_all(dir, ec);
    if (ec) throw IoError("cannot clear '" + dir.string() + "': " + ec.message());
    manifests.push_back(
        save_dataset(generate_dataset(spec), dir, config.provenance()));
  }
  return manifests;
}

fs::path cmd_train(const ExperimentConfig& config, HeadKind head,
                   std::uint64_t seed) {
  const Dataset train_set =
      load_dataset(config.dataset_dir("train") / "manifest.json");
  TrainConfig tc = config.train;
  tc.head = head;
  tc.seed = seed;
  const TrainResult result = train(tc, train_set, config.data.scene.classes);

  const fs::path dir = config.run_dir(head, seed);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  const fs::path ckpt = config.checkpoint_path(head, seed);
  CheckpointHeader header;
  header.seed = seed;
  header.config_hash = config.hash();
  header.tool_version = kToolVersion;
  header.dataset_hash = result.log.dataset_hash;
  save_checkpoint(ckpt, result.params, header);
  write_text(dir / "train_log.jsonl",
             result.log.to_jsonl(config.provenance(), head, seed));
  return ckpt;
}

MetricsReport cmd_eval(const ExperimentConfig& config, const fs::path& checkpoint,
                       const fs::path& out_dir) {
  if (!fs::exists(checkpoint)) {
    throw IoError("checkpoint '" + checkpoint.string() + "' not found");
  }
  const EvalSets sets = load_eval_sets(config);
  const MetricsReport report = evaluate_checkpoint(config, checkpoint, sets);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  write_text(out_dir / "report.json", report_json(report, config));
  write_text(out_dir / "report.csv", report_csv(report, config));
  for (const auto& d : report.datasets) {
    write_text(out_dir / ("reliability_" + d.dataset_id + ".csv"),
               reliability_csv(d.reliability, std::string(kToolVersion) +
                                                  " config_hash=" + config.hash() +
                                                  " dataset=" + d.dataset_id));
  }
  return report;
}

void cmd_maps(const ExperimentConfig& config, const fs::path& checkpoint,
              const fs::path& image, const fs::path& out_dir) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  if (!fs::exists(image)) throw IoError("image '" + image.string() + "' not found");
  const Field input = from_image8(read_png_rgb(image));
  const Field composite = apply_head(ck.params.head, forward(ck.params, input));
  const MembershipMaps maps = membership_field(composite, config.train.id_softmax);
  const PngText text{{"Software", kToolVersion},
                     {"softguard:config_hash", config.hash()},
                     {"softguard:head_kind", std::string(to_string(ck.params.head))},
                     {"softguard:id_softmax", std::string(to_string(config.train.id_softmax))}};
  const std::string stem = image.stem().string();
  render_membership_png(maps, out_dir, stem, text);
  write_palette_png(out_dir / (stem + "_seg.png"),
                    mask_to_image8(argmax_labels(composite)), text);
}

// ---------------------------------------------------------------------------
// Reports

MetricRow MetricRow::from_report(const MetricsReport& report) {
  const auto& val = report.dataset("val");
  const auto& tex = report.dataset("texture");
  const auto& noise = report.dataset("noise");
  MetricRow r;
  r.miou_val = val.miou.value();
  r.bg_iou_texture = tex.bg_iou.value();
  r.bg_iou_noise = noise.bg_iou.value();
  r.ece_val = val.ece;
  r.ece_texture = tex.ece;
  r.ece_noise = noise.ece;
  r.end_val = val.expected_nd;
  r.end_texture = tex.expected_nd;
  r.end_noise = noise.expected_nd;
  return r;
}

const std::vector<std::string>& MetricRow::column_names() {
  static const std::vector<std::string> names{
      "miou_val",  "bg_iou_texture", "bg_iou_noise",
      "ece_val",   "ece_texture",    "ece_noise",
      "end_val",   "end_texture",    "end_noise"};
  return names;
}

std::vector<double> MetricRow::values() const {
  return {miou_val, bg_iou_texture, bg_iou_noise, ece_val,  ece_texture,
          ece_noise, end_val,       end_texture,  end_noise};
}

std::vector<DirectionalCheck> judge_directional(
    const std::vector<SeedComparison>& seeds) {
  const int n = static_cast<int>(seeds.size());
  const int majority = n / 2 + 1;
  std::vector<DirectionalCheck> checks;

  double diff_sum = 0.0;
  std::ostringstream d1;
  for (const auto& s : seeds) {
    const double d = s.implicit_head.miou_val - s.explicit_head.miou_val;
    diff_sum += d;
    d1 << "seed " << s.seed << ": " << std::fixed << std::setprecision(2) << d << "; ";
  }
  const double mean_diff = n > 0 ? diff_sum / n : 0.0;
  d1 << "mean " << std::fixed << std::setprecision(2) << mean_diff;
  checks.push_back({"i", "|mIOU(implicit) - mIOU(explicit)| <= 2.0 (seed mean)",
                    n > 0 && std::abs(mean_diff) <= 2.0, d1.str()});

  int end_ok = 0;
  int bg_ok = 0;
  int ece_ok = 0;
  for (const auto& s : seeds) {
    const auto& e = s.explicit_head;
    const auto& i = s.implicit_head;
    if (i.end_val < e.end_val && i.end_texture < e.end_texture &&
        i.end_noise < e.end_noise) {
      ++end_ok;
    }
    if (i.bg_iou_noise >= e.bg_iou_noise && i.bg_iou_texture >= e.bg_iou_texture) {
      ++bg_ok;
    }
    const int ece_wins = (i.ece_val <= e.ece_val) + (i.ece_texture <= e.ece_texture) +
                         (i.ece_noise <= e.ece_noise);
    if (ece_wins >= 2) ++ece_ok;
  }
  auto count = [n](int k) { return std::to_string(k) + " of " + std::to_string(n) + " seeds"; };
  checks.push_back({"ii", "E[mu_ND](implicit) < E[mu_ND](explicit) on val, texture and noise, every seed",
                    n > 0 && end_ok == n, count(end_ok)});
  checks.push_back({"iii", "bg-IoU(implicit) >= bg-IoU(explicit) on noise and texture, majority of seeds",
                    bg_ok >= majority, count(bg_ok)});
  checks.push_back({"iv", "ECE(implicit) <= ECE(explicit) on >= 2 of 3 datasets, majority of seeds",
                    ece_ok >= majority, count(ece_ok)});
  return checks;
}

CompareResult compare_rows(std::vector<SeedComparison> seeds) {
  CompareResult r;
  r.seeds = std::move(seeds);
  const std::size_t cols = MetricRow::column_names().size();
  std::vector<double> se(cols, 0.0);
  std::vector<double> si(cols, 0.0);
  for (const auto& s : r.seeds) {
    const auto e = s.explicit_head.values();
    const auto i = s.implicit_head.values();
    for (std::size_t c = 0; c < cols; ++c) {
      se[c] += e[c];
      si[c] += i[c];
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, r.seeds.size()));
  auto fill = [&](MetricRow& row, const std::vector<double>& s) {
    row = MetricRow{s[0] / n, s[1] / n, s[2] / n, s[3] / n, s[4] / n,
                    s[5] / n, s[6] / n, s[7] / n, s[8] / n};
  };
  fill(r.mean_explicit, se);
  fill(r.mean_implicit, si);
  r.checks = judge_directional(r.seeds);
  return r;
}

CompareResult cmd_compare(const ExperimentConfig& config) {
  for (const auto seed : config.seeds) {
    for (const HeadKind head : {HeadKind::Explicit, HeadKind::Implicit}) {
      const fs::path ckpt = config.checkpoint_path(head, seed);
      if (!fs::exists(ckpt)) {
        throw IoError("missing checkpoint for head=" + std::string(to_string(head)) +
                      " seed=" + std::to_string(seed) + " ('" + ckpt.string() + "')");
      }
    }
  }
  const EvalSets sets = load_eval_sets(config);
  std::vector<SeedComparison> rows;
  for (const auto seed : config.seeds) {
    SeedComparison s;
    s.seed = seed;
    s.explicit_head = MetricRow::from_report(
        evaluate_checkpoint(config, config.checkpoint_path(HeadKind::Explicit, seed), sets));
    s.implicit_head = MetricRow::from_report(
        evaluate_checkpoint(config, config.checkpoint_path(HeadKind::Implicit, seed), sets));
    rows.push_back(s);
  }
  CompareResult result = compare_rows(std::move(rows));
  std::error_code ec;
  fs::create_directories(config.output_dir, ec);
  if (ec) throw IoError("cannot create '" + config.output_dir + "': " + ec.message());
  write_text(fs::path(config.output_dir) / "compare.json", compare_json(result, config));
  write_text(fs::path(config.output_dir) / "compare.csv", compare_csv(result, config));
  return result;
}

std::string report_json(const MetricsReport& report, const ExperimentConfig& config) {
  ordered_json j;
  j["tool_version"] = report.tool_version;
  j["config_hash"] = report.config_hash;
  j["head_kind"] = report.head_kind;
  j["seed"] = report.seed;
  j["checkpoint_sha256"] = report.checkpoint_sha256;
  j["ece_bins"] = report.ece_bins;
  j["id_softmax"] = report.id_softmax;
  j["ece_scoring"] = {{"in-distribution", "non-void pixels"}, {"ood", "all pixels"}};
  j["noise_generator"] = {{"distribution", "gaussian"},
                          {"mean", NoiseSpec::kMean},
                          {"stddev", NoiseSpec::kStddev},
                          {"clip", {0.0, 1.0}}};
  j["config"] = ordered_json::parse(config.to_json_text());
  ordered_json datasets;
  for (const auto& d : report.datasets) {
    ordered_json dj;
    dj["kind"] = d.kind;
    dj["scored_pixels"] = d.scored_pixels;
    if (d.miou) {
      dj["miou"] = *d.miou;
      dj["per_class_iou"] = optional_list(d.per_class_iou);
    }
    if (d.bg_iou) dj["bg_iou"] = *d.bg_iou;
    dj["ece"] = d.ece;
    dj["expected_nd"] = d.expected_nd;
    datasets[d.dataset_id] = std::move(dj);
  }
  j["datasets"] = std::move(datasets);
  return j.dump(2) + "\n";
}

std::string report_csv(const MetricsReport& report, const ExperimentConfig& config) {
  std::string out = provenance_line(config);
  out += "dataset,metric,value\n";
  for (const auto& d : report.datasets) {
    if (d.miou) out += d.dataset_id + ",miou," + fmt(*d.miou) + "\n";
    for (std::size_t c = 0; c < d.per_class_iou.size(); ++c) {
      const auto& v = d.per_class_iou[c];
      out += d.dataset_id + ",iou_class_" + std::to_string(c) + "," +
             (v ? fmt(*v) : std::string()) + "\n";
    }
    if (d.bg_iou) out += d.dataset_id + ",bg_iou," + fmt(*d.bg_iou) + "\n";
    out += d.dataset_id + ",ece," + fmt(d.ece) + "\n";
    out += d.dataset_id + ",expected_nd," + fmt(d.expected_nd) + "\n";
  }
  return out;
}

std::string compare_json(const CompareResult& result, const ExperimentConfig& config) {
  ordered_json j;
  j["tool_version"] = kToolVersion;
  j["config_hash"] = config.hash();
  j["id_softmax"] = to_string(config.train.id_softmax);
  j["ece_bins"] = config.train.ece_bins;
  ordered_json per_seed = ordered_json::array();
  for (const auto& s : result.seeds) {
    per_seed.push_back({{"seed", s.seed},
                        {"explicit", row_json(s.explicit_head)},
                        {"implicit", row_json(s.implicit_head)}});
  }
  j["per_seed"] = std::move(per_seed);
  j["mean"] = {{"explicit", row_json(result.mean_explicit)},
               {"implicit", row_json(result.mean_implicit)}};
  ordered_json checks = ordered_json::array();
  for (const auto& c : result.checks) {
    checks.push_back({{"id", c.id},
                      {"description", c.description},
                      {"passed", c.passed},
                      {"detail", c.detail}});
  }
  j["directional_checks"] = std::move(checks);
  return j.dump(2) + "\n";
}

std::string compare_csv(const CompareResult& result, const ExperimentConfig& config) {
  std::string out = provenance_line(config);
  out += "seed,head";
  for (const auto& name : MetricRow::column_names()) out += "," + name;
  out += "\n";
  auto line = [&](const std::string& seed, const char* head, const MetricRow& row) {
    out += seed + "," + head;
    for (double v : row.values()) out += "," + fmt(v);
    out += "\n";
  };
  for (const auto& s : result.seeds) {
    line(std::to_string(s.seed), "explicit", s.explicit_head);
    line(std::to_string(s.seed), "implicit", s.implicit_head);
  }
  line("mean", "explicit", result.mean_explicit);
  line("mean", "implicit", result.mean_implicit);
  return out;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const TrainingDivergence*>(&e)) return 3;
  if (dynamic_cast<const UsageError*>(&e)) return 1;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const GenerationError*>(&e)) {
    return 2;
  }
  if (dynamic_cast<const std::invalid_argument*>(&e)) return 2;
  return 2;
}

}  // namespace softguard
