#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "softguard/experiment.hpp"

namespace fs = std::filesystem;
using namespace softguard;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::string> out;
  std::optional<int> ece_bins;
  std::optional<std::string> id_softmax;
  std::string head = "both";
  std::vector<std::uint64_t> seeds;
  std::string checkpoint;
  std::string image;
  bool force = false;
};

ExperimentConfig resolve(const Options& o, bool out_is_data_root,
                         bool out_is_output_dir) {
  ExperimentConfig c =
      o.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::from_file(o.config_path);
  if (o.ece_bins) c.train.ece_bins = *o.ece_bins;
  if (o.id_softmax) {
    try {
      c.train.id_softmax = parse_id_softmax_mode(*o.id_softmax);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (o.out && out_is_data_root) c.data.root = *o.out;
  if (o.out && out_is_output_dir) c.output_dir = *o.out;
  c.validate();
  return c;
}

std::vector<HeadKind> heads_of(const std::string& name) {
  if (name == "both") return {HeadKind::Explicit, HeadKind::Implicit};
  try {
    return {parse_head_kind(name)};
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

void print_row(const char* label, const MetricRow& row) {
  std::cout << std::left << std::setw(14) << label << std::right << std::fixed
            << std::setprecision(2);
  for (double v : row.values()) std::cout << std::setw(15) << v;
  std::cout << "\n";
}

void print_compare(const CompareResult& r) {
  std::cout << std::left << std::setw(14) << "run" << std::right;
  for (const auto& name : MetricRow::column_names()) std::cout << std::setw(15) << name;
  std::cout << "\n";
  for (const auto& s : r.seeds) {
    const std::string e = "explicit/" + std::to_string(s.seed);
    const std::string i = "implicit/" + std::to_string(s.seed);
    print_row(e.c_str(), s.explicit_head);
    print_row(i.c_str(), s.implicit_head);
  }
  print_row("explicit/mean", r.mean_explicit);
  print_row("implicit/mean", r.mean_implicit);
  for (const auto& c : r.checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << "(" << c.id << ") " << c.description
              << " [" << c.detail << "]\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segmentation with an implicit background head: data, training, "
               "evaluation and membership maps"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  Options o;
  app.add_option("--config", o.config_path, "JSON experiment config")
      ->check(CLI::ExistingFile);
  app.add_option("--ece-bins", o.ece_bins, "Number of ECE bins")->check(CLI::PositiveNumber);
  app.add_option("--id-softmax", o.id_softmax,
                 "In-distribution membership from the ID sub-vector or the full softmax")
      ->check(CLI::IsMember({"sub", "full"}));

  auto* gen = app.add_subcommand("generate", "Generate train/val/noise/texture datasets");
  gen->add_option("--out", o.out, "Dataset root (overrides data.root)");
  gen->add_flag("--force", o.force, "Overwrite non-empty dataset directories");

  auto* tr = app.add_subcommand("train", "Train head variants");
  tr->add_option("--head", o.head, "explicit, implicit or both")
      ->check(CLI::IsMember({"explicit", "implicit", "both"}));
  tr->add_option("--seed", o.seeds, "Seeds (default: the config's seed list)");
  tr->add_option("--out", o.out, "Run directory root (overrides output_dir)");

  auto* ev = app.add_subcommand("eval", "Evaluate one checkpoint on val, texture and noise");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  ev->add_option("--head", o.head, "Head of the run to evaluate")
      ->check(CLI::IsMember({"explicit", "implicit"}));
  ev->add_option("--seed", o.seeds, "Seed of the run to evaluate")->expected(1);
  ev->add_option("--out", o.out, "Report directory (default: the checkpoint's directory)");

  auto* mp = app.add_subcommand("maps", "Render membership maps for one image");
  mp->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  mp->add_option("--image", o.image, "Input PNG")->required();
  mp->add_option("--out", o.out, "Output directory")->required();

  auto* cmp = app.add_subcommand("compare", "Evaluate both heads for every seed");
  cmp->add_option("--seed", o.seeds, "Seeds (default: the config's seed list)");
  cmp->add_option("--out", o.out, "Run directory root (overrides output_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      const ExperimentConfig c = resolve(o, true, false);
      for (const auto& m : cmd_generate(c, o.force)) {
        std::cout << m.dataset_id << ": " << m.items.size() << " images, content_hash "
                  << m.content_hash << "\n";
      }
    } else if (tr->parsed()) {
      ExperimentConfig c = resolve(o, false, true);
      if (!o.seeds.empty()) c.seeds = o.seeds;
      for (const auto seed : c.seeds) {
        for (const HeadKind head : heads_of(o.head)) {
          std::cout << "training " << to_string(head) << " seed " << seed << std::endl;
          std::cout << "  wrote " << cmd_train(c, head, seed).string() << std::endl;
        }
      }
    } else if (ev->parsed()) {
      const ExperimentConfig c = resolve(o, false, false);
      fs::path ckpt = o.checkpoint;
      if (ckpt.empty()) {
        if (o.head == "both" || o.seeds.empty()) {
          throw UsageError("eval needs --checkpoint or both --head and --seed");
        }
        ckpt = c.checkpoint_path(parse_head_kind(o.head), o.seeds.front());
      }
      const fs::path out = o.out ? fs::path(*o.out) : ckpt.parent_path();
      const MetricsReport r = cmd_eval(c, ckpt, out);
      std::cout << MetricRow::column_names().size() << " metrics written to "
                << (out / "report.json").string() << "\n";
      print_row(r.head_kind.c_str(), MetricRow::from_report(r));
    } else if (mp->parsed()) {
      const ExperimentConfig c = resolve(o, false, false);
      cmd_maps(c, o.checkpoint, o.image, *o.out);
    } else if (cmp->parsed()) {
      ExperimentConfig c = resolve(o, false, true);
      if (!o.seeds.empty()) c.seeds = o.seeds;
      print_compare(cmd_compare(c));
    }
  } catch (const std::exception& e) {
    std::cerr << "softguard: error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
