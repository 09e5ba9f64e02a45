#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "softguard/errors.hpp"
#include "softguard/model.hpp"

namespace softguard {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::array<char, 8> kMagic{'S', 'G', 'C', 'K', 'P', 'T', '\r', '\n'};

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <typename M>
void append_tensor(std::string& blob, const M& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      put_u64_le(blob, std::bit_cast<std::uint64_t>(m(r, c)));
    }
  }
}

const char* const kTensorNames[] = {"conv1.weight", "conv1.bias",
                                    "conv2.weight", "conv2.bias",
                                    "conv3.weight", "conv3.bias"};

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const ModelParams& params, const CheckpointHeader& header) {
  std::string blob;
  ordered_json tensors = ordered_json::array();
  int t = 0;
  params.for_each_tensor([&](const auto& m) {
    tensors.push_back({{"name", kTensorNames[t++]}, {"shape", {m.rows(), m.cols()}}});
    append_tensor(blob, m);
  });

  ordered_json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["head_kind"] = to_string(params.head);
  j["classes"] = params.classes;
  j["out_channels"] = params.out_channels();
  j["seed"] = header.seed;
  j["config_hash"] = header.config_hash;
  j["tool_version"] = header.tool_version;
  j["dataset_hash"] = header.dataset_hash;
  j["tensors"] = std::move(tensors);
  j["blob_bytes"] = blob.size();
  const std::string text = j.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(kMagic.data(), kMagic.size());
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((len >> (8 * i)) & 0xFF));
  out << text << blob;
  if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  const std::string what = "checkpoint '" + path.string() + "': ";
  const std::string expected =
      " (expected softguard checkpoint format version " +
      std::to_string(kCheckpointFormatVersion) + ")";
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic.data(), 8) != 0) {
    throw FormatError(what + "bad magic" + expected);
  }
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t len = u[8] | (u[9] << 8) | (u[10] << 16) |
                            (static_cast<std::uint32_t>(u[11]) << 24);
  if (12 + static_cast<std::size_t>(len) > bytes.size()) {
    throw FormatError(what + "truncated header" + expected);
  }

  Checkpoint ck;
  ordered_json j;
  try {
    j = ordered_json::parse(bytes.substr(12, len));
    ck.header.format_version = j.at("format_version").get<int>();
    if (ck.header.format_version != kCheckpointFormatVersion) {
      throw FormatError(what + "unsupported format version " +
                        std::to_string(ck.header.format_version) + expected);
    }
    ck.header.head = parse_head_kind(j.at("head_kind").get<std::string>());
    ck.header.classes = j.at("classes").get<int>();
    ck.header.out_channels = j.at("out_channels").get<int>();
    ck.header.seed = j.at("seed").get<std::uint64_t>();
    ck.header.config_hash = j.at("config_hash").get<std::string>();
    ck.header.tool_version = j.at("tool_version").get<std::string>();
    ck.header.dataset_hash = j.at("dataset_hash").get<std::string>();
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(what + "malformed header: " + e.what() + expected);
  }

  try {
    ck.params = ModelParams::zeros(ck.header.head, ck.header.classes);
  } catch (const std::exception& e) {
    throw FormatError(what + e.what() + expected);
  }
  if (ck.params.out_channels() != ck.header.out_channels) {
    throw FormatError(what + "out_channels inconsistent with head kind" + expected);
  }
  std::size_t offset = 12 + len;
  const std::size_t blob_bytes =
      static_cast<std::size_t>(ck.params.parameter_count()) * 8;
  if (bytes.size() - offset != blob_bytes ||
      j.value("blob_bytes", std::size_t{0}) != blob_bytes) {
    throw FormatError(what + "parameter blob has " +
                      std::to_string(bytes.size() - offset) + " bytes, expected " +
                      std::to_string(blob_bytes) + expected);
  }
  ck.params.for_each_tensor([&](auto& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        m(r, c) = std::bit_cast<double>(get_u64_le(u + offset));
        offset += 8;
      }
    }
  });
  if (!ck.params.all_finite()) {
    throw FormatError(what + "non-finite parameter" + expected);
  }
  return ck;
}

}  // namespace softguard
