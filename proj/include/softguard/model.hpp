#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "softguard/data.hpp"
#include "softguard/distinct.hpp"
#include "softguard/heads.hpp"
#include "softguard/metrics.hpp"
#include "softguard/numerics.hpp"
#include "softguard/tensor_field.hpp"

namespace softguard {

/// A convolution as a GEMM: weight is (out x in*k*k) with input rows ordered
/// (channel, dy, dx); bias has one entry per output channel.
struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  MatrixX<double> weight;
  VectorX<double> bias;

  ConvLayer() = default;
  ConvLayer(int in, int out, int k)
      : in_channels(in),
        out_channels(out),
        kernel(k),
        weight(MatrixX<double>::Zero(out, in * k * k)),
        bias(VectorX<double>::Zero(out)) {}

  Eigen::Index parameter_count() const { return weight.size() + bias.size(); }
};

/// 3 -> 16 (3x3, ReLU) -> 32 (3x3, ReLU) -> out (1x1, linear), where out is
/// k for the explicit head and k-1 for the implicit head.
struct ModelParams {
  static constexpr int kHidden1 = 16;
  static constexpr int kHidden2 = 32;

  HeadKind head = HeadKind::Explicit;
  int classes = 0;
  ConvLayer conv1;
  ConvLayer conv2;
  ConvLayer conv3;

  /// All-zero parameters.
  static ModelParams zeros(HeadKind head, int classes);

  /// Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero
  /// biases. conv1, conv2 and the in-distribution rows of conv3 are drawn in
  /// that order; the explicit head's background row is drawn last, so both
  /// head kinds share every common parameter for the same seed.
  static ModelParams init(HeadKind head, int classes, std::uint64_t seed);

  int out_channels() const { return conv3.out_channels; }
  Eigen::Index parameter_count() const;
  bool all_finite() const;

  template <typename F>
  void for_each_tensor(F&& f) {
    f(conv1.weight);
    f(conv1.bias);
    f(conv2.weight);
    f(conv2.bias);
    f(conv3.weight);
    f(conv3.bias);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    f(conv1.weight);
    f(conv1.bias);
    f(conv2.weight);
    f(conv2.bias);
    f(conv3.weight);
    f(conv3.bias);
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b);
};

/// Gradients and momentum buffers share the parameter layout.
using ParamGrads = ModelParams;

/// Activations kept for the backward pass. Columns are pixels; a batch of B
/// images of H x W occupies B*H*W columns, image-major.
struct ForwardCache {
  int height = 0;
  int width = 0;
  int batch = 0;
  MatrixX<double> cols1;  // im2col of the input, (27 x N)
  MatrixX<double> act1;   // ReLU(conv1), (16 x N)
  MatrixX<double> cols2;  // im2col of act1, (144 x N)
  MatrixX<double> act2;   // ReLU(conv2), (32 x N)
  MatrixX<double> raw;    // conv3, (out x N)
};

/// Forward pass over equally sized (3, H, W) images.
ForwardCache forward_batch(const ModelParams& params,
                           std::span<const Field* const> images);
/// Same, reusing the storage already held by cache.
void forward_batch(const ModelParams& params, std::span<const Field* const> images,
                   ForwardCache& cache);

/// Raw logits (out, H, W) for one image.
Field forward(const ModelParams& params, const Field& image);

/// Intermediate gradients, kept between steps to avoid reallocation.
struct BackwardWorkspace {
  MatrixX<double> dz2;
  MatrixX<double> dcols2;
  MatrixX<double> dz1;
};

/// Parameter gradients given dLoss/draw, shaped like cache.raw.
ParamGrads backward(const ModelParams& params, const ForwardCache& cache,
                    const MatrixX<double>& grad_raw);
void backward(const ModelParams& params, const ForwardCache& cache,
              const MatrixX<double>& grad_raw, ParamGrads& grads,
              BackwardWorkspace& work);

struct LossResult {
  double loss = 0.0;
  MatrixX<double> grad;  // same shape as the composite input
  std::int64_t scored = 0;
  std::int64_t correct = 0;  // scored pixels whose argmax matches the label
};

/// Mean per-pixel cross-entropy over pixels whose label is not ignore_label.
/// composite is (k x N); labels has N entries.
LossResult cross_entropy_columns(const MatrixX<double>& composite,
                                 std::span<const std::uint8_t> labels,
                                 std::uint8_t ignore_label = kIgnoreLabel);

struct FieldLoss {
  double loss = 0.0;
  Field grad;
};

FieldLoss cross_entropy_loss(const Field& composite, const LabelMap& labels,
                             std::uint8_t ignore_label = kIgnoreLabel);

/// Classic momentum: v <- momentum*v + g; p <- p - lr*v.
/// Throws TrainingDivergence (epoch -1) on a non-finite gradient.
void sgd_step(ModelParams& params, const ParamGrads& grads, double lr,
              double momentum, ParamGrads& velocity);

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  int epochs = 30;
  int batch_size = 8;
  std::uint64_t seed = 1;
  HeadKind head = HeadKind::Implicit;
  int ece_bins = 15;
  IDSoftmaxMode id_softmax = IDSoftmaxMode::SubVector;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double pixel_accuracy = 0.0;
};

struct TrainingLog {
  std::string dataset_hash;
  std::vector<EpochRecord> epochs;

  /// One JSON object per epoch.
  std::string to_jsonl(const Provenance& provenance, HeadKind head,
                       std::uint64_t seed) const;
};

struct TrainResult {
  ModelParams params;
  TrainingLog log;
};

/// Minibatch SGD over `dataset`, reshuffled every epoch from the seed.
/// Deterministic: the same config and dataset give bit-identical params.
TrainResult train(const TrainConfig& config, const Dataset& dataset,
                  int classes);

struct EvalOptions {
  int ece_bins = 15;
  IDSoftmaxMode id_softmax = IDSoftmaxMode::SubVector;
  /// Worker threads; results do not depend on this.
  int threads = 1;
};

/// mIOU (in-distribution) or background IoU (OOD), ECE and E[mu_ND].
DatasetMetrics evaluate_dataset(const ModelParams& params,
                                const Dataset& dataset,
                                const EvalOptions& options);

MetricsReport evaluate(const ModelParams& params, const Dataset& validation,
                       std::span<const Dataset> ood, const EvalOptions& options);

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, u32 little-endian header length, JSON header,
// then every tensor as little-endian float64 in for_each_tensor order
// (weights row-major).

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointHeader {
  int format_version = kCheckpointFormatVersion;
  HeadKind head = HeadKind::Explicit;
  int classes = 0;
  int out_channels = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string tool_version;
  std::string dataset_hash;
};

void save_checkpoint(const std::filesystem::path& path,
                     const ModelParams& params, const CheckpointHeader& header);

struct Checkpoint {
  CheckpointHeader header;
  ModelParams params;
};

/// Throws FormatError for a bad magic, version or size, IoError when unreadable.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace softguard
