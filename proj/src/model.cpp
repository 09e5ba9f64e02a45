#include "softguard/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "softguard/errors.hpp"
#include "softguard/rng.hpp"

namespace softguard {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kInitDomain = 101;
constexpr std::uint64_t kShuffleDomain = 102;

/// Writes the 3x3, padding-1 patches of one C-channel image into
/// cols.middleCols(col0, H*W). Element (c, pixel) lives at
/// src[c*channel_stride + pixel*pixel_stride]. Row order is (channel, dy, dx).
void im2col3x3(const double* src, Eigen::Index channels, Eigen::Index channel_stride,
               Eigen::Index pixel_stride, int height, int width,
               MatrixX<double>& cols, Eigen::Index col0) {
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double* out = cols.col(col0 + y * width + x).data();
      for (Eigen::Index c = 0; c < channels; ++c) {
        const double* plane = src + c * channel_stride;
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = y + dy;
          for (int dx = -1; dx <= 1; ++dx) {
            const int xx = x + dx;
            *out++ = (yy >= 0 && yy < height && xx >= 0 && xx < width)
                         ? plane[(yy * width + xx) * pixel_stride]
                         : 0.0;
          }
        }
      }
    }
  }
}

/// Adjoint of im2col3x3: scatters patch gradients back onto the image.
void col2im3x3(const MatrixX<double>& dcols, Eigen::Index col0, int height,
               int width, MatrixX<double>& dimage) {
  const Eigen::Index channels = dimage.rows();
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double* in = dcols.col(col0 + y * width + x).data();
      for (Eigen::Index c = 0; c < channels; ++c) {
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = y + dy;
          for (int dx = -1; dx <= 1; ++dx, ++in) {
            const int xx = x + dx;
            if (yy >= 0 && yy < height && xx >= 0 && xx < width) {
              dimage(c, col0 + yy * width + xx) += *in;
            }
          }
        }
      }
    }
  }
}

/// out = W * cols + bias, reusing out's storage.
void affine_into(const ConvLayer& layer, const MatrixX<double>& cols,
                 MatrixX<double>& out) {
  out.resize(layer.out_channels, cols.cols());
  out.noalias() = layer.weight * cols;
  out.colwise() += layer.bias;
}

void fill_uniform(MatrixX<double>& m, Rng& rng, double bound) {
  // Row-major draw order so that appending rows never reorders earlier draws.
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameters

ModelParams ModelParams::zeros(HeadKind head, int classes) {
  if (classes < 2) {
    throw std::invalid_argument("ModelParams: need at least 2 classes");
  }
  ModelParams p;
  p.head = head;
  p.classes = classes;
  p.conv1 = ConvLayer(3, kHidden1, 3);
  p.conv2 = ConvLayer(kHidden1, kHidden2, 3);
  p.conv3 = ConvLayer(kHidden2, static_cast<int>(head_input_channels(head, classes)), 1);
  return p;
}

ModelParams ModelParams::init(HeadKind head, int classes, std::uint64_t seed) {
  ModelParams p = zeros(head, classes);
  Rng rng = Rng::stream(seed, 0, kInitDomain);
  fill_uniform(p.conv1.weight, rng, 1.0 / std::sqrt(27.0));
  fill_uniform(p.conv2.weight, rng, 1.0 / std::sqrt(9.0 * kHidden1));
  const double bound3 = 1.0 / std::sqrt(static_cast<double>(kHidden2));
  MatrixX<double> id_rows(classes - 1, kHidden2);
  fill_uniform(id_rows, rng, bound3);
  if (head == HeadKind::Implicit) {
    p.conv3.weight = id_rows;
  } else {
    MatrixX<double> bg_row(1, kHidden2);
    fill_uniform(bg_row, rng, bound3);
    p.conv3.weight.row(0) = bg_row;
    p.conv3.weight.bottomRows(classes - 1) = id_rows;
  }
  return p;
}

Eigen::Index ModelParams::parameter_count() const {
  return conv1.parameter_count() + conv2.parameter_count() +
         conv3.parameter_count();
}

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const auto& t) { ok = ok && t.allFinite(); });
  return ok;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  return a.head == b.head && a.classes == b.classes &&
         a.conv1.weight == b.conv1.weight && a.conv1.bias == b.conv1.bias &&
         a.conv2.weight == b.conv2.weight && a.conv2.bias == b.conv2.bias &&
         a.conv3.weight == b.conv3.weight && a.conv3.bias == b.conv3.bias;
}

// ---------------------------------------------------------------------------
// Forward / backward

void forward_batch(const ModelParams& params, std::span<const Field* const> images,
                   ForwardCache& cache) {
  if (images.empty()) {
    throw std::invalid_argument("forward: empty batch");
  }
  cache.height = static_cast<int>(images.front()->height());
  cache.width = static_cast<int>(images.front()->width());
  cache.batch = static_cast<int>(images.size());
  if (cache.height < 3 || cache.width < 3) {
    throw std::invalid_argument("forward: image must be at least 3x3");
  }
  const Eigen::Index hw = static_cast<Eigen::Index>(cache.height) * cache.width;
  const Eigen::Index n = hw * cache.batch;

  cache.cols1.resize(params.conv1.weight.cols(), n);
  for (int b = 0; b < cache.batch; ++b) {
    const Field& img = *images[static_cast<std::size_t>(b)];
    if (img.channels() != params.conv1.in_channels ||
        img.height() != cache.height || img.width() != cache.width) {
      throw std::invalid_argument(
          "forward: image shape does not match the model or the batch");
    }
    im2col3x3(img.matrix().data(), img.channels(), hw, 1, cache.height, cache.width,
              cache.cols1, b * hw);
  }
  affine_into(params.conv1, cache.cols1, cache.act1);
  cache.act1 = cache.act1.cwiseMax(0.0);

  cache.cols2.resize(params.conv2.weight.cols(), n);
  const Eigen::Index c1 = cache.act1.rows();
  for (int b = 0; b < cache.batch; ++b) {
    im2col3x3(cache.act1.col(b * hw).data(), c1, 1, c1, cache.height, cache.width,
              cache.cols2, b * hw);
  }
  affine_into(params.conv2, cache.cols2, cache.act2);
  cache.act2 = cache.act2.cwiseMax(0.0);
  affine_into(params.conv3, cache.act2, cache.raw);
}

ForwardCache forward_batch(const ModelParams& params,
                           std::span<const Field* const> images) {
  ForwardCache cache;
  forward_batch(params, images, cache);
  return cache;
}

Field forward(const ModelParams& params, const Field& image) {
  const Field* batch[] = {&image};
  ForwardCache cache = forward_batch(params, batch);
  return Field(image.height(), image.width(), Field::Storage(std::move(cache.raw)));
}

void backward(const ModelParams& params, const ForwardCache& cache,
              const MatrixX<double>& grad_raw, ParamGrads& g,
              BackwardWorkspace& work) {
  if (grad_raw.rows() != cache.raw.rows() || grad_raw.cols() != cache.raw.cols()) {
    throw std::invalid_argument("backward: gradient shape mismatch");
  }
  if (g.head != params.head || g.classes != params.classes ||
      g.out_channels() != params.out_channels()) {
    g = ModelParams::zeros(params.head, params.classes);
  }
  const Eigen::Index hw = static_cast<Eigen::Index>(cache.height) * cache.width;

  g.conv3.weight.noalias() = grad_raw * cache.act2.transpose();
  g.conv3.bias = grad_raw.rowwise().sum();

  work.dz2.resize(cache.act2.rows(), cache.act2.cols());
  work.dz2.noalias() = params.conv3.weight.transpose() * grad_raw;
  work.dz2 = (cache.act2.array() > 0.0).select(work.dz2, 0.0);
  g.conv2.weight.noalias() = work.dz2 * cache.cols2.transpose();
  g.conv2.bias = work.dz2.rowwise().sum();

  work.dcols2.resize(cache.cols2.rows(), cache.cols2.cols());
  work.dcols2.noalias() = params.conv2.weight.transpose() * work.dz2;
  work.dz1.setZero(cache.act1.rows(), cache.act1.cols());
  for (int b = 0; b < cache.batch; ++b) {
    col2im3x3(work.dcols2, b * hw, cache.height, cache.width, work.dz1);
  }
  work.dz1 = (cache.act1.array() > 0.0).select(work.dz1, 0.0);
  g.conv1.weight.noalias() = work.dz1 * cache.cols1.transpose();
  g.conv1.bias = work.dz1.rowwise().sum();
}

ParamGrads backward(const ModelParams& params, const ForwardCache& cache,
                    const MatrixX<double>& grad_raw) {
  ParamGrads g = ModelParams::zeros(params.head, params.classes);
  BackwardWorkspace work;
  backward(params, cache, grad_raw, g, work);
  return g;
}

LossResult cross_entropy_columns(const MatrixX<double>& composite,
                                 std::span<const std::uint8_t> labels,
                                 std::uint8_t ignore_label) {
  if (static_cast<Eigen::Index>(labels.size()) != composite.cols()) {
    throw std::invalid_argument("cross_entropy: label count mismatch");
  }
  const Eigen::Index k = composite.rows();
  LossResult r;
  r.grad = colwise_softmax(composite);
  const Eigen::Matrix<double, 1, Eigen::Dynamic> lse = colwise_logsumexp(composite);
  double total = 0.0;
  for (Eigen::Index j = 0; j < composite.cols(); ++j) {
    const std::uint8_t label = labels[static_cast<std::size_t>(j)];
    if (label == ignore_label) {
      r.grad.col(j).setZero();
      continue;
    }
    if (label >= k) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                  " out of range for " + std::to_string(k) +
                                  " classes");
    }
    total += lse[j] - composite(label, j);
    r.grad(label, j) -= 1.0;
    ++r.scored;
    if (argmax_class(composite.col(j)) == label) ++r.correct;
  }
  if (r.scored == 0) {
    throw std::invalid_argument("cross_entropy: no scored pixels");
  }
  const double inv = 1.0 / static_cast<double>(r.scored);
  r.loss = total * inv;
  r.grad *= inv;
  return r;
}

FieldLoss cross_entropy_loss(const Field& composite, const LabelMap& labels,
                             std::uint8_t ignore_label) {
  if (labels.rows() != composite.height() || labels.cols() != composite.width()) {
    throw std::invalid_argument("cross_entropy: label map shape mismatch");
  }
  LossResult r = cross_entropy_columns(
      composite.matrix(),
      std::span<const std::uint8_t>(labels.data(), static_cast<std::size_t>(labels.size())),
      ignore_label);
  return {r.loss, Field(composite.height(), composite.width(),
                        Field::Storage(std::move(r.grad)))};
}

void sgd_step(ModelParams& params, const ParamGrads& grads, double lr,
              double momentum, ParamGrads& velocity) {
  if (!grads.all_finite()) {
    throw TrainingDivergence("non-finite gradient", -1);
  }
  auto step = [&](auto& p, const auto& g, auto& v) {
    if (p.rows() != g.rows() || p.cols() != g.cols() || p.rows() != v.rows() ||
        p.cols() != v.cols()) {
      throw std::invalid_argument("sgd_step: shape mismatch");
    }
    v = momentum * v + g;
    p -= lr * v;
  };
  step(params.conv1.weight, grads.conv1.weight, velocity.conv1.weight);
  step(params.conv1.bias, grads.conv1.bias, velocity.conv1.bias);
  step(params.conv2.weight, grads.conv2.weight, velocity.conv2.weight);
  step(params.conv2.bias, grads.conv2.bias, velocity.conv2.bias);
  step(params.conv3.weight, grads.conv3.weight, velocity.conv3.weight);
  step(params.conv3.bias, grads.conv3.bias, velocity.conv3.bias);
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("TrainConfig: learning rate must be > 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
  }
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) {
    throw std::invalid_argument("TrainConfig: batch size must be >= 1");
  }
  if (ece_bins < 1) throw std::invalid_argument("TrainConfig: ece bins must be >= 1");
}

std::string TrainingLog::to_jsonl(const Provenance& provenance, HeadKind head,
                                  std::uint64_t seed) const {
  std::string out;
  for (const auto& e : epochs) {
    ordered_json j;
    j["epoch"] = e.epoch;
    j["loss"] = e.loss;
    j["pixel_accuracy"] = e.pixel_accuracy;
    j["head_kind"] = to_string(head);
    j["seed"] = seed;
    j["dataset_hash"] = dataset_hash;
    j["config_hash"] = provenance.config_hash;
    j["tool_version"] = provenance.tool_version;
    out += j.dump() + "\n";
  }
  return out;
}

TrainResult train(const TrainConfig& config, const Dataset& dataset,
                  int classes) {
  config.validate();
  if (dataset.items.empty()) {
    throw std::invalid_argument("train: empty dataset");
  }
  TrainResult result{ModelParams::init(config.head, classes, config.seed), {}};
  result.log.dataset_hash = dataset.content_hash();
  ModelParams& params = result.params;
  ParamGrads velocity = ModelParams::zeros(config.head, classes);

  const std::size_t n = dataset.items.size();
  std::vector<std::size_t> order(n);
  std::vector<const Field*> batch_images;
  std::vector<std::uint8_t> batch_labels;
  ForwardCache cache;
  BackwardWorkspace work;
  ParamGrads grads = ModelParams::zeros(config.head, classes);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle = Rng::stream(config.seed, static_cast<std::uint64_t>(epoch),
                              kShuffleDomain);
    for (std::size_t i = n - 1; i > 0; --i) {
      std::swap(order[i], order[shuffle.below(i + 1)]);
    }

    double loss_sum = 0.0;
    std::int64_t scored = 0;
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < n;
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(n, start + static_cast<std::size_t>(config.batch_size));
      batch_images.clear();
      batch_labels.clear();
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t idx = order[i];
        batch_images.push_back(&dataset.items[idx].image);
        const LabelMap gt = dataset.ground_truth(idx);
        batch_labels.insert(batch_labels.end(), gt.data(), gt.data() + gt.size());
      }
      forward_batch(params, batch_images, cache);
      if (!cache.raw.allFinite()) {
        throw TrainingDivergence(
            "training diverged: non-finite logits in epoch " + std::to_string(epoch),
            epoch);
      }
      const MatrixX<double> composite = apply_head_columns(config.head, cache.raw);
      const LossResult loss = cross_entropy_columns(composite, batch_labels);
      if (!std::isfinite(loss.loss)) {
        throw TrainingDivergence(
            "training diverged: non-finite loss in epoch " + std::to_string(epoch),
            epoch);
      }
      const MatrixX<double> grad_raw =
          head_backward_columns(config.head, cache.raw, loss.grad);
      backward(params, cache, grad_raw, grads, work);
      try {
        sgd_step(params, grads, config.learning_rate, config.momentum, velocity);
      } catch (const TrainingDivergence&) {
        throw TrainingDivergence(
            "training diverged: non-finite gradient in epoch " +
                std::to_string(epoch),
            epoch);
      }
      loss_sum += loss.loss * static_cast<double>(loss.scored);
      scored += loss.scored;
      correct += loss.correct;
    }
    if (!params.all_finite()) {
      throw TrainingDivergence(
          "training diverged: non-finite parameters after epoch " +
              std::to_string(epoch),
          epoch);
    }
    result.log.epochs.push_back({epoch, loss_sum / static_cast<double>(scored),
                                 static_cast<double>(correct) /
                                     static_cast<double>(scored)});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct ImageTally {
  ConfusionMatrix cm{2};
  ReliabilityBins bins{1};
  double nd_sum = 0.0;
  std::int64_t pixels = 0;
};

ImageTally tally_image(const ModelParams& params, const Field& image,
                       const LabelMap& gt, const EvalOptions& options) {
  const Field raw = forward(params, image);
  const Field composite = apply_head(params.head, raw);
  const MatrixX<double> probs = colwise_softmax(composite.matrix());
  const LabelMap pred = argmax_labels(composite);

  ImageTally t{ConfusionMatrix(params.classes), ReliabilityBins(options.ece_bins),
               0.0, composite.pixels()};
  t.cm.accumulate(pred, gt);
  const auto p = flat_labels(pred);
  const auto g = flat_labels(gt);
  for (Eigen::Index j = 0; j < probs.cols(); ++j) {
    if (g[j] == kIgnoreLabel) continue;
    t.bins.add(probs.col(j).maxCoeff(), p[j] == g[j]);
  }
  const MembershipMaps maps = membership_field(composite, options.id_softmax);
  const auto& nd = maps.mu_nd.matrix();
  t.nd_sum = pairwise_sum(nd.data(), 0, static_cast<std::size_t>(nd.size()));
  return t;
}

}  // namespace

DatasetMetrics evaluate_dataset(const ModelParams& params,
                                const Dataset& dataset,
                                const EvalOptions& options) {
  if (dataset.items.empty()) {
    throw std::invalid_argument("evaluate: dataset '" + dataset.id + "' is empty");
  }
  const std::size_t n = dataset.items.size();
  std::vector<ImageTally> tallies(n);
  const int threads =
      std::clamp(options.threads, 1, static_cast<int>(std::min<std::size_t>(n, 64)));
  auto work = [&](int worker) {
    for (std::size_t i = static_cast<std::size_t>(worker); i < n;
         i += static_cast<std::size_t>(threads)) {
      tallies[i] = tally_image(params, dataset.items[i].image,
                               dataset.ground_truth(i), options);
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, t);
  }

  // Merge in image order so the result does not depend on the thread count.
  ConfusionMatrix cm(params.classes);
  ReliabilityBins bins(options.ece_bins);
  NonDistinctAccumulator nd;
  for (const auto& t : tallies) {
    cm.merge(t.cm);
    bins.merge(t.bins);
    nd.add_image_total(t.nd_sum, t.pixels);
  }

  DatasetMetrics m;
  m.dataset_id = dataset.id;
  m.kind = std::string(to_string(dataset.kind));
  m.scored_pixels = cm.total();
  const auto ious = iou_per_class(cm);
  if (dataset.kind == DatasetKind::InDistribution) {
    m.per_class_iou = ious;
    m.miou = miou(cm);
  } else {
    m.bg_iou = 100.0 * ious[0].value_or(0.0);
  }
  m.ece = ece(bins);
  m.expected_nd = nd.percent();
  m.reliability = reliability_table(bins);
  return m;
}

MetricsReport evaluate(const ModelParams& params, const Dataset& validation,
                       std::span<const Dataset> ood, const EvalOptions& options) {
  MetricsReport report;
  report.head_kind = std::string(to_string(params.head));
  report.ece_bins = options.ece_bins;
  report.id_softmax = std::string(to_string(options.id_softmax));
  report.datasets.push_back(evaluate_dataset(params, validation, options));
  for (const auto& d : ood) report.datasets.push_back(evaluate_dataset(params, d, options));
  report.validate();
  return report;
}

}  // namespace softguard
