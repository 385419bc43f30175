#include "lpf/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "lpf/errors.hpp"

namespace lpf::training {

using nn::Var;

void ArcFaceConfig::validate() const {
  if (margin_m < 0.0f || margin_m >= static_cast<float>(M_PI))
    throw ConfigError("ArcFaceConfig: margin must be in [0, pi)");
  if (scale_s <= 0.0f) throw ConfigError("ArcFaceConfig: scale must be > 0");
  if (num_classes <= 0)
    throw ConfigError("ArcFaceConfig: num_classes must be positive");
}

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("TrainConfig: learning_rate <= 0");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size < 1");
  if (epochs < 0) throw ConfigError("TrainConfig: negative epochs");
}

void AugmentationPolicy::validate() const {
  if (hflip_prob < 0.0 || hflip_prob > 1.0)
    throw ConfigError("AugmentationPolicy: hflip_prob out of [0,1]");
  if (blur_kernel != 0 && (blur_kernel % 2 == 0 || blur_kernel < 3))
    throw ConfigError("AugmentationPolicy: blur_kernel must be odd (or 0)");
}

ArcFaceHead::ArcFaceHead(const ArcFaceConfig& cfg, int embedding_dim, Rng& rng)
    : cfg_(cfg) {
  cfg_.validate();
  weights_ = nn::param(
      nn::truncated_normal_init({cfg_.num_classes, embedding_dim}, 0.02, rng));
}

Var ArcFaceHead::logits(const Var& embeddings,
                        const std::vector<int>& labels) const {
  for (int l : labels)
    if (l < 0 || l >= cfg_.num_classes)
      throw ConfigError("ArcFaceHead: label " + std::to_string(l) +
                        " out of range");
  // Class weights are renormalized to unit rows every forward pass.
  Var cosines = nn::matmul_nt(nn::l2_normalize_rows(embeddings),
                              nn::l2_normalize_rows(weights_));
  return nn::scale(nn::arcface_margin(cosines, labels, cfg_.margin_m),
                   cfg_.scale_s);
}

std::vector<float> arcface_logits(const std::vector<float>& embedding, int label,
                                  const ArcFaceConfig& cfg,
                                  const Tensor& class_weights) {
  cfg.validate();
  if (label < 0 || label >= cfg.num_classes)
    throw ConfigError("arcface_logits: label out of range");
  if (class_weights.dim(0) != cfg.num_classes)
    throw ShapeError("arcface_logits: class_weights row count mismatch");
  int64_t d = class_weights.dim(1);
  if (static_cast<int64_t>(embedding.size()) != d)
    throw ShapeError("arcface_logits: embedding length mismatch");

  // Double-precision path: float normalization noise (~1e-7 in the cosine)
  // would otherwise shift an exactly-parallel target logit by ~1e-2.
  double en = 0;
  for (float v : embedding) en += double(v) * v;
  en = std::sqrt(en);
  if (en == 0) throw DegenerateInputError("arcface_logits: zero embedding");
  std::vector<float> logits(static_cast<size_t>(cfg.num_classes));
  for (int j = 0; j < cfg.num_classes; ++j) {
    double wn = 0, dot = 0;
    for (int64_t i = 0; i < d; ++i) {
      double w = class_weights.data[j * d + i];
      wn += w * w;
      dot += w * double(embedding[i]);
    }
    wn = std::sqrt(wn);
    if (wn == 0) throw DegenerateInputError("arcface_logits: zero class weight");
    double c = std::clamp(dot / (en * wn), -1.0, 1.0);
    double out = c;
    if (j == label) {
      double theta = std::acos(std::clamp(c, -1.0 + 1e-7, 1.0 - 1e-7));
      if (theta + cfg.margin_m <= M_PI)
        out = c * std::cos(cfg.margin_m) -
              std::sqrt(std::max(0.0, 1.0 - c * c)) * std::sin(cfg.margin_m);
      else
        out = c - cfg.margin_m * std::sin(cfg.margin_m);
    }
    logits[static_cast<size_t>(j)] = static_cast<float>(cfg.scale_s * out);
  }
  return logits;
}

float arcface_loss(const Tensor& logits_batch, const std::vector<int>& labels) {
  if (logits_batch.ndim() != 2 || logits_batch.dim(0) == 0)
    throw ConfigError("arcface_loss: empty batch");
  Var logits = nn::constant(logits_batch);
  return nn::cross_entropy_mean(logits, labels)->value.data[0];
}

// ---------------- augmentation ----------------

namespace {

// Single-plane ops; the three model-input channels are identical.
std::vector<float> rotate_plane(const std::vector<float>& src, int size,
                                double deg, float fill) {
  double rad = deg * M_PI / 180.0;
  double ca = std::cos(rad), sa = std::sin(rad);
  double cx = (size - 1) / 2.0, cy = (size - 1) / 2.0;
  std::vector<float> dst(src.size(), fill);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      // inverse mapping into the source
      double dx = c - cx, dy = r - cy;
      double sx = ca * dx + sa * dy + cx;
      double sy = -sa * dx + ca * dy + cy;
      int x0 = static_cast<int>(std::floor(sx));
      int y0 = static_cast<int>(std::floor(sy));
      if (x0 < -1 || x0 > size - 1 || y0 < -1 || y0 > size - 1) continue;
      double fx = sx - x0, fy = sy - y0;
      auto sample = [&](int y, int x) -> double {
        if (y < 0 || y >= size || x < 0 || x >= size) return fill;
        return src[static_cast<size_t>(y) * size + x];
      };
      dst[static_cast<size_t>(r) * size + c] = static_cast<float>(
          (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
          fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1)));
    }
  return dst;
}

void blur_plane(std::vector<float>& plane, int size, int kernel, double sigma) {
  int radius = kernel / 2;
  std::vector<float> k(static_cast<size_t>(kernel));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<size_t>(i + radius)] = static_cast<float>(v);
    sum += v;
  }
  for (auto& v : k) v = static_cast<float>(v / sum);

  std::vector<float> tmp(plane.size());
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      float acc = 0.0f;
      for (int i = -radius; i <= radius; ++i)
        acc += k[static_cast<size_t>(i + radius)] *
               plane[static_cast<size_t>(r) * size +
                     std::clamp(c + i, 0, size - 1)];
      tmp[static_cast<size_t>(r) * size + c] = acc;
    }
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      float acc = 0.0f;
      for (int i = -radius; i <= radius; ++i)
        acc += k[static_cast<size_t>(i + radius)] *
               tmp[static_cast<size_t>(std::clamp(r + i, 0, size - 1)) * size + c];
      plane[static_cast<size_t>(r) * size + c] = acc;
    }
}

}  // namespace

imaging::ModelInput augment(const imaging::ModelInput& input,
                            const AugmentationPolicy& policy, Rng& rng) {
  policy.validate();
  int size = input.size;
  size_t plane_n = static_cast<size_t>(size) * size;
  std::vector<float> plane(input.channels.data.begin(),
                           input.channels.data.begin() + plane_n);

  double angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg);
  bool flip = rng.uniform() < policy.hflip_prob;
  double brightness = rng.uniform(-policy.brightness_contrast_delta,
                                  policy.brightness_contrast_delta);
  double contrast = 1.0 + rng.uniform(-policy.brightness_contrast_delta,
                                      policy.brightness_contrast_delta);

  if (angle != 0.0) plane = rotate_plane(plane, size, angle, -1.0f);
  if (flip) {
    for (int r = 0; r < size; ++r)
      std::reverse(plane.begin() + static_cast<int64_t>(r) * size,
                   plane.begin() + static_cast<int64_t>(r + 1) * size);
  }
  for (auto& v : plane)
    v = std::clamp(static_cast<float>((v + brightness) * contrast), -1.0f, 1.0f);
  if (policy.blur_kernel >= 3)
    blur_plane(plane, size, policy.blur_kernel, policy.blur_sigma);

  imaging::ModelInput out;
  out.size = size;
  out.channels = Tensor({3, size, size});
  for (int ch = 0; ch < 3; ++ch)
    std::copy(plane.begin(), plane.end(),
              out.channels.data.begin() + static_cast<int64_t>(ch) * plane_n);
  return out;
}

// ---------------- optimizer ----------------

Adam::Adam(std::vector<Var> params, double lr, double weight_decay,
           double beta1, double beta2, double eps)
    : params_(std::move(params)),
      lr_(lr),
      wd_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p->value.data.size(), 0.0f);
    v_.emplace_back(p->value.data.size(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) {
    p->ensure_grad();
    std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0f);
  }
}

void Adam::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    auto& p = *params_[pi];
    p.ensure_grad();
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (size_t i = 0; i < p.value.data.size(); ++i) {
      double g = p.grad.data[i] + wd_ * p.value.data[i];
      m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * g);
      v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * g * g);
      double mh = m[i] / bc1, vh = v[i] / bc2;
      p.value.data[i] -=
          static_cast<float>(lr_ * mh / (std::sqrt(vh) + eps_));
    }
  }
}

// ---------------- training loop ----------------

std::vector<EpochStats> train(backbone::HybridEncoder& encoder,
                              ArcFaceHead& head,
                              const std::vector<TrainSample>& dataset,
                              const TrainConfig& train_cfg,
                              const AugmentationPolicy& policy,
                              backbone::VariantFlags flags,
                              const std::string& log_csv_path) {
  train_cfg.validate();
  policy.validate();
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  std::vector<bool> seen(static_cast<size_t>(head.config().num_classes), false);
  for (const auto& s : dataset) {
    if (s.label < 0 || s.label >= head.config().num_classes)
      throw ConfigError("train: label " + std::to_string(s.label) +
                        " out of range for sample " + s.sample_id);
    seen[static_cast<size_t>(s.label)] = true;
  }
  for (size_t c = 0; c < seen.size(); ++c)
    if (!seen[c])
      throw ConfigError("train: class " + std::to_string(c) +
                        " has no samples");

  std::vector<Var> params;
  for (auto& [name, var] : encoder.parameters()) params.push_back(var);
  params.push_back(head.weights());
  Adam opt(std::move(params), train_cfg.learning_rate, train_cfg.weight_decay);

  Rng shuffle_rng(train_cfg.seed);
  Rng aug_rng(train_cfg.seed + 1);
  Rng dropout_rng(train_cfg.seed + 2);

  std::ofstream log;
  if (!log_csv_path.empty()) {
    log.open(log_csv_path, std::ios::app);
    if (log.tellp() == 0) log << "epoch,mean_loss,wall_seconds\n";
  }

  std::vector<EpochStats> stats;
  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    size_t count = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(train_cfg.batch_size)) {
      size_t end = std::min(order.size(),
                            start + static_cast<size_t>(train_cfg.batch_size));
      std::vector<imaging::ModelInput> inputs;
      std::vector<int> labels;
      for (size_t i = start; i < end; ++i) {
        inputs.push_back(augment(dataset[order[i]].input, policy, aug_rng));
        labels.push_back(dataset[order[i]].label);
      }
      Var batch = nn::constant(backbone::HybridEncoder::batch_inputs(inputs));
      Var emb = encoder.encode_batch(batch, flags, true, &dropout_rng);
      Var logits = head.logits(emb, labels);
      Var loss = nn::cross_entropy_mean(logits, labels);
      opt.zero_grad();
      nn::backward(loss);
      opt.step();
      loss_sum += static_cast<double>(loss->value.data[0]) *
                  static_cast<double>(end - start);
      count += end - start;
    }
    auto t1 = std::chrono::steady_clock::now();
    EpochStats es;
    es.epoch = epoch;
    es.mean_loss = loss_sum / static_cast<double>(count);
    es.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    stats.push_back(es);
    if (log.is_open()) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%d,%.6f,%.3f\n", es.epoch, es.mean_loss,
                    es.wall_seconds);
      log << buf;
    }
  }
  return stats;
}

}  // namespace lpf::training
