#pragma once

#include <string>
#include <vector>

#include "lpf/backbone.hpp"
#include "lpf/imaging.hpp"
#include "lpf/nn.hpp"
#include "lpf/rng.hpp"

namespace lpf::training {

struct ArcFaceConfig {
  float margin_m = 0.5f;  // radians
  float scale_s = 64.0f;
  int num_classes = 0;

  void validate() const;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  int batch_size = 16;
  int epochs = 50;
  uint64_t seed = 0;

  void validate() const;
};

struct AugmentationPolicy {
  double rotation_deg = 15.0;
  double hflip_prob = 0.5;
  double brightness_contrast_delta = 0.1;
  int blur_kernel = 3;       // 0 disables the blur (identity, test hook)
  double blur_sigma = 0.8;

  void validate() const;
};

// ArcFace classification head over unit-normalized class weights.
class ArcFaceHead {
 public:
  ArcFaceHead(const ArcFaceConfig& cfg, int embedding_dim, Rng& rng);

  // logits[j] = s*cos(theta_j), label column gets s*cos(theta+m).
  // embeddings: [N, D] graph node; labels in [0, num_classes).
  nn::Var logits(const nn::Var& embeddings, const std::vector<int>& labels) const;

  nn::Var weights() { return weights_; }
  const ArcFaceConfig& config() const { return cfg_; }

 private:
  ArcFaceConfig cfg_;
  nn::Var weights_;  // [num_classes, embedding_dim]
};

// Single-sample convenience used by tests: logits for one embedding.
std::vector<float> arcface_logits(const std::vector<float>& embedding, int label,
                                  const ArcFaceConfig& cfg,
                                  const Tensor& class_weights);

// Mean softmax cross-entropy over a logits batch.
float arcface_loss(const Tensor& logits_batch, const std::vector<int>& labels);

// Paper's augmentation chain on a normalized model input, in order:
// rotation U(-r,+r) (bilinear, fill -1), horizontal flip w.p. hflip_prob,
// brightness shift and contrast scale U(-d,+d), Gaussian blur (always).
imaging::ModelInput augment(const imaging::ModelInput& input,
                            const AugmentationPolicy& policy, Rng& rng);

// One training sample: preprocessed model input plus its class label.
struct TrainSample {
  imaging::ModelInput input;
  int label = 0;
  std::string sample_id;
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
};

// Adam optimizer over a flat parameter list.
class Adam {
 public:
  Adam(std::vector<nn::Var> params, double lr, double weight_decay,
       double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void zero_grad();
  void step();

 private:
  std::vector<nn::Var> params_;
  std::vector<std::vector<float>> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// Shuffled mini-batch ArcFace training. Mutates the encoder weights in
// place; returns per-epoch stats. Fully reproducible under a fixed seed.
std::vector<EpochStats> train(backbone::HybridEncoder& encoder,
                              ArcFaceHead& head,
                              const std::vector<TrainSample>& dataset,
                              const TrainConfig& train_cfg,
                              const AugmentationPolicy& policy,
                              backbone::VariantFlags flags = {},
                              const std::string& log_csv_path = "");

}  // namespace lpf::training
