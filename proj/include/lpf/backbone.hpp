#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lpf/checkpoint.hpp"
#include "lpf/embedding.hpp"
#include "lpf/imaging.hpp"
#include "lpf/nn.hpp"
#include "lpf/rng.hpp"

namespace lpf::backbone {

struct HybridEncoderConfig {
  enum class Variant { pretrained_full, tiny_test };

  Variant variant = Variant::pretrained_full;
  int cnn_channels = 1280;
  int transformer_dim = 768;
  int embedding_dim = 512;
  int attention_kernel = 7;
  float dropout_rate = 0.5f;
  int hidden_dim = 1024;
  int input_size = 224;
  uint64_t seed = 42;

  static HybridEncoderConfig full_default();
  static HybridEncoderConfig tiny_default();
  void validate() const;
  std::string variant_name() const;
};

// Ablation switches (CNN-only / CNN+attention / full hybrid).
struct VariantFlags {
  bool use_attention = true;
  bool use_transformer = true;
};

// The hybrid encoder: CNN trunk with spatial-attention gating, a
// shifted-window transformer branch, and a two-layer fusion head projecting
// the concatenated descriptor to the embedding space.
class HybridEncoder {
 public:
  explicit HybridEncoder(HybridEncoderConfig cfg);

  // Branch-level forwards; input is [N,3,S,S].
  nn::Var cnn_features(const nn::Var& input) const;
  std::pair<nn::Var, nn::Var> spatial_attention(const nn::Var& fmap) const;
  nn::Var transformer_features(const nn::Var& input) const;
  // local [N,cnn_channels] ++ global [N,transformer_dim] -> [N,embedding_dim]
  nn::Var fuse_and_project(const nn::Var& local, const nn::Var& global_feat,
                           bool training_mode = false,
                           Rng* dropout_rng = nullptr) const;
  static nn::Var pool_local(const nn::Var& gated);

  nn::Var encode_batch(const nn::Var& input, VariantFlags flags = {},
                       bool training_mode = false,
                       Rng* dropout_rng = nullptr) const;

  Embedding encode(const imaging::ModelInput& input, VariantFlags flags = {},
                   const std::string& sample_id = "") const;

  // Stack model inputs into an [N,3,S,S] batch tensor.
  static Tensor batch_inputs(const std::vector<imaging::ModelInput>& inputs);

  const HybridEncoderConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, nn::Var>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, nn::Var>>& parameters() const {
    return params_;
  }

  Checkpoint to_checkpoint(int64_t step = 0) const;
  void load_weights(const Checkpoint& ckpt);

  // Test hook: force the attention conv to produce constant pre-activations.
  void zero_attention_conv();

 private:
  struct StageSpec {
    int dim = 0;
    int depth = 0;
    int heads = 0;
  };

  nn::Var find(const std::string& name) const;
  nn::Var register_param(const std::string& name, Tensor t);
  nn::Var transformer_block(const nn::Var& tokens, int height, int width,
                            int heads, int shift,
                            const std::string& prefix) const;

  HybridEncoderConfig cfg_;
  std::vector<std::pair<std::string, nn::Var>> params_;
  std::vector<int> cnn_widths_;       // trunk output channels per stride-2 conv
  std::vector<StageSpec> stages_;     // transformer stages
  int patch_size_ = 4;
  int window_ = 7;
};

}  // namespace lpf::backbone
