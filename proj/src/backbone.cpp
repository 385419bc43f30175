#include "lpf/backbone.hpp"

#include <cmath>

#include "lpf/errors.hpp"

namespace lpf::backbone {

using nn::Var;

HybridEncoderConfig HybridEncoderConfig::full_default() {
  HybridEncoderConfig cfg;
  cfg.variant = Variant::pretrained_full;
  return cfg;
}

HybridEncoderConfig HybridEncoderConfig::tiny_default() {
  HybridEncoderConfig cfg;
  cfg.variant = Variant::tiny_test;
  cfg.cnn_channels = 32;
  cfg.transformer_dim = 48;
  cfg.embedding_dim = 512;
  cfg.hidden_dim = 64;
  cfg.input_size = 64;
  return cfg;
}

void HybridEncoderConfig::validate() const {
  if (cnn_channels <= 0 || transformer_dim <= 0 || embedding_dim <= 0 ||
      hidden_dim <= 0)
    throw ConfigError("HybridEncoderConfig: dimensions must be positive");
  if (attention_kernel % 2 == 0 || attention_kernel < 1)
    throw ConfigError("HybridEncoderConfig: attention_kernel must be odd");
  if (dropout_rate < 0.0f || dropout_rate >= 1.0f)
    throw ConfigError("HybridEncoderConfig: dropout_rate must be in [0,1)");
  if (variant == Variant::tiny_test) {
    if (transformer_dim % 4 != 0)
      throw ConfigError(
          "HybridEncoderConfig: tiny transformer_dim must be divisible by 4");
    if (input_size % 32 != 0)
      throw ConfigError("HybridEncoderConfig: tiny input_size must be a "
                        "multiple of 32");
  } else {
    if (input_size != 224)
      throw ConfigError("HybridEncoderConfig: full variant expects 224 input");
  }
}

std::string HybridEncoderConfig::variant_name() const {
  return variant == Variant::pretrained_full ? "pretrained_full" : "tiny_test";
}

// ---------------- index-map helpers ----------------

namespace {

using IndexVec = std::shared_ptr<std::vector<int64_t>>;

IndexVec make_index(size_t n) {
  auto v = std::make_shared<std::vector<int64_t>>();
  v->reserve(n);
  return v;
}

// [N,C,H,W] -> [N, H*W, C]
IndexVec nchw_to_tokens_index(int64_t n, int64_t c, int64_t h, int64_t w) {
  auto idx = make_index(static_cast<size_t>(n * c * h * w));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t r = 0; r < h; ++r)
      for (int64_t col = 0; col < w; ++col)
        for (int64_t ch = 0; ch < c; ++ch)
          idx->push_back(((i * c + ch) * h + r) * w + col);
  return idx;
}

// cyclic roll of the token grid by (sr, sc): out(r,c) = in((r+sr)%H,(c+sc)%W)
IndexVec roll_index(int64_t n, int64_t h, int64_t w, int64_t c, int64_t sr,
                    int64_t sc) {
  auto idx = make_index(static_cast<size_t>(n * h * w * c));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t r = 0; r < h; ++r)
      for (int64_t col = 0; col < w; ++col) {
        int64_t src = (i * h + (r + sr) % h) * w + (col + sc) % w;
        for (int64_t ch = 0; ch < c; ++ch) idx->push_back(src * c + ch);
      }
  return idx;
}

// [N, H*W, C] -> [N*nW, win*win, C]
IndexVec window_partition_index(int64_t n, int64_t h, int64_t w, int64_t c,
                                int64_t win) {
  int64_t wr = h / win, wc = w / win;
  auto idx = make_index(static_cast<size_t>(n * h * w * c));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t br = 0; br < wr; ++br)
      for (int64_t bc = 0; bc < wc; ++bc)
        for (int64_t ty = 0; ty < win; ++ty)
          for (int64_t tx = 0; tx < win; ++tx) {
            int64_t src = (i * h + br * win + ty) * w + bc * win + tx;
            for (int64_t ch = 0; ch < c; ++ch) idx->push_back(src * c + ch);
          }
  return idx;
}

// [N*nW, win*win, C] -> [N, H*W, C]
IndexVec window_reverse_index(int64_t n, int64_t h, int64_t w, int64_t c,
                              int64_t win) {
  int64_t wc = w / win, t = win * win;
  auto idx = make_index(static_cast<size_t>(n * h * w * c));
  int64_t n_win = (h / win) * wc;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t r = 0; r < h; ++r)
      for (int64_t col = 0; col < w; ++col) {
        int64_t wi = (r / win) * wc + col / win;
        int64_t tok = (r % win) * win + col % win;
        int64_t src = (i * n_win + wi) * t + tok;
        for (int64_t ch = 0; ch < c; ++ch) idx->push_back(src * c + ch);
      }
  return idx;
}

// qkv rows [B*T, 3C] -> one of q/k/v as [B*heads, T, dh]
IndexVec head_split_index(int64_t b, int64_t t, int64_t c, int64_t heads,
                          int which) {
  int64_t dh = c / heads;
  auto idx = make_index(static_cast<size_t>(b * t * c));
  for (int64_t i = 0; i < b; ++i)
    for (int64_t hh = 0; hh < heads; ++hh)
      for (int64_t tt = 0; tt < t; ++tt)
        for (int64_t d = 0; d < dh; ++d)
          idx->push_back((i * t + tt) * 3 * c + which * c + hh * dh + d);
  return idx;
}

// [B*heads, T, dh] -> [B*T, C]
IndexVec head_merge_index(int64_t b, int64_t t, int64_t c, int64_t heads) {
  int64_t dh = c / heads;
  auto idx = make_index(static_cast<size_t>(b * t * c));
  for (int64_t i = 0; i < b; ++i)
    for (int64_t tt = 0; tt < t; ++tt)
      for (int64_t hh = 0; hh < heads; ++hh)
        for (int64_t d = 0; d < dh; ++d)
          idx->push_back(((i * heads + hh) * t + tt) * dh + d);
  return idx;
}

// 2x2 neighborhood concat for patch merging: [N, H*W, C] -> [N, H/2*W/2, 4C]
IndexVec patch_merge_index(int64_t n, int64_t h, int64_t w, int64_t c) {
  auto idx = make_index(static_cast<size_t>(n * h * w * c));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t r = 0; r < h / 2; ++r)
      for (int64_t col = 0; col < w / 2; ++col)
        for (int off = 0; off < 4; ++off) {
          int64_t rr = 2 * r + (off & 1);
          int64_t cc = 2 * col + (off >> 1);
          int64_t src = (i * h + rr) * w + cc;
          for (int64_t ch = 0; ch < c; ++ch) idx->push_back(src * c + ch);
        }
  return idx;
}

// Additive attention mask for shifted windows: 0 within a contiguous region,
// -100 across the wrap-around seams.
Tensor shifted_window_mask(int64_t batch_windows, int64_t n, int64_t h,
                           int64_t w, int64_t win, int64_t shift,
                           int64_t heads) {
  int64_t t = win * win;
  std::vector<int> region(static_cast<size_t>(h * w));
  auto region_of = [&](int64_t v, int64_t size) {
    if (v < size - win) return 0;
    if (v < size - shift) return 1;
    return 2;
  };
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      region[static_cast<size_t>(r * w + c)] =
          3 * region_of(r, h) + region_of(c, w);

  int64_t wc = w / win, n_win = (h / win) * wc;
  Tensor mask({batch_windows * heads, t, t});
  std::vector<int> ids(static_cast<size_t>(t));
  for (int64_t wi = 0; wi < n_win; ++wi) {
    int64_t br = wi / wc, bc = wi % wc;
    for (int64_t ty = 0; ty < win; ++ty)
      for (int64_t tx = 0; tx < win; ++tx)
        ids[static_cast<size_t>(ty * win + tx)] =
            region[static_cast<size_t>((br * win + ty) * w + bc * win + tx)];
    for (int64_t a = 0; a < t; ++a)
      for (int64_t b = 0; b < t; ++b) {
        float v = ids[static_cast<size_t>(a)] == ids[static_cast<size_t>(b)]
                      ? 0.0f
                      : -100.0f;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t hh = 0; hh < heads; ++hh)
            mask.data[(((i * n_win + wi) * heads + hh) * t + a) * t + b] = v;
      }
  }
  return mask;
}

}  // namespace

// ---------------- construction ----------------

HybridEncoder::HybridEncoder(HybridEncoderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(cfg_.seed);

  auto init_w = [&](std::vector<int64_t> shape) {
    return nn::truncated_normal_init(std::move(shape), 0.02, rng);
  };
  auto zeros = [](std::vector<int64_t> shape) { return Tensor(std::move(shape)); };
  auto ones = [](std::vector<int64_t> shape) {
    return Tensor::full(std::move(shape), 1.0f);
  };

  const bool full = cfg_.variant == HybridEncoderConfig::Variant::pretrained_full;
  if (full) {
    cnn_widths_ = {32, 64, 128, 256, 512};
    stages_ = {{96, 2, 3}, {192, 2, 6}, {384, 2, 12}, {768, 2, 24}};
    window_ = 7;
    if (stages_.back().dim != cfg_.transformer_dim)
      throw ConfigError("full variant requires transformer_dim = 768");
  } else {
    cnn_widths_ = {8, 16, 16, 32, cfg_.cnn_channels};
    int d0 = cfg_.transformer_dim / 2;
    stages_ = {{d0, 2, 2}, {cfg_.transformer_dim, 2, 2}};
    window_ = 4;
  }

  // CNN trunk: one stride-2 3x3 conv per width, ReLU between.
  int in_ch = 3;
  for (size_t i = 0; i < cnn_widths_.size(); ++i) {
    int out_ch = cnn_widths_[i];
    std::string p = "cnn.conv" + std::to_string(i);
    register_param(p + ".w", init_w({out_ch, in_ch, 3, 3}));
    register_param(p + ".b", zeros({out_ch}));
    in_ch = out_ch;
  }
  if (full) {
    // 1x1 projection to the 1280-channel feature map.
    register_param("cnn.point.w", init_w({cfg_.cnn_channels, in_ch, 1, 1}));
    register_param("cnn.point.b", zeros({cfg_.cnn_channels}));
  }

  // Spatial attention conv over the 2-channel mean/max descriptor.
  int ak = cfg_.attention_kernel;
  register_param("sa.conv.w", init_w({1, 2, ak, ak}));
  register_param("sa.conv.b", zeros({1}));

  // Transformer branch.
  register_param("tf.patch.w", init_w({stages_[0].dim, 3, patch_size_, patch_size_}));
  register_param("tf.patch.b", zeros({stages_[0].dim}));
  register_param("tf.patch.ln.g", ones({stages_[0].dim}));
  register_param("tf.patch.ln.b", zeros({stages_[0].dim}));
  for (size_t s = 0; s < stages_.size(); ++s) {
    int dim = stages_[s].dim;
    for (int d = 0; d < stages_[s].depth; ++d) {
      std::string p = "tf.s" + std::to_string(s) + ".b" + std::to_string(d);
      register_param(p + ".ln1.g", ones({dim}));
      register_param(p + ".ln1.b", zeros({dim}));
      register_param(p + ".qkv.w", init_w({3 * dim, dim}));
      register_param(p + ".qkv.b", zeros({3 * dim}));
      register_param(p + ".proj.w", init_w({dim, dim}));
      register_param(p + ".proj.b", zeros({dim}));
      register_param(p + ".ln2.g", ones({dim}));
      register_param(p + ".ln2.b", zeros({dim}));
      register_param(p + ".mlp1.w", init_w({4 * dim, dim}));
      register_param(p + ".mlp1.b", zeros({4 * dim}));
      register_param(p + ".mlp2.w", init_w({dim, 4 * dim}));
      register_param(p + ".mlp2.b", zeros({dim}));
    }
    if (s + 1 < stages_.size()) {
      std::string p = "tf.merge" + std::to_string(s);
      register_param(p + ".ln.g", ones({4 * dim}));
      register_param(p + ".ln.b", zeros({4 * dim}));
      register_param(p + ".w", init_w({stages_[s + 1].dim, 4 * dim}));
      register_param(p + ".b", zeros({stages_[s + 1].dim}));
    }
  }
  register_param("tf.norm.g", ones({stages_.back().dim}));
  register_param("tf.norm.b", zeros({stages_.back().dim}));

  // Fusion head.
  int fused = cfg_.cnn_channels + cfg_.transformer_dim;
  register_param("fuse.fc1.w", init_w({cfg_.hidden_dim, fused}));
  register_param("fuse.fc1.b", zeros({cfg_.hidden_dim}));
  register_param("fuse.fc2.w", init_w({cfg_.embedding_dim, cfg_.hidden_dim}));
  register_param("fuse.fc2.b", zeros({cfg_.embedding_dim}));
}

Var HybridEncoder::register_param(const std::string& name, Tensor t) {
  auto v = nn::param(std::move(t));
  params_.emplace_back(name, v);
  return v;
}

Var HybridEncoder::find(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  throw ConfigError("HybridEncoder: unknown parameter " + name);
}

// ---------------- forwards ----------------

Var HybridEncoder::cnn_features(const Var& input) const {
  const auto& s = input->value.shape;
  if (s.size() != 4 || s[1] != 3 || s[2] != s[3])
    throw ShapeError("cnn_features: expected [N,3,S,S], got " +
                     input->value.shape_str());
  if (cfg_.variant == HybridEncoderConfig::Variant::pretrained_full) {
    if (s[2] != 224)
      throw ShapeError("cnn_features: full variant expects 224x224 input");
  } else if (s[2] % 32 != 0) {
    throw ShapeError("cnn_features: tiny variant needs S divisible by 32");
  }

  Var x = input;
  for (size_t i = 0; i < cnn_widths_.size(); ++i) {
    std::string p = "cnn.conv" + std::to_string(i);
    x = nn::relu(nn::conv2d(x, find(p + ".w"), find(p + ".b"), 2, 1));
  }
  if (cfg_.variant == HybridEncoderConfig::Variant::pretrained_full)
    x = nn::relu(nn::conv2d(x, find("cnn.point.w"), find("cnn.point.b"), 1, 0));
  return x;
}

std::pair<Var, Var> HybridEncoder::spatial_attention(const Var& fmap) const {
  Var descriptor = nn::concat_channels(nn::channel_mean(fmap),
                                       nn::channel_max(fmap));
  Var pre = nn::conv2d(descriptor, find("sa.conv.w"), find("sa.conv.b"), 1,
                       cfg_.attention_kernel / 2);
  Var amap = nn::sigmoid(pre);
  Var gated = nn::broadcast_mul_channel(fmap, amap);
  return {gated, amap};
}

Var HybridEncoder::pool_local(const Var& gated) {
  return nn::global_avg_pool(gated);
}

Var HybridEncoder::transformer_block(const Var& tokens, int height, int width,
                                     int heads, int shift,
                                     const std::string& prefix) const {
  int64_t n = tokens->value.dim(0);
  int64_t c = tokens->value.dim(2);
  int64_t t = static_cast<int64_t>(window_) * window_;
  int64_t n_win = (static_cast<int64_t>(height) / window_) * (width / window_);
  int64_t b = n * n_win;
  int64_t dh = c / heads;

  Var x = nn::layer_norm(tokens, find(prefix + ".ln1.g"), find(prefix + ".ln1.b"));
  if (shift > 0)
    x = nn::gather(x, roll_index(n, height, width, c, shift, shift),
                   x->value.shape);
  x = nn::gather(x, window_partition_index(n, height, width, c, window_),
                 {b, t, c});

  Var qkv = nn::linear(nn::reshape(x, {b * t, c}), find(prefix + ".qkv.w"),
                       find(prefix + ".qkv.b"));
  Var q = nn::gather(qkv, head_split_index(b, t, c, heads, 0), {b * heads, t, dh});
  Var k = nn::gather(qkv, head_split_index(b, t, c, heads, 1), {b * heads, t, dh});
  Var v = nn::gather(qkv, head_split_index(b, t, c, heads, 2), {b * heads, t, dh});

  Var attn = nn::bmm_nt(nn::scale(q, 1.0f / std::sqrt(static_cast<float>(dh))), k);
  if (shift > 0)
    attn = nn::add_constant(
        attn, shifted_window_mask(b, n, height, width, window_, shift, heads));
  attn = nn::softmax_last(attn);

  Var out = nn::bmm(attn, v);
  out = nn::gather(out, head_merge_index(b, t, c, heads), {b * t, c});
  out = nn::linear(out, find(prefix + ".proj.w"), find(prefix + ".proj.b"));
  out = nn::reshape(out, {b, t, c});
  out = nn::gather(out, window_reverse_index(n, height, width, c, window_),
                   {n, static_cast<int64_t>(height) * width, c});
  if (shift > 0)
    out = nn::gather(out, roll_index(n, height, width, c, height - shift,
                                     width - shift),
                     out->value.shape);
  Var res = nn::add(tokens, out);

  Var y = nn::layer_norm(res, find(prefix + ".ln2.g"), find(prefix + ".ln2.b"));
  y = nn::linear(nn::reshape(y, {n * height * width, c}),
                 find(prefix + ".mlp1.w"), find(prefix + ".mlp1.b"));
  y = nn::gelu(y);
  y = nn::linear(y, find(prefix + ".mlp2.w"), find(prefix + ".mlp2.b"));
  y = nn::reshape(y, {n, static_cast<int64_t>(height) * width, c});
  return nn::add(res, y);
}

Var HybridEncoder::transformer_features(const Var& input) const {
  const auto& s = input->value.shape;
  if (s.size() != 4 || s[1] != 3 || s[2] != s[3])
    throw ShapeError("transformer_features: expected [N,3,S,S], got " +
                     input->value.shape_str());
  int64_t n = s[0];
  int size = static_cast<int>(s[2]);

  Var x = nn::conv2d(input, find("tf.patch.w"), find("tf.patch.b"),
                     patch_size_, 0);
  int h = size / patch_size_, w = h;
  int64_t c = stages_[0].dim;
  x = nn::gather(x, nchw_to_tokens_index(n, c, h, w),
                 {n, static_cast<int64_t>(h) * w, c});
  x = nn::layer_norm(x, find("tf.patch.ln.g"), find("tf.patch.ln.b"));

  for (size_t st = 0; st < stages_.size(); ++st) {
    if (h < window_ || h % window_ != 0)
      throw ShapeError("transformer_features: token grid " + std::to_string(h) +
                       " incompatible with window " + std::to_string(window_));
    for (int d = 0; d < stages_[st].depth; ++d) {
      int shift = (d % 2 == 1 && h > window_) ? window_ / 2 : 0;
      std::string prefix = "tf.s" + std::to_string(st) + ".b" + std::to_string(d);
      x = transformer_block(x, h, w, stages_[st].heads, shift, prefix);
    }
    if (st + 1 < stages_.size()) {
      int64_t dim = stages_[st].dim;
      std::string p = "tf.merge" + std::to_string(st);
      x = nn::gather(x, patch_merge_index(n, h, w, dim),
                     {n, static_cast<int64_t>(h / 2) * (w / 2), 4 * dim});
      x = nn::layer_norm(x, find(p + ".ln.g"), find(p + ".ln.b"));
      int64_t tokens = x->value.dim(1);
      x = nn::linear(nn::reshape(x, {n * tokens, 4 * dim}), find(p + ".w"),
                     find(p + ".b"));
      x = nn::reshape(x, {n, tokens, stages_[st + 1].dim});
      h /= 2;
      w /= 2;
    }
  }
  x = nn::layer_norm(x, find("tf.norm.g"), find("tf.norm.b"));
  return nn::mean_axis1(x);
}

Var HybridEncoder::fuse_and_project(const Var& local, const Var& global_feat,
                                    bool training_mode, Rng* dropout_rng) const {
  if (local->value.dim(1) != cfg_.cnn_channels)
    throw ShapeError("fuse_and_project: local length " +
                     std::to_string(local->value.dim(1)) + " != cnn_channels");
  if (global_feat->value.dim(1) != cfg_.transformer_dim)
    throw ShapeError("fuse_and_project: global length " +
                     std::to_string(global_feat->value.dim(1)) +
                     " != transformer_dim");
  Var x = nn::concat_last(local, global_feat);
  x = nn::relu(nn::linear(x, find("fuse.fc1.w"), find("fuse.fc1.b")));
  if (training_mode && dropout_rng)
    x = nn::dropout(x, cfg_.dropout_rate, *dropout_rng, true);
  return nn::linear(x, find("fuse.fc2.w"), find("fuse.fc2.b"));
}

Var HybridEncoder::encode_batch(const Var& input, VariantFlags flags,
                                bool training_mode, Rng* dropout_rng) const {
  Var fmap = cnn_features(input);
  Var local;
  if (flags.use_attention) {
    auto [gated, amap] = spatial_attention(fmap);
    local = pool_local(gated);
  } else {
    local = pool_local(fmap);
  }
  Var global_feat;
  if (flags.use_transformer)
    global_feat = transformer_features(input);
  else
    global_feat = nn::constant(
        Tensor({input->value.dim(0), cfg_.transformer_dim}));
  return fuse_and_project(local, global_feat, training_mode, dropout_rng);
}

Embedding HybridEncoder::encode(const imaging::ModelInput& input,
                                VariantFlags flags,
                                const std::string& sample_id) const {
  Tensor batch({1, 3, input.size, input.size});
  batch.data = input.channels.data;
  Var emb = encode_batch(nn::constant(std::move(batch)), flags);
  Embedding e;
  e.vector = emb->value.data;
  e.sample_id = sample_id;
  e.normalized = false;
  return e;
}

Tensor HybridEncoder::batch_inputs(const std::vector<imaging::ModelInput>& inputs) {
  if (inputs.empty()) throw ConfigError("batch_inputs: empty batch");
  int size = inputs[0].size;
  Tensor batch({static_cast<int64_t>(inputs.size()), 3, size, size});
  int64_t per = 3LL * size * size;
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].size != size)
      throw ShapeError("batch_inputs: mixed input sizes");
    std::copy(inputs[i].channels.data.begin(), inputs[i].channels.data.end(),
              batch.data.begin() + static_cast<int64_t>(i) * per);
  }
  return batch;
}

// ---------------- checkpointing ----------------

Checkpoint HybridEncoder::to_checkpoint(int64_t step) const {
  Checkpoint ckpt;
  ckpt.meta["format"] = "lpf-checkpoint-v1";
  ckpt.meta["variant"] = cfg_.variant_name();
  ckpt.meta["seed"] = std::to_string(cfg_.seed);
  ckpt.meta["step"] = std::to_string(step);
  ckpt.meta["cnn_channels"] = std::to_string(cfg_.cnn_channels);
  ckpt.meta["transformer_dim"] = std::to_string(cfg_.transformer_dim);
  ckpt.meta["embedding_dim"] = std::to_string(cfg_.embedding_dim);
  ckpt.meta["attention_kernel"] = std::to_string(cfg_.attention_kernel);
  ckpt.meta["hidden_dim"] = std::to_string(cfg_.hidden_dim);
  ckpt.meta["input_size"] = std::to_string(cfg_.input_size);
  ckpt.meta["dropout_rate"] = std::to_string(cfg_.dropout_rate);
  for (const auto& [name, var] : params_)
    ckpt.params.emplace_back(name, var->value);
  return ckpt;
}

void HybridEncoder::load_weights(const Checkpoint& ckpt) {
  for (auto& [name, var] : params_) {
    const Tensor* t = ckpt.find(name);
    if (!t) throw ConfigError("load_weights: checkpoint missing " + name);
    if (t->shape != var->value.shape)
      throw ShapeError("load_weights: shape mismatch for " + name);
    var->value.data = t->data;
  }
}

void HybridEncoder::zero_attention_conv() {
  for (auto& [name, var] : params_)
    if (name == "sa.conv.w" || name == "sa.conv.b")
      std::fill(var->value.data.begin(), var->value.data.end(), 0.0f);
}

}  // namespace lpf::backbone
