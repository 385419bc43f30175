#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "lpf/rng.hpp"
#include "lpf/tensor.hpp"

namespace lpf::nn {

// Reverse-mode autodiff over dense float tensors. Graphs are built per
// forward pass; parameters are long-lived leaf nodes.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;  // accumulates into parents' grads

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor(value.shape);
  }
};

Var leaf(Tensor value, bool requires_grad = false);
inline Var constant(Tensor value) { return leaf(std::move(value), false); }
inline Var param(Tensor value) { return leaf(std::move(value), true); }

// Backpropagate from a scalar (or any) root; root grad seeded with ones.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var add_scalar(const Var& a, float s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);

// ---- linear algebra ----
// a: [M,K], b: [K,N] -> [M,N]
Var matmul(const Var& a, const Var& b);
// a: [M,K], b: [N,K] -> [M,N]  (a * b^T)
Var matmul_nt(const Var& a, const Var& b);
// x: [N,in], w: [out,in], b: [out] -> [N,out]
Var linear(const Var& x, const Var& w, const Var& b);
// a: [B,M,K], b: [B,K,N] -> [B,M,N]
Var bmm(const Var& a, const Var& b);
// a: [B,M,K], b: [B,N,K] -> [B,M,N]  (batched a * b^T)
Var bmm_nt(const Var& a, const Var& b);

// ---- convolution ----
// x: [N,C,H,W], w: [O,C,k,k], b: [O]; 'same' semantics given pad.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// ---- reductions / shape ----
Var reshape(const Var& x, std::vector<int64_t> shape);
// y.data[i] = x.data[index[i]]; backward scatter-adds. General permute /
// window-partition primitive.
Var gather(const Var& x, std::shared_ptr<std::vector<int64_t>> index,
           std::vector<int64_t> out_shape);
Var concat_last(const Var& a, const Var& b);       // concat on last axis
Var channel_mean(const Var& x);                    // [N,C,H,W] -> [N,1,H,W]
Var channel_max(const Var& x);                     // [N,C,H,W] -> [N,1,H,W]
Var concat_channels(const Var& a, const Var& b);   // along axis 1 of NCHW
Var broadcast_mul_channel(const Var& fmap, const Var& amap);  // amap [N,1,H,W]
Var global_avg_pool(const Var& x);                 // [N,C,H,W] -> [N,C]
Var mean_axis1(const Var& x);                      // [N,T,D] -> [N,D]
Var sum_all(const Var& x);                         // -> [1]

// ---- normalization / attention ----
// x: [..., D]; gamma, beta: [D]
Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
               float eps = 1e-5f);
Var softmax_last(const Var& x);
// Row-wise L2 normalization of [N,D]; rows with norm < eps throw.
Var l2_normalize_rows(const Var& x, float eps = 1e-12f);
// attn: [B,T,T]; adds the constant mask tensor [B,T,T] (no grad through it).
Var add_constant(const Var& x, Tensor mask);

// ---- regularization / loss ----
Var dropout(const Var& x, float rate, Rng& rng, bool active);
// logits: [N,K], labels: size N -> scalar mean cross-entropy
Var cross_entropy_mean(const Var& logits, const std::vector<int>& labels);
// ArcFace margin: cosines [N,K]; for each row the label column gets
// cos(theta+m), with the standard clamp and theta+m > pi fallback.
Var arcface_margin(const Var& cosines, const std::vector<int>& labels,
                   float margin);

// ---- initialization ----
Tensor truncated_normal_init(std::vector<int64_t> shape, double sigma, Rng& rng);

}  // namespace lpf::nn
