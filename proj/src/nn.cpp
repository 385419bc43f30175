#include "lpf/nn.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include <Eigen/Core>

#include "lpf/errors.hpp"

namespace lpf::nn {

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

Var make_op(Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->parents = std::move(parents);
  for (const auto& p : node->parents)
    if (p->requires_grad) node->requires_grad = true;
  if (node->requires_grad) node->backward_fn = std::move(backward_fn);
  return node;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     a->value.shape_str() + " vs " + b->value.shape_str());
}

}  // namespace

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

void backward(const Var& root) {
  // Topological order via iterative DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) n->ensure_grad();
  std::fill(root->grad.data.begin(), root->grad.data.end(), 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[i] = a->value.data[i] + b->value.data[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    for (int pi = 0; pi < 2; ++pi) {
      Node& p = *n.parents[pi];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) p.grad.data[i] += n.grad.data[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[i] = a->value.data[i] - b->value.data[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) pa.grad.data[i] += n.grad.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) pb.grad.data[i] -= n.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[i] = a->value.data[i] * b->value.data[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        pa.grad.data[i] += n.grad.data[i] * pb.value.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        pb.grad.data[i] += n.grad.data[i] * pa.value.data[i];
    }
  });
}

Var scale(const Var& a, float s) {
  Tensor out(a->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = a->value.data[i] * s;
  return make_op(std::move(out), {a}, [s](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      p.grad.data[i] += n.grad.data[i] * s;
  });
}

Var add_scalar(const Var& a, float s) {
  Tensor out(a->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = a->value.data[i] + s;
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) p.grad.data[i] += n.grad.data[i];
  });
}

Var relu(const Var& a) {
  Tensor out(a->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[i] = a->value.data[i] > 0.0f ? a->value.data[i] : 0.0f;
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (p.value.data[i] > 0.0f) p.grad.data[i] += n.grad.data[i];
  });
}

Var sigmoid(const Var& a) {
  Tensor out(a->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[i] = 1.0f / (1.0f + std::exp(-a->value.data[i]));
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      float y = n.value.data[i];
      p.grad.data[i] += n.grad.data[i] * y * (1.0f - y);
    }
  });
}

Var gelu(const Var& a) {
  // tanh approximation
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  Tensor out(a->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i) {
    float x = a->value.data[i];
    out.data[i] = 0.5f * x * (1.0f + std::tanh(kC * (x + kA * x * x * x)));
  }
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      float x = p.value.data[i];
      float u = kC * (x + kA * x * x * x);
      float t = std::tanh(u);
      float du = kC * (1.0f + 3.0f * kA * x * x);
      float d = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
      p.grad.data[i] += n.grad.data[i] * d;
    }
  });
}

// ---------------- linear algebra ----------------

Var matmul(const Var& a, const Var& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 ||
      a->value.dim(1) != b->value.dim(0))
    throw ShapeError("matmul: incompatible " + a->value.shape_str() + " x " +
                     b->value.shape_str());
  int64_t m = a->value.dim(0), k = a->value.dim(1), nn = b->value.dim(1);
  Tensor out({m, nn});
  MatMap(out.data.data(), m, nn) =
      ConstMatMap(a->value.data.data(), m, k) *
      ConstMatMap(b->value.data.data(), k, nn);
  return make_op(std::move(out), {a, b}, [m, k, nn](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    ConstMatMap dy(n.grad.data.data(), m, nn);
    if (pa.requires_grad) {
      pa.ensure_grad();
      MatMap(pa.grad.data.data(), m, k) +=
          dy * ConstMatMap(pb.value.data.data(), k, nn).transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      MatMap(pb.grad.data.data(), k, nn) +=
          ConstMatMap(pa.value.data.data(), m, k).transpose() * dy;
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 ||
      a->value.dim(1) != b->value.dim(1))
    throw ShapeError("matmul_nt: incompatible " + a->value.shape_str() + " x " +
                     b->value.shape_str() + "^T");
  int64_t m = a->value.dim(0), k = a->value.dim(1), nn = b->value.dim(0);
  Tensor out({m, nn});
  MatMap(out.data.data(), m, nn) =
      ConstMatMap(a->value.data.data(), m, k) *
      ConstMatMap(b->value.data.data(), nn, k).transpose();
  return make_op(std::move(out), {a, b}, [m, k, nn](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    ConstMatMap dy(n.grad.data.data(), m, nn);
    if (pa.requires_grad) {
      pa.ensure_grad();
      MatMap(pa.grad.data.data(), m, k) +=
          dy * ConstMatMap(pb.value.data.data(), nn, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      MatMap(pb.grad.data.data(), nn, k) +=
          dy.transpose() * ConstMatMap(pa.value.data.data(), m, k);
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x->value.ndim() != 2 || w->value.ndim() != 2 ||
      x->value.dim(1) != w->value.dim(1))
    throw ShapeError("linear: incompatible " + x->value.shape_str() + " with " +
                     w->value.shape_str());
  int64_t n = x->value.dim(0), in = x->value.dim(1), out_dim = w->value.dim(0);
  if (b->value.numel() != out_dim) throw ShapeError("linear: bad bias length");
  Tensor out({n, out_dim});
  MatMap y(out.data.data(), n, out_dim);
  y = ConstMatMap(x->value.data.data(), n, in) *
      ConstMatMap(w->value.data.data(), out_dim, in).transpose();
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < out_dim; ++c)
      out.data[r * out_dim + c] += b->value.data[c];
  return make_op(std::move(out), {x, w, b}, [n, in, out_dim](Node& node) {
    Node& px = *node.parents[0];
    Node& pw = *node.parents[1];
    Node& pb = *node.parents[2];
    ConstMatMap dy(node.grad.data.data(), n, out_dim);
    if (px.requires_grad) {
      px.ensure_grad();
      MatMap(px.grad.data.data(), n, in) +=
          dy * ConstMatMap(pw.value.data.data(), out_dim, in);
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      MatMap(pw.grad.data.data(), out_dim, in) +=
          dy.transpose() * ConstMatMap(px.value.data.data(), n, in);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < out_dim; ++c)
          pb.grad.data[c] += node.grad.data[r * out_dim + c];
    }
  });
}

namespace {
Var bmm_impl(const Var& a, const Var& b, bool transpose_b) {
  if (a->value.ndim() != 3 || b->value.ndim() != 3 ||
      a->value.dim(0) != b->value.dim(0))
    throw ShapeError("bmm: need matching 3-D batches");
  int64_t bs = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2);
  int64_t nn = transpose_b ? b->value.dim(1) : b->value.dim(2);
  int64_t bk = transpose_b ? b->value.dim(2) : b->value.dim(1);
  if (bk != k) throw ShapeError("bmm: inner dimension mismatch");
  Tensor out({bs, m, nn});
  for (int64_t i = 0; i < bs; ++i) {
    ConstMatMap A(a->value.data.data() + i * m * k, m, k);
    MatMap Y(out.data.data() + i * m * nn, m, nn);
    if (transpose_b)
      Y = A * ConstMatMap(b->value.data.data() + i * nn * k, nn, k).transpose();
    else
      Y = A * ConstMatMap(b->value.data.data() + i * k * nn, k, nn);
  }
  return make_op(std::move(out), {a, b}, [bs, m, k, nn, transpose_b](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int64_t i = 0; i < bs; ++i) {
      ConstMatMap dy(n.grad.data.data() + i * m * nn, m, nn);
      ConstMatMap A(pa.value.data.data() + i * m * k, m, k);
      if (transpose_b) {
        ConstMatMap B(pb.value.data.data() + i * nn * k, nn, k);
        if (pa.requires_grad)
          MatMap(pa.grad.data.data() + i * m * k, m, k) += dy * B;
        if (pb.requires_grad)
          MatMap(pb.grad.data.data() + i * nn * k, nn, k) += dy.transpose() * A;
      } else {
        ConstMatMap B(pb.value.data.data() + i * k * nn, k, nn);
        if (pa.requires_grad)
          MatMap(pa.grad.data.data() + i * m * k, m, k) += dy * B.transpose();
        if (pb.requires_grad)
          MatMap(pb.grad.data.data() + i * k * nn, k, nn) += A.transpose() * dy;
      }
    }
  });
}
}  // namespace

Var bmm(const Var& a, const Var& b) { return bmm_impl(a, b, false); }
Var bmm_nt(const Var& a, const Var& b) { return bmm_impl(a, b, true); }

// ---------------- convolution ----------------

namespace {
struct ConvDims {
  int64_t n, c, h, w, o, k, oh, ow;
  int stride, pad;
};

void im2col(const float* x, const ConvDims& d, float* col) {
  // col: [c*k*k, oh*ow]
  for (int64_t ch = 0; ch < d.c; ++ch)
    for (int64_t ky = 0; ky < d.k; ++ky)
      for (int64_t kx = 0; kx < d.k; ++kx) {
        int64_t row = (ch * d.k + ky) * d.k + kx;
        for (int64_t oy = 0; oy < d.oh; ++oy) {
          int64_t iy = oy * d.stride + ky - d.pad;
          for (int64_t ox = 0; ox < d.ow; ++ox) {
            int64_t ix = ox * d.stride + kx - d.pad;
            float v = 0.0f;
            if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
              v = x[(ch * d.h + iy) * d.w + ix];
            col[row * (d.oh * d.ow) + oy * d.ow + ox] = v;
          }
        }
      }
}

void col2im_add(const float* col, const ConvDims& d, float* dx) {
  for (int64_t ch = 0; ch < d.c; ++ch)
    for (int64_t ky = 0; ky < d.k; ++ky)
      for (int64_t kx = 0; kx < d.k; ++kx) {
        int64_t row = (ch * d.k + ky) * d.k + kx;
        for (int64_t oy = 0; oy < d.oh; ++oy) {
          int64_t iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.h) continue;
          for (int64_t ox = 0; ox < d.ow; ++ox) {
            int64_t ix = ox * d.stride + kx - d.pad;
            if (ix < 0 || ix >= d.w) continue;
            dx[(ch * d.h + iy) * d.w + ix] +=
                col[row * (d.oh * d.ow) + oy * d.ow + ox];
          }
        }
      }
}
}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  if (x->value.ndim() != 4 || w->value.ndim() != 4)
    throw ShapeError("conv2d: expected NCHW input and OCkk weights");
  ConvDims d;
  d.n = x->value.dim(0);
  d.c = x->value.dim(1);
  d.h = x->value.dim(2);
  d.w = x->value.dim(3);
  d.o = w->value.dim(0);
  d.k = w->value.dim(2);
  d.stride = stride;
  d.pad = pad;
  if (w->value.dim(1) != d.c || w->value.dim(3) != d.k)
    throw ShapeError("conv2d: weight shape " + w->value.shape_str() +
                     " incompatible with input " + x->value.shape_str());
  d.oh = (d.h + 2 * pad - d.k) / stride + 1;
  d.ow = (d.w + 2 * pad - d.k) / stride + 1;
  if (d.oh <= 0 || d.ow <= 0) throw ShapeError("conv2d: output collapses");

  int64_t ck2 = d.c * d.k * d.k, spatial = d.oh * d.ow;
  Tensor out({d.n, d.o, d.oh, d.ow});
  std::vector<float> col(static_cast<size_t>(ck2) * spatial);
  for (int64_t i = 0; i < d.n; ++i) {
    im2col(x->value.data.data() + i * d.c * d.h * d.w, d, col.data());
    MatMap y(out.data.data() + i * d.o * spatial, d.o, spatial);
    y = ConstMatMap(w->value.data.data(), d.o, ck2) *
        ConstMatMap(col.data(), ck2, spatial);
    for (int64_t oc = 0; oc < d.o; ++oc)
      for (int64_t s = 0; s < spatial; ++s)
        out.data[(i * d.o + oc) * spatial + s] += b->value.data[oc];
  }

  return make_op(std::move(out), {x, w, b}, [d, ck2, spatial](Node& n) {
    Node& px = *n.parents[0];
    Node& pw = *n.parents[1];
    Node& pb = *n.parents[2];
    if (px.requires_grad) px.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    std::vector<float> col(static_cast<size_t>(ck2) * spatial);
    std::vector<float> dcol(col.size());
    for (int64_t i = 0; i < d.n; ++i) {
      ConstMatMap dy(n.grad.data.data() + i * d.o * spatial, d.o, spatial);
      if (pw.requires_grad || px.requires_grad)
        im2col(px.value.data.data() + i * d.c * d.h * d.w, d, col.data());
      if (pw.requires_grad)
        MatMap(pw.grad.data.data(), d.o, ck2) +=
            dy * ConstMatMap(col.data(), ck2, spatial).transpose();
      if (px.requires_grad) {
        MatMap(dcol.data(), ck2, spatial) =
            ConstMatMap(pw.value.data.data(), d.o, ck2).transpose() * dy;
        col2im_add(dcol.data(), d,
                   px.grad.data.data() + i * d.c * d.h * d.w);
      }
      if (pb.requires_grad)
        for (int64_t oc = 0; oc < d.o; ++oc)
          for (int64_t s = 0; s < spatial; ++s)
            pb.grad.data[oc] += n.grad.data[(i * d.o + oc) * spatial + s];
    }
  });
}

// ---------------- reductions / shape ----------------

Var reshape(const Var& x, std::vector<int64_t> shape) {
  if (Tensor::numel_of(shape) != x->value.numel())
    throw ShapeError("reshape: element count mismatch");
  Tensor out(std::move(shape), x->value.data);
  return make_op(std::move(out), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      p.grad.data[i] += n.grad.data[i];
  });
}

Var gather(const Var& x, std::shared_ptr<std::vector<int64_t>> index,
           std::vector<int64_t> out_shape) {
  if (Tensor::numel_of(out_shape) != static_cast<int64_t>(index->size()))
    throw ShapeError("gather: index size does not match output shape");
  Tensor out(std::move(out_shape));
  for (size_t i = 0; i < index->size(); ++i)
    out.data[i] = x->value.data[static_cast<size_t>((*index)[i])];
  return make_op(std::move(out), {x}, [index](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < index->size(); ++i)
      p.grad.data[static_cast<size_t>((*index)[i])] += n.grad.data[i];
  });
}

Var concat_last(const Var& a, const Var& b) {
  if (a->value.ndim() != b->value.ndim())
    throw ShapeError("concat_last: rank mismatch");
  int nd = a->value.ndim();
  for (int i = 0; i < nd - 1; ++i)
    if (a->value.dim(i) != b->value.dim(i))
      throw ShapeError("concat_last: leading shape mismatch");
  int64_t da = a->value.dim(nd - 1), db = b->value.dim(nd - 1);
  int64_t rows = a->value.numel() / da;
  std::vector<int64_t> shape = a->value.shape;
  shape.back() = da + db;
  Tensor out(std::move(shape));
  for (int64_t r = 0; r < rows; ++r) {
    std::copy_n(a->value.data.begin() + r * da, da,
                out.data.begin() + r * (da + db));
    std::copy_n(b->value.data.begin() + r * db, db,
                out.data.begin() + r * (da + db) + da);
  }
  return make_op(std::move(out), {a, b}, [rows, da, db](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      if (pa.requires_grad)
        for (int64_t i = 0; i < da; ++i)
          pa.grad.data[r * da + i] += n.grad.data[r * (da + db) + i];
      if (pb.requires_grad)
        for (int64_t i = 0; i < db; ++i)
          pb.grad.data[r * db + i] += n.grad.data[r * (da + db) + da + i];
    }
  });
}

Var channel_mean(const Var& x) {
  if (x->value.ndim() != 4) throw ShapeError("channel_mean: expected NCHW");
  int64_t n = x->value.dim(0), c = x->value.dim(1);
  int64_t hw = x->value.dim(2) * x->value.dim(3);
  Tensor out({n, 1, x->value.dim(2), x->value.dim(3)});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t s = 0; s < hw; ++s) {
      float acc = 0.0f;
      for (int64_t ch = 0; ch < c; ++ch)
        acc += x->value.data[(i * c + ch) * hw + s];
      out.data[i * hw + s] = acc / static_cast<float>(c);
    }
  return make_op(std::move(out), {x}, [n, c, hw](Node& node) {
    Node& p = *node.parents[0];
    p.ensure_grad();
    float inv = 1.0f / static_cast<float>(c);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < hw; ++s) {
        float g = node.grad.data[i * hw + s] * inv;
        for (int64_t ch = 0; ch < c; ++ch)
          p.grad.data[(i * c + ch) * hw + s] += g;
      }
  });
}

Var channel_max(const Var& x) {
  if (x->value.ndim() != 4) throw ShapeError("channel_max: expected NCHW");
  int64_t n = x->value.dim(0), c = x->value.dim(1);
  int64_t hw = x->value.dim(2) * x->value.dim(3);
  Tensor out({n, 1, x->value.dim(2), x->value.dim(3)});
  auto argmax = std::make_shared<std::vector<int32_t>>(
      static_cast<size_t>(n * hw));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t s = 0; s < hw; ++s) {
      float best = x->value.data[i * c * hw + s];
      int32_t bi = 0;
      for (int64_t ch = 1; ch < c; ++ch) {
        float v = x->value.data[(i * c + ch) * hw + s];
        if (v > best) {
          best = v;
          bi = static_cast<int32_t>(ch);
        }
      }
      out.data[i * hw + s] = best;
      (*argmax)[static_cast<size_t>(i * hw + s)] = bi;
    }
  return make_op(std::move(out), {x}, [n, c, hw, argmax](Node& node) {
    Node& p = *node.parents[0];
    p.ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < hw; ++s) {
        int64_t ch = (*argmax)[static_cast<size_t>(i * hw + s)];
        p.grad.data[(i * c + ch) * hw + s] += node.grad.data[i * hw + s];
      }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  if (a->value.ndim() != 4 || b->value.ndim() != 4 ||
      a->value.dim(0) != b->value.dim(0) || a->value.dim(2) != b->value.dim(2) ||
      a->value.dim(3) != b->value.dim(3))
    throw ShapeError("concat_channels: incompatible shapes");
  int64_t n = a->value.dim(0), ca = a->value.dim(1), cb = b->value.dim(1);
  int64_t hw = a->value.dim(2) * a->value.dim(3);
  Tensor out({n, ca + cb, a->value.dim(2), a->value.dim(3)});
  for (int64_t i = 0; i < n; ++i) {
    std::copy_n(a->value.data.begin() + i * ca * hw, ca * hw,
                out.data.begin() + i * (ca + cb) * hw);
    std::copy_n(b->value.data.begin() + i * cb * hw, cb * hw,
                out.data.begin() + i * (ca + cb) * hw + ca * hw);
  }
  return make_op(std::move(out), {a, b}, [n, ca, cb, hw](Node& node) {
    Node& pa = *node.parents[0];
    Node& pb = *node.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      if (pa.requires_grad)
        for (int64_t j = 0; j < ca * hw; ++j)
          pa.grad.data[i * ca * hw + j] +=
              node.grad.data[i * (ca + cb) * hw + j];
      if (pb.requires_grad)
        for (int64_t j = 0; j < cb * hw; ++j)
          pb.grad.data[i * cb * hw + j] +=
              node.grad.data[i * (ca + cb) * hw + ca * hw + j];
    }
  });
}

Var broadcast_mul_channel(const Var& fmap, const Var& amap) {
  if (fmap->value.ndim() != 4 || amap->value.ndim() != 4 ||
      amap->value.dim(1) != 1 || fmap->value.dim(0) != amap->value.dim(0) ||
      fmap->value.dim(2) != amap->value.dim(2) ||
      fmap->value.dim(3) != amap->value.dim(3))
    throw ShapeError("broadcast_mul_channel: incompatible shapes");
  int64_t n = fmap->value.dim(0), c = fmap->value.dim(1);
  int64_t hw = fmap->value.dim(2) * fmap->value.dim(3);
  Tensor out(fmap->value.shape);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t s = 0; s < hw; ++s)
        out.data[(i * c + ch) * hw + s] =
            fmap->value.data[(i * c + ch) * hw + s] *
            amap->value.data[i * hw + s];
  return make_op(std::move(out), {fmap, amap}, [n, c, hw](Node& node) {
    Node& pf = *node.parents[0];
    Node& pa = *node.parents[1];
    if (pf.requires_grad) pf.ensure_grad();
    if (pa.requires_grad) pa.ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t s = 0; s < hw; ++s) {
          int64_t fi = (i * c + ch) * hw + s;
          float g = node.grad.data[fi];
          if (pf.requires_grad)
            pf.grad.data[fi] += g * pa.value.data[i * hw + s];
          if (pa.requires_grad)
            pa.grad.data[i * hw + s] += g * pf.value.data[fi];
        }
  });
}

Var global_avg_pool(const Var& x) {
  if (x->value.ndim() != 4) throw ShapeError("global_avg_pool: expected NCHW");
  int64_t n = x->value.dim(0), c = x->value.dim(1);
  int64_t hw = x->value.dim(2) * x->value.dim(3);
  Tensor out({n, c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      float acc = 0.0f;
      for (int64_t s = 0; s < hw; ++s)
        acc += x->value.data[(i * c + ch) * hw + s];
      out.data[i * c + ch] = acc / static_cast<float>(hw);
    }
  return make_op(std::move(out), {x}, [n, c, hw](Node& node) {
    Node& p = *node.parents[0];
    p.ensure_grad();
    float inv = 1.0f / static_cast<float>(hw);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        float g = node.grad.data[i * c + ch] * inv;
        for (int64_t s = 0; s < hw; ++s)
          p.grad.data[(i * c + ch) * hw + s] += g;
      }
  });
}

Var mean_axis1(const Var& x) {
  if (x->value.ndim() != 3) throw ShapeError("mean_axis1: expected [N,T,D]");
  int64_t n = x->value.dim(0), t = x->value.dim(1), d = x->value.dim(2);
  Tensor out({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) {
      float acc = 0.0f;
      for (int64_t tt = 0; tt < t; ++tt)
        acc += x->value.data[(i * t + tt) * d + j];
      out.data[i * d + j] = acc / static_cast<float>(t);
    }
  return make_op(std::move(out), {x}, [n, t, d](Node& node) {
    Node& p = *node.parents[0];
    p.ensure_grad();
    float inv = 1.0f / static_cast<float>(t);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) {
        float g = node.grad.data[i * d + j] * inv;
        for (int64_t tt = 0; tt < t; ++tt)
          p.grad.data[(i * t + tt) * d + j] += g;
      }
  });
}

Var sum_all(const Var& x) {
  Tensor out({1});
  double acc = 0.0;
  for (float v : x->value.data) acc += v;
  out.data[0] = static_cast<float>(acc);
  return make_op(std::move(out), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (auto& g : p.grad.data) g += n.grad.data[0];
  });
}

// ---------------- normalization / attention ----------------

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  int64_t d = x->value.dim(x->value.ndim() - 1);
  if (gamma->value.numel() != d || beta->value.numel() != d)
    throw ShapeError("layer_norm: gamma/beta length mismatch");
  int64_t rows = x->value.numel() / d;
  Tensor out(x->value.shape);
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
  auto xhat = std::make_shared<std::vector<float>>(x->value.data.size());
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x->value.data.data() + r * d;
    double mean = 0.0;
    for (int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      double dv = xr[i] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[static_cast<size_t>(r)] = is;
    for (int64_t i = 0; i < d; ++i) {
      float xh = (xr[i] - static_cast<float>(mean)) * is;
      (*xhat)[static_cast<size_t>(r * d + i)] = xh;
      out.data[r * d + i] = gamma->value.data[i] * xh + beta->value.data[i];
    }
  }
  return make_op(std::move(out), {x, gamma, beta},
                 [rows, d, inv_std, xhat](Node& n) {
    Node& px = *n.parents[0];
    Node& pg = *n.parents[1];
    Node& pb = *n.parents[2];
    if (px.requires_grad) px.ensure_grad();
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const float* dy = n.grad.data.data() + r * d;
      const float* xh = xhat->data() + r * d;
      if (pg.requires_grad || pb.requires_grad) {
        for (int64_t i = 0; i < d; ++i) {
          if (pg.requires_grad) pg.grad.data[i] += dy[i] * xh[i];
          if (pb.requires_grad) pb.grad.data[i] += dy[i];
        }
      }
      if (px.requires_grad) {
        float is = (*inv_std)[static_cast<size_t>(r)];
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int64_t i = 0; i < d; ++i) {
          float dxh = dy[i] * pg.value.data[i];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh[i];
        }
        float m1 = static_cast<float>(sum_dxh / d);
        float m2 = static_cast<float>(sum_dxh_xh / d);
        for (int64_t i = 0; i < d; ++i) {
          float dxh = dy[i] * pg.value.data[i];
          px.grad.data[r * d + i] += is * (dxh - m1 - xh[i] * m2);
        }
      }
    }
  });
}

Var softmax_last(const Var& x) {
  int64_t d = x->value.dim(x->value.ndim() - 1);
  int64_t rows = x->value.numel() / d;
  Tensor out(x->value.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x->value.data.data() + r * d;
    float mx = xr[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, xr[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      float e = std::exp(xr[i] - mx);
      out.data[r * d + i] = e;
      sum += e;
    }
    float inv = static_cast<float>(1.0 / sum);
    for (int64_t i = 0; i < d; ++i) out.data[r * d + i] *= inv;
  }
  return make_op(std::move(out), {x}, [rows, d](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const float* y = n.value.data.data() + r * d;
      const float* dy = n.grad.data.data() + r * d;
      double dot = 0.0;
      for (int64_t i = 0; i < d; ++i) dot += dy[i] * y[i];
      for (int64_t i = 0; i < d; ++i)
        p.grad.data[r * d + i] += y[i] * (dy[i] - static_cast<float>(dot));
    }
  });
}

Var l2_normalize_rows(const Var& x, float eps) {
  if (x->value.ndim() != 2) throw ShapeError("l2_normalize_rows: expected [N,D]");
  int64_t n = x->value.dim(0), d = x->value.dim(1);
  Tensor out(x->value.shape);
  auto norms = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      float v = x->value.data[r * d + i];
      s += static_cast<double>(v) * v;
    }
    float norm = static_cast<float>(std::sqrt(s));
    if (norm < eps)
      throw DegenerateInputError("l2_normalize_rows: zero-norm row");
    (*norms)[static_cast<size_t>(r)] = norm;
    float inv = 1.0f / norm;
    for (int64_t i = 0; i < d; ++i)
      out.data[r * d + i] = x->value.data[r * d + i] * inv;
  }
  return make_op(std::move(out), {x}, [n, d, norms](Node& node) {
    Node& p = *node.parents[0];
    p.ensure_grad();
    for (int64_t r = 0; r < n; ++r) {
      const float* y = node.value.data.data() + r * d;
      const float* dy = node.grad.data.data() + r * d;
      double dot = 0.0;
      for (int64_t i = 0; i < d; ++i) dot += dy[i] * y[i];
      float inv = 1.0f / (*norms)[static_cast<size_t>(r)];
      for (int64_t i = 0; i < d; ++i)
        p.grad.data[r * d + i] +=
            inv * (dy[i] - y[i] * static_cast<float>(dot));
    }
  });
}

Var add_constant(const Var& x, Tensor mask) {
  if (!x->value.same_shape(mask))
    throw ShapeError("add_constant: shape mismatch");
  Tensor out(x->value.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[i] = x->value.data[i] + mask.data[i];
  return make_op(std::move(out), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) p.grad.data[i] += n.grad.data[i];
  });
}

// ---------------- regularization / loss ----------------

Var dropout(const Var& x, float rate, Rng& rng, bool active) {
  if (!active || rate <= 0.0f) return x;
  float keep = 1.0f - rate;
  auto mask = std::make_shared<std::vector<float>>(x->value.data.size());
  Tensor out(x->value.shape);
  float inv_keep = 1.0f / keep;
  for (size_t i = 0; i < out.data.size(); ++i) {
    float m = (rng.uniform() < keep) ? inv_keep : 0.0f;
    (*mask)[i] = m;
    out.data[i] = x->value.data[i] * m;
  }
  return make_op(std::move(out), {x}, [mask](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < mask->size(); ++i)
      p.grad.data[i] += n.grad.data[i] * (*mask)[i];
  });
}

Var cross_entropy_mean(const Var& logits, const std::vector<int>& labels) {
  if (logits->value.ndim() != 2) throw ShapeError("cross_entropy: expected [N,K]");
  int64_t n = logits->value.dim(0), k = logits->value.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw ShapeError("cross_entropy: label count mismatch");
  auto probs = std::make_shared<std::vector<float>>(logits->value.data.size());
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const float* lr = logits->value.data.data() + r * k;
    float mx = lr[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, lr[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < k; ++i) sum += std::exp(static_cast<double>(lr[i]) - mx);
    double lse = mx + std::log(sum);
    total += lse - lr[labels[static_cast<size_t>(r)]];
    for (int64_t i = 0; i < k; ++i)
      (*probs)[static_cast<size_t>(r * k + i)] =
          static_cast<float>(std::exp(lr[i] - lse));
  }
  Tensor out({1});
  out.data[0] = static_cast<float>(total / static_cast<double>(n));
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return make_op(std::move(out), {logits}, [n, k, probs, labels_copy](Node& node) {
    Node& p = *node.parents[0];
    p.ensure_grad();
    float g = node.grad.data[0] / static_cast<float>(n);
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t i = 0; i < k; ++i)
        p.grad.data[r * k + i] += g * (*probs)[static_cast<size_t>(r * k + i)];
      p.grad.data[r * k + (*labels_copy)[static_cast<size_t>(r)]] -= g;
    }
  });
}

Var arcface_margin(const Var& cosines, const std::vector<int>& labels,
                   float margin) {
  if (cosines->value.ndim() != 2) throw ShapeError("arcface_margin: expected [N,K]");
  int64_t n = cosines->value.dim(0), k = cosines->value.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw ShapeError("arcface_margin: label count mismatch");
  constexpr float kEps = 1e-7f;
  float cos_m = std::cos(margin), sin_m = std::sin(margin);
  Tensor out = cosines->value;
  auto deriv = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    int64_t j = labels[static_cast<size_t>(r)];
    // Epsilon guard only where division / acos need it; the cos(theta+m)
    // expansion itself uses the unshrunk cosine so exactly-parallel vectors
    // keep their s*cos(m) logit.
    float c = std::clamp(out.data[r * k + j], -1.0f, 1.0f);
    float cg = std::clamp(c, -1.0f + kEps, 1.0f - kEps);
    float theta = std::acos(cg);
    if (theta + margin <= static_cast<float>(M_PI)) {
      float s = std::sqrt(std::max(0.0f, 1.0f - c * c));
      out.data[r * k + j] = c * cos_m - s * sin_m;
      (*deriv)[static_cast<size_t>(r)] =
          cos_m + cg / std::sqrt(1.0f - cg * cg) * sin_m;
    } else {
      // linear surrogate keeps the logit monotone past the wrap-around
      out.data[r * k + j] = c - margin * sin_m;
      (*deriv)[static_cast<size_t>(r)] = 1.0f;
    }
  }
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return make_op(std::move(out), {cosines}, [n, k, deriv, labels_copy](Node& node) {
    Node& p = *node.parents[0];
    p.ensure_grad();
    for (int64_t r = 0; r < n; ++r) {
      int64_t j = (*labels_copy)[static_cast<size_t>(r)];
      for (int64_t i = 0; i < k; ++i) {
        float d = (i == j) ? (*deriv)[static_cast<size_t>(r)] : 1.0f;
        p.grad.data[r * k + i] += node.grad.data[r * k + i] * d;
      }
    }
  });
}

Tensor truncated_normal_init(std::vector<int64_t> shape, double sigma, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.truncated_normal(sigma));
  return t;
}

}  // namespace lpf::nn
