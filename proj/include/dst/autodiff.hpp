// Define-by-run reverse-mode differentiation. A Tape records every op
// executed through it; ops return Value handles into the tape. The tape
// is rebuilt each forward pass, which lets gate decisions change the
// graph topology per batch.
#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dst/tensor.hpp"

namespace dst {

class Tape;

struct Value {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation during backward
    bool requires_grad = false;
    bool grad_alloc = false;
    const char* op = "leaf";
    std::function<void(Tape&, const Node&)> backward;  // empty for leaves
  };

  Value leaf(Tensor t, bool requires_grad = false) {
    Node n;
    n.value = std::move(t);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  Value constant(Tensor t) { return leaf(std::move(t), false); }

  // Op factory. requires_grad of the result is inherited from parents;
  // the backward closure is dropped when nothing upstream needs grads.
  Value record(const char* op, Tensor value, std::initializer_list<Value> parents,
               std::function<void(Tape&, const Node&)> backward) {
    bool rg = false;
    for (const Value& p : parents) {
      if (p.tape != this) throw std::logic_error(std::string(op) + ": input from a different tape");
      rg = rg || nodes_[static_cast<size_t>(p.id)].requires_grad;
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.op = op;
    if (rg) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& val(Value v) const { return nodes_.at(static_cast<size_t>(v.id)).value; }
  bool requires_grad(Value v) const { return nodes_.at(static_cast<size_t>(v.id)).requires_grad; }

  // Accumulate into a node's grad buffer. No-op for nodes that do not
  // require grad, so constants (e.g. target outputs) stay sealed off.
  void accum(Value v, const Tensor& g) {
    Node& n = nodes_.at(static_cast<size_t>(v.id));
    if (!n.requires_grad) return;
    if (!n.grad_alloc) {
      n.grad = Tensor::zeros(n.value.shape);
      n.grad_alloc = true;
    }
    if (!n.grad.same_shape(g)) fail_shape("grad accumulation", n.grad, g);
    for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
  }

  void backward(Value loss) {
    if (loss.tape != this) throw std::logic_error("backward: loss lives on a different tape");
    Node& ln = nodes_.at(static_cast<size_t>(loss.id));
    if (ln.value.numel() != 1)
      throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                  shape_str(ln.value.shape));
    if (!ln.requires_grad)
      throw std::invalid_argument("backward: loss is detached (no grad path to any parameter)");
    accum(loss, Tensor::ones(ln.value.shape));
    // creation order is topological, so one reverse sweep suffices
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.grad_alloc && n.backward) n.backward(*this, n);
    }
  }

  // Grad of a leaf (or any node) after backward; zeros if untouched.
  Tensor grad(Value v) const {
    const Node& n = nodes_.at(static_cast<size_t>(v.id));
    if (!n.grad_alloc) return Tensor::zeros(n.value.shape);
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }
  void reset() { nodes_.clear(); }

 private:
  // deque keeps val() references stable while later ops are recorded
  std::deque<Node> nodes_;
};

namespace ops {

constexpr double kLogEps = 1e-12;  // floor for log and division

inline Tape& tp(Value v) { return *v.tape; }

// ---- elementwise ----

inline Value add(Value a, Value b) {
  const Tensor &av = tp(a).val(a), &bv = tp(b).val(b);
  if (!av.same_shape(bv)) fail_shape("add", av, bv);
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  return tp(a).record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tape::Node& n) {
    t.accum(a, n.grad);
    t.accum(b, n.grad);
  });
}

inline Value sub(Value a, Value b) {
  const Tensor &av = tp(a).val(a), &bv = tp(b).val(b);
  if (!av.same_shape(bv)) fail_shape("sub", av, bv);
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
  return tp(a).record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tape::Node& n) {
    t.accum(a, n.grad);
    Tensor ng = n.grad;
    for (auto& v : ng.data) v = -v;
    t.accum(b, ng);
  });
}

inline Value mul(Value a, Value b) {
  const Tensor &av = tp(a).val(a), &bv = tp(b).val(b);
  if (!av.same_shape(bv)) fail_shape("mul", av, bv);
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  return tp(a).record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tape::Node& n) {
    const Tensor &av2 = t.val(a), &bv2 = t.val(b);
    Tensor ga = n.grad, gb = n.grad;
    for (size_t i = 0; i < ga.data.size(); ++i) {
      ga.data[i] *= bv2.data[i];
      gb.data[i] *= av2.data[i];
    }
    t.accum(a, ga);
    t.accum(b, gb);
  });
}

inline Value scale(Value a, double c) {
  Tensor out = tp(a).val(a);
  for (auto& v : out.data) v *= c;
  return tp(a).record("scale", std::move(out), {a}, [a, c](Tape& t, const Tape::Node& n) {
    Tensor g = n.grad;
    for (auto& v : g.data) v *= c;
    t.accum(a, g);
  });
}

inline Value neg(Value a) { return scale(a, -1.0); }

inline Value add_scalar(Value a, double c) {
  Tensor out = tp(a).val(a);
  for (auto& v : out.data) v += c;
  return tp(a).record("add_scalar", std::move(out), {a},
                      [a](Tape& t, const Tape::Node& n) { t.accum(a, n.grad); });
}

inline Value relu(Value a) {
  Tensor out = tp(a).val(a);
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return tp(a).record("relu", std::move(out), {a}, [a](Tape& t, const Tape::Node& n) {
    const Tensor& av = t.val(a);
    Tensor g = n.grad;
    for (size_t i = 0; i < g.data.size(); ++i)
      if (av.data[i] <= 0.0) g.data[i] = 0.0;
    t.accum(a, g);
  });
}

inline Value sigmoid(Value a) {
  Tensor out = tp(a).val(a);
  for (auto& v : out.data) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return tp(a).record("sigmoid", std::move(out), {a}, [a](Tape& t, const Tape::Node& n) {
    Tensor g = n.grad;
    for (size_t i = 0; i < g.data.size(); ++i) {
      double s = n.value.data[i];
      g.data[i] *= s * (1.0 - s);
    }
    t.accum(a, g);
  });
}

inline Value tanh_op(Value a) {
  Tensor out = tp(a).val(a);
  for (auto& v : out.data) v = std::tanh(v);
  return tp(a).record("tanh", std::move(out), {a}, [a](Tape& t, const Tape::Node& n) {
    Tensor g = n.grad;
    for (size_t i = 0; i < g.data.size(); ++i) {
      double y = n.value.data[i];
      g.data[i] *= 1.0 - y * y;
    }
    t.accum(a, g);
  });
}

// log with a floor epsilon; inputs below the floor get zero gradient
// (the output is constant there).
inline Value log_eps(Value a) {
  Tensor out = tp(a).val(a);
  for (auto& v : out.data) v = std::log(v > kLogEps ? v : kLogEps);
  return tp(a).record("log", std::move(out), {a}, [a](Tape& t, const Tape::Node& n) {
    const Tensor& av = t.val(a);
    Tensor g = n.grad;
    for (size_t i = 0; i < g.data.size(); ++i)
      g.data[i] = av.data[i] > kLogEps ? g.data[i] / av.data[i] : 0.0;
    t.accum(a, g);
  });
}

inline Value square(Value a) { return mul(a, a); }

// ---- matmul / dense ----

inline Value matmul(Value a, Value b) {
  const Tensor &av = tp(a).val(a), &bv = tp(b).val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0]) fail_shape("matmul", av, bv);
  int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t l = 0; l < k; ++l) {
      double x = av.data[static_cast<size_t>(i * k + l)];
      if (x == 0.0) continue;
      const double* brow = bv.data.data() + l * n;
      double* orow = out.data.data() + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  return tp(a).record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tape::Node& nd) {
    const Tensor &av2 = t.val(a), &bv2 = t.val(b);
    Tensor ga({m, k}), gb({k, n});
    // ga = g . b^T
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        double g = nd.grad.data[static_cast<size_t>(i * n + j)];
        if (g == 0.0) continue;
        for (int64_t l = 0; l < k; ++l)
          ga.data[static_cast<size_t>(i * k + l)] += g * bv2.data[static_cast<size_t>(l * n + j)];
      }
    // gb = a^T . g
    for (int64_t i = 0; i < m; ++i)
      for (int64_t l = 0; l < k; ++l) {
        double x = av2.data[static_cast<size_t>(i * k + l)];
        if (x == 0.0) continue;
        const double* grow = nd.grad.data.data() + i * n;
        double* brow = gb.data.data() + l * n;
        for (int64_t j = 0; j < n; ++j) brow[j] += x * grow[j];
      }
    t.accum(a, ga);
    t.accum(b, gb);
  });
}

// x: (B, N), bias: (N)
inline Value bias_add_rows(Value x, Value b) {
  const Tensor &xv = tp(x).val(x), &bv = tp(b).val(b);
  if (xv.rank() != 2 || bv.rank() != 1 || xv.shape[1] != bv.shape[0]) fail_shape("bias_add", xv, bv);
  int64_t rows = xv.shape[0], n = xv.shape[1];
  Tensor out = xv;
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < n; ++j) out.data[static_cast<size_t>(i * n + j)] += bv.data[static_cast<size_t>(j)];
  return tp(x).record("bias_add", std::move(out), {x, b}, [x, b, rows, n](Tape& t, const Tape::Node& nd) {
    t.accum(x, nd.grad);
    Tensor gb({n});
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < n; ++j) gb.data[static_cast<size_t>(j)] += nd.grad.data[static_cast<size_t>(i * n + j)];
    t.accum(b, gb);
  });
}

// x: (B, C, H, W), bias: (C)
inline Value bias_add_chw(Value x, Value b) {
  const Tensor &xv = tp(x).val(x), &bv = tp(b).val(b);
  if (xv.rank() != 4 || bv.rank() != 1 || xv.shape[1] != bv.shape[0]) fail_shape("bias_add_chw", xv, bv);
  int64_t bs = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  Tensor out = xv;
  for (int64_t i = 0; i < bs; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      double bb = bv.data[static_cast<size_t>(ch)];
      double* p = out.data.data() + (i * c + ch) * hw;
      for (int64_t j = 0; j < hw; ++j) p[j] += bb;
    }
  return tp(x).record("bias_add_chw", std::move(out), {x, b}, [x, b, bs, c, hw](Tape& t, const Tape::Node& nd) {
    t.accum(x, nd.grad);
    Tensor gb({c});
    for (int64_t i = 0; i < bs; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        const double* p = nd.grad.data.data() + (i * c + ch) * hw;
        double s = 0.0;
        for (int64_t j = 0; j < hw; ++j) s += p[j];
        gb.data[static_cast<size_t>(ch)] += s;
      }
    t.accum(b, gb);
  });
}

// ---- reductions / shape ----

inline Value sum_all(Value a) {
  const Tensor& av = tp(a).val(a);
  double s = 0.0;
  for (double v : av.data) s += v;
  return tp(a).record("sum", Tensor::scalar(s), {a}, [a](Tape& t, const Tape::Node& n) {
    t.accum(a, Tensor::full(t.val(a).shape, n.grad.data[0]));
  });
}

inline Value mean_all(Value a) {
  const Tensor& av = tp(a).val(a);
  double s = 0.0;
  for (double v : av.data) s += v;
  int64_t n = av.numel();
  return tp(a).record("mean", Tensor::scalar(s / static_cast<double>(n)), {a},
                      [a, n](Tape& t, const Tape::Node& nd) {
                        t.accum(a, Tensor::full(t.val(a).shape, nd.grad.data[0] / static_cast<double>(n)));
                      });
}

inline Value reshape(Value a, Shape s) {
  Tensor out = tp(a).val(a).reshaped(s);
  return tp(a).record("reshape", std::move(out), {a}, [a](Tape& t, const Tape::Node& n) {
    t.accum(a, n.grad.reshaped(t.val(a).shape));
  });
}

// row-wise softmax over the last axis, stabilized by max subtraction
inline Value softmax(Value a) {
  const Tensor& av = tp(a).val(a);
  if (av.rank() < 1) fail_shape("softmax", av, "rank >= 1");
  int64_t k = av.shape.back();
  int64_t rows = av.numel() / k;
  Tensor out = av;
  for (int64_t i = 0; i < rows; ++i) {
    double* p = out.data.data() + i * k;
    double mx = p[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, p[j]);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    for (int64_t j = 0; j < k; ++j) p[j] /= z;
  }
  return tp(a).record("softmax", std::move(out), {a}, [a, rows, k](Tape& t, const Tape::Node& n) {
    Tensor g(n.value.shape);
    for (int64_t i = 0; i < rows; ++i) {
      const double* s = n.value.data.data() + i * k;
      const double* go = n.grad.data.data() + i * k;
      double dot = 0.0;
      for (int64_t j = 0; j < k; ++j) dot += go[j] * s[j];
      double* gi = g.data.data() + i * k;
      for (int64_t j = 0; j < k; ++j) gi[j] = s[j] * (go[j] - dot);
    }
    t.accum(a, g);
  });
}

// pick one entry per row: x (B, K), idx (B) -> (B)
inline Value pick_rows(Value x, const std::vector<int64_t>& idx) {
  const Tensor& xv = tp(x).val(x);
  if (xv.rank() != 2 || static_cast<int64_t>(idx.size()) != xv.shape[0])
    fail_shape("pick_rows", xv, "(B, K) with B indices");
  int64_t k = xv.shape[1];
  Tensor out({xv.shape[0]});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= k) throw std::invalid_argument("pick_rows: class index out of range");
    out.data[i] = xv.data[i * static_cast<size_t>(k) + static_cast<size_t>(idx[i])];
  }
  return tp(x).record("pick_rows", std::move(out), {x}, [x, idx, k](Tape& t, const Tape::Node& n) {
    Tensor g = Tensor::zeros(t.val(x).shape);
    for (size_t i = 0; i < idx.size(); ++i)
      g.data[i * static_cast<size_t>(k) + static_cast<size_t>(idx[i])] = n.grad.data[i];
    t.accum(x, g);
  });
}

// scale each row of x (B, ...) by s (B)
inline Value row_scale(Value x, Value s) {
  const Tensor &xv = tp(x).val(x), &sv = tp(s).val(s);
  if (sv.rank() != 1 || xv.shape[0] != sv.shape[0]) fail_shape("row_scale", xv, sv);
  int64_t rows = sv.shape[0], per = xv.numel() / rows;
  Tensor out = xv;
  for (int64_t i = 0; i < rows; ++i) {
    double c = sv.data[static_cast<size_t>(i)];
    double* p = out.data.data() + i * per;
    for (int64_t j = 0; j < per; ++j) p[j] *= c;
  }
  return tp(x).record("row_scale", std::move(out), {x, s}, [x, s, rows, per](Tape& t, const Tape::Node& n) {
    const Tensor &xv2 = t.val(x), &sv2 = t.val(s);
    Tensor gx(xv2.shape), gs({rows});
    for (int64_t i = 0; i < rows; ++i) {
      double c = sv2.data[static_cast<size_t>(i)];
      const double* g = n.grad.data.data() + i * per;
      const double* xp = xv2.data.data() + i * per;
      double* gxp = gx.data.data() + i * per;
      double acc = 0.0;
      for (int64_t j = 0; j < per; ++j) {
        gxp[j] = g[j] * c;
        acc += g[j] * xp[j];
      }
      gs.data[static_cast<size_t>(i)] = acc;
    }
    t.accum(x, gx);
    t.accum(s, gs);
  });
}

// ---- gate primitives ----

// max(0, min(k*g + 1/2, 1)); gradient k strictly inside the ramp
inline Value hard_sigmoid(Value a, double k) {
  if (k <= 0.0) throw std::invalid_argument("hard_sigmoid: slope k must be positive");
  const Tensor& av = tp(a).val(a);
  Tensor out = av;
  for (auto& v : out.data) v = std::max(0.0, std::min(k * v + 0.5, 1.0));
  return tp(a).record("hard_sigmoid", std::move(out), {a}, [a, k](Tape& t, const Tape::Node& n) {
    const Tensor& av2 = t.val(a);
    Tensor g = n.grad;
    for (size_t i = 0; i < g.data.size(); ++i) {
      double pre = k * av2.data[i] + 0.5;
      g.data[i] = (pre > 0.0 && pre < 1.0) ? g.data[i] * k : 0.0;
    }
    t.accum(a, g);
  });
}

// forward: 1 if v >= 0.5 else 0; backward: straight-through (identity)
inline Value ste_binarize(Value a) {
  Tensor out = tp(a).val(a);
  for (auto& v : out.data) v = v >= 0.5 ? 1.0 : 0.0;
  return tp(a).record("ste_binarize", std::move(out), {a},
                      [a](Tape& t, const Tape::Node& n) { t.accum(a, n.grad); });
}

// ---- spatial ----

// x: (B, C, H, W) -> (B, C)
inline Value global_avg_pool(Value x) {
  const Tensor& xv = tp(x).val(x);
  if (xv.rank() != 4) fail_shape("global_avg_pool", xv, "(B, C, H, W)");
  int64_t b = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  Tensor out({b, c});
  for (int64_t i = 0; i < b * c; ++i) {
    const double* p = xv.data.data() + i * hw;
    double s = 0.0;
    for (int64_t j = 0; j < hw; ++j) s += p[j];
    out.data[static_cast<size_t>(i)] = s / static_cast<double>(hw);
  }
  return tp(x).record("global_avg_pool", std::move(out), {x}, [x, b, c, hw](Tape& t, const Tape::Node& n) {
    Tensor g(t.val(x).shape);
    for (int64_t i = 0; i < b * c; ++i) {
      double gv = n.grad.data[static_cast<size_t>(i)] / static_cast<double>(hw);
      double* p = g.data.data() + i * hw;
      for (int64_t j = 0; j < hw; ++j) p[j] = gv;
    }
    t.accum(x, g);
  });
}

// nearest-neighbor 2x upsample: (B, C, H, W) -> (B, C, 2H, 2W)
inline Value upsample_nearest2(Value x) {
  const Tensor& xv = tp(x).val(x);
  if (xv.rank() != 4) fail_shape("upsample_nearest2", xv, "(B, C, H, W)");
  int64_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  Tensor out({b, c, 2 * h, 2 * w});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xx = 0; xx < 2 * w; ++xx)
          out.at4(i, ch, y, xx) = xv.at4(i, ch, y / 2, xx / 2);
  return tp(x).record("upsample_nearest2", std::move(out), {x}, [x, b, c, h, w](Tape& t, const Tape::Node& n) {
    Tensor g({b, c, h, w});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < 2 * h; ++y)
          for (int64_t xx = 0; xx < 2 * w; ++xx)
            g.at4(i, ch, y / 2, xx / 2) += n.grad.at4(i, ch, y, xx);
    t.accum(x, g);
  });
}

namespace detail {

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// im2col: (C, H, W) sample -> (C*KH*KW, OH*OW) column matrix
inline void im2col(const double* img, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                   int64_t stride, int64_t pad, int64_t oh, int64_t ow, double* col) {
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t ky = 0; ky < kh; ++ky)
      for (int64_t kx = 0; kx < kw; ++kx) {
        double* dst = col + ((ch * kh + ky) * kw + kx) * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          int64_t iy = oy * stride + ky - pad;
          for (int64_t ox = 0; ox < ow; ++ox) {
            int64_t ix = ox * stride + kx - pad;
            dst[oy * ow + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    ? img[(ch * h + iy) * w + ix]
                                    : 0.0;
          }
        }
      }
}

inline void col2im(const double* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                   int64_t stride, int64_t pad, int64_t oh, int64_t ow, double* img) {
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t ky = 0; ky < kh; ++ky)
      for (int64_t kx = 0; kx < kw; ++kx) {
        const double* src = col + ((ch * kh + ky) * kw + kx) * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int64_t ox = 0; ox < ow; ++ox) {
            int64_t ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            img[(ch * h + iy) * w + ix] += src[oy * ow + ox];
          }
        }
      }
}

}  // namespace detail

// 2-D convolution via im2col + matmul. x: (B, IC, H, W), w: (OC, IC, KH, KW).
inline Value conv2d(Value x, Value w, int64_t stride, int64_t pad) {
  const Tensor &xv = tp(x).val(x), &wv = tp(w).val(w);
  if (xv.rank() != 4 || wv.rank() != 4) fail_shape("conv2d", xv, wv);
  if (xv.shape[1] != wv.shape[1]) fail_shape("conv2d (channels)", xv, wv);
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: unsupported stride/pad attrs");
  int64_t b = xv.shape[0], ic = xv.shape[1], h = xv.shape[2], wd = xv.shape[3];
  int64_t oc = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
  int64_t oh = detail::conv_out_extent(h, kh, stride, pad);
  int64_t ow = detail::conv_out_extent(wd, kw, stride, pad);
  if (oh <= 0 || ow <= 0) fail_shape("conv2d (kernel larger than padded input)", xv, wv);
  int64_t ck = ic * kh * kw, sp = oh * ow;
  Tensor out({b, oc, oh, ow});
  std::vector<double> col(static_cast<size_t>(ck * sp));
  for (int64_t i = 0; i < b; ++i) {
    detail::im2col(xv.data.data() + i * ic * h * wd, ic, h, wd, kh, kw, stride, pad, oh, ow, col.data());
    // out[i] = w_mat (oc x ck) . col (ck x sp)
    for (int64_t o = 0; o < oc; ++o) {
      double* orow = out.data.data() + (i * oc + o) * sp;
      const double* wrow = wv.data.data() + o * ck;
      for (int64_t l = 0; l < ck; ++l) {
        double wv2 = wrow[l];
        if (wv2 == 0.0) continue;
        const double* crow = col.data() + l * sp;
        for (int64_t j = 0; j < sp; ++j) orow[j] += wv2 * crow[j];
      }
    }
  }
  return tp(x).record(
      "conv2d", std::move(out), {x, w},
      [x, w, stride, pad, b, ic, h, wd, oc, kh, kw, oh, ow, ck, sp](Tape& t, const Tape::Node& n) {
        const Tensor &xv2 = t.val(x), &wv2 = t.val(w);
        Tensor gx({b, ic, h, wd}), gw({oc, ic, kh, kw});
        std::vector<double> col(static_cast<size_t>(ck * sp));
        std::vector<double> gcol(static_cast<size_t>(ck * sp));
        for (int64_t i = 0; i < b; ++i) {
          const double* gout = n.grad.data.data() + i * oc * sp;
          detail::im2col(xv2.data.data() + i * ic * h * wd, ic, h, wd, kh, kw, stride, pad, oh, ow,
                         col.data());
          // gw += gout (oc x sp) . col^T (sp x ck)
          for (int64_t o = 0; o < oc; ++o) {
            const double* grow = gout + o * sp;
            double* gwrow = gw.data.data() + o * ck;
            for (int64_t l = 0; l < ck; ++l) {
              const double* crow = col.data() + l * sp;
              double s = 0.0;
              for (int64_t j = 0; j < sp; ++j) s += grow[j] * crow[j];
              gwrow[l] += s;
            }
          }
          // gcol = w^T (ck x oc) . gout (oc x sp), then scatter
          std::fill(gcol.begin(), gcol.end(), 0.0);
          for (int64_t o = 0; o < oc; ++o) {
            const double* wrow = wv2.data.data() + o * ck;
            const double* grow = gout + o * sp;
            for (int64_t l = 0; l < ck; ++l) {
              double wcoef = wrow[l];
              if (wcoef == 0.0) continue;
              double* gcrow = gcol.data() + l * sp;
              for (int64_t j = 0; j < sp; ++j) gcrow[j] += wcoef * grow[j];
            }
          }
          detail::col2im(gcol.data(), ic, h, wd, kh, kw, stride, pad, oh, ow,
                         gx.data.data() + i * ic * h * wd);
        }
        t.accum(x, gx);
        t.accum(w, gw);
      });
}

// Pairwise Euclidean distances between rows: x (B, K) -> (B, B).
// Zero-distance pairs (including the diagonal) get zero gradient.
inline Value pairwise_euclidean(Value x) {
  const Tensor& xv = tp(x).val(x);
  if (xv.rank() != 2) fail_shape("pairwise_euclidean", xv, "(B, K)");
  int64_t b = xv.shape[0], k = xv.shape[1];
  Tensor out({b, b});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = i + 1; j < b; ++j) {
      const double *pi = xv.data.data() + i * k, *pj = xv.data.data() + j * k;
      double s = 0.0;
      for (int64_t l = 0; l < k; ++l) {
        double d = pi[l] - pj[l];
        s += d * d;
      }
      double dist = std::sqrt(s);
      out.data[static_cast<size_t>(i * b + j)] = dist;
      out.data[static_cast<size_t>(j * b + i)] = dist;
    }
  return tp(x).record("pairwise_euclidean", std::move(out), {x}, [x, b, k](Tape& t, const Tape::Node& n) {
    const Tensor& xv2 = t.val(x);
    Tensor g({b, k});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < b; ++j) {
        if (i == j) continue;
        double dist = n.value.data[static_cast<size_t>(i * b + j)];
        if (dist <= 0.0) continue;
        double go = n.grad.data[static_cast<size_t>(i * b + j)] / dist;
        if (go == 0.0) continue;
        const double *pi = xv2.data.data() + i * k, *pj = xv2.data.data() + j * k;
        double* gi = g.data.data() + i * k;
        double* gj = g.data.data() + j * k;
        for (int64_t l = 0; l < k; ++l) {
          double d = (pi[l] - pj[l]) * go;
          gi[l] += d;
          gj[l] -= d;
        }
      }
    t.accum(x, g);
  });
}

// mean cross-entropy of logits (B, K) against integer labels
inline Value cross_entropy(Value logits, const std::vector<int64_t>& labels) {
  Value logp = log_eps(softmax(logits));
  Value picked = pick_rows(logp, labels);
  return scale(mean_all(picked), -1.0);
}

}  // namespace ops
}  // namespace dst
