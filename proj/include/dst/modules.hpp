// Parameters, the per-pass binding context, and the two primitive layers
// (dense, conv) every network in nets.hpp is assembled from.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dst/autodiff.hpp"
#include "dst/random.hpp"
#include "dst/tensor.hpp"

namespace dst {

struct Param {
  std::string name;
  Tensor value;
  bool trainable = true;
  // Parameters whose gradient path crosses a hard gate; exempt from
  // finite-difference checks.
  bool straight_through = false;
};

// One forward/backward pass: owns the tape and remembers which tape leaf
// each parameter was bound to, so gradients can be read back per param.
class PassContext {
 public:
  Tape tape;

  Value bind(Param& p) {
    Value v = tape.leaf(p.value, p.trainable);
    bound_.emplace_back(&p, v);
    return v;
  }

  // Non-parameter input leaf (e.g. the image being attacked).
  Value input(const Tensor& t, bool requires_grad = false) { return tape.leaf(t, requires_grad); }

  // Sum of gradients over every binding of p in this pass.
  Tensor grad_of(const Param& p) const {
    Tensor g = Tensor::zeros(p.value.shape);
    for (const auto& [bp, v] : bound_) {
      if (bp != &p) continue;
      Tensor pg = tape.grad(v);
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += pg.data[i];
    }
    return g;
  }

  const std::vector<std::pair<Param*, Value>>& bindings() const { return bound_; }

 private:
  std::vector<std::pair<Param*, Value>> bound_;
};

// Weights drawn from normal(0, 0.02) truncated at +/-2 std; biases zero.
constexpr double kInitStd = 0.02;

inline void init_truncated_normal(Tensor& t, Rng& rng, double std = kInitStd) {
  for (auto& v : t.data) v = rng.truncated_normal(std);
}

class Dense {
 public:
  Dense() = default;
  Dense(std::string name, int64_t in, int64_t out)
      : w{name + ".w", Tensor({in, out})}, b{name + ".b", Tensor({out})} {}

  Value operator()(PassContext& cx, Value x) {
    return ops::bias_add_rows(ops::matmul(x, cx.bind(w)), cx.bind(b));
  }

  void init(Rng& rng) {
    init_truncated_normal(w.value, rng);
    for (auto& v : b.value.data) v = 0.0;
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }

  Param w, b;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad)
      : w{name + ".w", Tensor({out_ch, in_ch, kernel, kernel})},
        b{name + ".b", Tensor({out_ch})},
        stride_(stride),
        pad_(pad) {}

  Value operator()(PassContext& cx, Value x) {
    return ops::bias_add_chw(ops::conv2d(x, cx.bind(w), stride_, pad_), cx.bind(b));
  }

  void init(Rng& rng) {
    init_truncated_normal(w.value, rng);
    for (auto& v : b.value.data) v = 0.0;
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }

  Param w, b;

 private:
  int64_t stride_ = 1, pad_ = 0;
};

inline uint64_t params_hash(const std::vector<Param*>& ps) {
  uint64_t h = 1469598103934665603ull;
  for (const Param* p : ps) {
    h = fnv1a(p->name.data(), p->name.size(), h);
    h = tensor_hash(p->value, h);
  }
  return h;
}

}  // namespace dst
