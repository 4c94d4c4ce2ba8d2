// Dynamic gates over residual blocks: each block carries a lightweight
// gate DG(f) = hard_sigmoid(W . avgpool(f) + b) that decides per sample
// whether the residual branch executes. Training uses the binarized
// decision forward with a straight-through gradient through the soft
// relaxation.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dst/autodiff.hpp"
#include "dst/modules.hpp"

namespace dst {

enum class GateMode { learned, force_keep_all, force_skip_all };

inline GateMode gate_mode_from_name(const std::string& s) {
  if (s == "learned") return GateMode::learned;
  if (s == "force_keep_all") return GateMode::force_keep_all;
  if (s == "force_skip_all") return GateMode::force_skip_all;
  throw std::invalid_argument("unknown gate mode '" + s + "'");
}

// Scalar form of the gate relaxation, shared with the tape op.
inline double hard_sigmoid_scalar(double g, double k) {
  return std::max(0.0, std::min(k * g + 0.5, 1.0));
}

struct BlockTrace {
  Tensor soft;      // (B), soft gate values in [0,1]
  Tensor decision;  // (B), binary keep(1)/skip(0)
};

struct GateTrace {
  std::vector<BlockTrace> blocks;

  // Fraction of skip decisions over all blocks and batch rows.
  double skip_rate() const {
    if (blocks.empty()) throw std::invalid_argument("skip_rate: empty gate trace");
    double skipped = 0.0;
    int64_t total = 0;
    for (const auto& b : blocks) {
      for (double d : b.decision.data) skipped += 1.0 - d;
      total += b.decision.numel();
    }
    return skipped / static_cast<double>(total);
  }

  // Per-block keep frequency over the batch.
  std::vector<double> keep_frequency() const {
    std::vector<double> out;
    for (const auto& b : blocks) {
      double s = 0.0;
      for (double d : b.decision.data) s += d;
      out.push_back(s / static_cast<double>(b.decision.numel()));
    }
    return out;
  }

  // Majority-vote keep/skip pattern, one bit per block (ties keep).
  std::vector<int> majority_pattern() const {
    std::vector<int> out;
    for (double f : keep_frequency()) out.push_back(f >= 0.5 ? 1 : 0);
    return out;
  }
};

// Table-5 style percent with one decimal, e.g. 0.706 -> "70.6".
inline std::string format_percent(double fraction) {
  double pct = fraction * 100.0;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", pct);
  return std::string(buf);
}

class DynamicGate {
 public:
  DynamicGate() = default;
  DynamicGate(std::string name, int64_t channels, double k = 1.0)
      : w{name + ".w", Tensor({channels, 1})}, b{name + ".b", Tensor({1})}, k_(k) {
    if (k_ <= 0.0) throw std::invalid_argument("gate slope k must be positive");
    w.straight_through = true;
    b.straight_through = true;
  }

  // f: (B, C) pooled feature or (B, C, H, W) map (pooled internally).
  // Returns (soft, decision) as length-B values on the tape.
  std::pair<Value, Value> decide(PassContext& cx, Value f) {
    Value pooled = cx.tape.val(f).rank() == 4 ? ops::global_avg_pool(f) : f;
    const Tensor& pv = cx.tape.val(pooled);
    if (pv.rank() != 2 || pv.shape[1] != w.value.shape[0])
      fail_shape("gate_decide (channels)", pv, w.value);
    int64_t batch = pv.shape[0];
    Value pre = ops::reshape(ops::bias_add_rows(ops::matmul(pooled, cx.bind(w)), cx.bind(b)), {batch});
    Value soft = ops::hard_sigmoid(pre, k_);
    Value decision = ops::ste_binarize(soft);
    return {soft, decision};
  }

  double slope() const { return k_; }

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
  double k_ = 1.0;
};

// Residual block with a per-sample gate on the branch. The branch is
// pre-activation (relu inside), so a skip decision reproduces the
// shortcut output exactly.
class GatedResidualBlock {
 public:
  GatedResidualBlock() = default;

  // Vector features: branch = dense(w->w) . relu . dense(w->w), identity
  // shortcut (width change uses a projection dense).
  static GatedResidualBlock vector_block(const std::string& name, int64_t in_width, int64_t out_width,
                                         double gate_k) {
    GatedResidualBlock blk;
    blk.image_ = false;
    blk.d1_ = Dense(name + ".branch1", in_width, out_width);
    blk.d2_ = Dense(name + ".branch2", out_width, out_width);
    if (in_width != out_width) {
      blk.has_projection_ = true;
      blk.dproj_ = Dense(name + ".proj", in_width, out_width);
    }
    blk.gate_ = DynamicGate(name + ".gate", in_width, gate_k);
    return blk;
  }

  // Image features: branch = conv3x3(stride) . relu . conv3x3, shortcut
  // is identity or a strided 1x1 projection.
  static GatedResidualBlock image_block(const std::string& name, int64_t in_ch, int64_t out_ch,
                                        int64_t stride, double gate_k) {
    GatedResidualBlock blk;
    blk.image_ = true;
    blk.c1_ = Conv2d(name + ".branch1", in_ch, out_ch, 3, stride, 1);
    blk.c2_ = Conv2d(name + ".branch2", out_ch, out_ch, 3, 1, 1);
    if (in_ch != out_ch || stride != 1) {
      blk.has_projection_ = true;
      blk.cproj_ = Conv2d(name + ".proj", in_ch, out_ch, 1, stride, 0);
    }
    blk.gate_ = DynamicGate(name + ".gate", in_ch, gate_k);
    return blk;
  }

  // y = shortcut(x) + decision * branch(x); trace entry appended.
  Value forward(PassContext& cx, Value x, GateMode mode, GateTrace* trace) {
    int64_t batch = cx.tape.val(x).shape[0];
    Value branch = image_ ? c2_(cx, ops::relu(c1_(cx, ops::relu(x))))
                          : d2_(cx, ops::relu(d1_(cx, ops::relu(x))));
    Value shortcut = x;
    if (has_projection_) shortcut = image_ ? cproj_(cx, x) : dproj_(cx, x);
    if (!cx.tape.val(branch).same_shape(cx.tape.val(shortcut)))
      fail_shape("gated block branch vs shortcut", cx.tape.val(branch), cx.tape.val(shortcut));

    auto [soft, learned_decision] = gate_.decide(cx, x);
    Value decision = learned_decision;
    if (mode == GateMode::force_keep_all)
      decision = cx.tape.constant(Tensor::ones({batch}));
    else if (mode == GateMode::force_skip_all)
      decision = cx.tape.constant(Tensor::zeros({batch}));

    if (trace) trace->blocks.push_back({cx.tape.val(soft), cx.tape.val(decision)});
    return ops::add(shortcut, ops::row_scale(branch, decision));
  }

  // Branch-only output, for block-ablation tests.
  Value branch_only(PassContext& cx, Value x) {
    return image_ ? c2_(cx, ops::relu(c1_(cx, ops::relu(x))))
                  : d2_(cx, ops::relu(d1_(cx, ops::relu(x))));
  }

  Value shortcut_only(PassContext& cx, Value x) {
    if (!has_projection_) return x;
    return image_ ? cproj_(cx, x) : dproj_(cx, x);
  }

  void init(Rng& rng) {
    if (image_) {
      c1_.init(rng);
      c2_.init(rng);
      if (has_projection_) cproj_.init(rng);
    } else {
      d1_.init(rng);
      d2_.init(rng);
      if (has_projection_) dproj_.init(rng);
    }
    gate_.init(rng);
  }

  void collect(std::vector<Param*>& out) {
    if (image_) {
      c1_.collect(out);
      c2_.collect(out);
      if (has_projection_) cproj_.collect(out);
    } else {
      d1_.collect(out);
      d2_.collect(out);
      if (has_projection_) dproj_.collect(out);
    }
    gate_.collect(out);
  }

  DynamicGate& gate() { return gate_; }

 private:
  bool image_ = false;
  bool has_projection_ = false;
  Dense d1_, d2_, dproj_;
  Conv2d c1_, c2_, cproj_;
  DynamicGate gate_;
};

}  // namespace dst
