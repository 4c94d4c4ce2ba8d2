// The three network roles: generator G (noise -> bounded samples),
// gated residual substitute S, and small in-process target models T.
#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dst/autodiff.hpp"
#include "dst/checkpoint.hpp"
#include "dst/gate.hpp"
#include "dst/modules.hpp"
#include "dst/random.hpp"

namespace dst {

// Blob tasks carry flat (B, D) samples; image tasks carry (B, C, H, W).
enum class DataKind { vector, image };

struct DataShape {
  DataKind kind = DataKind::vector;
  int64_t dim = 2;  // vector width D
  int64_t channels = 1, height = 8, width = 8;

  int64_t numel() const { return kind == DataKind::vector ? dim : channels * height * width; }
  Shape batch_shape(int64_t b) const {
    return kind == DataKind::vector ? Shape{b, dim} : Shape{b, channels, height, width};
  }
};

// ---------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------

struct GeneratorConfig {
  int64_t noise_dim = 64;
  DataShape out;
  int64_t hidden = 128;         // vector mode MLP width
  int64_t base_channels = 32;   // image mode conv width
};

// Vector mode: dense -> relu -> dense -> relu -> dense -> sigmoid.
// Image mode: dense to a seed map, two (upsample2x, conv3x3, relu)
// blocks, then a 1x1 conv and sigmoid into [0,1].
class GeneratorNet {
 public:
  GeneratorNet() = default;
  explicit GeneratorNet(GeneratorConfig cfg) : cfg_(cfg) {
    if (cfg_.out.kind == DataKind::vector) {
      fc1_ = Dense("gen.fc1", cfg_.noise_dim, cfg_.hidden);
      fc2_ = Dense("gen.fc2", cfg_.hidden, cfg_.hidden);
      fc3_ = Dense("gen.fc3", cfg_.hidden, cfg_.out.dim);
    } else {
      if (cfg_.out.height % 4 != 0 || cfg_.out.width % 4 != 0)
        throw std::invalid_argument("image generator needs height/width divisible by 4");
      seed_h_ = cfg_.out.height / 4;
      seed_w_ = cfg_.out.width / 4;
      int64_t c0 = cfg_.base_channels * 4;
      fc1_ = Dense("gen.fc1", cfg_.noise_dim, c0 * seed_h_ * seed_w_);
      conv1_ = Conv2d("gen.conv1", c0, cfg_.base_channels * 2, 3, 1, 1);
      conv2_ = Conv2d("gen.conv2", cfg_.base_channels * 2, cfg_.base_channels, 3, 1, 1);
      head_ = Conv2d("gen.head", cfg_.base_channels, cfg_.out.channels, 1, 1, 0);
    }
  }

  const GeneratorConfig& config() const { return cfg_; }

  Value forward(PassContext& cx, Value z) {
    const Tensor& zv = cx.tape.val(z);
    if (zv.rank() != 2 || zv.shape[1] != cfg_.noise_dim)
      fail_shape("generator noise", zv, "(B, " + std::to_string(cfg_.noise_dim) + ")");
    if (cfg_.out.kind == DataKind::vector) {
      Value h = ops::relu(fc1_(cx, z));
      h = ops::relu(fc2_(cx, h));
      return ops::sigmoid(fc3_(cx, h));
    }
    int64_t b = zv.shape[0];
    int64_t c0 = cfg_.base_channels * 4;
    Value h = ops::relu(fc1_(cx, z));
    h = ops::reshape(h, {b, c0, seed_h_, seed_w_});
    h = ops::relu(conv1_(cx, ops::upsample_nearest2(h)));
    h = ops::relu(conv2_(cx, ops::upsample_nearest2(h)));
    return ops::sigmoid(head_(cx, h));
  }

  // Plain inference convenience; no gradients retained.
  Tensor generate(const Tensor& z) {
    PassContext cx;
    return cx.tape.val(forward(cx, cx.input(z)));
  }

  Tensor sample_noise(int64_t batch, Rng& rng) const {
    return rng.normal_tensor({batch, cfg_.noise_dim});
  }

  void init(Rng& rng) {
    fc1_.init(rng);
    if (cfg_.out.kind == DataKind::vector) {
      fc2_.init(rng);
      fc3_.init(rng);
    } else {
      conv1_.init(rng);
      conv2_.init(rng);
      head_.init(rng);
    }
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    fc1_.collect(out);
    if (cfg_.out.kind == DataKind::vector) {
      fc2_.collect(out);
      fc3_.collect(out);
    } else {
      conv1_.collect(out);
      conv2_.collect(out);
      head_.collect(out);
    }
    return out;
  }

 private:
  GeneratorConfig cfg_;
  Dense fc1_, fc2_, fc3_;
  Conv2d conv1_, conv2_, head_;
  int64_t seed_h_ = 0, seed_w_ = 0;
};

// ---------------------------------------------------------------------
// Substitute
// ---------------------------------------------------------------------

struct SubstituteConfig {
  DataShape in;
  int64_t class_count = 0;
  std::vector<int64_t> widths = {16, 16, 32, 32};  // one gated block per entry
  double gate_k = 1.0;
};

class SubstituteNet {
 public:
  SubstituteNet() = default;
  explicit SubstituteNet(SubstituteConfig cfg) : cfg_(cfg) {
    if (cfg_.class_count < 2) throw std::invalid_argument("substitute needs class_count >= 2");
    if (cfg_.widths.empty()) throw std::invalid_argument("substitute needs at least one block");
    int64_t w0 = cfg_.widths.front();
    if (cfg_.in.kind == DataKind::vector) {
      stem_fc_ = Dense("sub.stem", cfg_.in.dim, w0);
    } else {
      stem_conv_ = Conv2d("sub.stem", cfg_.in.channels, w0, 3, 1, 1);
    }
    int64_t prev = w0;
    for (size_t i = 0; i < cfg_.widths.size(); ++i) {
      int64_t w = cfg_.widths[i];
      std::string name = "sub.block" + std::to_string(i);
      if (cfg_.in.kind == DataKind::vector) {
        blocks_.push_back(GatedResidualBlock::vector_block(name, prev, w, cfg_.gate_k));
      } else {
        int64_t stride = w != prev ? 2 : 1;  // downsample entering width changes
        blocks_.push_back(GatedResidualBlock::image_block(name, prev, w, stride, cfg_.gate_k));
      }
      prev = w;
    }
    head_ = Dense("sub.head", prev, cfg_.class_count);
  }

  const SubstituteConfig& config() const { return cfg_; }
  size_t block_count() const { return blocks_.size(); }
  GatedResidualBlock& block(size_t i) { return blocks_.at(i); }

  // Penultimate features: (B, last_width). GAP for image features.
  Value features(PassContext& cx, Value x, GateMode mode, GateTrace* trace) {
    const Tensor& xv = cx.tape.val(x);
    Value h;
    if (cfg_.in.kind == DataKind::vector) {
      if (xv.rank() != 2 || xv.shape[1] != cfg_.in.dim) fail_shape("substitute input", xv, "(B, D)");
      h = ops::relu(stem_fc_(cx, x));
    } else {
      if (xv.rank() != 4 || xv.shape[1] != cfg_.in.channels)
        fail_shape("substitute input", xv, "(B, C, H, W)");
      h = ops::relu(stem_conv_(cx, x));
    }
    for (auto& blk : blocks_) h = blk.forward(cx, h, mode, trace);
    if (cfg_.in.kind == DataKind::image) h = ops::global_avg_pool(h);
    return h;
  }

  // Class logits plus a trace of every block's keep/skip decision.
  Value forward(PassContext& cx, Value x, GateMode mode, GateTrace* trace) {
    return head_(cx, features(cx, x, mode, trace));
  }

  Tensor logits(const Tensor& x, GateMode mode, GateTrace* trace = nullptr) {
    PassContext cx;
    return cx.tape.val(forward(cx, cx.input(x), mode, trace));
  }

  void init(Rng& rng) {
    if (cfg_.in.kind == DataKind::vector)
      stem_fc_.init(rng);
    else
      stem_conv_.init(rng);
    for (auto& b : blocks_) b.init(rng);
    head_.init(rng);
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    if (cfg_.in.kind == DataKind::vector)
      stem_fc_.collect(out);
    else
      stem_conv_.collect(out);
    for (auto& b : blocks_) b.collect(out);
    head_.collect(out);
    return out;
  }

 private:
  SubstituteConfig cfg_;
  Dense stem_fc_;
  Conv2d stem_conv_;
  std::vector<GatedResidualBlock> blocks_;
  Dense head_;
};

// ---------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------

enum class TargetArch { mlp, convnet };

struct TargetConfig {
  TargetArch arch = TargetArch::mlp;
  DataShape in;
  int64_t class_count = 3;
  int64_t hidden = 64;  // mlp width / convnet fc width
};

// (a) MLP D -> hidden -> hidden -> K for blob data,
// (b) small convnet (two strided convs + fc) for tiny images.
class TargetNet {
 public:
  TargetNet() = default;
  explicit TargetNet(TargetConfig cfg) : cfg_(cfg) {
    if (cfg_.arch == TargetArch::mlp) {
      fc1_ = Dense("target.fc1", cfg_.in.dim, cfg_.hidden);
      fc2_ = Dense("target.fc2", cfg_.hidden, cfg_.hidden);
      fc3_ = Dense("target.fc3", cfg_.hidden, cfg_.class_count);
    } else {
      conv1_ = Conv2d("target.conv1", cfg_.in.channels, 8, 3, 2, 1);
      conv2_ = Conv2d("target.conv2", 8, 16, 3, 2, 1);
      int64_t fh = (cfg_.in.height + 1) / 2, fw = (cfg_.in.width + 1) / 2;
      fh = (fh + 1) / 2;
      fw = (fw + 1) / 2;
      flat_ = 16 * fh * fw;
      fc1_ = Dense("target.fc1", flat_, cfg_.hidden);
      fc3_ = Dense("target.fc2", cfg_.hidden, cfg_.class_count);
    }
  }

  const TargetConfig& config() const { return cfg_; }

  Value forward(PassContext& cx, Value x) {
    if (cfg_.arch == TargetArch::mlp) {
      Value h = ops::relu(fc1_(cx, x));
      h = ops::relu(fc2_(cx, h));
      return fc3_(cx, h);
    }
    int64_t batch = cx.tape.val(x).shape[0];
    Value h = ops::relu(conv1_(cx, x));
    h = ops::relu(conv2_(cx, h));
    h = ops::reshape(h, {batch, flat_});
    h = ops::relu(fc1_(cx, h));
    return fc3_(cx, h);
  }

  Tensor logits(const Tensor& x) {
    PassContext cx;
    return cx.tape.val(forward(cx, cx.input(x)));
  }

  void init(Rng& rng) {
    fc1_.init(rng);
    fc3_.init(rng);
    if (cfg_.arch == TargetArch::mlp)
      fc2_.init(rng);
    else {
      conv1_.init(rng);
      conv2_.init(rng);
    }
  }

  void freeze() {
    for (Param* p : params()) p->trainable = false;
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    fc1_.collect(out);
    if (cfg_.arch == TargetArch::mlp)
      fc2_.collect(out);
    else {
      conv1_.collect(out);
      conv2_.collect(out);
    }
    fc3_.collect(out);
    return out;
  }

  uint64_t param_hash() { return params_hash(params()); }

 private:
  TargetConfig cfg_;
  Dense fc1_, fc2_, fc3_;
  Conv2d conv1_, conv2_;
  int64_t flat_ = 0;
};

// ---------------------------------------------------------------------
// Parameter set <-> checkpoint container
// ---------------------------------------------------------------------

inline void save_params(CheckpointWriter& w, const std::vector<Param*>& params) {
  for (const Param* p : params) w.add(p->name, p->value, Dtype::f64);
}

inline void load_params(const CheckpointReader& r, const std::vector<Param*>& params) {
  for (Param* p : params) {
    Tensor t = r.tensor(p->name);
    if (!t.same_shape(p->value))
      throw std::runtime_error("checkpoint: shape mismatch for " + p->name + ": file " +
                               shape_str(t.shape) + " vs model " + shape_str(p->value.shape));
    p->value = std::move(t);
  }
}

inline void save_target(const std::string& path, TargetNet& net) {
  CheckpointWriter w;
  const TargetConfig& c = net.config();
  nlohmann::json meta;
  meta["arch"] = c.arch == TargetArch::mlp ? "mlp" : "convnet";
  meta["kind"] = c.in.kind == DataKind::vector ? "vector" : "image";
  meta["dim"] = c.in.dim;
  meta["channels"] = c.in.channels;
  meta["height"] = c.in.height;
  meta["width"] = c.in.width;
  meta["class_count"] = c.class_count;
  meta["hidden"] = c.hidden;
  w.add_text("__target_meta__", meta.dump());
  save_params(w, net.params());
  w.write(path);
}

inline TargetNet load_target(const std::string& path) {
  CheckpointReader r(path);
  nlohmann::json meta = nlohmann::json::parse(r.text("__target_meta__"));
  TargetConfig c;
  c.arch = meta.at("arch").get<std::string>() == "mlp" ? TargetArch::mlp : TargetArch::convnet;
  c.in.kind = meta.at("kind").get<std::string>() == "vector" ? DataKind::vector : DataKind::image;
  c.in.dim = meta.at("dim").get<int64_t>();
  c.in.channels = meta.at("channels").get<int64_t>();
  c.in.height = meta.at("height").get<int64_t>();
  c.in.width = meta.at("width").get<int64_t>();
  c.class_count = meta.at("class_count").get<int64_t>();
  c.hidden = meta.at("hidden").get<int64_t>();
  TargetNet net(c);
  load_params(r, net.params());
  net.freeze();
  return net;
}

}  // namespace dst
