// Alternating distillation: each iteration runs one substitute update
// (minimize the graph loss against the black-box outputs) then one
// generator update (minimize its negation, exploring hard samples).
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dst/adam.hpp"
#include "dst/checkpoint.hpp"
#include "dst/dataset.hpp"
#include "dst/gsil.hpp"
#include "dst/nets.hpp"
#include "dst/oracle.hpp"
#include "dst/random.hpp"

namespace dst {

struct TrainConfig {
  int64_t epochs = 150;
  int64_t steps_per_epoch = 100;
  int64_t batch = 500;
  double lr_sub = 0.001;
  double lr_gen = 0.0001;
  int64_t decay_start_epoch = 80;
  uint64_t seed = 7;
  GsilWeights weights;
  LossVariant variant = LossVariant::dst;
  bool reuse_query = false;  // generator step reuses the substitute step's batch
  double label_smoothing = 0.1;
  int64_t probe_gen = 1024;
  int64_t probe_uniform = 1024;
  GeneratorConfig generator;
  SubstituteConfig substitute;  // class_count 0: discovered from the oracle

  void validate() const {
    if (epochs < 1 || steps_per_epoch < 1) throw std::invalid_argument("trainer: epochs/steps must be >= 1");
    if (batch < 2) throw std::invalid_argument("trainer: batch must be >= 2 for a nonvacuous edge term");
    if (lr_sub <= 0.0 || lr_gen <= 0.0) throw std::invalid_argument("trainer: learning rates must be positive");
    if (decay_start_epoch >= epochs)
      throw std::invalid_argument("trainer: decay_start_epoch must precede epochs");
    weights.validate();
  }

  // Constant before decay_start_epoch, then linear to zero at `epochs`.
  double lr_at(double base, int64_t epoch) const {
    if (epoch < decay_start_epoch) return base;
    double span = static_cast<double>(epochs - decay_start_epoch);
    return base * static_cast<double>(epochs - epoch) / span;
  }

  GateMode gate_mode() const {
    return variant == LossVariant::dst ? GateMode::learned : GateMode::force_keep_all;
  }
};

struct StepMetrics {
  int64_t epoch = 0;
  int64_t step = 0;
  GsilParts loss;      // substitute step loss parts
  double gen_loss = 0.0;
  double skip_rate = 0.0;
  int64_t train_q = 0;
  double lr_sub = 0.0;
  double lr_gen = 0.0;

  std::string jsonl() const {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["step"] = step;
    j["loss_node"] = loss.node;
    j["loss_edge"] = loss.edge;
    j["loss_total"] = loss.total;
    j["skip_rate"] = skip_rate;
    j["train_q"] = train_q;
    j["lr_sub"] = lr_sub;
    j["lr_gen"] = lr_gen;
    return j.dump();
  }
};

struct EpochSummary {
  int64_t epoch = 0;
  double loss_node = 0.0, loss_edge = 0.0, loss_total = 0.0;
  double skip_rate = 0.0;
  double agreement = 0.0;
  int64_t train_q = 0;

  static std::string csv_header() {
    return "epoch,loss_node,loss_edge,loss_total,skip_rate,agreement,train_q";
  }
  std::string csv_row() const {
    nlohmann::json cells = {loss_node, loss_edge, loss_total, skip_rate, agreement};
    std::string out = std::to_string(epoch);
    for (const auto& c : cells) out += "," + c.dump();
    out += "," + std::to_string(train_q);
    return out;
  }
};

// Streams per-step JSONL and per-epoch CSV; keeps records in memory for
// tests and report assembly.
class MetricsSink {
 public:
  MetricsSink() = default;
  MetricsSink(const std::string& jsonl_path, const std::string& csv_path) {
    if (!jsonl_path.empty()) {
      jsonl_.open(jsonl_path, std::ios::trunc);
      if (!jsonl_) throw std::runtime_error("cannot open metrics stream " + jsonl_path);
    }
    if (!csv_path.empty()) {
      csv_.open(csv_path, std::ios::trunc);
      if (!csv_) throw std::runtime_error("cannot open epoch summary " + csv_path);
      csv_ << EpochSummary::csv_header() << "\n";
    }
  }

  void step(const StepMetrics& m) {
    steps.push_back(m);
    if (jsonl_.is_open()) jsonl_ << m.jsonl() << "\n" << std::flush;
  }
  void epoch(const EpochSummary& s) {
    epochs.push_back(s);
    if (csv_.is_open()) csv_ << s.csv_row() << "\n" << std::flush;
  }

  std::vector<StepMetrics> steps;
  std::vector<EpochSummary> epochs;

 private:
  std::ofstream jsonl_, csv_;
};

struct RunState {
  TrainConfig cfg;
  GeneratorNet generator;
  SubstituteNet substitute;
  Adam adam_sub, adam_gen;
  Rng rng;
  int64_t next_epoch = 0;
  QueryLedger ledger_offset;  // counts carried over from a resumed run
  Tensor probe_inputs;
  std::vector<int64_t> probe_labels;  // target argmax on the probe set
  double epoch0_agreement = 0.0;
  double best_agreement = -1.0;
  int64_t best_epoch = -1;
  uint64_t config_fingerprint = 0;
};

struct DistillReport {
  double epoch0_agreement = 0.0;
  double final_agreement = 0.0;
  double best_agreement = 0.0;
  int64_t best_epoch = -1;
  double final_skip_rate = 0.0;
  QueryLedger ledger;
  uint64_t config_fingerprint = 0;
};

namespace detail {

inline Tensor smooth_if_label(const Tensor& oracle_out, Scenario scenario, double smoothing) {
  if (scenario == Scenario::label) return smooth_one_hot(oracle_out, smoothing);
  return oracle_out;
}

inline double probe_agreement(SubstituteNet& sub, const Tensor& probe_inputs,
                              const std::vector<int64_t>& probe_labels, GateMode mode) {
  std::vector<int64_t> pred = argmax_rows(sub.logits(probe_inputs, mode));
  int64_t hits = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == probe_labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace detail

// Builds generator, probes the oracle once for the frozen probe set (and
// with it the class count), then builds the substitute.
inline RunState init_run_state(TrainConfig cfg, TargetOracle& oracle, uint64_t config_fingerprint = 0) {
  cfg.validate();
  RunState state;
  state.rng = Rng(cfg.seed);
  state.cfg = cfg;
  state.config_fingerprint = config_fingerprint;
  state.generator = GeneratorNet(cfg.generator);
  state.generator.init(state.rng);
  state.adam_sub = Adam(AdamConfig{cfg.lr_sub, 0.9, 0.999, 1e-8});
  state.adam_gen = Adam(AdamConfig{cfg.lr_gen, 0.9, 0.999, 1e-8});

  // probe set: generator samples frozen now, plus uniform-random inputs
  Tensor gen_part = state.generator.generate(state.generator.sample_noise(cfg.probe_gen, state.rng));
  Shape uni_shape = cfg.generator.out.batch_shape(cfg.probe_uniform);
  Tensor uni_part = state.rng.uniform_tensor(uni_shape);
  int64_t per = gen_part.numel() / gen_part.shape[0];
  state.probe_inputs = Tensor({cfg.probe_gen + cfg.probe_uniform, per});
  for (int64_t i = 0; i < gen_part.numel(); ++i) state.probe_inputs.data[static_cast<size_t>(i)] = gen_part.data[static_cast<size_t>(i)];
  for (int64_t i = 0; i < uni_part.numel(); ++i)
    state.probe_inputs.data[static_cast<size_t>(gen_part.numel() + i)] = uni_part.data[static_cast<size_t>(i)];
  if (cfg.generator.out.kind == DataKind::image) {
    Shape s = cfg.generator.out.batch_shape(cfg.probe_gen + cfg.probe_uniform);
    state.probe_inputs = state.probe_inputs.reshaped(s);
  }

  Tensor probe_out = oracle.query(state.probe_inputs, Phase::probe);
  state.probe_labels = argmax_rows(probe_out);
  int64_t discovered_k = probe_out.shape[1];

  SubstituteConfig sub_cfg = cfg.substitute;
  if (sub_cfg.class_count == 0) sub_cfg.class_count = discovered_k;
  if (sub_cfg.class_count != discovered_k)
    throw std::runtime_error("substitute class_count " + std::to_string(sub_cfg.class_count) +
                             " does not match oracle output width " + std::to_string(discovered_k));
  state.cfg.substitute = sub_cfg;
  state.substitute = SubstituteNet(sub_cfg);
  state.substitute.init(state.rng);

  state.epoch0_agreement = detail::probe_agreement(state.substitute, state.probe_inputs,
                                                   state.probe_labels, state.cfg.gate_mode());
  return state;
}

struct IterationOutcome {
  GsilParts sub_loss;
  double gen_loss = 0.0;
  double skip_rate = 0.0;
};

// One substitute update. Samples fresh noise, queries the oracle, and
// applies Adam to the substitute parameters. Generator is frozen here.
inline GsilParts substitute_step(RunState& state, TargetOracle& oracle, double lr, double* skip_rate,
                                 Tensor* reuse_z = nullptr, Tensor* reuse_t = nullptr) {
  const TrainConfig& cfg = state.cfg;
  Tensor z = state.generator.sample_noise(cfg.batch, state.rng);
  Tensor x = state.generator.generate(z);
  Tensor t_raw = oracle.query(x, Phase::train);
  Tensor t = detail::smooth_if_label(t_raw, oracle.scenario(), cfg.label_smoothing);

  PassContext cx;
  GateTrace trace;
  Value logits = state.substitute.forward(cx, cx.input(x), cfg.gate_mode(), &trace);
  GsilParts parts;
  Value loss = variant_loss_value(cfg.variant, cx, t, ops::softmax(logits), cfg.weights, &parts);
  if (!std::isfinite(parts.total))
    throw std::runtime_error("substitute step produced a non-finite loss");
  cx.tape.backward(loss);

  std::vector<Param*> params = state.substitute.params();
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Param* p : params) grads.push_back(cx.grad_of(*p));
  state.adam_sub.set_lr(lr);
  state.adam_sub.step(params, grads);

  if (skip_rate) *skip_rate = trace.blocks.empty() ? 0.0 : trace.skip_rate();
  if (reuse_z) *reuse_z = std::move(z);
  if (reuse_t) *reuse_t = std::move(t);
  return parts;
}

// One generator update. Gradients flow through the substitute and the
// substitute-side graph only; target outputs are constants. Fresh-query
// mode issues its own oracle batch; reuse mode replays (z, t) from the
// paired substitute step.
inline double generator_step(RunState& state, TargetOracle& oracle, double lr,
                             const Tensor* reuse_z = nullptr, const Tensor* reuse_t = nullptr) {
  const TrainConfig& cfg = state.cfg;
  Tensor z, t;
  if (cfg.reuse_query && reuse_z && reuse_t) {
    z = *reuse_z;
    t = *reuse_t;
  } else {
    z = state.generator.sample_noise(cfg.batch, state.rng);
    Tensor x_probe = state.generator.generate(z);
    Tensor t_raw = oracle.query(x_probe, Phase::train);
    t = detail::smooth_if_label(t_raw, oracle.scenario(), cfg.label_smoothing);
  }

  PassContext cx;
  Value x = state.generator.forward(cx, cx.input(z));
  Value logits = state.substitute.forward(cx, x, cfg.gate_mode(), nullptr);
  GsilParts parts;
  Value loss = generator_loss_value(cx, t, ops::softmax(logits), cfg.weights, &parts);
  double gen_loss = -parts.total;
  if (!std::isfinite(gen_loss)) throw std::runtime_error("generator step produced a non-finite loss");
  cx.tape.backward(loss);

  std::vector<Param*> params = state.generator.params();
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Param* p : params) grads.push_back(cx.grad_of(*p));
  state.adam_gen.set_lr(lr);
  state.adam_gen.step(params, grads);
  return gen_loss;
}

// ---------------------------------------------------------------------
// Run-state checkpointing (bit-exact resume, RNG stream included)
// ---------------------------------------------------------------------

inline void save_run_state(const std::string& path, RunState& s) {
  CheckpointWriter w;
  nlohmann::json meta;
  meta["next_epoch"] = s.next_epoch;
  meta["rng"] = s.rng.state();
  meta["adam_sub_step"] = s.adam_sub.step_count();
  meta["adam_gen_step"] = s.adam_gen.step_count();
  meta["ledger_train"] = s.ledger_offset.train_q;
  meta["ledger_eval"] = s.ledger_offset.eval_q;
  meta["ledger_probe"] = s.ledger_offset.probe_q;
  meta["epoch0_agreement"] = s.epoch0_agreement;
  meta["best_agreement"] = s.best_agreement;
  meta["best_epoch"] = s.best_epoch;
  meta["fingerprint"] = s.config_fingerprint;
  meta["probe_labels"] = s.probe_labels;
  meta["class_count"] = s.cfg.substitute.class_count;
  w.add_text("__run_meta__", meta.dump());
  w.add("probe_inputs", s.probe_inputs, Dtype::f64);
  save_params(w, s.generator.params());
  save_params(w, s.substitute.params());
  for (Param* p : s.generator.params()) {
    const Adam::Slot& slot = s.adam_gen.slot(*p);
    w.add(p->name + ".adam_m", slot.m, Dtype::f64);
    w.add(p->name + ".adam_v", slot.v, Dtype::f64);
  }
  for (Param* p : s.substitute.params()) {
    const Adam::Slot& slot = s.adam_sub.slot(*p);
    w.add(p->name + ".adam_m", slot.m, Dtype::f64);
    w.add(p->name + ".adam_v", slot.v, Dtype::f64);
  }
  w.write(path);
}

// cfg must match the saved run (fingerprint checked when provided).
inline RunState load_run_state(const std::string& path, TrainConfig cfg) {
  CheckpointReader r(path);
  nlohmann::json meta = nlohmann::json::parse(r.text("__run_meta__"));
  RunState state;
  cfg.substitute.class_count = meta.at("class_count").get<int64_t>();
  cfg.validate();
  state.cfg = cfg;
  state.generator = GeneratorNet(cfg.generator);
  state.substitute = SubstituteNet(cfg.substitute);
  load_params(r, state.generator.params());
  load_params(r, state.substitute.params());
  state.adam_sub = Adam(AdamConfig{cfg.lr_sub, 0.9, 0.999, 1e-8});
  state.adam_gen = Adam(AdamConfig{cfg.lr_gen, 0.9, 0.999, 1e-8});
  for (Param* p : state.generator.params())
    state.adam_gen.restore_slot(p->name, r.tensor(p->name + ".adam_m"), r.tensor(p->name + ".adam_v"));
  for (Param* p : state.substitute.params())
    state.adam_sub.restore_slot(p->name, r.tensor(p->name + ".adam_m"), r.tensor(p->name + ".adam_v"));
  state.adam_sub.set_step_count(meta.at("adam_sub_step").get<int64_t>());
  state.adam_gen.set_step_count(meta.at("adam_gen_step").get<int64_t>());
  state.rng.restore(meta.at("rng").get<std::string>());
  state.next_epoch = meta.at("next_epoch").get<int64_t>();
  state.ledger_offset.train_q = meta.at("ledger_train").get<int64_t>();
  state.ledger_offset.eval_q = meta.at("ledger_eval").get<int64_t>();
  state.ledger_offset.probe_q = meta.at("ledger_probe").get<int64_t>();
  state.epoch0_agreement = meta.at("epoch0_agreement").get<double>();
  state.best_agreement = meta.at("best_agreement").get<double>();
  state.best_epoch = meta.at("best_epoch").get<int64_t>();
  state.config_fingerprint = meta.at("fingerprint").get<uint64_t>();
  state.probe_inputs = r.tensor("probe_inputs");
  state.probe_labels = meta.at("probe_labels").get<std::vector<int64_t>>();
  return state;
}

struct DistillPaths {
  std::string best_checkpoint;   // best substitute by probe agreement
  std::string resume_state;      // written on abort
};

// Folds the oracle's live counters into the state's carried offset, so a
// resumed run (which starts with a fresh oracle) continues the counts.
inline void fold_ledger(RunState& state, const TargetOracle& oracle) {
  QueryLedger l = oracle.ledger_snapshot();
  state.ledger_offset.train_q += l.train_q;
  state.ledger_offset.eval_q += l.eval_q;
  state.ledger_offset.probe_q += l.probe_q;
}

// Runs epochs [state.next_epoch, cfg.epochs). Any step error writes a
// resumable RunState next to the outputs and rethrows.
inline DistillReport run_distillation(RunState& state, TargetOracle& oracle, MetricsSink& sink,
                                      const DistillPaths& paths = {}) {
  const TrainConfig& cfg = state.cfg;
  auto ledger_now = [&] {
    QueryLedger l = oracle.ledger_snapshot();
    l.train_q += state.ledger_offset.train_q;
    l.eval_q += state.ledger_offset.eval_q;
    l.probe_q += state.ledger_offset.probe_q;
    return l;
  };

  DistillReport report;
  report.epoch0_agreement = state.epoch0_agreement;
  report.config_fingerprint = state.config_fingerprint;
  double last_agreement = state.epoch0_agreement;
  double last_skip = 0.0;

  try {
    for (int64_t epoch = state.next_epoch; epoch < cfg.epochs; ++epoch) {
      double lr_s = cfg.lr_at(cfg.lr_sub, epoch);
      double lr_g = cfg.lr_at(cfg.lr_gen, epoch);
      double node_acc = 0.0, edge_acc = 0.0, total_acc = 0.0, skip_acc = 0.0;
      for (int64_t step = 0; step < cfg.steps_per_epoch; ++step) {
        double skip_rate = 0.0;
        Tensor reuse_z, reuse_t;
        GsilParts parts = substitute_step(state, oracle, lr_s, &skip_rate,
                                          cfg.reuse_query ? &reuse_z : nullptr,
                                          cfg.reuse_query ? &reuse_t : nullptr);
        double gen_loss = generator_step(state, oracle, lr_g, cfg.reuse_query ? &reuse_z : nullptr,
                                         cfg.reuse_query ? &reuse_t : nullptr);
        StepMetrics m;
        m.epoch = epoch;
        m.step = step;
        m.loss = parts;
        m.gen_loss = gen_loss;
        m.skip_rate = skip_rate;
        m.train_q = ledger_now().train_q;
        m.lr_sub = lr_s;
        m.lr_gen = lr_g;
        sink.step(m);
        node_acc += parts.node;
        edge_acc += parts.edge;
        total_acc += parts.total;
        skip_acc += skip_rate;
      }
      double agreement = detail::probe_agreement(state.substitute, state.probe_inputs,
                                                 state.probe_labels, cfg.gate_mode());
      last_agreement = agreement;
      last_skip = skip_acc / static_cast<double>(cfg.steps_per_epoch);
      EpochSummary summary;
      summary.epoch = epoch;
      summary.loss_node = node_acc / static_cast<double>(cfg.steps_per_epoch);
      summary.loss_edge = edge_acc / static_cast<double>(cfg.steps_per_epoch);
      summary.loss_total = total_acc / static_cast<double>(cfg.steps_per_epoch);
      summary.skip_rate = last_skip;
      summary.agreement = agreement;
      summary.train_q = ledger_now().train_q;
      sink.epoch(summary);

      if (agreement > state.best_agreement) {
        state.best_agreement = agreement;
        state.best_epoch = epoch;
        if (!paths.best_checkpoint.empty()) {
          CheckpointWriter w;
          nlohmann::json meta;
          meta["epoch"] = epoch;
          meta["agreement"] = agreement;
          meta["fingerprint"] = state.config_fingerprint;
          w.add_text("__substitute_meta__", meta.dump());
          save_params(w, state.substitute.params());
          w.write(paths.best_checkpoint);
        }
      }
      state.next_epoch = epoch + 1;
    }
  } catch (...) {
    if (!paths.resume_state.empty()) {
      fold_ledger(state, oracle);
      save_run_state(paths.resume_state, state);
    }
    throw;
  }

  report.final_agreement = last_agreement;
  report.best_agreement = state.best_agreement;
  report.best_epoch = state.best_epoch;
  report.final_skip_rate = last_skip;
  report.ledger = ledger_now();
  return report;
}

// ---------------------------------------------------------------------
// Conventional supervised training for in-process targets.
// ---------------------------------------------------------------------

struct TargetTrainReport {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

inline double accuracy_on(TargetNet& net, const Tensor& inputs, const std::vector<int64_t>& labels) {
  std::vector<int64_t> pred = argmax_rows(net.logits(inputs));
  int64_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i)
    if (pred[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline TargetTrainReport train_target_model(TargetNet& net, const Dataset& ds, int64_t epochs,
                                            double lr, int64_t batch, uint64_t seed) {
  Rng rng(seed);
  net.init(rng);
  Adam adam(AdamConfig{lr, 0.9, 0.999, 1e-8});
  std::vector<int64_t> order = ds.train_idx;
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    // deterministic shuffle from the run RNG
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(rng.below(static_cast<int64_t>(i)));
      std::swap(order[i - 1], order[j]);
    }
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(batch)) {
      size_t end = std::min(order.size(), off + static_cast<size_t>(batch));
      std::vector<int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(off),
                               order.begin() + static_cast<std::ptrdiff_t>(end));
      Tensor x = ds.gather_inputs(idx);
      std::vector<int64_t> y = ds.gather_labels(idx);
      PassContext cx;
      Value logits = net.forward(cx, cx.input(x));
      cx.tape.backward(ops::cross_entropy(logits, y));
      std::vector<Param*> params = net.params();
      std::vector<Tensor> grads;
      for (Param* p : params) grads.push_back(cx.grad_of(*p));
      adam.step(params, grads);
    }
  }
  TargetTrainReport report;
  report.train_accuracy = accuracy_on(net, ds.gather_inputs(ds.train_idx), ds.gather_labels(ds.train_idx));
  report.test_accuracy = accuracy_on(net, ds.gather_inputs(ds.test_idx), ds.gather_labels(ds.test_idx));
  return report;
}

}  // namespace dst
