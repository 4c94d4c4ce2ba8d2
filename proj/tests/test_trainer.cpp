#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dst/eval.hpp"
#include "dst/trainer.hpp"
#include "testutil.hpp"

using namespace dst;

namespace {

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TargetNet make_trained_target(uint64_t seed = 131) {
  Dataset ds = gen_blobs(3, 2, 120, 0.06, seed);
  TargetConfig cfg;
  cfg.in = {DataKind::vector, 2};
  cfg.class_count = 3;
  cfg.hidden = 32;
  TargetNet net(cfg);
  train_target_model(net, ds, 30, 0.02, 32, seed);
  return net;
}

TrainConfig desk_config(uint64_t seed = 7) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.steps_per_epoch = 4;
  cfg.batch = 8;
  cfg.decay_start_epoch = 2;
  cfg.seed = seed;
  cfg.probe_gen = 32;
  cfg.probe_uniform = 32;
  cfg.generator.noise_dim = 8;
  cfg.generator.hidden = 16;
  cfg.generator.out = {DataKind::vector, 2};
  cfg.substitute.in = {DataKind::vector, 2};
  cfg.substitute.class_count = 0;  // discover from the oracle
  cfg.substitute.widths = {8, 8};
  return cfg;
}

}  // namespace

TEST(LrSchedule, ConstantThenLinearToZero) {
  TrainConfig cfg;
  cfg.epochs = 150;
  cfg.decay_start_epoch = 80;
  double base = 0.001;
  for (int64_t e = 0; e < 80; ++e) EXPECT_DOUBLE_EQ(cfg.lr_at(base, e), base);
  // linear segment, exactly
  for (int64_t e = 80; e < 150; ++e)
    EXPECT_DOUBLE_EQ(cfg.lr_at(base, e), base * static_cast<double>(150 - e) / 70.0);
  EXPECT_DOUBLE_EQ(cfg.lr_at(base, 150), 0.0);
  EXPECT_DOUBLE_EQ(cfg.lr_at(base, 149), base / 70.0);
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg = desk_config();
  cfg.decay_start_epoch = cfg.epochs;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = desk_config();
  cfg.batch = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = desk_config();
  cfg.lr_sub = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(InitRunState, DiscoversClassCountFromOracle) {
  InProcessOracle oracle(make_trained_target(), Scenario::probability);
  RunState state = init_run_state(desk_config(), oracle);
  EXPECT_EQ(state.substitute.config().class_count, 3);
  // probe queries are accounted in the probe phase, not train
  QueryLedger l = oracle.ledger_snapshot();
  EXPECT_EQ(l.train_q, 0);
  EXPECT_EQ(l.probe_q, 64);
  EXPECT_EQ(state.probe_inputs.shape[0], 64);
  EXPECT_EQ(state.probe_labels.size(), 64u);
}

TEST(SubstituteStep, LedgerGrowsByExactlyBatch) {
  InProcessOracle oracle(make_trained_target(), Scenario::probability);
  RunState state = init_run_state(desk_config(), oracle);
  int64_t before = oracle.ledger_snapshot().train_q;
  substitute_step(state, oracle, 0.001, nullptr);
  EXPECT_EQ(oracle.ledger_snapshot().train_q, before + state.cfg.batch);
}

TEST(SubstituteStep, ZeroLearningRateLeavesParamsFixed) {
  InProcessOracle oracle(make_trained_target(), Scenario::probability);
  RunState state = init_run_state(desk_config(), oracle);
  std::vector<Tensor> before;
  for (Param* p : state.substitute.params()) before.push_back(p->value);
  substitute_step(state, oracle, 0.0, nullptr);
  std::vector<Param*> params = state.substitute.params();
  for (size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i]->value.data, before[i].data);
}

TEST(SubstituteStep, LossMatchesOfflineRecomputation) {
  // rerun the same rng stream to rebuild (x, t, s) and recompute the
  // loss outside the trainer
  InProcessOracle oracle(make_trained_target(), Scenario::probability);
  RunState state = init_run_state(desk_config(), oracle);
  RunState clone = state;  // value semantics: full deep copy

  double skip = 0.0;
  InProcessOracle oracle2(make_trained_target(), Scenario::probability);
  GsilParts recorded = substitute_step(state, oracle2, 0.001, &skip);

  Tensor z = clone.generator.sample_noise(clone.cfg.batch, clone.rng);
  Tensor x = clone.generator.generate(z);
  InProcessOracle oracle3(make_trained_target(), Scenario::probability);
  Tensor t = oracle3.query(x, Phase::train);
  GateTrace trace;
  Tensor logits = clone.substitute.logits(x, clone.cfg.gate_mode(), &trace);
  PassContext cx;
  Tensor s = cx.tape.val(ops::softmax(cx.input(logits)));
  double offline = gsil_loss(build_graph(t), build_graph(s), clone.cfg.weights);
  EXPECT_NEAR(recorded.total, offline, 1e-12);
}

TEST(GeneratorStep, ReuseModeNegatesSubstituteLossAtZeroLr) {
  // with the substitute frozen (lr 0) and the batch reused, the
  // generator-step loss is the exact negation
  InProcessOracle oracle(make_trained_target(), Scenario::probability);
  TrainConfig cfg = desk_config();
  cfg.reuse_query = true;
  RunState state = init_run_state(cfg, oracle);
  Tensor reuse_z, reuse_t;
  GsilParts sub_parts = substitute_step(state, oracle, 0.0, nullptr, &reuse_z, &reuse_t);
  double gen_loss = generator_step(state, oracle, 0.0001, &reuse_z, &reuse_t);
  EXPECT_EQ(gen_loss, -sub_parts.total);
}

TEST(GeneratorStep, TargetParametersUntouched) {
  TargetNet target = make_trained_target();
  uint64_t hash_before = target.param_hash();
  InProcessOracle oracle(target, Scenario::probability);
  RunState state = init_run_state(desk_config(), oracle);
  for (int i = 0; i < 3; ++i) {
    substitute_step(state, oracle, 0.001, nullptr);
    generator_step(state, oracle, 0.0001);
  }
  EXPECT_EQ(target.param_hash(), hash_before);  // black-box seal
}

TEST(GeneratorStep, FrozenSubstituteDiscrepancyTrendsUp) {
  // 50 generator-only steps against a frozen, warmed-up substitute: the
  // discrepancy trend is positive (Spearman rho > 0)
  InProcessOracle oracle(make_trained_target(), Scenario::probability);
  TrainConfig cfg = desk_config();
  cfg.batch = 32;
  RunState state = init_run_state(cfg, oracle);
  // warm the substitute toward the target first; a blank random
  // substitute leaves the min-max game degenerate
  for (int step = 0; step < 80; ++step) substitute_step(state, oracle, 0.005, nullptr);

  // fixed evaluation batch isolates the generator's progress
  Tensor z_eval = state.generator.sample_noise(64, state.rng);
  auto eval_discrepancy = [&] {
    Tensor x = state.generator.generate(z_eval);
    Tensor t = oracle.query(x, Phase::probe);
    Tensor s_logits = state.substitute.logits(x, cfg.gate_mode());
    PassContext cx;
    Tensor s = cx.tape.val(ops::softmax(cx.input(s_logits)));
    return gsil_loss(build_graph(t), build_graph(s), cfg.weights);
  };
  std::vector<double> discrepancy;
  for (int step = 0; step < 50; ++step) {
    generator_step(state, oracle, 0.01);
    discrepancy.push_back(eval_discrepancy());
  }
  // Spearman rank correlation against the step index
  std::vector<size_t> order(discrepancy.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return discrepancy[a] < discrepancy[b]; });
  std::vector<double> rank(discrepancy.size());
  for (size_t r = 0; r < order.size(); ++r) rank[order[r]] = static_cast<double>(r);
  double n = static_cast<double>(rank.size());
  double d2 = 0.0;
  for (size_t i = 0; i < rank.size(); ++i) {
    double d = rank[i] - static_cast<double>(i);
    d2 += d * d;
  }
  double rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
  EXPECT_GT(rho, 0.0);
}

TEST(RunDistillation, BookkeepingAndLedgerContract) {
  InProcessOracle oracle(make_trained_target(), Scenario::probability);
  TrainConfig cfg = desk_config();
  RunState state = init_run_state(cfg, oracle);
  MetricsSink sink;
  DistillReport report = run_distillation(state, oracle, sink);

  EXPECT_EQ(sink.epochs.size(), 3u);   // one record per epoch
  EXPECT_EQ(sink.steps.size(), 12u);   // epochs * steps_per_epoch
  // fresh-query mode: substitute and generator steps both query
  EXPECT_EQ(report.ledger.train_q, 2 * cfg.epochs * cfg.steps_per_epoch * cfg.batch);
  EXPECT_EQ(report.ledger.eval_q, 0);
  // alternation contract: exactly one update of each per iteration
  EXPECT_EQ(state.adam_sub.step_count(), cfg.epochs * cfg.steps_per_epoch);
  EXPECT_EQ(state.adam_gen.step_count(), cfg.epochs * cfg.steps_per_epoch);
}

TEST(RunDistillation, ReuseQueryHalvesTrainQ) {
  InProcessOracle oracle(make_trained_target(), Scenario::probability);
  TrainConfig cfg = desk_config();
  cfg.reuse_query = true;
  RunState state = init_run_state(cfg, oracle);
  MetricsSink sink;
  DistillReport report = run_distillation(state, oracle, sink);
  EXPECT_EQ(report.ledger.train_q, cfg.epochs * cfg.steps_per_epoch * cfg.batch);
}

TEST(RunDistillation, MetricsStreamBitwiseDeterministic) {
  auto run = [] {
    InProcessOracle oracle(make_trained_target(), Scenario::probability);
    RunState state = init_run_state(desk_config(9), oracle);
    MetricsSink sink;
    run_distillation(state, oracle, sink);
    std::string out;
    for (const auto& m : sink.steps) out += m.jsonl() + "\n";
    for (const auto& e : sink.epochs) out += e.csv_row() + "\n";
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(RunDistillation, LabelScenarioRuns) {
  InProcessOracle oracle(make_trained_target(), Scenario::label);
  TrainConfig cfg = desk_config();
  RunState state = init_run_state(cfg, oracle);
  MetricsSink sink;
  DistillReport report = run_distillation(state, oracle, sink);
  EXPECT_EQ(report.ledger.train_q, 2 * cfg.epochs * cfg.steps_per_epoch * cfg.batch);
  for (const auto& m : sink.steps) EXPECT_TRUE(std::isfinite(m.loss.total));
}

TEST(RunState, SaveLoadSaveByteIdentical) {
  InProcessOracle oracle(make_trained_target(), Scenario::probability);
  RunState state = init_run_state(desk_config(), oracle);
  MetricsSink sink;
  run_distillation(state, oracle, sink);

  std::string p1 = temp_file("dst_state_a.dstckpt"), p2 = temp_file("dst_state_b.dstckpt");
  fold_ledger(state, oracle);
  save_run_state(p1, state);
  RunState loaded = load_run_state(p1, state.cfg);
  save_run_state(p2, loaded);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(b1, b2);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST(RunState, SplitRunEqualsUninterruptedRun) {
  TrainConfig cfg = desk_config(21);
  cfg.epochs = 4;
  cfg.decay_start_epoch = 3;

  // uninterrupted reference
  InProcessOracle oracle_a(make_trained_target(), Scenario::probability);
  RunState full = init_run_state(cfg, oracle_a);
  MetricsSink sink_a;
  run_distillation(full, oracle_a, sink_a);

  // split run: epochs 0-1 driven manually under the same schedule, then
  // checkpoint, then resume with a fresh oracle for epochs 2-3
  InProcessOracle oracle_b(make_trained_target(), Scenario::probability);
  RunState part = init_run_state(cfg, oracle_b);
  MetricsSink sink_b;
  for (int64_t epoch = 0; epoch < 2; ++epoch) {
    double lr_s = cfg.lr_at(cfg.lr_sub, epoch);
    double lr_g = cfg.lr_at(cfg.lr_gen, epoch);
    for (int64_t step = 0; step < cfg.steps_per_epoch; ++step) {
      double skip = 0.0;
      GsilParts parts = substitute_step(part, oracle_b, lr_s, &skip);
      double gen_loss = generator_step(part, oracle_b, lr_g);
      StepMetrics m;
      m.epoch = epoch;
      m.step = step;
      m.loss = parts;
      m.gen_loss = gen_loss;
      m.skip_rate = skip;
      m.train_q = oracle_b.ledger_snapshot().train_q;
      m.lr_sub = lr_s;
      m.lr_gen = lr_g;
      sink_b.step(m);
    }
    part.next_epoch = epoch + 1;
  }
  std::string path = temp_file("dst_state_split.dstckpt");
  fold_ledger(part, oracle_b);
  save_run_state(path, part);
  RunState resumed = load_run_state(path, cfg);
  InProcessOracle oracle_c(make_trained_target(), Scenario::probability);
  run_distillation(resumed, oracle_c, sink_b);
  std::remove(path.c_str());

  // the combined stream must reproduce the uninterrupted one bitwise
  ASSERT_EQ(sink_a.steps.size(), sink_b.steps.size());
  for (size_t i = 0; i < sink_a.steps.size(); ++i)
    EXPECT_EQ(sink_a.steps[i].jsonl(), sink_b.steps[i].jsonl()) << "step " << i;
}

TEST(RunState, AbortWritesResumableState) {
  // an oracle that fails mid-run aborts the loop but leaves a resumable
  // state on disk
  class FlakyOracle : public TargetOracle {
   public:
    FlakyOracle(TargetNet net, int64_t fail_after)
        : inner_(std::move(net), Scenario::probability), fail_after_(fail_after) {}
    Tensor query(const Tensor& x, Phase phase) override {
      if (phase == Phase::train && ++calls_ > fail_after_)
        throw TransportError("injected failure", 3);
      return inner_.query(x, phase);
    }
    QueryLedger ledger_snapshot() const override { return inner_.ledger_snapshot(); }
    Scenario scenario() const override { return inner_.scenario(); }

   private:
    InProcessOracle inner_;
    int64_t calls_ = 0;
    int64_t fail_after_;
  };

  FlakyOracle oracle(make_trained_target(), 10);
  TrainConfig cfg = desk_config();
  RunState state = init_run_state(cfg, oracle);
  MetricsSink sink;
  DistillPaths paths;
  paths.resume_state = temp_file("dst_state_abort.dstckpt");
  EXPECT_THROW(run_distillation(state, oracle, sink, paths), TransportError);
  RunState resumed = load_run_state(paths.resume_state, cfg);
  EXPECT_EQ(resumed.next_epoch, state.next_epoch);
  InProcessOracle good(make_trained_target(), Scenario::probability);
  MetricsSink sink2;
  run_distillation(resumed, good, sink2);  // completes after resume
  std::remove(paths.resume_state.c_str());
}

TEST(RunState, WrongMagicRejected) {
  std::string path = temp_file("dst_state_badmagic.dstckpt");
  std::ofstream(path) << "garbage";
  EXPECT_THROW(load_run_state(path, desk_config()), std::runtime_error);
  std::remove(path.c_str());
}

TEST(TargetTraining, ReachesHighAccuracyOnBlobs) {
  Dataset ds = gen_blobs(3, 2, 120, 0.06, 17);
  TargetConfig cfg;
  cfg.in = {DataKind::vector, 2};
  cfg.class_count = 3;
  cfg.hidden = 32;
  TargetNet net(cfg);
  TargetTrainReport report = train_target_model(net, ds, 30, 0.02, 32, 18);
  EXPECT_GT(report.train_accuracy, 0.95);
  EXPECT_GT(report.test_accuracy, 0.9);
}
