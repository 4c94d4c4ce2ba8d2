#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dst/eval.hpp"
#include "testutil.hpp"

using namespace dst;

namespace {

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

struct Fixture {
  Dataset ds;
  TargetNet target;
  InProcessOracle oracle;
  SubstituteNet substitute;

  static Fixture make(uint64_t seed = 141, Scenario scenario = Scenario::probability) {
    Dataset ds = gen_blobs(3, 2, 120, 0.06, seed);
    TargetConfig tc;
    tc.in = {DataKind::vector, 2};
    tc.class_count = 3;
    tc.hidden = 32;
    TargetNet target(tc);
    train_target_model(target, ds, 30, 0.02, 32, seed + 1);

    // white-box sanity role: substitute mirrors the target closely by
    // distilling directly on the training inputs
    SubstituteConfig sc;
    sc.in = {DataKind::vector, 2};
    sc.class_count = 3;
    sc.widths = {16, 16};
    SubstituteNet sub(sc);
    Rng rng(seed + 2);
    sub.init(rng);
    Adam adam(AdamConfig{0.01, 0.9, 0.999, 1e-8});
    Tensor train_x = ds.gather_inputs(ds.train_idx);
    std::vector<int64_t> target_labels = argmax_rows(target.logits(train_x));
    for (int epoch = 0; epoch < 60; ++epoch) {
      PassContext cx;
      Value logits = sub.forward(cx, cx.input(train_x), GateMode::force_keep_all, nullptr);
      cx.tape.backward(ops::cross_entropy(logits, target_labels));
      std::vector<Param*> params = sub.params();
      std::vector<Tensor> grads;
      for (Param* p : params) grads.push_back(cx.grad_of(*p));
      adam.step(params, grads);
    }
    return Fixture{std::move(ds), target, InProcessOracle(target, scenario), std::move(sub)};
  }

  EvalProtocol protocol(AttackMethod m, double eps, int64_t repeats) {
    EvalProtocol p;
    p.attack.method = m;
    p.attack.epsilon = eps;
    p.attack.step_size = eps > 0 ? eps / 4.0 : 0.0;
    p.attack.steps = 10;
    p.attack.gate_mode = GateMode::force_keep_all;
    p.repeats = repeats;
    return p;
  }
};

}  // namespace

TEST(AsrNonTarget, ZeroEpsilonZeroAsr) {
  Fixture fx = Fixture::make(151);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  AsrSummary summary = asr_non_target(fx.substitute, fx.oracle, eval_set, fx.protocol(AttackMethod::pgd, 0.0, 3));
  EXPECT_DOUBLE_EQ(summary.asr_mean, 0.0);
  EXPECT_DOUBLE_EQ(summary.asr_std, 0.0);
}

TEST(AsrNonTarget, FilterExcludesMisclassified) {
  Fixture fx = Fixture::make(152);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  Tensor target_out = fx.oracle.query(eval_set.inputs, Phase::eval);
  std::vector<int64_t> pred = argmax_rows(target_out);
  int64_t correct = 0;
  for (size_t i = 0; i < eval_set.labels.size(); ++i)
    if (pred[i] == eval_set.labels[i]) ++correct;

  EvalProtocol p = fx.protocol(AttackMethod::pgd, 0.2, 1);
  RepeatResult r = asr_repeat(fx.substitute, fx.oracle, eval_set, p, 1, -1);
  EXPECT_EQ(r.filtered, correct);  // denominator = correctly classified only
}

TEST(AsrNonTarget, EvalLedgerAccounting) {
  Fixture fx = Fixture::make(153);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  int64_t n = eval_set.inputs.shape[0];
  QueryLedger before = fx.oracle.ledger_snapshot();
  EvalProtocol p = fx.protocol(AttackMethod::pgd, 0.2, 1);
  RepeatResult r = asr_repeat(fx.substitute, fx.oracle, eval_set, p, 1, -1);
  QueryLedger after = fx.oracle.ledger_snapshot();
  // exactly filter pass (n) + final check (filtered)
  EXPECT_EQ(after.eval_q - before.eval_q, n + r.filtered);
  EXPECT_EQ(after.train_q, before.train_q);  // crafting adds no train queries
}

TEST(AsrNonTarget, MonotoneInEpsilonOnSubstitutePredictions) {
  Fixture fx = Fixture::make(154);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  // white-box view: substitute-level success rate over the epsilon grid
  double eps = 0.3;
  std::vector<double> grid = {0.0, eps / 2.0, eps};
  std::vector<double> rates;
  Tensor x = eval_set.inputs;
  std::vector<int64_t> labels = substitute_labels(fx.substitute, x, GateMode::force_keep_all);
  for (double e : grid) {
    AttackConfig cfg;
    cfg.method = AttackMethod::pgd;
    cfg.epsilon = e;
    cfg.step_size = e > 0 ? e / 4.0 : 0.0;
    cfg.steps = 10;
    cfg.gate_mode = GateMode::force_keep_all;
    cfg.seed = 3;
    AdvBatch batch = pgd(fx.substitute, x, labels, cfg);
    int64_t wins = 0;
    for (bool s : batch.success) wins += s ? 1 : 0;
    rates.push_back(100.0 * static_cast<double>(wins) / static_cast<double>(labels.size()));
  }
  EXPECT_GE(rates[1], rates[0] - 2.0);
  EXPECT_GE(rates[2], rates[1] - 2.0);
}

TEST(AsrTarget, DenominatorExcludesAlreadyTargetClass) {
  Fixture fx = Fixture::make(155);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  Tensor target_out = fx.oracle.query(eval_set.inputs, Phase::eval);
  std::vector<int64_t> pred = argmax_rows(target_out);
  int64_t not_class0 = 0;
  for (int64_t p : pred)
    if (p != 0) ++not_class0;

  EvalProtocol p = fx.protocol(AttackMethod::pgd, 0.2, 1);
  p.mode = EvalMode::target;
  RepeatResult r = asr_repeat(fx.substitute, fx.oracle, eval_set, p, 1, 0);
  EXPECT_EQ(r.filtered, not_class0);
}

TEST(AsrTarget, BinaryDualityWithNonTarget) {
  // 2-class task: targeting the opposite class equals the non-target
  // protocol on the same filtered set
  Dataset ds = gen_blobs(2, 2, 100, 0.05, 156);
  TargetConfig tc;
  tc.in = {DataKind::vector, 2};
  tc.class_count = 2;
  tc.hidden = 16;
  TargetNet target(tc);
  train_target_model(target, ds, 30, 0.02, 32, 157);
  InProcessOracle oracle(target, Scenario::probability);

  SubstituteConfig sc;
  sc.in = {DataKind::vector, 2};
  sc.class_count = 2;
  sc.widths = {8};
  SubstituteNet sub(sc);
  Rng rng(158);
  sub.init(rng);

  EvalSet eval_set = EvalSet::from_test_split(ds);
  EvalProtocol p;
  p.attack.method = AttackMethod::fgsm;  // deterministic, no random start
  p.attack.epsilon = 0.15;
  p.attack.step_size = 0.15;
  p.attack.steps = 1;
  p.attack.gate_mode = GateMode::force_keep_all;
  p.repeats = 1;

  // filter sets coincide when the target classifies everything correctly
  Tensor out = oracle.query(eval_set.inputs, Phase::eval);
  std::vector<int64_t> pred = argmax_rows(out);
  bool all_correct = true;
  for (size_t i = 0; i < eval_set.labels.size(); ++i)
    if (pred[i] != eval_set.labels[i]) all_correct = false;
  if (!all_correct) GTEST_SKIP() << "target not perfect on this seed";

  p.mode = EvalMode::non_target;
  p.label_source = "target";
  RepeatResult non_target = asr_repeat(sub, oracle, eval_set, p, 5, -1);
  // target mode: per-example wanted class = the other class; with 2
  // classes and a perfect target this is the same set, and success
  // (prediction changes) == success (prediction lands on 1-y)
  double asr_target_sum = 0.0;
  int64_t total = 0;
  for (int64_t cls = 0; cls < 2; ++cls) {
    p.mode = EvalMode::target;
    RepeatResult r = asr_repeat(sub, oracle, eval_set, p, 5, cls);
    asr_target_sum += r.asr * static_cast<double>(r.filtered);
    total += r.filtered;
  }
  EXPECT_NEAR(non_target.asr, asr_target_sum / static_cast<double>(total), 1e-9);
}

TEST(Repeats, MeanStdMatchScalarRecomputation) {
  Fixture fx = Fixture::make(159);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  EvalProtocol p = fx.protocol(AttackMethod::pgd, 0.25, 10);
  AsrSummary summary = asr_non_target(fx.substitute, fx.oracle, eval_set, p);
  ASSERT_EQ(summary.repeats.size(), 10u);

  double mean = 0.0;
  for (const auto& r : summary.repeats) mean += r.asr;
  mean /= 10.0;
  double var = 0.0;
  for (const auto& r : summary.repeats) var += (r.asr - mean) * (r.asr - mean);
  double std = std::sqrt(var / 10.0);
  EXPECT_NEAR(summary.asr_mean, mean, 1e-12);
  EXPECT_NEAR(summary.asr_std, std, 1e-12);
  EXPECT_TRUE(std::isfinite(summary.asr_std));
  EXPECT_GE(summary.asr_mean, 0.0);
  EXPECT_LE(summary.asr_mean, 100.0);
}

TEST(Report, AssemblyAndRenderingsAgree) {
  Fixture fx = Fixture::make(160);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  EvalProtocol p = fx.protocol(AttackMethod::pgd, 0.25, 3);
  AsrSummary summary = asr_non_target(fx.substitute, fx.oracle, eval_set, p);

  DistillReport distill;
  distill.config_fingerprint = 99;
  distill.final_skip_rate = 0.706;
  distill.ledger.train_q = 12345;
  RunReport report = assemble_report(summary, distill, p, Scenario::probability, 99,
                                     fx.oracle.ledger_snapshot().eval_q);

  // skip rate renders in the percent-with-one-decimal style
  EXPECT_EQ(report.to_json().at("skip_rate_percent"), "70.6");
  // substitute-crafted attacks: crafting-time Test-Q stays zero (dash)
  EXPECT_EQ(report.test_q, 0);
  EXPECT_NE(report.table().find("Test-Q -"), std::string::npos);

  std::string jpath = temp_file("dst_report.json"), cpath = temp_file("dst_report.csv");
  save_report(jpath, cpath, report);
  RunReport loaded = load_report(jpath);
  // JSON and CSV renderings agree field-for-field
  EXPECT_EQ(loaded.csv_row(), report.csv_row());
  std::ifstream csv(cpath);
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, RunReport::csv_header());
  EXPECT_EQ(row, report.csv_row());
  std::remove(jpath.c_str());
  std::remove(cpath.c_str());
}

TEST(Report, RefusesMixedFingerprints) {
  Fixture fx = Fixture::make(161);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  EvalProtocol p = fx.protocol(AttackMethod::pgd, 0.25, 2);
  AsrSummary summary = asr_non_target(fx.substitute, fx.oracle, eval_set, p);
  DistillReport distill;
  distill.config_fingerprint = 1;
  EXPECT_THROW(assemble_report(summary, distill, p, Scenario::probability, 2, 0), std::runtime_error);
}

TEST(Report, RefusesSingleRepeat) {
  Fixture fx = Fixture::make(162);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  EvalProtocol p = fx.protocol(AttackMethod::pgd, 0.25, 1);
  AsrSummary summary = asr_non_target(fx.substitute, fx.oracle, eval_set, p);
  DistillReport distill;
  distill.config_fingerprint = 7;
  EXPECT_THROW(assemble_report(summary, distill, p, Scenario::probability, 7, 0), std::runtime_error);
}

TEST(Report, PerClassBreakdownCoversAllClasses) {
  Fixture fx = Fixture::make(163);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  EvalProtocol p = fx.protocol(AttackMethod::pgd, 0.3, 2);
  AsrSummary summary = asr_non_target(fx.substitute, fx.oracle, eval_set, p);
  EXPECT_EQ(summary.per_class_asr.size(), 3u);
  for (const auto& [cls, asr] : summary.per_class_asr) {
    EXPECT_GE(asr, 0.0);
    EXPECT_LE(asr, 100.0);
  }
}

TEST(Embeddings, DumpWritesBinaryAndManifest) {
  Fixture fx = Fixture::make(164);
  Rng rng(165);
  Tensor inputs = rng.uniform_tensor({20, 2});
  std::string bin = temp_file("dst_embed.bin"), man = temp_file("dst_embed.json");
  dump_embeddings(fx.substitute, inputs, GateMode::force_keep_all, bin, man);

  std::ifstream mf(man);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  EXPECT_EQ(manifest.at("count").get<int64_t>(), 20);
  EXPECT_EQ(manifest.at("dim").get<int64_t>(), 16);  // last block width
  EXPECT_EQ(manifest.at("dtype"), "f32");
  std::ifstream bf(bin, std::ios::binary | std::ios::ate);
  EXPECT_EQ(static_cast<int64_t>(bf.tellg()), 20 * 16 * 4);
  std::remove(bin.c_str());
  std::remove(man.c_str());
}

TEST(Embeddings, AdvBatchExport) {
  Fixture fx = Fixture::make(166);
  EvalSet eval_set = EvalSet::from_test_split(fx.ds);
  EvalProtocol p = fx.protocol(AttackMethod::pgd, 0.2, 2);
  AdvBatch last;
  asr_non_target(fx.substitute, fx.oracle, eval_set, p, &last);
  ASSERT_GT(last.original.numel(), 0);

  std::string cpath = temp_file("dst_adv.dstckpt"), spath = temp_file("dst_adv.json");
  export_adv_batch(cpath, spath, last);
  CheckpointReader r(cpath);
  EXPECT_EQ(r.tensor("original").data, last.original.data);
  EXPECT_EQ(r.tensor("adversarial").data, last.adversarial.data);
  std::ifstream sf(spath);
  nlohmann::json sidecar = nlohmann::json::parse(sf);
  EXPECT_EQ(sidecar.at("l2").size(), last.l2.size());
  std::remove(cpath.c_str());
  std::remove(spath.c_str());
}
