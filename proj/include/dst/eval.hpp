// Attack-success-rate evaluation. Non-target: only examples the target
// classifies correctly enter the denominator; success is any change of
// the target's prediction. Target: only examples not already classified
// as the wanted class enter; success is landing exactly there. Repeated
// runs report mean and standard deviation.
#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "dst/attacks.hpp"
#include "dst/gate.hpp"
#include "dst/oracle.hpp"
#include "dst/trainer.hpp"

namespace dst {

enum class EvalMode { non_target, target };

inline EvalMode eval_mode_from_name(const std::string& s) {
  if (s == "non_target") return EvalMode::non_target;
  if (s == "target") return EvalMode::target;
  throw std::invalid_argument("unknown eval mode '" + s + "'");
}

struct EvalProtocol {
  EvalMode mode = EvalMode::non_target;
  int64_t target_class = -1;  // -1: round-robin over classes per repeat
  AttackConfig attack;
  int64_t repeats = 10;
  std::string label_source = "substitute";  // or "target" (reuses the filter-pass outputs)

  void validate(int64_t class_count) const {
    if (repeats < 1) throw std::invalid_argument("eval: repeats must be >= 1");
    if (mode == EvalMode::target && target_class >= class_count)
      throw std::invalid_argument("eval: target_class outside class range");
    if (label_source != "substitute" && label_source != "target")
      throw std::invalid_argument("eval: label_source must be substitute or target");
  }
};

struct EvalSet {
  Tensor inputs;
  std::vector<int64_t> labels;

  static EvalSet from_test_split(const Dataset& ds) {
    return {ds.gather_inputs(ds.test_idx), ds.gather_labels(ds.test_idx)};
  }
};

struct RepeatResult {
  double asr = 0.0;         // percent
  int64_t filtered = 0;     // denominator size
  double mean_l2 = 0.0, mean_linf = 0.0;
  std::map<int64_t, std::pair<int64_t, int64_t>> per_class;  // label -> (count, successes)
};

namespace detail {

inline Tensor gather_rows(const Tensor& t, const std::vector<int64_t>& idx) {
  int64_t per = t.numel() / t.shape[0];
  Shape s = t.shape;
  s[0] = static_cast<int64_t>(idx.size());
  Tensor out(s);
  for (size_t i = 0; i < idx.size(); ++i)
    for (int64_t j = 0; j < per; ++j)
      out.data[i * static_cast<size_t>(per) + static_cast<size_t>(j)] =
          t.data[static_cast<size_t>(idx[i] * per + j)];
  return out;
}

}  // namespace detail

// One crafted-and-checked pass. Spends eval queries for the filter pass
// (all examples) and the final check (filtered examples); crafting on
// the substitute spends none.
inline RepeatResult asr_repeat(SubstituteNet& sub, TargetOracle& oracle, const EvalSet& eval_set,
                               const EvalProtocol& protocol, uint64_t attack_seed,
                               int64_t target_class, AdvBatch* batch_out = nullptr) {
  Tensor target_out = oracle.query(eval_set.inputs, Phase::eval);
  std::vector<int64_t> target_pred = argmax_rows(target_out);

  std::vector<int64_t> keep;
  for (size_t i = 0; i < eval_set.labels.size(); ++i) {
    if (protocol.mode == EvalMode::non_target) {
      // only attack what the target currently gets right
      if (target_pred[i] == eval_set.labels[i]) keep.push_back(static_cast<int64_t>(i));
    } else {
      // only attack what is not already the wanted class
      if (target_pred[i] != target_class) keep.push_back(static_cast<int64_t>(i));
    }
  }
  RepeatResult result;
  result.filtered = static_cast<int64_t>(keep.size());
  if (keep.empty()) throw std::runtime_error("asr: the protocol filter left no examples to attack");

  Tensor x = detail::gather_rows(eval_set.inputs, keep);
  std::vector<int64_t> seed_labels;
  if (protocol.mode == EvalMode::target) {
    seed_labels.assign(keep.size(), target_class);
  } else if (protocol.label_source == "target") {
    for (int64_t i : keep) seed_labels.push_back(target_pred[static_cast<size_t>(i)]);
  } else {
    seed_labels = substitute_labels(sub, x, protocol.attack.gate_mode);
  }

  AttackConfig cfg = protocol.attack;
  cfg.targeted = protocol.mode == EvalMode::target;
  cfg.seed = attack_seed;
  AdvBatch batch = run_attack(sub, x, seed_labels, cfg);

  Tensor adv_out = oracle.query(batch.adversarial, Phase::eval);
  std::vector<int64_t> adv_pred = argmax_rows(adv_out);

  int64_t successes = 0;
  for (size_t i = 0; i < keep.size(); ++i) {
    int64_t orig_idx = keep[i];
    bool success = protocol.mode == EvalMode::non_target
                       ? adv_pred[i] != target_pred[static_cast<size_t>(orig_idx)]
                       : adv_pred[i] == target_class;
    successes += success ? 1 : 0;
    auto& cell = result.per_class[eval_set.labels[static_cast<size_t>(orig_idx)]];
    cell.first += 1;
    cell.second += success ? 1 : 0;
  }
  result.asr = 100.0 * static_cast<double>(successes) / static_cast<double>(keep.size());
  auto [l2, linf] = perturbation_stats(batch);
  result.mean_l2 = l2;
  result.mean_linf = linf;
  if (batch_out) *batch_out = std::move(batch);
  return result;
}

struct AsrSummary {
  std::vector<RepeatResult> repeats;
  double asr_mean = 0.0;
  double asr_std = 0.0;
  double mean_l2 = 0.0, mean_linf = 0.0;
  std::map<int64_t, double> per_class_asr;

  void finalize() {
    double sum = 0.0;
    for (const auto& r : repeats) sum += r.asr;
    asr_mean = sum / static_cast<double>(repeats.size());
    double var = 0.0;
    for (const auto& r : repeats) var += (r.asr - asr_mean) * (r.asr - asr_mean);
    asr_std = std::sqrt(var / static_cast<double>(repeats.size()));
    double l2 = 0.0, linf = 0.0;
    std::map<int64_t, std::pair<int64_t, int64_t>> cls;
    for (const auto& r : repeats) {
      l2 += r.mean_l2;
      linf += r.mean_linf;
      for (const auto& [label, cell] : r.per_class) {
        cls[label].first += cell.first;
        cls[label].second += cell.second;
      }
    }
    mean_l2 = l2 / static_cast<double>(repeats.size());
    mean_linf = linf / static_cast<double>(repeats.size());
    for (const auto& [label, cell] : cls)
      per_class_asr[label] = 100.0 * static_cast<double>(cell.second) / static_cast<double>(cell.first);
  }
};

inline AsrSummary asr_non_target(SubstituteNet& sub, TargetOracle& oracle, const EvalSet& eval_set,
                                 EvalProtocol protocol, AdvBatch* last_batch = nullptr) {
  protocol.mode = EvalMode::non_target;
  protocol.validate(sub.config().class_count);
  AsrSummary summary;
  for (int64_t r = 0; r < protocol.repeats; ++r) {
    bool last = r + 1 == protocol.repeats;
    summary.repeats.push_back(asr_repeat(sub, oracle, eval_set, protocol,
                                         protocol.attack.seed + static_cast<uint64_t>(r), -1,
                                         last ? last_batch : nullptr));
  }
  summary.finalize();
  return summary;
}

inline AsrSummary asr_target(SubstituteNet& sub, TargetOracle& oracle, const EvalSet& eval_set,
                             EvalProtocol protocol, AdvBatch* last_batch = nullptr) {
  protocol.mode = EvalMode::target;
  int64_t classes = sub.config().class_count;
  protocol.validate(classes);
  AsrSummary summary;
  for (int64_t r = 0; r < protocol.repeats; ++r) {
    int64_t cls = protocol.target_class >= 0 ? protocol.target_class : r % classes;
    bool last = r + 1 == protocol.repeats;
    summary.repeats.push_back(asr_repeat(sub, oracle, eval_set, protocol,
                                         protocol.attack.seed + static_cast<uint64_t>(r), cls,
                                         last ? last_batch : nullptr));
  }
  summary.finalize();
  return summary;
}

// ---------------------------------------------------------------------
// RunReport: the Table-6-style row for one experiment.
// ---------------------------------------------------------------------

struct RunReport {
  std::string mode;           // non_target / target
  std::string attack_method;  // fgsm / bim / pgd / cw
  std::string scenario;       // probability / label
  double asr_mean = 0.0;
  double asr_std = 0.0;
  std::vector<double> asr_per_repeat;
  double mean_l2 = 0.0;
  double mean_linf = 0.0;
  double skip_rate = 0.0;  // fraction in [0,1]
  int64_t train_q = 0;
  int64_t test_q = 0;          // crafting-time target queries (0 for substitute attacks)
  int64_t protocol_eval_q = 0; // filter-pass + final-check accounting
  uint64_t fingerprint = 0;
  std::map<int64_t, double> per_class_asr;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mode"] = mode;
    j["attack"] = attack_method;
    j["scenario"] = scenario;
    j["asr_mean"] = asr_mean;
    j["asr_std"] = asr_std;
    j["asr_per_repeat"] = asr_per_repeat;
    j["mean_l2"] = mean_l2;
    j["mean_linf"] = mean_linf;
    j["skip_rate"] = skip_rate;
    j["skip_rate_percent"] = format_percent(skip_rate);
    j["train_q"] = train_q;
    j["test_q"] = test_q;
    j["protocol_eval_q"] = protocol_eval_q;
    j["fingerprint"] = fingerprint;
    nlohmann::json cls = nlohmann::json::object();
    for (const auto& [label, asr] : per_class_asr) cls[std::to_string(label)] = asr;
    j["per_class_asr"] = cls;
    return j;
  }

  static std::string csv_header() {
    return "mode,attack,scenario,asr_mean,asr_std,mean_l2,mean_linf,skip_rate,train_q,test_q,"
           "protocol_eval_q,fingerprint";
  }

  std::string csv_row() const {
    nlohmann::json cells = {asr_mean, asr_std, mean_l2, mean_linf, skip_rate};
    std::string out = mode + "," + attack_method + "," + scenario;
    for (const auto& c : cells) out += "," + c.dump();
    out += "," + std::to_string(train_q) + "," + std::to_string(test_q) + "," +
           std::to_string(protocol_eval_q) + "," + std::to_string(fingerprint);
    return out;
  }

  std::string table() const {
    // Test-Q renders as a dash for substitute-crafted attacks
    std::string tq = test_q == 0 ? "-" : std::to_string(test_q);
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "%-12s %-6s %-12s ASR %6.2f +/- %5.2f  L2 %7.4f  Linf %6.4f  skip %s%%  "
                  "Train-Q %lld  Test-Q %s",
                  mode.c_str(), attack_method.c_str(), scenario.c_str(), asr_mean, asr_std, mean_l2,
                  mean_linf, format_percent(skip_rate).c_str(), static_cast<long long>(train_q),
                  tq.c_str());
    return std::string(buf);
  }
};

// Stitches one experiment's artifacts together; refuses to mix
// fingerprints and refuses single-repeat statistics.
inline RunReport assemble_report(const AsrSummary& summary, const DistillReport& distill,
                                 const EvalProtocol& protocol, Scenario scenario,
                                 uint64_t eval_fingerprint, int64_t protocol_eval_q = 0) {
  if (distill.config_fingerprint != eval_fingerprint)
    throw std::runtime_error("assemble_report: artifacts come from different experiment fingerprints (" +
                             std::to_string(distill.config_fingerprint) + " vs " +
                             std::to_string(eval_fingerprint) + ")");
  if (summary.repeats.size() < 2)
    throw std::runtime_error("assemble_report: single-repeat statistics are not reportable; run >= 2 repeats");
  RunReport report;
  report.mode = protocol.mode == EvalMode::non_target ? "non_target" : "target";
  report.attack_method = attack_method_name(protocol.attack.method);
  report.scenario = scenario_name(scenario);
  report.asr_mean = summary.asr_mean;
  report.asr_std = summary.asr_std;
  for (const auto& r : summary.repeats) report.asr_per_repeat.push_back(r.asr);
  report.mean_l2 = summary.mean_l2;
  report.mean_linf = summary.mean_linf;
  report.skip_rate = distill.final_skip_rate;
  report.train_q = distill.ledger.train_q;
  report.protocol_eval_q = protocol_eval_q;
  report.fingerprint = eval_fingerprint;
  report.per_class_asr = summary.per_class_asr;
  return report;
}

inline void save_report(const std::string& json_path, const std::string& csv_path,
                        const RunReport& report) {
  if (!json_path.empty()) {
    std::ofstream f(json_path, std::ios::trunc);
    f << report.to_json().dump(2) << "\n";
  }
  if (!csv_path.empty()) {
    std::ofstream f(csv_path, std::ios::trunc);
    f << RunReport::csv_header() << "\n" << report.csv_row() << "\n";
  }
}

inline RunReport load_report(const std::string& json_path) {
  std::ifstream f(json_path);
  if (!f) throw std::runtime_error("cannot open report " + json_path);
  nlohmann::json j = nlohmann::json::parse(f);
  RunReport r;
  r.mode = j.at("mode").get<std::string>();
  r.attack_method = j.at("attack").get<std::string>();
  r.scenario = j.at("scenario").get<std::string>();
  r.asr_mean = j.at("asr_mean").get<double>();
  r.asr_std = j.at("asr_std").get<double>();
  r.asr_per_repeat = j.at("asr_per_repeat").get<std::vector<double>>();
  r.mean_l2 = j.at("mean_l2").get<double>();
  r.mean_linf = j.at("mean_linf").get<double>();
  r.skip_rate = j.at("skip_rate").get<double>();
  r.train_q = j.at("train_q").get<int64_t>();
  r.test_q = j.at("test_q").get<int64_t>();
  r.protocol_eval_q = j.at("protocol_eval_q").get<int64_t>();
  r.fingerprint = j.at("fingerprint").get<uint64_t>();
  for (const auto& [key, value] : j.at("per_class_asr").items())
    r.per_class_asr[std::stoll(key)] = value.get<double>();
  return r;
}

// ---------------------------------------------------------------------
// Embedding dumps (penultimate activations) for external projection
// tools: raw little-endian f32 binary plus a JSON manifest.
// ---------------------------------------------------------------------

inline void dump_embeddings(SubstituteNet& sub, const Tensor& inputs, GateMode mode,
                            const std::string& bin_path, const std::string& manifest_path) {
  PassContext cx;
  Tensor feats = cx.tape.val(sub.features(cx, cx.input(inputs), mode, nullptr));
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write embeddings to " + bin_path);
  std::vector<float> f32(feats.data.begin(), feats.data.end());
  bin.write(reinterpret_cast<const char*>(f32.data()),
            static_cast<std::streamsize>(f32.size() * sizeof(float)));
  nlohmann::json manifest;
  manifest["count"] = feats.shape[0];
  manifest["dim"] = feats.shape[1];
  manifest["dtype"] = "f32";
  manifest["byte_order"] = "little";
  manifest["layout"] = "row-major";
  manifest["file"] = bin_path.substr(bin_path.find_last_of('/') + 1);
  std::ofstream mf(manifest_path, std::ios::trunc);
  mf << manifest.dump(2) << "\n";
}

// AdvBatch export: container with the tensors plus a JSON sidecar of
// per-example stats.
inline void export_adv_batch(const std::string& container_path, const std::string& sidecar_path,
                             const AdvBatch& batch) {
  CheckpointWriter w;
  w.add("original", batch.original, Dtype::f64);
  w.add("adversarial", batch.adversarial, Dtype::f64);
  w.write(container_path);
  nlohmann::json j;
  j["l2"] = batch.l2;
  j["linf"] = batch.linf;
  j["pred_before"] = batch.pred_before;
  j["pred_after"] = batch.pred_after;
  std::vector<int> succ;
  for (bool s : batch.success) succ.push_back(s ? 1 : 0);
  j["success"] = succ;
  j["warnings"] = batch.warnings;
  std::ofstream f(sidecar_path, std::ios::trunc);
  f << j.dump(2) << "\n";
}

}  // namespace dst
