// dst: data-free black-box substitute training toolkit.
//
//   dst gen-data     -c cfg      synthesize (or import) the toy dataset
//   dst train-target -c cfg      conventionally train the victim model
//   dst distill      -c cfg      run the substitute/generator min-max loop
//   dst attack-eval  -c cfg      craft on the substitute, measure transfer ASR
//   dst report       -c cfg      render a saved report (table / CSV / JSON)
//   dst serve-target -c cfg      expose a target over the JSONL wire protocol

#include <csignal>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "dst/config.hpp"
#include "dst/dataset.hpp"
#include "dst/eval.hpp"
#include "dst/oracle.hpp"
#include "dst/trainer.hpp"

namespace fs = std::filesystem;
using namespace dst;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("-c,--config", args.config_path, "experiment config file (dotted keys)");
  cmd->add_option("--set", args.overrides, "override a config key, e.g. --set trainer.batch=64")
      ->expected(-1);
  cmd->add_option("-o,--out", args.output_dir, "output directory (overrides output_dir)");
  cmd->add_option("--seed", args.seed, "seed override");
}

ExperimentConfig resolve(const CommonArgs& args) {
  ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg.load_file(args.config_path);
  cfg.apply_env();
  for (const std::string& kv : args.overrides) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!args.output_dir.empty()) cfg.set("output_dir", args.output_dir);
  if (args.seed >= 0) cfg.set("seed", std::to_string(args.seed));
  return cfg;
}

fs::path run_dir(const ExperimentConfig& cfg) {
  fs::path dir(cfg.get_string("output_dir"));
  fs::create_directories(dir);
  return dir;
}

std::string artifact(const ExperimentConfig& cfg, const std::string& key) {
  fs::path p(cfg.get_string(key));
  if (p.is_absolute()) return p.string();
  return (fs::path(cfg.get_string("output_dir")) / p).string();
}

void require_artifact(const std::string& path, const std::string& producer) {
  if (!fs::exists(path))
    throw std::runtime_error("missing prerequisite artifact " + path + " (run `dst " + producer +
                             "` first)");
}

DataShape data_shape_of(const Dataset& ds) { return ds.shape; }

Dataset make_or_load_dataset(const ExperimentConfig& cfg, bool generate) {
  std::string kind = cfg.get_string("dataset.kind");
  std::string path = artifact(cfg, "dataset.path");
  if (!generate) {
    require_artifact(path, "gen-data");
    return load_dataset(path);
  }
  Dataset ds;
  if (kind == "blobs") {
    ds = gen_blobs(cfg.get_int("dataset.classes"), cfg.get_int("dataset.dim"),
                   cfg.get_int("dataset.per_class"), cfg.get_real("dataset.spread"),
                   static_cast<uint64_t>(cfg.get_int("seed")));
  } else if (kind == "idx") {
    ds = load_idx(cfg.get_string("dataset.idx_images"), cfg.get_string("dataset.idx_labels"));
  } else {
    throw ConfigError("dataset.kind must be blobs or idx, got '" + kind + "'");
  }
  save_dataset(path, ds);
  return ds;
}

TargetConfig target_config(const ExperimentConfig& cfg, const Dataset& ds) {
  TargetConfig tc;
  std::string arch = cfg.get_string("target.arch");
  if (arch == "mlp")
    tc.arch = TargetArch::mlp;
  else if (arch == "convnet")
    tc.arch = TargetArch::convnet;
  else
    throw ConfigError("target.arch must be mlp or convnet, got '" + arch + "'");
  tc.in = data_shape_of(ds);
  tc.class_count = ds.class_count;
  tc.hidden = cfg.get_int("target.hidden");
  return tc;
}

GeneratorConfig generator_config(const ExperimentConfig& cfg, const DataShape& out) {
  GeneratorConfig gc;
  gc.noise_dim = cfg.get_int("generator.noise_dim");
  gc.hidden = cfg.get_int("generator.hidden");
  gc.base_channels = cfg.get_int("generator.base_channels");
  gc.out = out;
  return gc;
}

SubstituteConfig substitute_config(const ExperimentConfig& cfg, const DataShape& in) {
  SubstituteConfig sc;
  sc.in = in;
  sc.class_count = cfg.get_int("substitute.class_count");
  sc.widths = cfg.get_int_list("substitute.widths");
  sc.gate_k = cfg.get_real("substitute.gate_k");
  return sc;
}

TrainConfig train_config(const ExperimentConfig& cfg, const DataShape& shape) {
  TrainConfig tc;
  tc.epochs = cfg.get_int("trainer.epochs");
  tc.steps_per_epoch = cfg.get_int("trainer.steps_per_epoch");
  tc.batch = cfg.get_int("trainer.batch");
  tc.lr_sub = cfg.get_real("trainer.lr_sub");
  tc.lr_gen = cfg.get_real("trainer.lr_gen");
  tc.decay_start_epoch = cfg.get_int("trainer.decay_start_epoch");
  tc.seed = static_cast<uint64_t>(cfg.get_int("seed"));
  tc.weights.alpha1 = cfg.get_real("gsil.alpha1");
  tc.weights.alpha2 = cfg.get_real("gsil.alpha2");
  tc.weights.normalize_nodes = cfg.get_bool("gsil.normalize_nodes");
  tc.variant = loss_variant_from_name(cfg.get_string("trainer.variant"));
  tc.reuse_query = cfg.get_bool("trainer.reuse_query");
  tc.label_smoothing = cfg.get_real("gsil.label_smoothing");
  tc.probe_gen = cfg.get_int("trainer.probe_gen");
  tc.probe_uniform = cfg.get_int("trainer.probe_uniform");
  tc.generator = generator_config(cfg, shape);
  tc.substitute = substitute_config(cfg, shape);
  return tc;
}

AttackConfig attack_config(const ExperimentConfig& cfg) {
  AttackConfig ac;
  ac.method = attack_method_from_name(cfg.get_string("attack.method"));
  ac.epsilon = cfg.get_real("attack.epsilon");
  ac.step_size = cfg.get_real("attack.step_size");
  ac.steps = cfg.get_int("attack.steps");
  ac.targeted = cfg.get_bool("attack.targeted");
  ac.target_class = cfg.get_int("attack.target_class");
  ac.cw.confidence = cfg.get_real("attack.cw_confidence");
  ac.cw.binary_steps = cfg.get_int("attack.cw_binary_steps");
  ac.cw.iters = cfg.get_int("attack.cw_iters");
  ac.cw.lr = cfg.get_real("attack.cw_lr");
  ac.seed = static_cast<uint64_t>(cfg.get_int("seed"));
  return ac;
}

std::unique_ptr<TargetOracle> make_oracle(const ExperimentConfig& cfg) {
  Scenario scenario = scenario_from_name(cfg.get_string("scenario"));
  std::string endpoint = cfg.get_string("target.endpoint");
  if (!endpoint.empty()) {
    size_t colon = endpoint.find(':');
    if (colon == std::string::npos)
      throw ConfigError("target.endpoint must be host:port, got '" + endpoint + "'");
    int64_t classes = cfg.get_int("substitute.class_count");
    if (scenario == Scenario::label && classes <= 0)
      throw ConfigError("label scenario over an endpoint needs substitute.class_count");
    return std::make_unique<ExternalOracle>(endpoint.substr(0, colon),
                                            std::stoi(endpoint.substr(colon + 1)), scenario,
                                            classes > 0 ? classes : 1024);
  }
  std::string ckpt = artifact(cfg, "target.checkpoint");
  require_artifact(ckpt, "train-target");
  return std::make_unique<InProcessOracle>(load_target(ckpt), scenario);
}

// ---------------------------------------------------------------------

int cmd_gen_data(const CommonArgs& args) {
  ExperimentConfig cfg = resolve(args);
  run_dir(cfg);
  Dataset ds = make_or_load_dataset(cfg, /*generate=*/true);
  cfg.save_resolved((run_dir(cfg) / "gen-data.config.resolved").string());
  std::cout << "dataset: " << ds.size() << " samples, " << ds.class_count << " classes, "
            << ds.train_idx.size() << " train / " << ds.test_idx.size() << " test -> "
            << artifact(cfg, "dataset.path") << "\n";
  return 0;
}

int cmd_train_target(const CommonArgs& args) {
  ExperimentConfig cfg = resolve(args);
  run_dir(cfg);
  Dataset ds = make_or_load_dataset(cfg, /*generate=*/false);
  TargetNet net(target_config(cfg, ds));
  TargetTrainReport report =
      train_target_model(net, ds, cfg.get_int("target.epochs"), cfg.get_real("target.lr"),
                         cfg.get_int("target.batch"), static_cast<uint64_t>(cfg.get_int("seed")));
  std::string ckpt = artifact(cfg, "target.checkpoint");
  save_target(ckpt, net);
  cfg.save_resolved((run_dir(cfg) / "train-target.config.resolved").string());
  std::cout << "target: train acc " << report.train_accuracy << ", test acc " << report.test_accuracy
            << " -> " << ckpt << "\n";
  return 0;
}

int cmd_distill(const CommonArgs& args) {
  ExperimentConfig cfg = resolve(args);
  fs::path dir = run_dir(cfg);
  Dataset ds = make_or_load_dataset(cfg, /*generate=*/false);
  std::unique_ptr<TargetOracle> oracle = make_oracle(cfg);
  TrainConfig tc = train_config(cfg, ds.shape);
  uint64_t fingerprint = cfg.fingerprint();

  RunState state = init_run_state(tc, *oracle, fingerprint);
  MetricsSink sink((dir / "metrics.jsonl").string(), (dir / "epochs.csv").string());
  DistillPaths paths;
  paths.best_checkpoint = artifact(cfg, "trainer.substitute_checkpoint");
  paths.resume_state = (dir / "runstate.abort.dstckpt").string();
  DistillReport report = run_distillation(state, *oracle, sink, paths);

  // final substitute alongside the best one
  {
    CheckpointWriter w;
    nlohmann::json meta;
    meta["epoch"] = state.next_epoch - 1;
    meta["agreement"] = report.final_agreement;
    meta["fingerprint"] = fingerprint;
    w.add_text("__substitute_meta__", meta.dump());
    save_params(w, state.substitute.params());
    w.write((dir / "substitute.final.dstckpt").string());
  }
  if (cfg.get_bool("eval.dump_embeddings")) {
    Tensor gen_x = state.generator.generate(
        state.generator.sample_noise(cfg.get_int("eval.embedding_samples"), state.rng));
    dump_embeddings(state.substitute, gen_x, tc.gate_mode(), (dir / "embeddings.bin").string(),
                    (dir / "embeddings.json").string());
  }

  nlohmann::json j;
  j["epoch0_agreement"] = report.epoch0_agreement;
  j["final_agreement"] = report.final_agreement;
  j["best_agreement"] = report.best_agreement;
  j["best_epoch"] = report.best_epoch;
  j["final_skip_rate"] = report.final_skip_rate;
  j["skip_rate_percent"] = format_percent(report.final_skip_rate);
  j["train_q"] = report.ledger.train_q;
  j["probe_q"] = report.ledger.probe_q;
  j["eval_q"] = report.ledger.eval_q;
  j["fingerprint"] = fingerprint;
  j["variant"] = loss_variant_name(tc.variant);
  j["scenario"] = cfg.get_string("scenario");
  std::ofstream(dir / "distill.json") << j.dump(2) << "\n";
  cfg.save_resolved((dir / "distill.config.resolved").string());

  std::cout << "distill: agreement " << report.epoch0_agreement << " -> " << report.final_agreement
            << " (best " << report.best_agreement << " @ epoch " << report.best_epoch << "), skip rate "
            << format_percent(report.final_skip_rate) << "%, Train-Q " << report.ledger.train_q << "\n";
  return 0;
}

int cmd_attack_eval(const CommonArgs& args, bool export_adv) {
  ExperimentConfig cfg = resolve(args);
  fs::path dir = run_dir(cfg);
  Dataset ds = make_or_load_dataset(cfg, /*generate=*/false);
  std::unique_ptr<TargetOracle> oracle = make_oracle(cfg);

  std::string sub_ckpt = artifact(cfg, "trainer.substitute_checkpoint");
  require_artifact(sub_ckpt, "distill");
  require_artifact((dir / "distill.json").string(), "distill");

  // rebuild the substitute and check the experiment fingerprint
  CheckpointReader sub_reader(sub_ckpt);
  nlohmann::json sub_meta = nlohmann::json::parse(sub_reader.text("__substitute_meta__"));
  nlohmann::json distill_meta;
  std::ifstream(dir / "distill.json") >> distill_meta;

  SubstituteConfig sc = substitute_config(cfg, ds.shape);
  if (sc.class_count == 0) sc.class_count = ds.class_count;
  SubstituteNet substitute(sc);
  load_params(sub_reader, substitute.params());

  DistillReport distill;
  distill.config_fingerprint = distill_meta.at("fingerprint").get<uint64_t>();
  distill.final_skip_rate = distill_meta.at("final_skip_rate").get<double>();
  distill.ledger.train_q = distill_meta.at("train_q").get<int64_t>();
  distill.epoch0_agreement = distill_meta.at("epoch0_agreement").get<double>();
  distill.final_agreement = distill_meta.at("final_agreement").get<double>();

  EvalProtocol protocol;
  protocol.mode = eval_mode_from_name(cfg.get_string("eval.mode"));
  protocol.target_class = cfg.get_int("attack.target_class");
  protocol.attack = attack_config(cfg);
  protocol.repeats = cfg.get_int("eval.repeats");
  protocol.label_source = cfg.get_string("attack.label_source");

  EvalSet eval_set = EvalSet::from_test_split(ds);
  AdvBatch last_batch;
  AsrSummary summary =
      protocol.mode == EvalMode::non_target
          ? asr_non_target(substitute, *oracle, eval_set, protocol, export_adv ? &last_batch : nullptr)
          : asr_target(substitute, *oracle, eval_set, protocol, export_adv ? &last_batch : nullptr);

  RunReport report = assemble_report(summary, distill, protocol,
                                     scenario_from_name(cfg.get_string("scenario")), cfg.fingerprint(),
                                     oracle->ledger_snapshot().eval_q);
  save_report((dir / "report.json").string(), (dir / "report.csv").string(), report);
  if (export_adv)
    export_adv_batch((dir / "adv.dstckpt").string(), (dir / "adv.json").string(), last_batch);
  cfg.save_resolved((dir / "attack-eval.config.resolved").string());
  std::cout << report.table() << "\n";
  return 0;
}

int cmd_report(const CommonArgs& args) {
  ExperimentConfig cfg = resolve(args);
  fs::path dir(cfg.get_string("output_dir"));
  RunReport report = load_report((dir / "report.json").string());
  std::cout << report.table() << "\n\n";
  std::cout << RunReport::csv_header() << "\n" << report.csv_row() << "\n";
  // renderings must agree field-for-field
  std::ifstream csv(dir / "report.csv");
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  if (header != RunReport::csv_header() || row != report.csv_row())
    throw std::runtime_error("report: JSON and CSV renderings disagree");
  return 0;
}

TargetServer* g_server = nullptr;

int cmd_serve_target(const CommonArgs& args) {
  ExperimentConfig cfg = resolve(args);
  std::string ckpt = artifact(cfg, "target.checkpoint");
  require_artifact(ckpt, "train-target");
  static TargetServer server(load_target(ckpt), scenario_from_name(cfg.get_string("scenario")),
                             static_cast<int>(cfg.get_int("serve.port")));
  g_server = &server;
  int port = server.start();
  std::cout << "serving target on 127.0.0.1:" << port << " ("
            << cfg.get_string("scenario") << " scenario)" << std::endl;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  server.wait();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic substitute training toolkit"};
  app.require_subcommand(1);

  CommonArgs gen_args, target_args, distill_args, eval_args, report_args, serve_args;
  bool export_adv = false;

  add_common(app.add_subcommand("gen-data", "synthesize or import the dataset"), gen_args);
  add_common(app.add_subcommand("train-target", "train the victim model"), target_args);
  add_common(app.add_subcommand("distill", "run substitute distillation"), distill_args);
  CLI::App* eval_cmd = app.add_subcommand("attack-eval", "craft attacks and measure transfer ASR");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_flag("--export-adv", export_adv, "dump the final adversarial batch");
  add_common(app.add_subcommand("report", "render a saved run report"), report_args);
  add_common(app.add_subcommand("serve-target", "serve a target over the wire protocol"), serve_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand("gen-data")) return cmd_gen_data(gen_args);
    if (app.got_subcommand("train-target")) return cmd_train_target(target_args);
    if (app.got_subcommand("distill")) return cmd_distill(distill_args);
    if (app.got_subcommand("attack-eval")) return cmd_attack_eval(eval_args, export_adv);
    if (app.got_subcommand("report")) return cmd_report(report_args);
    if (app.got_subcommand("serve-target")) return cmd_serve_target(serve_args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
