// Experiment configuration: a flat text file of dotted keys
// (`trainer.batch = 64`), overridable by CLI flags and the DST_SEED
// environment variable. Unknown keys are rejected with their path.
#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dst/tensor.hpp"

namespace dst {

// Reported with exit code 2 by the CLI.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ExperimentConfig {
 public:
  using ValueType = std::variant<int64_t, double, bool, std::string, std::vector<int64_t>>;

  ExperimentConfig() { register_defaults(); }

  // --- typed access -------------------------------------------------

  int64_t get_int(const std::string& key) const { return std::get<int64_t>(lookup(key)); }
  double get_real(const std::string& key) const {
    const ValueType& v = lookup(key);
    if (std::holds_alternative<int64_t>(v)) return static_cast<double>(std::get<int64_t>(v));
    return std::get<double>(v);
  }
  bool get_bool(const std::string& key) const { return std::get<bool>(lookup(key)); }
  const std::string& get_string(const std::string& key) const { return std::get<std::string>(lookup(key)); }
  const std::vector<int64_t>& get_int_list(const std::string& key) const {
    return std::get<std::vector<int64_t>>(lookup(key));
  }

  void set(const std::string& key, const std::string& raw_value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = parse_as(key, it->second, raw_value);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  // --- loading ------------------------------------------------------

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      std::string s = strip(line);
      if (s.empty() || s[0] == '#') continue;
      size_t eq = s.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
      std::string key = strip(s.substr(0, eq));
      std::string value = strip(s.substr(eq + 1));
      try {
        set(key, value);
      } catch (const ConfigError& e) {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  // DST_SEED overrides the file; explicit flags override both.
  void apply_env() {
    if (const char* env = std::getenv("DST_SEED")) set("seed", env);
  }

  // Canonical serialization: sorted keys, one per line.
  std::string resolved_text() const {
    std::ostringstream os;
    for (const auto& [key, value] : values_) os << key << " = " << render(value) << "\n";
    return os.str();
  }

  void save_resolved(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ConfigError("cannot write resolved config to " + path);
    f << resolved_text();
  }

  uint64_t fingerprint() const {
    std::string text = resolved_text();
    return fnv1a(text.data(), text.size());
  }

 private:
  const ValueType& lookup(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  static std::string strip(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static std::string render(const ValueType& v) {
    if (std::holds_alternative<int64_t>(v)) return std::to_string(std::get<int64_t>(v));
    if (std::holds_alternative<double>(v)) {
      std::ostringstream os;
      os.precision(17);
      os << std::get<double>(v);
      return os.str();
    }
    if (std::holds_alternative<bool>(v)) return std::get<bool>(v) ? "true" : "false";
    if (std::holds_alternative<std::string>(v)) return std::get<std::string>(v);
    std::string out = "[";
    const auto& list = std::get<std::vector<int64_t>>(v);
    for (size_t i = 0; i < list.size(); ++i) out += (i ? ", " : "") + std::to_string(list[i]);
    return out + "]";
  }

  static ValueType parse_as(const std::string& key, const ValueType& current, const std::string& raw) {
    try {
      if (std::holds_alternative<int64_t>(current)) return static_cast<int64_t>(std::stoll(raw));
      if (std::holds_alternative<double>(current)) return std::stod(raw);
      if (std::holds_alternative<bool>(current)) {
        if (raw == "true" || raw == "1") return true;
        if (raw == "false" || raw == "0") return false;
        throw ConfigError("expected true/false");
      }
      if (std::holds_alternative<std::vector<int64_t>>(current)) {
        std::string body = raw;
        if (!body.empty() && body.front() == '[') body = body.substr(1, body.size() - 2);
        std::vector<int64_t> out;
        std::stringstream ss(body);
        std::string item;
        while (std::getline(ss, item, ',')) {
          std::string t = strip(item);
          if (!t.empty()) out.push_back(std::stoll(t));
        }
        if (out.empty()) throw ConfigError("expected a nonempty integer list");
        return out;
      }
      std::string s = raw;
      if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
      return s;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': cannot parse value '" + raw + "'");
    }
  }

  void register_defaults() {
    values_ = {
        {"seed", int64_t{7}},
        {"output_dir", std::string("runs/exp")},
        {"scenario", std::string("probability")},

        {"dataset.kind", std::string("blobs")},
        {"dataset.classes", int64_t{3}},
        {"dataset.dim", int64_t{2}},
        {"dataset.per_class", int64_t{200}},
        {"dataset.spread", 0.08},
        {"dataset.path", std::string("blobs.dstdata")},
        {"dataset.idx_images", std::string("")},
        {"dataset.idx_labels", std::string("")},

        {"target.arch", std::string("mlp")},
        {"target.hidden", int64_t{64}},
        {"target.epochs", int64_t{60}},
        {"target.lr", 0.01},
        {"target.batch", int64_t{64}},
        {"target.checkpoint", std::string("target.dstckpt")},
        {"target.endpoint", std::string("")},

        {"generator.noise_dim", int64_t{16}},
        {"generator.hidden", int64_t{64}},
        {"generator.base_channels", int64_t{16}},

        {"substitute.widths", std::vector<int64_t>{16, 16, 16, 16}},
        {"substitute.class_count", int64_t{0}},  // 0: discover from the first oracle response
        {"substitute.gate_k", 1.0},

        {"gsil.alpha1", 1.0},
        {"gsil.alpha2", 1.0},
        {"gsil.normalize_nodes", false},
        {"gsil.label_smoothing", 0.1},

        {"trainer.epochs", int64_t{30}},
        {"trainer.steps_per_epoch", int64_t{20}},
        {"trainer.batch", int64_t{64}},
        {"trainer.lr_sub", 0.001},
        {"trainer.lr_gen", 0.0001},
        {"trainer.decay_start_epoch", int64_t{20}},
        {"trainer.reuse_query", false},
        {"trainer.variant", std::string("dst")},
        {"trainer.probe_gen", int64_t{1024}},
        {"trainer.probe_uniform", int64_t{1024}},
        {"trainer.substitute_checkpoint", std::string("substitute.dstckpt")},

        {"attack.method", std::string("pgd")},
        {"attack.epsilon", 0.3},
        {"attack.step_size", 0.02},
        {"attack.steps", int64_t{40}},
        {"attack.targeted", false},
        {"attack.target_class", int64_t{-1}},  // -1: round-robin
        {"attack.label_source", std::string("substitute")},
        {"attack.cw_confidence", 0.0},
        {"attack.cw_binary_steps", int64_t{9}},
        {"attack.cw_iters", int64_t{200}},
        {"attack.cw_lr", 0.01},

        {"eval.mode", std::string("non_target")},
        {"eval.repeats", int64_t{10}},
        {"eval.dump_embeddings", false},
        {"eval.embedding_samples", int64_t{512}},

        {"serve.port", int64_t{7733}},
    };
  }

  std::map<std::string, ValueType> values_;
};

}  // namespace dst
