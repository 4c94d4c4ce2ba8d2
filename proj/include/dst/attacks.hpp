// White-box adversarial example generation on the substitute model.
// Attacks never see a TargetOracle: crafting spends zero target queries.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dst/adam.hpp"
#include "dst/autodiff.hpp"
#include "dst/nets.hpp"
#include "dst/random.hpp"

namespace dst {

enum class AttackMethod { fgsm, bim, pgd, cw };

inline AttackMethod attack_method_from_name(const std::string& s) {
  if (s == "fgsm") return AttackMethod::fgsm;
  if (s == "bim") return AttackMethod::bim;
  if (s == "pgd") return AttackMethod::pgd;
  if (s == "cw") return AttackMethod::cw;
  throw std::invalid_argument("unknown attack method '" + s + "'");
}

inline const char* attack_method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::fgsm: return "fgsm";
    case AttackMethod::bim: return "bim";
    case AttackMethod::pgd: return "pgd";
    case AttackMethod::cw: return "cw";
  }
  return "?";
}

struct CwConfig {
  double confidence = 0.0;  // kappa
  int64_t binary_steps = 9;
  int64_t iters = 200;
  double lr = 0.01;
};

struct AttackConfig {
  AttackMethod method = AttackMethod::pgd;
  double epsilon = 0.3;  // L-inf budget
  double step_size = 0.02;
  int64_t steps = 40;
  bool targeted = false;
  int64_t target_class = -1;
  CwConfig cw;
  uint64_t seed = 0;  // pgd random start
  GateMode gate_mode = GateMode::learned;

  // Returns human-readable warnings (e.g. budget unreachable in the
  // configured number of steps).
  std::vector<std::string> validate() const {
    if (epsilon < 0.0) throw std::invalid_argument("attack: epsilon must be nonnegative");
    if (steps < 1) throw std::invalid_argument("attack: steps must be >= 1");
    bool iterative = method == AttackMethod::bim || method == AttackMethod::pgd;
    if (iterative && epsilon > 0.0 && step_size > epsilon)
      throw std::invalid_argument("attack: step_size must not exceed epsilon for iterative methods");
    std::vector<std::string> warnings;
    if (iterative && static_cast<double>(steps) * step_size < epsilon)
      warnings.push_back("steps * step_size < epsilon: the full budget is unreachable");
    return warnings;
  }
};

struct AdvBatch {
  Tensor original;
  Tensor adversarial;
  std::vector<double> linf, l2;             // per-example perturbation norms
  std::vector<int64_t> pred_before, pred_after;  // substitute predictions
  std::vector<bool> success;                // substitute-level attack success
  std::vector<std::string> warnings;
};

inline std::pair<double, double> perturbation_stats(const AdvBatch& batch) {
  if (batch.l2.empty()) throw std::invalid_argument("perturbation_stats: empty batch");
  double l2 = 0.0, linf = 0.0;
  for (double v : batch.l2) l2 += v;
  for (double v : batch.linf) linf += v;
  double n = static_cast<double>(batch.l2.size());
  return {l2 / n, linf / n};
}

namespace detail {

inline void fill_norms(AdvBatch& b) {
  int64_t n = b.original.shape[0];
  int64_t per = b.original.numel() / n;
  b.linf.assign(static_cast<size_t>(n), 0.0);
  b.l2.assign(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double mx = 0.0, sq = 0.0;
    for (int64_t j = 0; j < per; ++j) {
      double d = b.adversarial.data[static_cast<size_t>(i * per + j)] -
                 b.original.data[static_cast<size_t>(i * per + j)];
      mx = std::max(mx, std::abs(d));
      sq += d * d;
    }
    b.linf[static_cast<size_t>(i)] = mx;
    b.l2[static_cast<size_t>(i)] = std::sqrt(sq);
  }
}

inline void project_linf_box(Tensor& x, const Tensor& center, double epsilon) {
  for (size_t i = 0; i < x.data.size(); ++i) {
    double lo = std::max(0.0, center.data[i] - epsilon);
    double hi = std::min(1.0, center.data[i] + epsilon);
    x.data[i] = std::min(hi, std::max(lo, x.data[i]));
  }
}

// d(cross-entropy)/dx at the given labels; also reports clean logits.
inline Tensor input_gradient(SubstituteNet& sub, const Tensor& x, const std::vector<int64_t>& labels,
                             GateMode mode, Tensor* logits_out = nullptr) {
  PassContext cx;
  Value xin = cx.input(x, true);
  Value logits = sub.forward(cx, xin, mode, nullptr);
  if (logits_out) *logits_out = cx.tape.val(logits);
  cx.tape.backward(ops::cross_entropy(logits, labels));
  return cx.tape.grad(xin);
}

inline void finalize(AdvBatch& b, SubstituteNet& sub, const std::vector<int64_t>& labels,
                     const AttackConfig& cfg) {
  b.pred_before = argmax_rows(sub.logits(b.original, cfg.gate_mode));
  b.pred_after = argmax_rows(sub.logits(b.adversarial, cfg.gate_mode));
  fill_norms(b);
  b.success.resize(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    b.success[i] = cfg.targeted ? b.pred_after[i] == labels[i] : b.pred_after[i] != labels[i];
  }
}

}  // namespace detail

// Labels the substitute itself predicts; the default attack seed in the
// data-free setting (target labels would spend eval queries).
inline std::vector<int64_t> substitute_labels(SubstituteNet& sub, const Tensor& x,
                                              GateMode mode = GateMode::learned) {
  return argmax_rows(sub.logits(x, mode));
}

// Single signed-gradient step. Untargeted ascends the loss at the seed
// label; targeted descends toward the target class.
inline AdvBatch fgsm(SubstituteNet& sub, const Tensor& x, const std::vector<int64_t>& labels,
                     const AttackConfig& cfg) {
  AdvBatch batch;
  batch.warnings = cfg.validate();
  batch.original = x;
  Tensor grad = detail::input_gradient(sub, x, labels, cfg.gate_mode);
  if (grad.max_abs() == 0.0) batch.warnings.push_back("zero input gradient: x' may equal x");
  double sign_scale = cfg.targeted ? -cfg.epsilon : cfg.epsilon;
  Tensor adv = x;
  for (size_t i = 0; i < adv.data.size(); ++i) {
    double g = grad.data[i];
    if (g != 0.0) adv.data[i] += sign_scale * (g > 0.0 ? 1.0 : -1.0);
    adv.data[i] = std::min(1.0, std::max(0.0, adv.data[i]));
  }
  batch.adversarial = std::move(adv);
  detail::finalize(batch, sub, labels, cfg);
  return batch;
}

namespace detail {

inline AdvBatch iterative_linf(SubstituteNet& sub, const Tensor& x, const std::vector<int64_t>& labels,
                               const AttackConfig& cfg, bool random_start) {
  AdvBatch batch;
  batch.warnings = cfg.validate();
  batch.original = x;
  Tensor adv = x;
  if (random_start && cfg.epsilon > 0.0) {
    Rng rng(cfg.seed);
    for (auto& v : adv.data) v += rng.uniform(-cfg.epsilon, cfg.epsilon);
    project_linf_box(adv, x, cfg.epsilon);
  }
  double dir = cfg.targeted ? -cfg.step_size : cfg.step_size;
  bool saw_zero_grad = false;
  for (int64_t it = 0; it < cfg.steps; ++it) {
    Tensor grad = input_gradient(sub, adv, labels, cfg.gate_mode);
    if (grad.max_abs() == 0.0) saw_zero_grad = true;
    for (size_t i = 0; i < adv.data.size(); ++i) {
      double g = grad.data[i];
      if (g != 0.0) adv.data[i] += dir * (g > 0.0 ? 1.0 : -1.0);
    }
    project_linf_box(adv, x, cfg.epsilon);
  }
  if (saw_zero_grad) batch.warnings.push_back("zero input gradient encountered during iteration");
  batch.adversarial = std::move(adv);
  finalize(batch, sub, labels, cfg);
  return batch;
}

}  // namespace detail

inline AdvBatch bim(SubstituteNet& sub, const Tensor& x, const std::vector<int64_t>& labels,
                    const AttackConfig& cfg) {
  return detail::iterative_linf(sub, x, labels, cfg, /*random_start=*/false);
}

inline AdvBatch pgd(SubstituteNet& sub, const Tensor& x, const std::vector<int64_t>& labels,
                    const AttackConfig& cfg) {
  return detail::iterative_linf(sub, x, labels, cfg, /*random_start=*/true);
}

// C&W L2 in tanh space with per-example binary search over the
// constant c; returns the lowest-L2 successful example per input, or
// the original where every iterate failed.
inline AdvBatch cw_l2(SubstituteNet& sub, const Tensor& x, const std::vector<int64_t>& labels,
                      const AttackConfig& cfg) {
  AdvBatch batch;
  batch.original = x;
  int64_t n = x.shape[0];
  int64_t per = x.numel() / n;
  int64_t classes = sub.config().class_count;
  double kappa = cfg.cw.confidence;

  // tanh-space seed: w = atanh(2x - 1) on squeezed-in coordinates
  Tensor w0 = x;
  for (auto& v : w0.data) {
    double s = std::min(1.0 - 1e-6, std::max(1e-6, v));
    v = std::atanh(2.0 * s - 1.0);
  }

  Tensor best_adv = x;
  std::vector<double> best_l2(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<double> c(static_cast<size_t>(n), 1e-2);
  std::vector<double> c_lo(static_cast<size_t>(n), 0.0);
  std::vector<double> c_hi(static_cast<size_t>(n), 1e10);

  for (int64_t bs = 0; bs < cfg.cw.binary_steps; ++bs) {
    Param w{"cw.w", w0};
    Adam adam(AdamConfig{cfg.cw.lr, 0.9, 0.999, 1e-8});
    std::vector<bool> succeeded(static_cast<size_t>(n), false);

    for (int64_t it = 0; it < cfg.cw.iters; ++it) {
      PassContext cx;
      Value wv = cx.bind(w);
      Value adv = ops::scale(ops::add_scalar(ops::tanh_op(wv), 1.0), 0.5);
      Value logits = sub.forward(cx, adv, cfg.gate_mode, nullptr);
      const Tensor& lv = cx.tape.val(logits);

      // per-row attack objective index (constant within this iterate)
      std::vector<int64_t> other(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) {
        int64_t pick = -1;
        double best = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < classes; ++j) {
          if (j == labels[static_cast<size_t>(i)]) continue;
          if (lv.at2(i, j) > best) {
            best = lv.at2(i, j);
            pick = j;
          }
        }
        other[static_cast<size_t>(i)] = pick;
      }
      // untargeted: f = max(Z_y - max_{j != y} Z_j, -kappa)
      // targeted:   f = max(max_{j != t} Z_j - Z_t, -kappa)
      Value z_label = ops::pick_rows(logits, labels);
      Value z_other = ops::pick_rows(logits, other);
      Value margin = cfg.targeted ? ops::sub(z_other, z_label) : ops::sub(z_label, z_other);
      Value f = ops::add_scalar(ops::relu(ops::add_scalar(margin, kappa)), -kappa);

      Value diff = ops::sub(adv, cx.tape.constant(x));
      Value sq = ops::mul(diff, diff);
      // weight the attack term per example by c_i
      Tensor c_rows({n});
      for (int64_t i = 0; i < n; ++i) c_rows[i] = c[static_cast<size_t>(i)];
      Value weighted = ops::mul(f, cx.tape.constant(c_rows));
      Value objective = ops::add(ops::sum_all(sq), ops::sum_all(weighted));
      cx.tape.backward(objective);
      adam.step({&w}, {cx.grad_of(w)});

      // bookkeeping: track best successful iterate per example
      const Tensor& adv_v = cx.tape.val(adv);
      for (int64_t i = 0; i < n; ++i) {
        int64_t pred = argmax_row(lv, i);
        bool ok = cfg.targeted ? pred == labels[static_cast<size_t>(i)]
                               : pred != labels[static_cast<size_t>(i)];
        if (!ok) continue;
        succeeded[static_cast<size_t>(i)] = true;
        double l2 = 0.0;
        for (int64_t j = 0; j < per; ++j) {
          double d = adv_v.data[static_cast<size_t>(i * per + j)] - x.data[static_cast<size_t>(i * per + j)];
          l2 += d * d;
        }
        l2 = std::sqrt(l2);
        if (l2 < best_l2[static_cast<size_t>(i)]) {
          best_l2[static_cast<size_t>(i)] = l2;
          for (int64_t j = 0; j < per; ++j)
            best_adv.data[static_cast<size_t>(i * per + j)] = adv_v.data[static_cast<size_t>(i * per + j)];
        }
      }
    }

    // binary search update on c per example
    for (int64_t i = 0; i < n; ++i) {
      size_t si = static_cast<size_t>(i);
      if (succeeded[si]) {
        c_hi[si] = std::min(c_hi[si], c[si]);
        c[si] = (c_lo[si] + c_hi[si]) / 2.0;
      } else {
        c_lo[si] = std::max(c_lo[si], c[si]);
        c[si] = c_hi[si] > 1e9 ? c[si] * 10.0 : (c_lo[si] + c_hi[si]) / 2.0;
      }
    }
  }

  batch.adversarial = std::move(best_adv);
  detail::finalize(batch, sub, labels, cfg);
  // the recorded success must reflect the saved iterate, not the final one
  for (int64_t i = 0; i < n; ++i)
    if (std::isinf(best_l2[static_cast<size_t>(i)]))
      batch.success[static_cast<size_t>(i)] = false;
  return batch;
}

inline AdvBatch run_attack(SubstituteNet& sub, const Tensor& x, const std::vector<int64_t>& labels,
                           const AttackConfig& cfg) {
  switch (cfg.method) {
    case AttackMethod::fgsm: return fgsm(sub, x, labels, cfg);
    case AttackMethod::bim: return bim(sub, x, labels, cfg);
    case AttackMethod::pgd: return pgd(sub, x, labels, cfg);
    case AttackMethod::cw: return cw_l2(sub, x, labels, cfg);
  }
  throw std::logic_error("unreachable attack method");
}

// Random baseline at the same L-inf budget: x + epsilon * sign(u).
inline Tensor random_sign_perturbation(const Tensor& x, double epsilon, Rng& rng) {
  Tensor out = x;
  for (auto& v : out.data) {
    v += rng.uniform() < 0.5 ? -epsilon : epsilon;
    v = std::min(1.0, std::max(0.0, v));
  }
  return out;
}

}  // namespace dst
