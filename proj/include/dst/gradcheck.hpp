// Central finite-difference verification of analytic gradients, grouped
// by parameter. Never throws on numeric disagreement; failures are
// reported in the returned table.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dst/modules.hpp"
#include "dst/random.hpp"

namespace dst {

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
  bool straight_through = false;  // exempt: forward crosses a hard gate
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double tolerance = 0.0;

  bool all_pass() const {
    for (const auto& g : groups)
      if (!g.straight_through && !g.pass) return false;
    return true;
  }
  const GradCheckGroup* find(const std::string& name) const {
    for (const auto& g : groups)
      if (g.name == name) return &g;
    return nullptr;
  }
};

inline double rel_err(double a, double b) {
  double scale = std::max({std::abs(a), std::abs(b), 1e-2});
  return std::abs(a - b) / scale;
}

// loss_value: evaluates the loss at the current parameter values.
// analytic_grads: runs forward+backward once, returning one grad per
// param in order. Frozen params are skipped entirely (absent from the
// report); straight-through params are listed but not differenced.
inline GradCheckReport grad_check(const std::vector<Param*>& params,
                                  const std::function<double()>& loss_value,
                                  const std::function<std::vector<Tensor>()>& analytic_grads,
                                  double tolerance = 1e-5, double step = 1e-6,
                                  int64_t max_coords_per_group = 64, uint64_t seed = 7) {
  GradCheckReport report;
  report.tolerance = tolerance;
  std::vector<Tensor> grads = analytic_grads();
  Rng rng(seed);
  for (size_t gi = 0; gi < params.size(); ++gi) {
    Param& p = *params[gi];
    if (!p.trainable) continue;
    GradCheckGroup group;
    group.name = p.name;
    if (p.straight_through) {
      group.straight_through = true;
      group.pass = true;
      report.groups.push_back(std::move(group));
      continue;
    }
    const Tensor& g = grads.at(gi);
    int64_t n = p.value.numel();
    int64_t coords = std::min(n, max_coords_per_group);
    for (int64_t c = 0; c < coords; ++c) {
      int64_t idx = coords == n ? c : rng.below(n);
      double orig = p.value.data[static_cast<size_t>(idx)];
      p.value.data[static_cast<size_t>(idx)] = orig + step;
      double up = loss_value();
      p.value.data[static_cast<size_t>(idx)] = orig - step;
      double down = loss_value();
      p.value.data[static_cast<size_t>(idx)] = orig;
      double fd = (up - down) / (2.0 * step);
      group.max_rel_err = std::max(group.max_rel_err, rel_err(g.data[static_cast<size_t>(idx)], fd));
    }
    group.pass = group.max_rel_err < tolerance;
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace dst
