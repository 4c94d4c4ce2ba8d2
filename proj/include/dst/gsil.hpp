// Graph-based structural information loss. Per batch, model outputs form
// a graph: nodes are the B probability vectors, edges the B x B matrix of
// pairwise Euclidean distances. The loss matches target and substitute
// graphs with alpha1 * sum_j KL(node_j^T || node_j^S) + alpha2 *
// MSE(A^T, A^S); the generator minimizes its negation.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dst/autodiff.hpp"
#include "dst/modules.hpp"
#include "dst/tensor.hpp"

namespace dst {

struct GsilWeights {
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  bool normalize_nodes = false;  // divide the node sum by B

  void validate() const {
    if (alpha1 < 0.0 || alpha2 < 0.0) throw std::invalid_argument("gsil weights must be nonnegative");
    if (alpha1 == 0.0 && alpha2 == 0.0) throw std::invalid_argument("gsil weights cannot both be zero");
  }
};

struct OutputGraph {
  Tensor nodes;      // (B, K) probability rows
  Tensor adjacency;  // (B, B) pairwise Euclidean distances
  int64_t batch() const { return nodes.shape[0]; }
  int64_t classes() const { return nodes.shape[1]; }
};

inline void check_probability_rows(const Tensor& probs, double tol = 1e-9) {
  if (probs.rank() != 2) fail_shape("build_graph", probs, "(B, K)");
  int64_t b = probs.shape[0], k = probs.shape[1];
  for (int64_t i = 0; i < b; ++i) {
    double sum = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      double v = probs.at2(i, j);
      if (v < 0.0)
        throw std::invalid_argument("row " + std::to_string(i) + " is not a probability vector: negative entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol)
      throw std::invalid_argument("row " + std::to_string(i) + " is not a probability vector: sums to " +
                                  std::to_string(sum));
  }
}

inline OutputGraph build_graph(const Tensor& probs) {
  check_probability_rows(probs);
  int64_t b = probs.shape[0], k = probs.shape[1];
  OutputGraph g;
  g.nodes = probs;
  g.adjacency = Tensor({b, b});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = i + 1; j < b; ++j) {
      double s = 0.0;
      for (int64_t l = 0; l < k; ++l) {
        double d = probs.at2(i, l) - probs.at2(j, l);
        s += d * d;
      }
      double dist = std::sqrt(s);
      g.adjacency.at2(i, j) = dist;
      g.adjacency.at2(j, i) = dist;
    }
  return g;
}

// KL(p_target || p_sub) with epsilon flooring inside both logs.
inline double node_kl(const Tensor& p_target, const Tensor& p_sub) {
  if (!p_target.same_shape(p_sub)) fail_shape("node_kl", p_target, p_sub);
  double kl = 0.0;
  for (size_t i = 0; i < p_target.data.size(); ++i) {
    double t = p_target.data[i], s = p_sub.data[i];
    kl += t * (std::log(t > ops::kLogEps ? t : ops::kLogEps) -
               std::log(s > ops::kLogEps ? s : ops::kLogEps));
  }
  return kl;
}

// Mean over all B^2 entries of (A_t - A_s)^2 (zero diagonal included).
inline double edge_mse(const Tensor& a_t, const Tensor& a_s) {
  if (!a_t.same_shape(a_s)) fail_shape("edge_mse", a_t, a_s);
  if (a_t.rank() != 2 || a_t.shape[0] != a_t.shape[1]) fail_shape("edge_mse", a_t, "(B, B)");
  double s = 0.0;
  for (size_t i = 0; i < a_t.data.size(); ++i) {
    double d = a_t.data[i] - a_s.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a_t.data.size());
}

struct GsilParts {
  double node = 0.0;
  double edge = 0.0;
  double total = 0.0;
};

inline GsilParts gsil_loss_parts(const OutputGraph& g_t, const OutputGraph& g_s, const GsilWeights& w) {
  w.validate();
  if (g_t.batch() != g_s.batch() || g_t.classes() != g_s.classes())
    fail_shape("gsil_loss", g_t.nodes, g_s.nodes);
  GsilParts parts;
  int64_t b = g_t.batch(), k = g_t.classes();
  for (int64_t j = 0; j < b; ++j) {
    Tensor tj({k}), sj({k});
    for (int64_t l = 0; l < k; ++l) {
      tj[l] = g_t.nodes.at2(j, l);
      sj[l] = g_s.nodes.at2(j, l);
    }
    parts.node += node_kl(tj, sj);
  }
  if (w.normalize_nodes) parts.node /= static_cast<double>(b);
  parts.edge = edge_mse(g_t.adjacency, g_s.adjacency);
  parts.total = w.alpha1 * parts.node + w.alpha2 * parts.edge;
  return parts;
}

inline double gsil_loss(const OutputGraph& g_t, const OutputGraph& g_s, const GsilWeights& w) {
  return gsil_loss_parts(g_t, g_s, w).total;
}

inline double substitute_loss(const Tensor& target_probs, const Tensor& sub_probs, const GsilWeights& w) {
  return gsil_loss(build_graph(target_probs), build_graph(sub_probs), w);
}

inline double generator_loss(const Tensor& target_probs, const Tensor& sub_probs, const GsilWeights& w) {
  return -substitute_loss(target_probs, sub_probs, w);
}

// ---------------------------------------------------------------------
// Differentiable path (tape ops). Target outputs enter as constants, so
// no gradient can reach the target.
// ---------------------------------------------------------------------

// sub_probs must already be softmax output on the tape.
inline Value gsil_loss_value(PassContext& cx, const Tensor& target_probs, Value sub_probs,
                             const GsilWeights& w, GsilParts* parts = nullptr) {
  w.validate();
  const Tensor& sv = cx.tape.val(sub_probs);
  if (!sv.same_shape(target_probs)) fail_shape("gsil_loss", target_probs, sv);
  int64_t b = sv.shape[0];
  Value t_nodes = cx.tape.constant(target_probs);
  // node term: sum_j KL(t_j || s_j) = sum over all entries of t*(log t - log s)
  Value node = ops::sum_all(
      ops::mul(t_nodes, ops::sub(ops::log_eps(t_nodes), ops::log_eps(sub_probs))));
  if (w.normalize_nodes) node = ops::scale(node, 1.0 / static_cast<double>(b));
  // edge term: MSE between the adjacency matrices
  Tensor a_t = build_graph(target_probs).adjacency;
  Value a_s = ops::pairwise_euclidean(sub_probs);
  Value edge = ops::mean_all(ops::square(ops::sub(cx.tape.constant(a_t), a_s)));
  if (parts) {
    parts->node = cx.tape.val(node)[0];
    parts->edge = cx.tape.val(edge)[0];
  }
  Value total = ops::add(ops::scale(node, w.alpha1), ops::scale(edge, w.alpha2));
  if (parts) parts->total = cx.tape.val(total)[0];
  return total;
}

inline Value substitute_loss_value(PassContext& cx, const Tensor& target_probs, Value sub_probs,
                                   const GsilWeights& w, GsilParts* parts = nullptr) {
  return gsil_loss_value(cx, target_probs, sub_probs, w, parts);
}

inline Value generator_loss_value(PassContext& cx, const Tensor& target_probs, Value sub_probs,
                                  const GsilWeights& w, GsilParts* parts = nullptr) {
  Value total = gsil_loss_value(cx, target_probs, sub_probs, w, parts);
  return ops::neg(total);
}

// ---------------------------------------------------------------------
// Ablation variants (Baseline-I: plain MSE on outputs, Baseline-II: KL
// only, gsil/dst: the full graph loss).
// ---------------------------------------------------------------------

enum class LossVariant { baseline_i, baseline_ii, gsil, dst };

inline LossVariant loss_variant_from_name(const std::string& s) {
  if (s == "baseline-i") return LossVariant::baseline_i;
  if (s == "baseline-ii") return LossVariant::baseline_ii;
  if (s == "gsil") return LossVariant::gsil;
  if (s == "dst") return LossVariant::dst;
  throw std::invalid_argument("unknown loss variant '" + s + "'");
}

inline const char* loss_variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::baseline_i: return "baseline-i";
    case LossVariant::baseline_ii: return "baseline-ii";
    case LossVariant::gsil: return "gsil";
    case LossVariant::dst: return "dst";
  }
  return "?";
}

inline Value variant_loss_value(LossVariant v, PassContext& cx, const Tensor& target_probs,
                                Value sub_probs, const GsilWeights& w, GsilParts* parts = nullptr) {
  switch (v) {
    case LossVariant::baseline_i: {
      Value t = cx.tape.constant(target_probs);
      Value loss = ops::mean_all(ops::square(ops::sub(t, sub_probs)));
      if (parts) {
        parts->node = cx.tape.val(loss)[0];
        parts->edge = 0.0;
        parts->total = parts->node;
      }
      return loss;
    }
    case LossVariant::baseline_ii: {
      GsilWeights kl_only = w;
      kl_only.alpha2 = 0.0;
      return gsil_loss_value(cx, target_probs, sub_probs, kl_only, parts);
    }
    case LossVariant::gsil:
    case LossVariant::dst:
      return gsil_loss_value(cx, target_probs, sub_probs, w, parts);
  }
  throw std::logic_error("unreachable loss variant");
}

// Label-smoothed one-hot rows for the label scenario: exact one-hots make
// the KL degenerate, so (1-eps)*onehot + eps/K.
inline Tensor smooth_one_hot(const Tensor& one_hot, double eps = 0.1) {
  if (one_hot.rank() != 2) fail_shape("smooth_one_hot", one_hot, "(B, K)");
  double k = static_cast<double>(one_hot.shape[1]);
  Tensor out = one_hot;
  for (auto& v : out.data) v = (1.0 - eps) * v + eps / k;
  return out;
}

}  // namespace dst
