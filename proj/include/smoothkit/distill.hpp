#ifndef SMOOTHKIT_DISTILL_HPP
#define SMOOTHKIT_DISTILL_HPP

// Neighborhood discrepancy rate (NDR) and the self-distillation losses.
//
// NDR of node v at layer l is 1 - cos(X_v, (A X)_v) over the raw adjacency.
// The positive per-row degree factor of a mean aggregate cancels inside the
// cosine, so it is not applied.

#include "smoothkit/graph.hpp"
#include "smoothkit/layers.hpp"
#include "smoothkit/ops.hpp"

#include <sstream>

namespace smoothkit {

enum class Direction { shallow2deep, deep2shallow };
enum class SummaryStat { mean, l2 };

NLOHMANN_JSON_SERIALIZE_ENUM(Direction,
                             {{Direction::shallow2deep, "shallow2deep"}, {Direction::deep2shallow, "deep2shallow"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SummaryStat, {{SummaryStat::mean, "mean"}, {SummaryStat::l2, "l2"}})

struct DistillConfig {
  double alpha = 0.0;  ///< intermediate-logit loss weight
  double beta = 0.0;   ///< ADR loss weight
  double gamma = 0.0;  ///< graph-embedding loss weight
  Direction direction = Direction::shallow2deep;
  bool degree_weighting = true;
  bool masked_ndr = false;
  bool learnable_transform = false;
  SummaryStat indicator_stat = SummaryStat::mean;

  bool any() const { return alpha > 0.0 || beta > 0.0 || gamma > 0.0; }

  void validate() const {
    if (!(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0)) throw ConfigError("loss weights must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"alpha", c.alpha},
       {"beta", c.beta},
       {"gamma", c.gamma},
       {"direction", c.direction},
       {"degree_weighting", c.degree_weighting},
       {"masked_ndr", c.masked_ndr},
       {"learnable_transform", c.learnable_transform},
       {"indicator_stat", c.indicator_stat}};
}

inline void from_json(const nlohmann::json& j, DistillConfig& c) {
  detail::reject_unknown(j,
                         {"alpha", "beta", "gamma", "direction", "degree_weighting", "masked_ndr",
                          "learnable_transform", "indicator_stat"},
                         "distill");
  c = DistillConfig{};
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.gamma = j.value("gamma", c.gamma);
  if (j.contains("direction")) {
    c.direction = detail::parse_enum<Direction>(j["direction"], "direction", {"shallow2deep", "deep2shallow"});
  }
  c.degree_weighting = j.value("degree_weighting", c.degree_weighting);
  c.masked_ndr = j.value("masked_ndr", c.masked_ndr);
  c.learnable_transform = j.value("learnable_transform", c.learnable_transform);
  if (j.contains("indicator_stat")) {
    c.indicator_stat = detail::parse_enum<SummaryStat>(j["indicator_stat"], "indicator_stat", {"mean", "l2"});
  }
  c.validate();
}

inline constexpr double kNdrEps = 1e-12;

/// Per-node discrepancy values of one layer. Invalid entries hold 0.
struct NdrVector {
  Tensor values;  ///< N x 1
  Mask valid;
  int layer = 0;

  std::size_t size() const { return valid.size(); }
};

/// NDR over an arbitrary (symmetric, self-loop-free) neighbor structure.
inline NdrVector ndr(std::shared_ptr<const SparseMatrix> adj, const Tensor& x, int layer = 0) {
  if (adj->rows() != x.rows()) {
    throw DimensionError("ndr: adjacency has " + std::to_string(adj->rows()) + " rows, embeddings " +
                         shape_str(x.rows(), x.cols()));
  }
  const SparseMatrix& a = *adj;
  Tensor agg = spmm(std::move(adj), x);
  auto cr = rowwise_cosine_distance(x, agg, kNdrEps);
  for (Index v = 0; v < a.rows(); ++v) {
    if (a.row_nnz(v) == 0) cr.valid[static_cast<std::size_t>(v)] = 0;
  }
  return {cr.distance, std::move(cr.valid), layer};
}

inline NdrVector ndr(const Graph& g, const Tensor& x, int layer = 0) { return ndr(g.adjacency_ptr(), x, layer); }

/// NDR over cross-class neighbors only (see masked_adjacency).
inline NdrVector ndr_masked(const Graph& g, const Tensor& x, int layer = 0) {
  if (!g.has_labels()) throw ConfigError("masked NDR needs node labels (node-classification graphs only)");
  return ndr(std::make_shared<const SparseMatrix>(masked_adjacency(g)), x, layer);
}

/// Edge-level NDR over the line-graph adjacency.
inline NdrVector edge_ndr(const EdgeIndexing& e, const Tensor& edge_x, int layer = 0) {
  if (static_cast<std::size_t>(edge_x.rows()) != e.size()) {
    throw DimensionError("edge_ndr: need one embedding row per edge");
  }
  return ndr(std::make_shared<const SparseMatrix>(edge_adjacency(e)), edge_x, layer);
}

/// Edge NDR on the indexing's own edge features.
inline NdrVector edge_ndr(const EdgeIndexing& e, Tape& tape, int layer = 0) {
  if (!e.has_features()) throw std::invalid_argument("edge_ndr: edge features missing");
  return edge_ndr(e, tape.constant(e.features()), layer);
}

/// Linear map applied to an online layer's states before its NDR.
inline Tensor learnable_transform(const Tensor& x, const Tensor& w_f) {
  if (w_f.rows() != x.cols() || w_f.cols() != x.cols()) {
    throw DimensionError("learnable_transform: W_f must be " + shape_str(x.cols(), x.cols()) + ", got " +
                         shape_str(w_f.rows(), w_f.cols()));
  }
  return matmul(x, w_f);
}

/// Mean or L2 norm over valid entries; 0 when none are valid.
inline double ndr_summary(const NdrVector& s, SummaryStat stat) {
  const Matrix& v = s.values.value();
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.valid.size(); ++i) {
    if (!s.valid[i]) continue;
    const double x = v(static_cast<Index>(i), 0);
    acc += stat == SummaryStat::mean ? x : x * x;
    ++n;
  }
  if (n == 0) return 0.0;
  return stat == SummaryStat::mean ? acc / static_cast<double>(n) : std::sqrt(acc);
}

struct AdrReport {
  std::vector<double> summaries;  ///< per layer, in layer order (index 0 = layer 1)
  int l_star = 0;                 ///< layer number of the first target
  std::vector<int> targets;       ///< per pair: target layer number, in matching order
  std::vector<int> onlines;       ///< per pair: online layer number
  std::vector<bool> active;       ///< per pair: indicator, false before l*
  int start_pair = 0;             ///< first pair considered (its target is l*)
  double loss = 0.0;

  /// One character per pair in matching order: '.' before l*, then 1/0.
  std::string indicator_pattern() const {
    std::string s;
    for (std::size_t k = 0; k < active.size(); ++k) {
      if (k < static_cast<std::size_t>(start_pair)) {
        s += '.';
      } else {
        s += active[k] ? '1' : '0';
      }
    }
    return s;
  }
};

/// ADR regularizer.
///
/// `ndrs` are the per-layer NDRs (layers 1..L, untransformed); they provide
/// the summaries and the stop-gradient targets. `online`, when non-empty,
/// replaces the online side of each pair (learnable transform). `degrees`
/// weights nodes when degree weighting is on.
inline std::pair<Tensor, AdrReport> adr_loss(const Column& degrees, std::span<const NdrVector> ndrs,
                                             const DistillConfig& cfg, std::span<const NdrVector> online = {}) {
  const std::size_t L = ndrs.size();
  if (L < 2) throw std::invalid_argument("adr_loss needs at least 2 layers");
  if (!online.empty() && online.size() != L) throw std::invalid_argument("adr_loss: online list length mismatch");
  const std::size_t n = ndrs.front().size();
  for (const auto& s : ndrs) {
    if (s.size() != n) throw DimensionError("adr_loss: NDR vectors differ in length");
  }
  if (static_cast<std::size_t>(degrees.size()) != n) throw DimensionError("adr_loss: degree vector length");
  Tape& tape = *ndrs.front().values.tape();

  AdrReport rep;
  for (const auto& s : ndrs) rep.summaries.push_back(ndr_summary(s, cfg.indicator_stat));

  // Matching order: layer order, or reversed for deep2shallow.
  std::vector<std::size_t> seq(L);
  for (std::size_t k = 0; k < L; ++k) seq[k] = cfg.direction == Direction::shallow2deep ? k : L - 1 - k;

  std::size_t start = 0;
  for (std::size_t k = 1; k + 1 < L; ++k) {
    if (rep.summaries[seq[k]] > rep.summaries[seq[start]]) start = k;
  }
  rep.start_pair = static_cast<int>(start);
  rep.l_star = ndrs[seq[start]].layer > 0 ? ndrs[seq[start]].layer : static_cast<int>(seq[start]) + 1;

  Column w = Column::Ones(static_cast<Index>(n));
  if (cfg.degree_weighting) {
    const double mx = n ? degrees.maxCoeff() : 0.0;
    if (mx > 0.0) w = degrees / mx;
  }

  Tensor total;
  for (std::size_t k = 0; k + 1 < L; ++k) {
    const NdrVector& tgt = ndrs[seq[k]];
    const NdrVector& onl = online.empty() ? ndrs[seq[k + 1]] : online[seq[k + 1]];
    rep.targets.push_back(static_cast<int>(seq[k]) + 1);
    rep.onlines.push_back(static_cast<int>(seq[k + 1]) + 1);
    const bool on = k >= start && rep.summaries[seq[k]] > rep.summaries[seq[k + 1]];
    rep.active.push_back(on);
    if (!on) continue;
    Column w2(static_cast<Index>(n));
    for (std::size_t v = 0; v < n; ++v) {
      const bool both = tgt.valid[v] && onl.valid[v];
      w2(static_cast<Index>(v)) = both ? w(static_cast<Index>(v)) * w(static_cast<Index>(v)) : 0.0;
    }
    Tensor term = weighted_sum_squares(sub(onl.values, stop_gradient(tgt.values)), w2);
    total = total.valid() ? add(total, term) : term;
  }
  if (!total.valid()) total = tape.constant(Matrix::Zero(1, 1));
  rep.loss = total.scalar();
  return {total, std::move(rep)};
}

inline std::pair<Tensor, AdrReport> adr_loss(const Graph& g, std::span<const NdrVector> ndrs,
                                             const DistillConfig& cfg, std::span<const NdrVector> online = {}) {
  return adr_loss(degree_vector(g), ndrs, cfg, online);
}

/// Sum over l of ||G^(l+1) - SG(G^(l))||^2.
inline Tensor graph_embed_loss(std::span<const Tensor> embeddings) {
  if (embeddings.empty()) throw std::invalid_argument("graph_embed_loss: no embeddings");
  Tensor total;
  for (std::size_t l = 0; l + 1 < embeddings.size(); ++l) {
    const Tensor& a = embeddings[l];
    const Tensor& b = embeddings[l + 1];
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
      throw ConfigError("graph_embed_loss: embeddings differ in shape (hidden dims must match)");
    }
    Tensor term = sum_squares(sub(b, stop_gradient(a)));
    total = total.valid() ? add(total, term) : term;
  }
  if (!total.valid()) return embeddings.front().tape()->constant(Matrix::Zero(1, 1));
  return total;
}

/// Mean over intermediate layers of KL(SG(softmax(final)) || softmax(inter)),
/// each averaged over masked rows.
inline Tensor logit_loss(std::span<const Tensor> intermediate, const Tensor& final_logits, const Mask& mask) {
  Tape& tape = *final_logits.tape();
  if (intermediate.empty()) return tape.constant(Matrix::Zero(1, 1));
  Tensor target = stop_gradient(softmax_rows(final_logits));
  Tensor total;
  for (const auto& z : intermediate) {
    if (z.cols() != final_logits.cols()) throw DimensionError("logit_loss: class count mismatch");
    Tensor term = kl_divergence(target, z, mask);
    total = total.valid() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(intermediate.size()));
}

/// CE + alpha L_L + beta L_N + gamma L_G. Terms with weight 0 or no tensor
/// are skipped.
inline Tensor total_loss(const Tensor& ce, const Tensor& l_l, const Tensor& l_n, const Tensor& l_g,
                         const DistillConfig& cfg) {
  Tensor t = ce;
  auto term = [&t](const Tensor& x, double w) {
    if (w != 0.0 && x.valid()) t = add(t, scale(x, w));
  };
  term(l_l, cfg.alpha);
  term(l_n, cfg.beta);
  term(l_g, cfg.gamma);
  return t;
}

}  // namespace smoothkit

#endif  // SMOOTHKIT_DISTILL_HPP
