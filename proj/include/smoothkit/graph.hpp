#ifndef SMOOTHKIT_GRAPH_HPP
#define SMOOTHKIT_GRAPH_HPP

// Graph data model and structural transforms.

#include "smoothkit/tensor.hpp"

#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>

namespace smoothkit {

struct Edge {
  Index u;  ///< u < v
  Index v;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

struct Masks {
  Mask train;
  Mask val;
  Mask test;
  friend bool operator==(const Masks&, const Masks&) = default;
};

/// Undirected simple graph with node features, labels and split masks.
///
/// Adjacency is symmetric and never stores self-loops. Features are shared
/// between graphs derived by structural transforms.
class Graph {
 public:
  Graph() = default;

  /// Self-loops are dropped, duplicates merged, pairs reoriented to u < v.
  /// `labels` may be empty (graph-classification members); masks may be
  /// empty (all-false).
  Graph(Index num_nodes, std::vector<Edge> edges, Matrix features, std::vector<int> labels = {},
        Masks masks = {})
      : Graph(num_nodes, std::move(edges), std::make_shared<const Matrix>(std::move(features)),
              std::move(labels), std::move(masks)) {}

  Graph(Index num_nodes, std::vector<Edge> edges, std::shared_ptr<const Matrix> features,
        std::vector<int> labels, Masks masks)
      : n_(num_nodes), features_(std::move(features)), labels_(std::move(labels)),
        masks_(std::move(masks)) {
    if (n_ < 0) throw DimensionError("negative node count");
    if (!features_) features_ = std::make_shared<const Matrix>(Matrix::Zero(n_, 0));
    if (features_->rows() != n_) throw DimensionError("feature rows must equal node count");
    if (!labels_.empty() && static_cast<Index>(labels_.size()) != n_) {
      throw DimensionError("labels length must equal node count");
    }
    auto fix = [this](Mask& m) {
      if (m.empty()) m.assign(static_cast<std::size_t>(n_), 0);
      if (static_cast<Index>(m.size()) != n_) throw DimensionError("mask length must equal node count");
    };
    fix(masks_.train);
    fix(masks_.val);
    fix(masks_.test);
    for (std::size_t i = 0; i < static_cast<std::size_t>(n_); ++i) {
      if (masks_.train[i] + masks_.val[i] + masks_.test[i] > 1) {
        throw std::invalid_argument("train/val/test masks must be disjoint");
      }
    }
    for (auto& e : edges) {
      if (e.u < 0 || e.v < 0 || e.u >= n_ || e.v >= n_) throw DimensionError("edge endpoint out of range");
      if (e.u > e.v) std::swap(e.u, e.v);
    }
    std::erase_if(edges, [](const Edge& e) { return e.u == e.v; });
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    edges_ = std::move(edges);
    std::vector<Triplet> t;
    t.reserve(edges_.size() * 2);
    for (const auto& e : edges_) {
      t.push_back({e.u, e.v, 1.0});
      t.push_back({e.v, e.u, 1.0});
    }
    adjacency_ = std::make_shared<const SparseMatrix>(SparseMatrix::from_triplets(n_, n_, std::move(t)));
    int mx = -1;
    for (int y : labels_) mx = std::max(mx, y);
    num_classes_ = mx + 1;
  }

  Index num_nodes() const { return n_; }
  std::size_t num_edges() const { return edges_.size(); }
  const std::vector<Edge>& edges() const { return edges_; }
  const SparseMatrix& adjacency() const { return *adjacency_; }
  std::shared_ptr<const SparseMatrix> adjacency_ptr() const { return adjacency_; }
  const Matrix& features() const { return *features_; }
  std::shared_ptr<const Matrix> features_ptr() const { return features_; }
  Index feature_dim() const { return features_->cols(); }
  const std::vector<int>& labels() const { return labels_; }
  bool has_labels() const { return !labels_.empty(); }
  int num_classes() const { return num_classes_; }
  const Masks& masks() const { return masks_; }

  /// Same nodes, features, labels and masks over a different edge set.
  Graph with_edges(std::vector<Edge> edges) const {
    Graph g(n_, std::move(edges), features_, labels_, masks_);
    g.num_classes_ = std::max(g.num_classes_, num_classes_);
    return g;
  }

  Graph with_masks(Masks masks) const {
    Graph g(n_, edges_, features_, labels_, std::move(masks));
    g.num_classes_ = std::max(g.num_classes_, num_classes_);
    return g;
  }

  /// Overrides the class count (e.g. when some classes are absent).
  void set_num_classes(int c) { num_classes_ = c; }

  friend bool operator==(const Graph& a, const Graph& b) {
    return a.n_ == b.n_ && a.edges_ == b.edges_ && *a.features_ == *b.features_ &&
           a.labels_ == b.labels_ && a.masks_ == b.masks_;
  }

 private:
  Index n_ = 0;
  std::vector<Edge> edges_;
  std::shared_ptr<const SparseMatrix> adjacency_ = std::make_shared<const SparseMatrix>();
  std::shared_ptr<const Matrix> features_;
  std::vector<int> labels_;
  Masks masks_;
  int num_classes_ = 0;
};

/// Per-node count of stored neighbors.
inline Column degree_vector(const SparseMatrix& a) {
  Column d(a.rows());
  for (Index r = 0; r < a.rows(); ++r) d(r) = static_cast<double>(a.row_nnz(r));
  return d;
}

inline Column degree_vector(const Graph& g) { return degree_vector(g.adjacency()); }

/// Labelled graphs for graph classification plus their fold assignment.
struct GraphBatch {
  std::vector<Graph> graphs;
  std::vector<int> labels;  ///< one per graph, 0..C-1
  std::vector<int> folds;   ///< one per graph, 0..k-1; empty until assigned
  int num_classes = 0;

  std::size_t size() const { return graphs.size(); }

  /// Random balanced partition into k folds.
  void assign_folds(int k, std::uint64_t seed) {
    if (k < 1) throw std::invalid_argument("fold count must be positive");
    std::vector<std::size_t> order(graphs.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    folds.assign(graphs.size(), 0);
    for (std::size_t i = 0; i < order.size(); ++i) folds[order[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  }
};

/// Canonical edge list with dense ids, optional edge features.
class EdgeIndexing {
 public:
  explicit EdgeIndexing(const Graph& g, std::optional<Matrix> edge_features = std::nullopt)
      : EdgeIndexing(g.edges(), g.num_nodes(), std::move(edge_features)) {}

  EdgeIndexing(std::vector<Edge> edges, Index num_nodes, std::optional<Matrix> edge_features = std::nullopt)
      : edges_(std::move(edges)), num_nodes_(num_nodes), features_(std::move(edge_features)) {
    if (features_ && features_->rows() != static_cast<Index>(edges_.size())) {
      throw DimensionError("edge features must have one row per edge");
    }
  }

  std::size_t size() const { return edges_.size(); }
  Index num_nodes() const { return num_nodes_; }
  const Edge& endpoints(std::size_t id) const { return edges_.at(id); }
  const std::vector<Edge>& edges() const { return edges_; }
  bool has_features() const { return features_.has_value(); }
  const Matrix& features() const {
    if (!features_) throw std::logic_error("edge indexing has no edge features");
    return *features_;
  }

 private:
  std::vector<Edge> edges_;
  Index num_nodes_;
  std::optional<Matrix> features_;
};

/// Adjacency restricted to cross-class pairs. Only training labels are
/// trusted: an edge is dropped iff both endpoints are in the train mask and
/// share a label.
inline SparseMatrix masked_adjacency(const Graph& g) {
  if (!g.has_labels()) throw std::invalid_argument("masked adjacency needs node labels");
  const auto& y = g.labels();
  const auto& tr = g.masks().train;
  std::vector<Triplet> t;
  for (const auto& e : g.edges()) {
    const auto u = static_cast<std::size_t>(e.u), v = static_cast<std::size_t>(e.v);
    if (tr[u] && tr[v] && y[u] == y[v]) continue;
    t.push_back({e.u, e.v, 1.0});
    t.push_back({e.v, e.u, 1.0});
  }
  return SparseMatrix::from_triplets(g.num_nodes(), g.num_nodes(), std::move(t));
}

/// Line-graph adjacency: edges i != j are adjacent iff they share an endpoint.
inline SparseMatrix edge_adjacency(const EdgeIndexing& e) {
  std::vector<std::vector<Index>> incident(static_cast<std::size_t>(e.num_nodes()));
  for (std::size_t id = 0; id < e.size(); ++id) {
    incident[static_cast<std::size_t>(e.endpoints(id).u)].push_back(static_cast<Index>(id));
    incident[static_cast<std::size_t>(e.endpoints(id).v)].push_back(static_cast<Index>(id));
  }
  std::set<std::pair<Index, Index>> pairs;
  for (const auto& inc : incident) {
    for (std::size_t a = 0; a < inc.size(); ++a) {
      for (std::size_t b = a + 1; b < inc.size(); ++b) {
        pairs.emplace(inc[a], inc[b]);
        pairs.emplace(inc[b], inc[a]);
      }
    }
  }
  std::vector<Triplet> t;
  t.reserve(pairs.size());
  for (const auto& [i, j] : pairs) t.push_back({i, j, 1.0});
  const auto m = static_cast<Index>(e.size());
  return SparseMatrix::from_triplets(m, m, std::move(t));
}

/// Removes floor(ratio * M) undirected edges chosen uniformly without
/// replacement.
inline Graph drop_edge(const Graph& g, double ratio, std::uint64_t seed) {
  if (ratio < 0.0 || ratio >= 1.0) throw std::invalid_argument("drop_edge ratio must be in [0,1)");
  const std::size_t m = g.num_edges();
  const auto drop = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(m)));
  if (drop == 0) return g;
  std::vector<std::size_t> ids(m);
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::size_t> keep(ids.begin() + static_cast<std::ptrdiff_t>(drop), ids.end());
  std::sort(keep.begin(), keep.end());
  std::vector<Edge> kept;
  kept.reserve(keep.size());
  for (std::size_t id : keep) kept.push_back(g.edges()[id]);
  return g.with_edges(std::move(kept));
}

/// D^{-1/2} (A + I) D^{-1/2} with degrees of A + I.
inline SparseMatrix gcn_normalized(const SparseMatrix& a) {
  const Index n = a.rows();
  std::vector<Triplet> t;
  t.reserve(a.nnz() + static_cast<std::size_t>(n));
  Column dinv(n);
  for (Index r = 0; r < n; ++r) dinv(r) = 1.0 / std::sqrt(static_cast<double>(a.row_nnz(r)) + 1.0);
  for (Index r = 0; r < n; ++r) {
    t.push_back({r, r, dinv(r) * dinv(r)});
    for (Index k = a.row_begin(r); k < a.row_end(r); ++k) {
      t.push_back({r, a.col_at(k), a.value_at(k) * dinv(r) * dinv(a.col_at(k))});
    }
  }
  return SparseMatrix::from_triplets(n, n, std::move(t));
}

/// D^{-1} A; zero-degree rows stay empty.
inline SparseMatrix mean_normalized(const SparseMatrix& a) {
  std::vector<double> vals(a.values().begin(), a.values().end());
  for (Index r = 0; r < a.rows(); ++r) {
    const double deg = static_cast<double>(a.row_nnz(r));
    for (Index k = a.row_begin(r); k < a.row_end(r); ++k) vals[static_cast<std::size_t>(k)] /= deg;
  }
  return a.with_values(std::move(vals));
}

/// Structure of A + I (unit values).
inline SparseMatrix with_self_loops(const SparseMatrix& a) {
  std::vector<Triplet> t;
  t.reserve(a.nnz() + static_cast<std::size_t>(a.rows()));
  for (Index r = 0; r < a.rows(); ++r) {
    t.push_back({r, r, 1.0});
    for (Index k = a.row_begin(r); k < a.row_end(r); ++k) {
      if (a.col_at(k) != r) t.push_back({r, a.col_at(k), 1.0});
    }
  }
  return SparseMatrix::from_triplets(a.rows(), a.cols(), std::move(t));
}

/// Semi-supervised layout: first `per_class` nodes of each class in order
/// for training, then the next `val` unused nodes, then the next `test`.
inline Masks planetoid_split(const std::vector<int>& labels, int num_classes, std::size_t per_class = 20,
                             std::size_t val = 500, std::size_t test = 1000) {
  const std::size_t n = labels.size();
  Masks m{Mask(n, 0), Mask(n, 0), Mask(n, 0)};
  std::vector<std::size_t> taken(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
  for (std::size_t i = 0; i < n; ++i) {
    auto& c = taken.at(static_cast<std::size_t>(labels[i]));
    if (c < per_class) {
      m.train[i] = 1;
      ++c;
    }
  }
  std::size_t i = 0;
  for (std::size_t k = 0; k < val && i < n; ++i) {
    if (m.train[i]) continue;
    m.val[i] = 1;
    ++k;
  }
  for (std::size_t k = 0; k < test && i < n; ++i) {
    if (m.train[i]) continue;
    m.test[i] = 1;
    ++k;
  }
  return m;
}

struct SbmParams {
  int blocks = 2;
  int nodes_per_block = 50;
  double p_in = 0.5;
  double p_out = 0.05;
  int feat_dim = 8;
  double noise = 1.0;
  std::uint64_t seed = 0;
};

/// Stochastic block model with block-id labels. Features are the one-hot
/// block centroid plus N(0, noise^2); the first 20 nodes of each block train,
/// the remainder alternates val/test.
inline Graph sbm_generate(const SbmParams& p) {
  if (!(0.0 <= p.p_out && p.p_out <= p.p_in && p.p_in <= 1.0)) {
    throw std::invalid_argument("sbm requires 0 <= p_out <= p_in <= 1");
  }
  if (p.blocks < 1 || p.nodes_per_block < 1 || p.feat_dim < 1) {
    throw std::invalid_argument("sbm sizes must be positive");
  }
  const Index n = static_cast<Index>(p.blocks) * p.nodes_per_block;
  std::mt19937_64 rng(p.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, p.noise);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i / p.nodes_per_block);
  std::vector<Edge> edges;
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      const bool same = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
      if (unif(rng) < (same ? p.p_in : p.p_out)) edges.push_back({i, j});
    }
  }
  Matrix x(n, p.feat_dim);
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < p.feat_dim; ++c) x(i, c) = gauss(rng);
    x(i, labels[static_cast<std::size_t>(i)] % p.feat_dim) += 1.0;
  }
  Masks m{Mask(static_cast<std::size_t>(n), 0), Mask(static_cast<std::size_t>(n), 0),
          Mask(static_cast<std::size_t>(n), 0)};
  for (Index i = 0; i < n; ++i) {
    const Index pos = i % p.nodes_per_block;
    auto& slot = pos < 20 ? m.train : ((pos - 20) % 2 == 0 ? m.val : m.test);
    slot[static_cast<std::size_t>(i)] = 1;
  }
  Graph g(n, std::move(edges), std::move(x), std::move(labels), std::move(m));
  g.set_num_classes(p.blocks);
  return g;
}

}  // namespace smoothkit

#endif  // SMOOTHKIT_GRAPH_HPP
