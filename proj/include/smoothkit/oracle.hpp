#ifndef SMOOTHKIT_ORACLE_HPP
#define SMOOTHKIT_ORACLE_HPP

// Brute-force references for the `check` suite and the tests.
//
// The loop oracles read the graph's edge list, never its CSR adjacency, and
// do their arithmetic on scalars; they share no code with the code they
// check.

#include "smoothkit/train.hpp"

#include <iostream>
#include <limits>

namespace smoothkit {

struct OracleReport {
  std::string name;
  std::size_t trials = 0;
  double max_dev = 0.0;
  double tol = 0.0;
  bool pass = false;
};

inline std::ostream& operator<<(std::ostream& out, const OracleReport& r) {
  out << (r.pass ? "PASS " : "FAIL ") << r.name << ' ' << std::scientific << std::setprecision(3) << r.max_dev << ' '
      << r.tol << ' ' << std::defaultfloat << r.trials;
  return out;
}

namespace oracle {

inline std::vector<std::vector<Index>> neighbor_lists(const std::vector<Edge>& edges, Index n) {
  std::vector<std::vector<Index>> nb(static_cast<std::size_t>(n));
  for (const auto& e : edges) {
    nb[static_cast<std::size_t>(e.u)].push_back(e.v);
    nb[static_cast<std::size_t>(e.v)].push_back(e.u);
  }
  return nb;
}

struct NdrOracleResult {
  std::vector<double> values;
  std::vector<bool> valid;
};

/// NDR by explicit per-node neighbor sums over an undirected edge list.
inline NdrOracleResult ndr_loop(const std::vector<Edge>& edges, Index n, const Matrix& x, double eps = 1e-12) {
  const auto nb = neighbor_lists(edges, n);
  const Index d = x.cols();
  NdrOracleResult r{std::vector<double>(static_cast<std::size_t>(n), 0.0),
                    std::vector<bool>(static_cast<std::size_t>(n), false)};
  for (Index v = 0; v < n; ++v) {
    const auto& nv = nb[static_cast<std::size_t>(v)];
    if (nv.empty()) continue;
    std::vector<double> agg(static_cast<std::size_t>(d), 0.0);
    for (Index c : nv) {
      for (Index k = 0; k < d; ++k) agg[static_cast<std::size_t>(k)] += x(c, k);
    }
    double dot = 0.0, nx = 0.0, na = 0.0;
    for (Index k = 0; k < d; ++k) {
      dot += x(v, k) * agg[static_cast<std::size_t>(k)];
      nx += x(v, k) * x(v, k);
      na += agg[static_cast<std::size_t>(k)] * agg[static_cast<std::size_t>(k)];
    }
    nx = std::sqrt(nx);
    na = std::sqrt(na);
    if (nx < eps || na < eps) continue;
    r.valid[static_cast<std::size_t>(v)] = true;
    r.values[static_cast<std::size_t>(v)] = 1.0 - dot / (nx * na);
  }
  return r;
}

inline NdrOracleResult ndr_loop(const Graph& g, const Matrix& x) { return ndr_loop(g.edges(), g.num_nodes(), x); }

/// Cross-class-only variant: an edge is ignored iff both endpoints are train
/// nodes with equal labels.
inline NdrOracleResult ndr_masked_loop(const Graph& g, const Matrix& x) {
  std::vector<Edge> kept;
  const auto& y = g.labels();
  const auto& tr = g.masks().train;
  for (const auto& e : g.edges()) {
    const auto u = static_cast<std::size_t>(e.u), v = static_cast<std::size_t>(e.v);
    if (tr[u] && tr[v] && y[u] == y[v]) continue;
    kept.push_back(e);
  }
  return ndr_loop(kept, g.num_nodes(), x);
}

/// Dense membership matrix: edges i != j adjacent iff they share an endpoint.
inline std::vector<std::vector<bool>> edge_adj(const std::vector<Edge>& edges) {
  const std::size_t m = edges.size();
  std::vector<std::vector<bool>> a(m, std::vector<bool>(m, false));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      const Edge& p = edges[i];
      const Edge& q = edges[j];
      a[i][j] = p.u == q.u || p.u == q.v || p.v == q.u || p.v == q.v;
    }
  }
  return a;
}

inline double pnorm_diff(const Matrix& x, Index a, const std::vector<double>& b, int p) {
  double s = 0.0;
  for (Index k = 0; k < x.cols(); ++k) {
    const double d = std::abs(x(a, k) - b[static_cast<std::size_t>(k)]);
    s += p == 1 ? d : d * d;
  }
  return p == 1 ? s : std::sqrt(s);
}

/// Neighbor-wise distance d2 and distance-to-neighbor-mean d1, both
/// normalized by the directed edge count 2M. Isolated nodes have no
/// neighbor mean and contribute to neither.
inline std::pair<double, double> prop1(const std::vector<Edge>& edges, Index n, const Matrix& x, int p) {
  if (p != 1 && p != 2) throw std::invalid_argument("prop1: p must be 1 or 2");
  const auto nb = neighbor_lists(edges, n);
  const double directed = 2.0 * static_cast<double>(edges.size());
  if (directed == 0.0) return {0.0, 0.0};
  double d2 = 0.0, d1 = 0.0;
  const auto d = static_cast<std::size_t>(x.cols());
  for (Index v = 0; v < n; ++v) {
    const auto& nv = nb[static_cast<std::size_t>(v)];
    if (nv.empty()) continue;
    std::vector<double> mean(d, 0.0);
    for (Index c : nv) {
      std::vector<double> xc(d);
      for (std::size_t k = 0; k < d; ++k) {
        xc[k] = x(c, static_cast<Index>(k));
        mean[k] += xc[k] / static_cast<double>(nv.size());
      }
      d2 += pnorm_diff(x, v, xc, p);
    }
    d1 += pnorm_diff(x, v, mean, p);
  }
  return {d2 / directed, d1 / directed};
}

}  // namespace oracle

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Builds a scalar loss on `tape` from the bound parameters.
using LossBuilder = std::function<Tensor(Tape&, std::span<const Tensor>)>;

/// Central differences on every entry of every parameter versus the tape.
/// Deviation per entry is |a - n| / max(|a|, |n|, 1e-8). Stop-gradient
/// outputs are frozen at their unperturbed values during the numeric passes,
/// so both routes differentiate the same function.
inline OracleReport grad_check(std::string name, std::vector<Matrix*> params, const LossBuilder& build,
                               double h = 1e-6, double tol = 1e-5) {
  auto bind = [&](Tape& t) {
    std::vector<Tensor> b;
    for (Matrix* p : params) b.push_back(t.variable(*p));
    return b;
  };
  Tape tape;
  auto bound = bind(tape);
  Tensor loss = build(tape, bound);
  tape.backward(loss);
  std::vector<Matrix> analytic;
  for (const auto& b : bound) analytic.push_back(tape.grad(b));
  const std::vector<Matrix> frozen = tape.stop_gradient_values();
  auto eval = [&] {
    Tape t;
    t.freeze_stop_gradients(frozen);
    auto b = bind(t);
    return build(t, b).scalar();
  };
  OracleReport r{std::move(name), 0, 0.0, tol, false};
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    for (Index k = 0; k < p.size(); ++k) {
      const double orig = p.data()[k];
      p.data()[k] = orig + h;
      const double fp = eval();
      p.data()[k] = orig - h;
      const double fm = eval();
      p.data()[k] = orig;
      const double num = (fp - fm) / (2.0 * h);
      const double a = analytic[i].data()[k];
      const double dev = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
      r.max_dev = std::max(r.max_dev, std::isfinite(dev) ? dev : std::numeric_limits<double>::infinity());
      ++r.trials;
    }
  }
  r.pass = r.max_dev < tol;
  return r;
}

// ---------------------------------------------------------------------------
// Fixtures shared by the check suite, tests and acceptance
// ---------------------------------------------------------------------------

/// Erdos-Renyi graph with Gaussian features. Labels 0..classes-1 and a
/// random train mask are attached when `classes` > 0.
inline Graph random_graph(std::mt19937_64& rng, Index n, double p, Index dim, int classes = 0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<Edge> edges;
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      if (u(rng) < p) edges.push_back({i, j});
    }
  }
  Matrix x(n, dim);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng);
  std::vector<int> labels;
  Masks masks;
  if (classes > 0) {
    std::uniform_int_distribution<int> c(0, classes - 1);
    masks.train.assign(static_cast<std::size_t>(n), 0);
    for (Index i = 0; i < n; ++i) {
      labels.push_back(c(rng));
      masks.train[static_cast<std::size_t>(i)] = u(rng) < 0.5 ? 1 : 0;
    }
  }
  Graph g(n, std::move(edges), std::move(x), std::move(labels), std::move(masks));
  if (classes > 0) g.set_num_classes(classes);
  return g;
}

/// 6-node, 2-class graph used for the full-objective gradient check.
inline Graph toy6() {
  Matrix x(6, 4);
  x << 0.9, -0.2, 0.4, 0.1,   //
      0.3, 0.8, -0.5, 0.6,    //
      -0.7, 0.2, 0.9, -0.3,   //
      0.5, -0.6, 0.1, 0.8,    //
      -0.1, 0.7, 0.3, -0.9,   //
      0.6, 0.4, -0.8, 0.2;
  std::vector<Edge> edges{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 2}, {1, 4}};
  std::vector<int> labels{0, 1, 0, 1, 1, 0};
  Masks m;
  m.train = {1, 1, 1, 1, 0, 0};
  m.val = {0, 0, 0, 0, 1, 0};
  m.test = {0, 0, 0, 0, 0, 1};
  return Graph(6, std::move(edges), std::move(x), std::move(labels), std::move(m));
}

struct ToySetup {
  Graph graph;
  Model model;
  Transforms transforms;
  DistillConfig distill;
  AdrReport adr;  ///< ADR report at the initial point
};

/// L=3 GCN on toy6 with every loss term active: alpha = beta = gamma = 1,
/// degree weighting and the learnable transform on. W_f starts off identity
/// so its gradient path is exercised. The seed is advanced until at least
/// one ADR indicator fires.
inline ToySetup full_objective_toy(std::uint64_t seed = 1) {
  ToySetup s{toy6(), Model(), Transforms(), DistillConfig(), AdrReport()};
  s.distill.alpha = s.distill.beta = s.distill.gamma = 1.0;
  s.distill.degree_weighting = true;
  s.distill.learnable_transform = true;
  ModelConfig mc;
  mc.backbone = Backbone::gcn;
  mc.n_layers = 3;
  mc.hidden_dim = 4;
  mc.dropout = 0.0;
  mc.activation = Activation::elu;
  for (std::uint64_t k = seed;; ++k) {
    s.model = Model(mc, Task::node, 4, 2, k, true);
    s.transforms = Transforms::identity_for(s.model, s.distill);
    std::mt19937_64 rng(k);
    std::normal_distribution<double> z(0.0, 0.1);
    for (auto& w : s.transforms.w) {
      for (Index i = 0; i < w.size(); ++i) w.data()[i] += z(rng);
    }
    Tape tape;
    auto bound = s.model.bind(tape);
    auto tfb = s.transforms.bind(tape);
    std::mt19937_64 unused(0);
    auto fr = s.model.forward(tape, bound, s.graph, GraphOps(s.graph, mc.backbone), false, unused);
    auto o = node_objective(s.model, bound, tfb, fr, s.graph, s.distill);
    bool any = false;
    for (bool a : o.adr.active) any = any || a;
    if (any) {
      s.adr = o.adr;
      return s;
    }
  }
}

/// Full-objective gradient check on the toy (all parameters and W_f).
inline OracleReport full_objective_grad_check(double tol = 1e-5, std::uint64_t seed = 1) {
  ToySetup s = full_objective_toy(seed);
  std::vector<Matrix*> params;
  for (auto& p : s.model.params()) params.push_back(&p.value);
  std::vector<std::size_t> tf_slots;
  for (std::size_t l = 0; l < s.transforms.w.size(); ++l) {
    if (s.transforms.w[l].size()) {
      tf_slots.push_back(l);
      params.push_back(&s.transforms.w[l]);
    }
  }
  const std::size_t np = s.model.params().size();
  const GraphOps ops(s.graph, s.model.config().backbone);
  LossBuilder build = [&](Tape& tape, std::span<const Tensor> b) {
    std::span<const Tensor> mb = b.subspan(0, np);
    std::vector<Tensor> tfb(s.transforms.w.size());
    for (std::size_t k = 0; k < tf_slots.size(); ++k) tfb[tf_slots[k]] = b[np + k];
    std::mt19937_64 unused(0);
    auto fr = s.model.forward(tape, mb, s.graph, ops, false, unused);
    return node_objective(s.model, mb, tfb, fr, s.graph, s.distill).total;
  };
  return grad_check("grad_full_objective", params, build, 1e-6, tol);
}

// ---------------------------------------------------------------------------
// Check suite
// ---------------------------------------------------------------------------

inline OracleReport check_ndr_matrix_vs_loop(std::size_t trials = 100, std::uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> nn(2, 100), dd(1, 8);
  std::uniform_real_distribution<double> pp(0.01, 0.3);
  OracleReport r{"ndr_matrix_vs_loop", trials, 0.0, 1e-10, false};
  for (std::size_t t = 0; t < trials; ++t) {
    Graph g = random_graph(rng, nn(rng), pp(rng), dd(rng));
    Tape tape;
    NdrVector s = ndr(g, tape.constant(g.features()));
    auto o = oracle::ndr_loop(g, g.features());
    for (Index v = 0; v < g.num_nodes(); ++v) {
      const auto i = static_cast<std::size_t>(v);
      if (static_cast<bool>(s.valid[i]) != o.valid[i]) {
        r.max_dev = std::numeric_limits<double>::infinity();
        continue;
      }
      if (o.valid[i]) r.max_dev = std::max(r.max_dev, std::abs(s.values.value()(v, 0) - o.values[i]));
    }
  }
  r.pass = r.max_dev <= r.tol;
  return r;
}

inline OracleReport check_edge_adjacency(std::size_t trials = 50, std::uint64_t seed = 12) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> nn(2, 40);
  std::uniform_real_distribution<double> pp(0.02, 0.4);
  OracleReport r{"edge_adjacency_vs_bruteforce", trials, 0.0, 0.0, false};
  for (std::size_t t = 0; t < trials; ++t) {
    Graph g = random_graph(rng, nn(rng), pp(rng), 1);
    std::vector<Edge> edges = g.edges();
    if (edges.size() > 200) edges.resize(200);
    EdgeIndexing e(edges, g.num_nodes());
    const Matrix dense = edge_adjacency(e).densify();
    const auto o = oracle::edge_adj(edges);
    double mismatches = 0.0;
    for (std::size_t i = 0; i < edges.size(); ++i) {
      for (std::size_t j = 0; j < edges.size(); ++j) {
        const double want = o[i][j] ? 1.0 : 0.0;
        if (dense(static_cast<Index>(i), static_cast<Index>(j)) != want) mismatches += 1.0;
      }
    }
    r.max_dev = std::max(r.max_dev, mismatches);
  }
  r.pass = r.max_dev <= r.tol;
  return r;
}

/// Max over trials of d1 - d2 (the inequality holds when <= 1e-12).
inline OracleReport check_prop1(int p, std::size_t trials = 100, std::uint64_t seed = 13) {
  std::mt19937_64 rng(seed + static_cast<std::uint64_t>(p));
  std::uniform_int_distribution<Index> nn(2, 60), dd(1, 6);
  std::uniform_real_distribution<double> pp(0.02, 0.5);
  OracleReport r{"prop1_p" + std::to_string(p), trials, -std::numeric_limits<double>::infinity(), 1e-12, false};
  for (std::size_t t = 0; t < trials; ++t) {
    Graph g = random_graph(rng, nn(rng), pp(rng), dd(rng));
    auto [d2, d1] = oracle::prop1(g.edges(), g.num_nodes(), g.features(), p);
    r.max_dev = std::max(r.max_dev, d1 - d2);
  }
  r.pass = r.max_dev <= r.tol;
  return r;
}

inline OracleReport check_grad_linear_mse() {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> z(0.0, 1.0);
  Matrix x(5, 3), y(5, 2), w(3, 2);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng);
  for (Index i = 0; i < y.size(); ++i) y.data()[i] = z(rng);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = z(rng);
  LossBuilder build = [&](Tape& t, std::span<const Tensor> b) {
    return sum_squares(sub(matmul(t.constant(x), b[0]), t.constant(y)));
  };
  return grad_check("grad_linear_mse", {&w}, build, 1e-6, 1e-9);
}

inline OracleReport check_grad_gcn_ce() {
  std::mt19937_64 rng(22);
  Graph g = random_graph(rng, 12, 0.3, 5, 3);
  ModelConfig mc;
  mc.n_layers = 2;
  mc.hidden_dim = 6;
  mc.dropout = 0.0;
  Model m(mc, Task::node, 5, 3, 22, false);
  std::vector<Matrix*> params;
  for (auto& p : m.params()) params.push_back(&p.value);
  const GraphOps ops(g, Backbone::gcn);
  LossBuilder build = [&](Tape& t, std::span<const Tensor> b) {
    std::mt19937_64 unused(0);
    auto fr = m.forward(t, b, g, ops, false, unused);
    return softmax_cross_entropy(fr.logits, g.labels(), g.masks().train);
  };
  return grad_check("grad_gcn2_ce", params, build, 1e-6, 1e-5);
}

/// Every property of the `check` subcommand.
inline std::vector<OracleReport> run_check_suite() {
  std::vector<OracleReport> out;
  out.push_back(check_ndr_matrix_vs_loop());
  out.push_back(check_edge_adjacency());
  out.push_back(check_prop1(1));
  out.push_back(check_prop1(2));
  out.push_back(check_grad_linear_mse());
  out.push_back(check_grad_gcn_ce());
  out.push_back(full_objective_grad_check());
  return out;
}

}  // namespace smoothkit

#endif  // SMOOTHKIT_ORACLE_HPP
