#include "smoothkit/smoothkit.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace smoothkit;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Index r, Index c) {
  std::normal_distribution<double> z(0.0, 1.0);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = z(rng);
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  EXPECT_EQ(a.rows(), b.rows());
  EXPECT_EQ(a.cols(), b.cols());
  return (a - b).cwiseAbs().maxCoeff();
}

Matrix relu_value(Matrix m) { return m.cwiseMax(0.0); }

/// 4-node toy: path 0-1-2 plus edge 1-3.
Graph toy4(std::mt19937_64& rng, Index dim) {
  return Graph(4, {{0, 1}, {1, 2}, {1, 3}}, random_matrix(rng, 4, dim));
}

Graph permuted(const Graph& g, const std::vector<Index>& pi) {
  // Node v of g becomes node pi[v].
  std::vector<Edge> e;
  for (const auto& x : g.edges()) e.push_back({pi[static_cast<std::size_t>(x.u)], pi[static_cast<std::size_t>(x.v)]});
  Matrix f(g.num_nodes(), g.feature_dim());
  for (Index v = 0; v < g.num_nodes(); ++v) f.row(pi[static_cast<std::size_t>(v)]) = g.features().row(v);
  return Graph(g.num_nodes(), std::move(e), std::move(f));
}

}  // namespace

TEST(ModelConfigTest, ValidationErrors) {
  ModelConfig c;
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.backbone = Backbone::gat;
  c.hidden_dim = 10;
  c.n_heads = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfigTest, JsonRoundTripAndStrictKeys) {
  ModelConfig c;
  c.backbone = Backbone::gat;
  c.n_layers = 3;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.activation = Activation::leaky_relu;
  nlohmann::json j = c;
  ModelConfig d = j.get<ModelConfig>();
  EXPECT_EQ(d.backbone, Backbone::gat);
  EXPECT_EQ(d.n_layers, 3);
  EXPECT_EQ(d.n_heads, 2);
  EXPECT_EQ(d.resolved_activation(), Activation::leaky_relu);
  j["hiden_dim"] = 4;
  EXPECT_THROW(j.get<ModelConfig>(), ConfigError);
  nlohmann::json bad = {{"backbone", "gin"}};
  EXPECT_THROW(bad.get<ModelConfig>(), ConfigError);
}

TEST(ModelConfigTest, DefaultActivations) {
  ModelConfig c;
  EXPECT_EQ(c.resolved_activation(), Activation::relu);
  c.backbone = Backbone::gat;
  EXPECT_EQ(c.resolved_activation(), Activation::elu);
}

TEST(Gcn, SingleNodeIsDenseLayer) {
  std::mt19937_64 rng(1);
  Graph g(1, {}, random_matrix(rng, 1, 3));
  Matrix w = random_matrix(rng, 3, 2);
  Tape t;
  GraphOps ops(g, Backbone::gcn);
  Tensor y = activate(gcn_forward(ops.gcn, t.constant(g.features()), t.constant(w)), Activation::relu);
  EXPECT_LT(max_abs_diff(y.value(), relu_value(g.features() * w)), 1e-15);
}

TEST(Gcn, ComponentsAreIndependent) {
  std::mt19937_64 rng(2);
  Matrix x = random_matrix(rng, 5, 3), w = random_matrix(rng, 3, 2);
  Graph g(5, {{0, 1}, {1, 2}, {3, 4}}, x);
  Matrix x2 = x;
  x2.row(3) *= -3.0;
  x2.row(4).setConstant(7.0);
  Graph h(5, {{0, 1}, {1, 2}, {3, 4}}, x2);
  Tape t;
  GraphOps og(g, Backbone::gcn), oh(h, Backbone::gcn);
  Matrix a = gcn_forward(og.gcn, t.constant(x), t.constant(w)).value();
  Matrix b = gcn_forward(oh.gcn, t.constant(x2), t.constant(w)).value();
  EXPECT_EQ(a.topRows(3), b.topRows(3));
  EXPECT_NE(a.bottomRows(2), b.bottomRows(2));
}

TEST(Gcn, MatchesDenseNormalizedAdjacency) {
  std::mt19937_64 rng(3);
  Graph g = toy4(rng, 3);
  Matrix w = random_matrix(rng, 3, 2);
  Matrix a = Matrix::Identity(4, 4);
  for (const auto& e : g.edges()) a(e.u, e.v) = a(e.v, e.u) = 1.0;
  Matrix norm(4, 4);
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 4; ++j) norm(i, j) = a(i, j) / std::sqrt(a.row(i).sum() * a.row(j).sum());
  }
  Matrix want = relu_value(norm * g.features() * w);
  Tape t;
  GraphOps ops(g, Backbone::gcn);
  Tensor y = activate(gcn_forward(ops.gcn, t.constant(g.features()), t.constant(w)), Activation::relu);
  EXPECT_LT(max_abs_diff(y.value(), want), 1e-10);
}

TEST(Sage, EdgelessIsSelfTerm) {
  std::mt19937_64 rng(4);
  Graph g(3, {}, random_matrix(rng, 3, 2));
  Matrix ws = random_matrix(rng, 2, 4), wn = random_matrix(rng, 2, 4);
  Tape t;
  GraphOps ops(g, Backbone::sage);
  Tensor y = sage_forward(ops.mean, t.constant(g.features()), t.constant(ws), t.constant(wn));
  EXPECT_LT(max_abs_diff(y.value(), g.features() * ws), 1e-15);
}

TEST(Sage, ZeroNeighborWeightIsMlp) {
  std::mt19937_64 rng(5);
  Graph g(4, {{0, 1}, {1, 2}, {2, 3}, {0, 3}}, random_matrix(rng, 4, 3));
  Matrix ws = random_matrix(rng, 3, 2);
  Tape t;
  GraphOps ops(g, Backbone::sage);
  Tensor y = activate(sage_forward(ops.mean, t.constant(g.features()), t.constant(ws), t.constant(Matrix::Zero(3, 2))),
                      Activation::relu);
  EXPECT_LT(max_abs_diff(y.value(), relu_value(g.features() * ws)), 1e-15);
}

TEST(Sage, MatchesPerNodeMeanLoop) {
  std::mt19937_64 rng(6);
  Graph g(5, {{0, 1}, {1, 2}, {1, 3}}, random_matrix(rng, 5, 3));  // node 4 isolated
  Matrix ws = random_matrix(rng, 3, 2), wn = random_matrix(rng, 3, 2);
  const auto nb = oracle::neighbor_lists(g.edges(), 5);
  Matrix want(5, 2);
  for (Index v = 0; v < 5; ++v) {
    Matrix agg = Matrix::Zero(1, 3);
    for (Index c : nb[static_cast<std::size_t>(v)]) agg += g.features().row(c);
    if (!nb[static_cast<std::size_t>(v)].empty()) agg /= static_cast<double>(nb[static_cast<std::size_t>(v)].size());
    want.row(v) = g.features().row(v) * ws + agg * wn;
  }
  Tape t;
  GraphOps ops(g, Backbone::sage);
  Tensor y = sage_forward(ops.mean, t.constant(g.features()), t.constant(ws), t.constant(wn));
  EXPECT_LT(max_abs_diff(y.value(), want), 1e-10);
}

TEST(Gat, SingleNodeAttendsToSelf) {
  std::mt19937_64 rng(7);
  Graph g(1, {}, random_matrix(rng, 1, 3));
  Tape t;
  GraphOps ops(g, Backbone::gat);
  Matrix w = random_matrix(rng, 3, 2);
  std::vector<GatHead> heads{{t.constant(w), t.constant(random_matrix(rng, 2, 1)), t.constant(random_matrix(rng, 2, 1))}};
  Tensor y = gat_forward(ops.self_loop, t.constant(g.features()), heads, false);
  EXPECT_LT(max_abs_diff(y.value(), g.features() * w), 1e-15);
}

TEST(Gat, ZeroScoresGiveMeanOverNeighborsAndSelf) {
  std::mt19937_64 rng(8);
  Graph g = toy4(rng, 3);
  Matrix w = random_matrix(rng, 3, 2);
  Tape t;
  GraphOps ops(g, Backbone::gat);
  std::vector<GatHead> heads{{t.constant(w), t.constant(Matrix::Zero(2, 1)), t.constant(Matrix::Zero(2, 1))}};
  Tensor y = gat_forward(ops.self_loop, t.constant(g.features()), heads, false);
  const Matrix z = g.features() * w;
  const auto nb = oracle::neighbor_lists(g.edges(), 4);
  for (Index v = 0; v < 4; ++v) {
    Matrix want = z.row(v);
    for (Index c : nb[static_cast<std::size_t>(v)]) want += z.row(c);
    want /= static_cast<double>(nb[static_cast<std::size_t>(v)].size() + 1);
    EXPECT_LT(max_abs_diff(y.value().row(v), want), 1e-14);
  }
}

TEST(Gat, MatchesHandRolledSoftmax) {
  std::mt19937_64 rng(9);
  Graph g(3, {{0, 1}, {1, 2}}, random_matrix(rng, 3, 2));
  Matrix w = random_matrix(rng, 2, 3), as = random_matrix(rng, 3, 1), ad = random_matrix(rng, 3, 1);
  const Matrix z = g.features() * w;
  const auto nb = oracle::neighbor_lists(g.edges(), 3);
  Matrix want = Matrix::Zero(3, 3);
  for (Index i = 0; i < 3; ++i) {
    std::vector<Index> js = nb[static_cast<std::size_t>(i)];
    js.push_back(i);
    std::vector<double> e;
    for (Index j : js) {
      double s = 0.0;
      for (Index k = 0; k < 3; ++k) s += ad(k, 0) * z(i, k) + as(k, 0) * z(j, k);
      e.push_back(s > 0 ? s : 0.2 * s);
    }
    double mx = *std::max_element(e.begin(), e.end()), den = 0.0;
    for (double& x : e) den += (x = std::exp(x - mx));
    for (std::size_t k = 0; k < js.size(); ++k) want.row(i) += e[k] / den * z.row(js[k]);
  }
  Tape t;
  GraphOps ops(g, Backbone::gat);
  std::vector<GatHead> heads{{t.constant(w), t.constant(as), t.constant(ad)}};
  EXPECT_LT(max_abs_diff(gat_forward(ops.self_loop, t.constant(g.features()), heads, false).value(), want), 1e-10);
}

TEST(Gat, HeadsConcatOrAverage) {
  std::mt19937_64 rng(10);
  Graph g = toy4(rng, 3);
  Tape t;
  GraphOps ops(g, Backbone::gat);
  std::vector<GatHead> heads;
  for (int k = 0; k < 3; ++k) {
    heads.push_back({t.constant(random_matrix(rng, 3, 2)), t.constant(random_matrix(rng, 2, 1)),
                     t.constant(random_matrix(rng, 2, 1))});
  }
  Tensor cat = gat_forward(ops.self_loop, t.constant(g.features()), heads, false);
  Tensor avg = gat_forward(ops.self_loop, t.constant(g.features()), heads, true);
  EXPECT_EQ(cat.cols(), 6);
  EXPECT_EQ(avg.cols(), 2);
  const Matrix c = cat.value();
  EXPECT_LT(max_abs_diff(avg.value(), (c.leftCols(2) + c.middleCols(2, 2) + c.rightCols(2)) / 3.0), 1e-15);
}

TEST(Readout, IdenticalRows) {
  Matrix x(4, 3);
  for (Index i = 0; i < 4; ++i) x.row(i) << 1.5, -2.0, 0.25;
  Tape t;
  Tensor tx = t.constant(x);
  EXPECT_EQ(readout(tx, ReadoutKind::mean).value(), x.row(0));
  EXPECT_EQ(readout(tx, ReadoutKind::max).value(), x.row(0));
  EXPECT_EQ(readout(tx, ReadoutKind::sum).value(), Matrix(4.0 * x.row(0)));
}

TEST(Readout, PermutationInvariant) {
  std::mt19937_64 rng(11);
  Matrix x = random_matrix(rng, 6, 3);
  Matrix y = x.colwise().reverse();
  Tape t;
  for (auto k : {ReadoutKind::mean, ReadoutKind::sum, ReadoutKind::max}) {
    EXPECT_LT(max_abs_diff(readout(t.constant(x), k).value(), readout(t.constant(y), k).value()), 1e-15);
  }
}

TEST(Readout, MeanMatchesDirectSum) {
  std::mt19937_64 rng(12);
  Matrix x = random_matrix(rng, 5, 3);
  Tape t;
  Matrix got = readout(t.constant(x), ReadoutKind::mean).value();
  for (Index c = 0; c < 3; ++c) {
    double s = 0.0;
    for (Index r = 0; r < 5; ++r) s += x(r, c);
    EXPECT_NEAR(got(0, c), s / 5.0, 1e-15);
  }
}

TEST(Readout, EmptyThrows) {
  Tape t;
  EXPECT_THROW(readout(t.constant(Matrix::Zero(0, 3)), ReadoutKind::mean), std::invalid_argument);
}

TEST(ModelTest, ExposesLPlusOneStates) {
  std::mt19937_64 rng(13);
  Graph g = random_graph(rng, 10, 0.3, 4, 3);
  for (auto b : {Backbone::gcn, Backbone::sage, Backbone::gat}) {
    ModelConfig c;
    c.backbone = b;
    c.n_layers = 4;
    c.hidden_dim = 6;
    c.n_heads = b == Backbone::gat ? 2 : 1;
    Model m(c, Task::node, 4, 3, 1, true);
    auto ev = m.evaluate(g, GraphOps(g, b));
    ASSERT_EQ(ev.states.size(), 5u);
    EXPECT_EQ(ev.states[0], g.features());
    for (std::size_t l = 1; l < 4; ++l) EXPECT_EQ(ev.states[l].cols(), 6);
    EXPECT_EQ(ev.states[4].cols(), 3);
    EXPECT_EQ(ev.logits, ev.states[4]);
  }
}

TEST(ModelTest, HeadInitializedLastLeavesBackboneUnchanged) {
  ModelConfig c;
  c.n_layers = 3;
  Model a(c, Task::node, 5, 3, 9, false), b(c, Task::node, 5, 3, 9, true);
  ASSERT_EQ(b.params().size(), a.params().size() + 4);
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
}

TEST(ModelTest, EvalDeterministicAndDropoutFree) {
  std::mt19937_64 rng(14);
  Graph g = random_graph(rng, 12, 0.3, 4, 2);
  ModelConfig c;
  c.dropout = 0.6;
  Model m(c, Task::node, 4, 2, 3, false);
  GraphOps ops(g, Backbone::gcn);
  auto a = m.evaluate(g, ops), b = m.evaluate(g, ops);
  EXPECT_EQ(a.logits, b.logits);
  ModelConfig c0 = c;
  c0.dropout = 0.0;
  Model m0(c0, Task::node, 4, 2, 3, false);
  Tape t;
  auto bound = m0.bind(t);
  std::mt19937_64 r(0);
  EXPECT_EQ(m0.forward(t, bound, g, ops, true, r).logits.value(), a.logits);
}

TEST(ModelTest, GraphTaskLogitsAreOneRow) {
  std::mt19937_64 rng(15);
  Graph g = random_graph(rng, 7, 0.4, 3);
  ModelConfig c;
  c.n_layers = 3;
  c.hidden_dim = 5;
  Model m(c, Task::graph, 3, 4, 1, true);
  Tape t;
  auto bound = m.bind(t);
  std::mt19937_64 r(0);
  auto fr = m.forward(t, bound, g, GraphOps(g, Backbone::gcn), false, r);
  EXPECT_EQ(fr.logits.rows(), 1);
  EXPECT_EQ(fr.logits.cols(), 4);
  ASSERT_EQ(fr.readouts.size(), 3u);
  const Matrix want = fr.readouts.back().value() * m.param("classifier.W") + m.param("classifier.b");
  EXPECT_LT(max_abs_diff(fr.logits.value(), want), 1e-14);
}

TEST(ModelTest, FeatureDimMismatchThrows) {
  std::mt19937_64 rng(16);
  Graph g = random_graph(rng, 5, 0.4, 3);
  Model m(ModelConfig{}, Task::node, 4, 2, 1, false);
  EXPECT_THROW(m.evaluate(g, GraphOps(g, Backbone::gcn)), DimensionError);
}

TEST(IntermediateLogits, ZeroHeadGivesZero) {
  std::mt19937_64 rng(17);
  Graph g = random_graph(rng, 6, 0.4, 3);
  ModelConfig c;
  c.n_layers = 3;
  Model m(c, Task::node, 3, 2, 1, true);
  for (const char* n : {"head.W1", "head.b1", "head.W2", "head.b2"}) m.param(n).setZero();
  Tape t;
  auto bound = m.bind(t);
  std::mt19937_64 r(0);
  auto fr = m.forward(t, bound, g, GraphOps(g, Backbone::gcn), false, r);
  auto il = m.all_intermediate_logits(bound, fr);
  ASSERT_EQ(il.size(), 2u);
  for (const auto& z : il) EXPECT_TRUE(z.value().isZero(0.0));
}

TEST(IntermediateLogits, SingleLayerHasNone) {
  std::mt19937_64 rng(18);
  Graph g = random_graph(rng, 6, 0.4, 3);
  ModelConfig c;
  c.n_layers = 1;
  Model m(c, Task::node, 3, 2, 1, true);
  Tape t;
  auto bound = m.bind(t);
  std::mt19937_64 r(0);
  auto fr = m.forward(t, bound, g, GraphOps(g, Backbone::gcn), false, r);
  EXPECT_TRUE(m.all_intermediate_logits(bound, fr).empty());
}

TEST(IntermediateLogits, MatchesTwoMatmulOracle) {
  std::mt19937_64 rng(19);
  Graph g = random_graph(rng, 6, 0.4, 3);
  ModelConfig c;
  c.n_layers = 3;
  c.hidden_dim = 4;
  for (Task task : {Task::node, Task::graph}) {
    Model m(c, task, 3, 2, 1, true);
    m.param("head.b1") = random_matrix(rng, 1, 4);
    m.param("head.b2") = random_matrix(rng, 1, 2);
    Tape t;
    auto bound = m.bind(t);
    std::mt19937_64 r(0);
    auto fr = m.forward(t, bound, g, GraphOps(g, Backbone::gcn), false, r);
    Matrix x = fr.states[1].value();
    if (task == Task::graph) x = x.colwise().mean().eval();
    Matrix h = x * m.param("head.W1");
    h.rowwise() += m.param("head.b1").row(0);
    h = h.cwiseMax(0.0);
    Matrix want = h * m.param("head.W2");
    want.rowwise() += m.param("head.b2").row(0);
    EXPECT_LT(max_abs_diff(m.intermediate_logits(bound, fr.states[1]).value(), want), 1e-10);
  }
}

TEST(IntermediateLogits, WidthMismatchIsConfigError) {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_dim = 4;
  Model m(c, Task::node, 3, 2, 1, true);
  Tape t;
  auto bound = m.bind(t);
  EXPECT_THROW(m.intermediate_logits(bound, t.constant(Matrix::Zero(5, 3))), ConfigError);
}

TEST(Equivariance, AllBackbonesPermuteStates) {
  for (auto b : {Backbone::gcn, Backbone::sage, Backbone::gat}) {
    for (std::uint64_t s = 0; s < 5; ++s) {
      std::mt19937_64 rng(100 + s);
      Graph g = random_graph(rng, 8, 0.35, 3);
      std::vector<Index> pi(8);
      std::iota(pi.begin(), pi.end(), 0);
      std::shuffle(pi.begin(), pi.end(), rng);
      Graph h = permuted(g, pi);
      ModelConfig c;
      c.backbone = b;
      c.n_layers = 3;
      c.hidden_dim = 4;
      c.n_heads = b == Backbone::gat ? 2 : 1;
      Model m(c, Task::node, 3, 2, s, false);
      auto eg = m.evaluate(g, GraphOps(g, b));
      auto eh = m.evaluate(h, GraphOps(h, b));
      for (std::size_t l = 0; l < eg.states.size(); ++l) {
        for (Index v = 0; v < 8; ++v) {
          EXPECT_LT(max_abs_diff(eg.states[l].row(v), eh.states[l].row(pi[static_cast<std::size_t>(v)])), 1e-12);
        }
      }
    }
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelConfig c;
  c.backbone = Backbone::gat;
  c.n_layers = 3;
  c.hidden_dim = 8;
  c.n_heads = 2;
  Model m(c, Task::graph, 5, 3, 21, true);
  const auto p = std::filesystem::temp_directory_path() / "smoothkit_ckpt_test.json";
  save_checkpoint(p, m, {21, 17});
  CheckpointMeta meta;
  Model r = load_checkpoint(p, &meta);
  EXPECT_EQ(meta.seed, 21u);
  EXPECT_EQ(meta.epoch, 17);
  EXPECT_EQ(r.task(), Task::graph);
  EXPECT_EQ(r.config().n_heads, 2);
  EXPECT_TRUE(r.has_head());
  ASSERT_EQ(r.params().size(), m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    EXPECT_EQ(r.params()[i].name, m.params()[i].name);
    EXPECT_EQ(r.params()[i].value, m.params()[i].value);
  }
  std::filesystem::remove(p);
  std::filesystem::remove(std::filesystem::path(p).replace_extension(".bin"));
}

TEST(Checkpoint, TruncatedBlobIsError) {
  Model m(ModelConfig{}, Task::node, 3, 2, 1, false);
  const auto p = std::filesystem::temp_directory_path() / "smoothkit_ckpt_trunc.json";
  save_checkpoint(p, m, {1, 0});
  const auto blob = std::filesystem::path(p).replace_extension(".bin");
  std::filesystem::resize_file(blob, 8);
  EXPECT_THROW(load_checkpoint(p), CheckpointError);
  std::filesystem::remove(p);
  std::filesystem::remove(blob);
}
