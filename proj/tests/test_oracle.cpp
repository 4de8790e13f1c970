#include "smoothkit/smoothkit.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <sstream>

using namespace smoothkit;

TEST(NdrLoop, IdenticalEmbeddingsGiveZeros) {
  std::vector<Edge> e{{0, 1}, {1, 2}, {0, 2}};
  Matrix x = Matrix::Constant(3, 2, 1.25);
  auto o = oracle::ndr_loop(e, 3, x);
  for (double v : o.values) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(NdrLoop, StarCenterAgainstAntipodalLeavesIsTwo) {
  std::vector<Edge> e{{0, 1}, {0, 2}, {0, 3}};
  Matrix x(4, 2);
  x << 1, 0,     //
      -1, 0.5,   //
      -1, -0.5,  //
      -2, 0;
  auto o = oracle::ndr_loop(e, 4, x);
  EXPECT_DOUBLE_EQ(o.values[0], 2.0);
}

TEST(NdrLoop, IsolatedNodeInvalid) {
  auto o = oracle::ndr_loop(std::vector<Edge>{{0, 1}}, 3, Matrix::Ones(3, 2));
  EXPECT_EQ(o.valid, (std::vector<bool>{true, true, false}));
  EXPECT_EQ(o.values[2], 0.0);
}

TEST(Prop1, IdenticalEmbeddingsGiveZeroBothSides) {
  std::vector<Edge> e{{0, 1}, {1, 2}, {2, 3}};
  for (int p : {1, 2}) {
    auto [d2, d1] = oracle::prop1(e, 4, Matrix::Constant(4, 3, -0.4), p);
    EXPECT_EQ(d2, 0.0);
    EXPECT_EQ(d1, 0.0);
  }
}

TEST(Prop1, SingleEdgeIsEquality) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z(0.0, 1.0);
  Matrix x(2, 5);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng);
  for (int p : {1, 2}) {
    auto [d2, d1] = oracle::prop1(std::vector<Edge>{{0, 1}}, 2, x, p);
    EXPECT_NEAR(d2, d1, 1e-15);
    EXPECT_GT(d2, 0.0);
  }
}

TEST(Prop1, DirectComputationOnPath) {
  // Path 0-1-2 in one dimension with values 0, 1, 3. Directed edges: 4.
  Matrix x(3, 1);
  x << 0, 1, 3;
  auto [d2, d1] = oracle::prop1(std::vector<Edge>{{0, 1}, {1, 2}}, 3, x, 1);
  // d2: |0-1| + |1-0| + |1-3| + |3-1| = 6; d1: |0-1| + |1-1.5| + |3-1| = 3.5.
  EXPECT_DOUBLE_EQ(d2, 6.0 / 4.0);
  EXPECT_DOUBLE_EQ(d1, 3.5 / 4.0);
}

TEST(Prop1, HoldsOnRandomGraphs) {
  for (int p : {1, 2}) {
    auto r = check_prop1(p);
    EXPECT_TRUE(r.pass) << r;
    EXPECT_EQ(r.trials, 100u);
  }
}

TEST(Prop1, RejectsOtherNorms) {
  EXPECT_THROW(oracle::prop1(std::vector<Edge>{{0, 1}}, 2, Matrix::Ones(2, 1), 3), std::invalid_argument);
}

TEST(EdgeAdjOracle, TriangleAndDisjoint) {
  auto tri = oracle::edge_adj({{0, 1}, {1, 2}, {0, 2}});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(tri[i][j], i != j);
  }
  auto dis = oracle::edge_adj({{0, 1}, {2, 3}});
  EXPECT_FALSE(dis[0][1]);
  EXPECT_FALSE(dis[1][0]);
}

TEST(GradCheck, LinearMseIsTight) {
  auto r = check_grad_linear_mse();
  EXPECT_TRUE(r.pass) << r;
  EXPECT_LT(r.max_dev, 1e-9);
}

TEST(GradCheck, GcnCrossEntropy) {
  auto r = check_grad_gcn_ce();
  EXPECT_TRUE(r.pass) << r;
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A loss whose tape gradient is deliberately wrong: the forward value is
  // x^2 but the recorded backward is the identity.
  Matrix x = Matrix::Constant(1, 1, 0.8);
  LossBuilder b = [](Tape& t, std::span<const Tensor> p) {
    Matrix v = p[0].value().cwiseAbs2();
    return t.record(OpKind::Sum, std::move(v), {p[0].id()},
                    [](Tape& tp, NodeId self) { tp.accumulate(self, 0, tp.upstream(self)); });
  };
  auto r = grad_check("wrong", {&x}, b);
  EXPECT_FALSE(r.pass);
  EXPECT_GT(r.max_dev, 0.1);
}

TEST(Suite, AllPropertiesPassWithinOneMinute) {
  const auto t0 = std::chrono::steady_clock::now();
  auto reports = run_check_suite();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 60.0);
  ASSERT_EQ(reports.size(), 7u);
  for (const auto& r : reports) EXPECT_TRUE(r.pass) << r;
  EXPECT_EQ(reports[0].trials, 100u);
  EXPECT_LE(reports[0].tol, 1e-10);
  EXPECT_EQ(reports[1].trials, 50u);
  EXPECT_EQ(reports[1].tol, 0.0);
}

TEST(Suite, ReportLineFormat) {
  OracleReport r{"ndr_loop", 100, 4.4e-16, 1e-10, true};
  std::ostringstream out;
  out << r;
  EXPECT_EQ(out.str(), "PASS ndr_loop 4.400e-16 1.000e-10 100");
}
