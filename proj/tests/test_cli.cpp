#include "smoothkit/smoothkit.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace smoothkit;
namespace fs = std::filesystem;

namespace {

const std::string kCli = SMOOTHKIT_CLI;
const std::string kFixtures = SMOOTHKIT_FIXTURES;

struct RunResult {
  int code = -1;
  std::string out;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::random_device rd;
    dir_ = fs::temp_directory_path() / ("smoothkit_cli_" + std::to_string(rd()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  RunResult run(const std::string& args) const {
    const fs::path out = dir_ / "stdout.txt";
    const std::string cmd = "'" + kCli + "' " + args + " > '" + out.string() + "' 2> '" + (dir_ / "stderr.txt").string() + "'";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out);
    std::stringstream ss;
    ss << in.rdbuf();
    r.out = ss.str();
    return r;
  }

  fs::path write(const std::string& name, const Json& j) const {
    const fs::path p = dir_ / name;
    write_json(p, j);
    return p;
  }

  fs::path dir_;
};

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

Json sbm_config(const fs::path& dir) {
  return {{"task", "node"},
          {"data",
           {{"format", "sbm"},
            {"blocks", 2},
            {"nodes_per_block", 30},
            {"p_in", 0.4},
            {"p_out", 0.05},
            {"feat_dim", 6},
            {"seed", 2}}},
          {"model", {{"backbone", "gcn"}, {"n_layers", 3}, {"hidden_dim", 8}}},
          {"epochs", 5},
          {"seed", 1},
          {"output",
           {{"metrics", (dir / "m.csv").string()},
            {"adr", (dir / "adr.csv").string()},
            {"checkpoint", (dir / "ckpt" / "model.json").string()}}}};
}

}  // namespace

TEST_F(CliTest, CheckPrintsPassLines) {
  auto r = run("check");
  EXPECT_EQ(r.code, 0);
  std::stringstream ss(r.out);
  std::string line;
  int n = 0;
  while (std::getline(ss, line)) {
    EXPECT_EQ(line.rfind("PASS ", 0), 0u) << line;
    ++n;
  }
  EXPECT_EQ(n, 7);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run("train --no-such-flag").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("train").code, 2);
}

TEST_F(CliTest, BadConfigExitsOne) {
  Json j = sbm_config(dir_);
  j["bogus"] = 1;
  EXPECT_EQ(run("train --config '" + write("bad.json", j).string() + "'").code, 1);
}

TEST_F(CliTest, TrainWithoutDistillationHasZeroTermColumns) {
  const auto cfg = write("cfg.json", sbm_config(dir_));
  auto r = run("train --config '" + cfg.string() + "'");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("best_epoch"), std::string::npos);
  const auto rows = read_csv(dir_ / "m.csv");
  ASSERT_EQ(rows.size(), 6u);
  const auto& h = rows[0];
  for (const char* col : {"l_l", "l_n", "l_g"}) {
    const auto it = std::find(h.begin(), h.end(), col);
    ASSERT_NE(it, h.end()) << col;
    const auto c = static_cast<std::size_t>(it - h.begin());
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(std::stod(rows[i][c]), 0.0) << col;
  }
  EXPECT_TRUE(fs::exists(dir_ / "ckpt" / "model.json"));
  EXPECT_NO_THROW(load_checkpoint(dir_ / "ckpt" / "model.json"));
}

TEST_F(CliTest, GraphTaskWritesOneMetricsFilePerFold) {
  Json j = {{"task", "graph"},
            {"data", {{"format", "tu"}, {"dir", kFixtures + "/tu"}, {"name", "SYN"}}},
            {"model", {{"backbone", "gcn"}, {"n_layers", 2}, {"hidden_dim", 8}, {"dropout", 0.0}}},
            {"epochs", 2},
            {"folds", 3},
            {"output", {{"metrics", (dir_ / "g.csv").string()}}}};
  auto r = run("train --config '" + write("g.json", j).string() + "'");
  ASSERT_EQ(r.code, 0);
  for (int k = 0; k < 3; ++k) EXPECT_TRUE(fs::exists(dir_ / ("g.fold" + std::to_string(k) + ".csv"))) << k;
  EXPECT_NE(r.out.find("+-"), std::string::npos);
}

TEST_F(CliTest, ConvertCitationAndTu) {
  const auto g = dir_ / "toy.json";
  auto r = run("convert --content '" + kFixtures + "/toy.content' --cites '" + kFixtures + "/toy.cites' --out '" +
               g.string() + "'");
  ASSERT_EQ(r.code, 0);
  const Graph loaded = load_graph(g);
  EXPECT_EQ(loaded.num_nodes(), 5);
  EXPECT_EQ(loaded.num_edges(), 2);
  EXPECT_EQ(loaded, load_citation(kFixtures + "/toy.content", kFixtures + "/toy.cites"));

  const auto b = dir_ / "tu.json";
  r = run("convert --tu-dir '" + kFixtures + "/tu' --tu-name TOY --out '" + b.string() + "'");
  ASSERT_EQ(r.code, 0);
  const GraphBatch batch = batch_from_json(read_json(b));
  EXPECT_EQ(batch.size(), 2u);
  EXPECT_EQ(batch.labels, (std::vector<int>{1, 0}));

  EXPECT_EQ(run("convert --out '" + b.string() + "'").code, 2);
  EXPECT_EQ(run("convert --tu-dir '" + kFixtures + "/tu' --tu-name CROSS --out '" + b.string() + "'").code, 1);
}

TEST_F(CliTest, ProfileNdrShrinksWithDepthOnUntrainedDeepModel) {
  SbmParams p;
  p.blocks = 2;
  p.nodes_per_block = 40;
  p.p_in = 0.5;
  p.p_out = 0.3;
  p.feat_dim = 16;
  p.seed = 4;
  const Graph g = sbm_generate(p);
  const auto gp = dir_ / "g.json";
  save_graph(gp, g);
  ModelConfig mc;
  mc.backbone = Backbone::gcn;
  mc.n_layers = 8;
  mc.hidden_dim = 16;
  const Model m(mc, Task::node, g.feature_dim(), 2, 9, true);
  const auto cp = dir_ / "deep.json";
  save_checkpoint(cp, m, {9, 0});

  auto r = run("profile-ndr --checkpoint '" + cp.string() + "' --graph '" + gp.string() + "'");
  ASSERT_EQ(r.code, 0);
  std::stringstream ss(r.out);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "layer,ndr_mean,ndr_l2,valid_nodes");
  std::vector<double> means;
  while (std::getline(ss, line)) {
    std::stringstream ls(line);
    std::string c;
    std::getline(ls, c, ',');
    EXPECT_EQ(std::stoi(c), static_cast<int>(means.size()) + 1);
    std::getline(ls, c, ',');
    means.push_back(std::stod(c));
  }
  ASSERT_EQ(means.size(), 8u);
  EXPECT_LT(means.back(), means.front());
  EXPECT_LT(means.back(), 0.1 * means.front());
}

TEST_F(CliTest, GridWritesRankingCsv) {
  Json j = sbm_config(dir_);
  j["epochs"] = 3;
  j.erase("output");
  j["output"] = {{"grid", (dir_ / "grid.csv").string()}};
  j["grid"] = {{"alpha", {0.0, 0.1}}, {"beta", {0.0, 1.0}}};
  auto r = run("grid --config '" + write("grid.json", j).string() + "'");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("best alpha"), std::string::npos);
  EXPECT_EQ(read_csv(dir_ / "grid.csv").size(), 5u);
}
