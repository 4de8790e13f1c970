// smoothkit command-line interface: train, profile-ndr, convert, check, grid.

#include "smoothkit/smoothkit.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace sk = smoothkit;

namespace {

std::string fold_path(const std::string& path, std::size_t fold) {
  if (path.empty()) return path;
  std::filesystem::path p(path);
  return (p.parent_path() / (p.stem().string() + ".fold" + std::to_string(fold) + p.extension().string())).string();
}

int cmd_train(const std::string& config_path, bool verbose) {
  const sk::TrainConfig cfg = sk::load_config(config_path);
  sk::Dataset data = sk::load_dataset(cfg.data);
  sk::TrainOptions opt;
  opt.verbose = verbose;
  if (cfg.task == sk::Task::node) {
    const auto* g = std::get_if<sk::Graph>(&data);
    if (!g) throw sk::ConfigError("node task needs a single-graph data source");
    auto r = sk::train_node(*g, cfg, opt);
    r.log.save(cfg.output.metrics, cfg.output.adr);
    if (!cfg.output.checkpoint.empty()) sk::save_checkpoint(cfg.output.checkpoint, r.model, {cfg.seed, r.best_epoch});
    std::cout << "best_epoch " << r.best_epoch << " val_acc " << r.best_val << " test_acc " << r.test_at_best
              << (r.diverged ? " status diverged" : "") << '\n';
    return r.diverged ? 1 : 0;
  }
  auto* b = std::get_if<sk::GraphBatch>(&data);
  if (!b) throw sk::ConfigError("graph task needs a graph-batch data source");
  auto r = sk::train_graph(std::move(*b), cfg, opt);
  bool diverged = false;
  for (std::size_t k = 0; k < r.folds.size(); ++k) {
    r.folds[k].log.save(fold_path(cfg.output.metrics, k), fold_path(cfg.output.adr, k));
    diverged = diverged || r.folds[k].diverged;
    std::cout << "fold " << k << " best_epoch " << r.folds[k].best_epoch << " val_acc " << r.folds[k].best_val
              << " test_acc " << r.folds[k].test_at_best << '\n';
  }
  std::cout << "test_acc " << r.mean_test << " +- " << r.std_test << '\n';
  return diverged ? 1 : 0;
}

int cmd_profile(const std::string& ckpt, const std::string& graph_path) {
  const sk::Model m = sk::load_checkpoint(ckpt);
  const sk::Json j = sk::read_json(graph_path);
  std::vector<sk::Graph> graphs;
  if (j.contains("graphs")) {
    graphs = sk::batch_from_json(j).graphs;
  } else {
    graphs.push_back(sk::graph_from_json(j));
  }
  const int L = m.config().n_layers;
  std::vector<double> mean(static_cast<std::size_t>(L), 0.0), l2(static_cast<std::size_t>(L), 0.0);
  std::vector<std::size_t> valid(static_cast<std::size_t>(L), 0);
  for (const auto& g : graphs) {
    const auto ev = m.evaluate(g, sk::GraphOps(g, m.config().backbone));
    sk::Tape t;
    auto nd = sk::eval_ndrs(t, g, ev.states);
    for (std::size_t l = 0; l < nd.size(); ++l) {
      mean[l] += sk::ndr_summary(nd[l], sk::SummaryStat::mean);
      l2[l] += sk::ndr_summary(nd[l], sk::SummaryStat::l2);
      valid[l] += sk::mask_count(nd[l].valid);
    }
  }
  std::cout << "layer,ndr_mean,ndr_l2,valid_nodes\n" << std::setprecision(10);
  const double n = static_cast<double>(graphs.size());
  for (std::size_t l = 0; l < mean.size(); ++l) {
    std::cout << l + 1 << ',' << mean[l] / n << ',' << l2[l] / n << ',' << valid[l] << '\n';
  }
  return 0;
}

int cmd_check() {
  bool ok = true;
  for (const auto& r : sk::run_check_suite()) {
    std::cout << r << std::endl;
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

int cmd_grid(const std::string& config_path) {
  const sk::TrainConfig cfg = sk::load_config(config_path);
  const sk::Dataset data = sk::load_dataset(cfg.data);
  const auto rows = sk::grid_search(data, cfg, cfg.grid);
  if (cfg.output.grid.empty()) {
    sk::write_grid_csv(std::cout, rows);
  } else {
    sk::detail::make_parent_dirs(cfg.output.grid);
    std::ofstream f(cfg.output.grid);
    if (!f) throw std::runtime_error("cannot write " + cfg.output.grid);
    sk::write_grid_csv(f, rows);
    std::cout << "best alpha " << rows.front().cfg.distill.alpha << " beta " << rows.front().cfg.distill.beta
              << " gamma " << rows.front().cfg.distill.gamma << " val " << rows.front().val << " test "
              << rows.front().test << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"smoothkit: GNN training with neighborhood-discrepancy self-distillation"};
  app.require_subcommand(1);

  std::string config, ckpt, graph_path, content, cites, tu_dir, tu_name, out;
  bool verbose = false;

  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", config, "Config JSON")->required();
  train->add_flag("-v,--verbose", verbose, "Print per-epoch progress to stderr");

  auto* profile = app.add_subcommand("profile-ndr", "Per-layer NDR of a saved model on a graph");
  profile->add_option("--checkpoint", ckpt, "Checkpoint manifest")->required();
  profile->add_option("--graph", graph_path, "Canonical graph or batch JSON")->required();

  auto* convert = app.add_subcommand("convert", "Convert raw citation or TU files to canonical JSON");
  convert->add_option("--content", content, "Citation .content file");
  convert->add_option("--cites", cites, "Citation .cites file");
  convert->add_option("--tu-dir", tu_dir, "TU dataset directory");
  convert->add_option("--tu-name", tu_name, "TU dataset name");
  convert->add_option("--out", out, "Output JSON")->required();

  auto* check = app.add_subcommand("check", "Run the oracle suite");

  auto* grid = app.add_subcommand("grid", "Grid search over the config's grid block");
  grid->add_option("--config", config, "Config JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*train) return cmd_train(config, verbose);
    if (*profile) return cmd_profile(ckpt, graph_path);
    if (*check) return cmd_check();
    if (*grid) return cmd_grid(config);
    if (*convert) {
      if (!content.empty() && !cites.empty()) {
        sk::CitationStats stats;
        sk::Graph g = sk::load_citation(content, cites, &stats);
        sk::save_graph(out, g);
        std::cout << "nodes " << g.num_nodes() << " edges " << g.num_edges() << " features " << g.feature_dim()
                  << " classes " << g.num_classes() << " dangling_citations " << stats.dangling_citations << '\n';
        return 0;
      }
      if (!tu_dir.empty() && !tu_name.empty()) {
        sk::GraphBatch b = sk::load_tu(tu_dir, tu_name);
        sk::write_json(out, sk::batch_to_json(b));
        std::cout << "graphs " << b.size() << " classes " << b.num_classes << '\n';
        return 0;
      }
      std::cerr << "convert needs --content/--cites or --tu-dir/--tu-name\n\n" << convert->help();
      return 2;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
