#ifndef SMOOTHKIT_TRAIN_HPP
#define SMOOTHKIT_TRAIN_HPP

// Training loops (node and graph classification), metrics logging and grid
// search.

#include "smoothkit/distill.hpp"
#include "smoothkit/io.hpp"
#include "smoothkit/layers.hpp"
#include "smoothkit/optim.hpp"

#include <atomic>
#include <iostream>
#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <mutex>
#include <thread>
#include <variant>

namespace smoothkit {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where the training data comes from.
struct DataSource {
  std::string format;  ///< citation | tu | json | batch_json | sbm
  std::string content, cites;  ///< citation
  std::string dir, name;       ///< tu
  std::string path;            ///< json, batch_json
  SbmParams sbm;               ///< sbm
};

inline void from_json(const nlohmann::json& j, DataSource& d) {
  detail::reject_unknown(j,
                         {"format", "content", "cites", "dir", "name", "path", "blocks", "nodes_per_block", "p_in",
                          "p_out", "feat_dim", "noise", "seed"},
                         "data");
  d = DataSource{};
  d.format = j.at("format").get<std::string>();
  d.content = j.value("content", "");
  d.cites = j.value("cites", "");
  d.dir = j.value("dir", "");
  d.name = j.value("name", "");
  d.path = j.value("path", "");
  d.sbm.blocks = j.value("blocks", d.sbm.blocks);
  d.sbm.nodes_per_block = j.value("nodes_per_block", d.sbm.nodes_per_block);
  d.sbm.p_in = j.value("p_in", d.sbm.p_in);
  d.sbm.p_out = j.value("p_out", d.sbm.p_out);
  d.sbm.feat_dim = j.value("feat_dim", d.sbm.feat_dim);
  d.sbm.noise = j.value("noise", d.sbm.noise);
  d.sbm.seed = j.value("seed", d.sbm.seed);
  static const std::set<std::string> formats{"citation", "tu", "json", "batch_json", "sbm"};
  if (!formats.count(d.format)) throw ConfigError("unknown data format '" + d.format + "'");
}

inline void to_json(nlohmann::json& j, const DataSource& d) {
  j = {{"format", d.format}};
  if (d.format == "citation") {
    j["content"] = d.content;
    j["cites"] = d.cites;
  } else if (d.format == "tu") {
    j["dir"] = d.dir;
    j["name"] = d.name;
  } else if (d.format == "json" || d.format == "batch_json") {
    j["path"] = d.path;
  } else if (d.format == "sbm") {
    j.update({{"blocks", d.sbm.blocks},
              {"nodes_per_block", d.sbm.nodes_per_block},
              {"p_in", d.sbm.p_in},
              {"p_out", d.sbm.p_out},
              {"feat_dim", d.sbm.feat_dim},
              {"noise", d.sbm.noise},
              {"seed", d.sbm.seed}});
  }
}

struct OutputPaths {
  std::string metrics;     ///< per-epoch CSV
  std::string adr;         ///< per-epoch per-layer ADR CSV
  std::string checkpoint;  ///< manifest path; blob written next to it
  std::string grid;        ///< grid-search ranking CSV
};

/// Cartesian search space. Empty axes keep the base value.
struct GridSpace {
  std::vector<double> alpha, beta, gamma, lr, weight_decay, dropout;
  std::vector<std::uint64_t> seeds;  ///< each combination is averaged over these
};

struct TrainConfig {
  ModelConfig model;
  DistillConfig distill;
  double lr = 0.01;
  double weight_decay = 5e-4;
  int epochs = 200;
  std::uint64_t seed = 0;
  double drop_edge_ratio = 0.0;
  Task task = Task::node;
  int folds = 10;
  int batch_size = 32;
  DataSource data;
  OutputPaths output;
  GridSpace grid;

  void validate() const {
    model.validate();
    distill.validate();
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(drop_edge_ratio >= 0.0 && drop_edge_ratio < 1.0)) throw ConfigError("drop_edge_ratio must be in [0,1)");
    if (folds < 2) throw ConfigError("folds must be >= 2");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (distill.masked_ndr && task != Task::node) throw ConfigError("masked_ndr applies to node tasks only");
  }
};

inline void from_json(const nlohmann::json& j, GridSpace& g) {
  detail::reject_unknown(j, {"alpha", "beta", "gamma", "lr", "weight_decay", "dropout", "seeds"}, "grid");
  g = GridSpace{};
  g.alpha = j.value("alpha", g.alpha);
  g.beta = j.value("beta", g.beta);
  g.gamma = j.value("gamma", g.gamma);
  g.lr = j.value("lr", g.lr);
  g.weight_decay = j.value("weight_decay", g.weight_decay);
  g.dropout = j.value("dropout", g.dropout);
  g.seeds = j.value("seeds", g.seeds);
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::reject_unknown(j,
                         {"model", "distill", "lr", "weight_decay", "epochs", "seed", "drop_edge_ratio", "task",
                          "folds", "batch_size", "data", "output", "grid"},
                         "config");
  c = TrainConfig{};
  if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
  if (j.contains("distill")) c.distill = j["distill"].get<DistillConfig>();
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.drop_edge_ratio = j.value("drop_edge_ratio", c.drop_edge_ratio);
  if (j.contains("task")) c.task = detail::parse_enum<Task>(j["task"], "task", {"node", "graph"});
  c.folds = j.value("folds", c.folds);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("data")) c.data = j["data"].get<DataSource>();
  if (j.contains("output")) {
    const auto& o = j["output"];
    detail::reject_unknown(o, {"metrics", "adr", "checkpoint", "grid"}, "output");
    c.output.metrics = o.value("metrics", "");
    c.output.adr = o.value("adr", "");
    c.output.checkpoint = o.value("checkpoint", "");
    c.output.grid = o.value("grid", "");
  }
  if (j.contains("grid")) c.grid = j["grid"].get<GridSpace>();
  c.validate();
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", c.model},         {"distill", c.distill}, {"lr", c.lr},
       {"weight_decay", c.weight_decay}, {"epochs", c.epochs}, {"seed", c.seed},
       {"drop_edge_ratio", c.drop_edge_ratio}, {"task", c.task}, {"folds", c.folds},
       {"batch_size", c.batch_size}};
  if (!c.data.format.empty()) j["data"] = c.data;
}

inline TrainConfig load_config(const std::filesystem::path& p) {
  try {
    return read_json(p).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

using Dataset = std::variant<Graph, GraphBatch>;

inline Dataset load_dataset(const DataSource& d) {
  if (d.format == "citation") return load_citation(d.content, d.cites);
  if (d.format == "tu") return load_tu(d.dir, d.name);
  if (d.format == "json") return load_graph(d.path);
  if (d.format == "batch_json") return batch_from_json(read_json(d.path));
  if (d.format == "sbm") return sbm_generate(d.sbm);
  throw ConfigError("no data source configured");
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EpochRow {
  int epoch = 0;
  double ce = 0, l_l = 0, l_n = 0, l_g = 0, total = 0;
  std::vector<double> ndr;  ///< eval-mode mean NDR per layer 1..L
  int l_star = 0;
  double train_acc = 0, val_acc = 0, test_acc = 0;
  double seconds = 0;  ///< optimization step only (forward, backward, update)
  std::string status = "ok";
};

/// Append-only per-epoch log plus the ADR detail rows.
class MetricsLog {
 public:
  void append(EpochRow row) { rows_.push_back(std::move(row)); }
  void append_adr(int epoch, AdrReport rep) { adr_.emplace_back(epoch, std::move(rep)); }

  const std::vector<EpochRow>& rows() const { return rows_; }
  const std::vector<std::pair<int, AdrReport>>& adr_rows() const { return adr_; }
  std::size_t size() const { return rows_.size(); }

  void write_csv(std::ostream& out) const {
    std::size_t layers = 0;
    for (const auto& r : rows_) layers = std::max(layers, r.ndr.size());
    out << "epoch,ce,l_l,l_n,l_g,total";
    for (std::size_t l = 1; l <= layers; ++l) out << ",ndr_" << l;
    out << ",l_star,train_acc,val_acc,test_acc,seconds,status\n";
    out << std::setprecision(17);
    for (const auto& r : rows_) {
      out << r.epoch << ',' << r.ce << ',' << r.l_l << ',' << r.l_n << ',' << r.l_g << ',' << r.total;
      for (std::size_t l = 0; l < layers; ++l) {
        out << ',';
        if (l < r.ndr.size()) out << r.ndr[l];
      }
      out << ',' << r.l_star << ',' << r.train_acc << ',' << r.val_acc << ',' << r.test_acc << ',' << r.seconds
          << ',' << r.status << '\n';
    }
  }

  /// Columns: epoch, layer, ndr_summary, l_star, indicator_pattern, adr_loss.
  void write_adr_csv(std::ostream& out) const {
    out << "epoch,layer,ndr_summary,l_star,indicator_pattern,adr_loss\n" << std::setprecision(17);
    for (const auto& [epoch, rep] : adr_) {
      const std::string pat = rep.indicator_pattern();
      for (std::size_t l = 0; l < rep.summaries.size(); ++l) {
        out << epoch << ',' << l + 1 << ',' << rep.summaries[l] << ',' << rep.l_star << ',' << pat << ','
            << rep.loss << '\n';
      }
    }
  }

  void save(const std::string& metrics_path, const std::string& adr_path) const {
    if (!metrics_path.empty()) {
      detail::make_parent_dirs(metrics_path);
      std::ofstream f(metrics_path);
      if (!f) throw std::runtime_error("cannot write " + metrics_path);
      write_csv(f);
    }
    if (!adr_path.empty()) {
      detail::make_parent_dirs(adr_path);
      std::ofstream f(adr_path);
      if (!f) throw std::runtime_error("cannot write " + adr_path);
      write_adr_csv(f);
    }
  }

 private:
  std::vector<EpochRow> rows_;
  std::vector<std::pair<int, AdrReport>> adr_;
};

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Per-layer W_f for the learnable transform; empty for layers that are
/// never on the online side.
struct Transforms {
  std::vector<Matrix> w;  ///< index l-1 for layer l

  static Transforms identity_for(const Model& m, const DistillConfig& cfg) {
    Transforms t;
    const int L = m.config().n_layers;
    if (!cfg.learnable_transform || cfg.beta == 0.0 || L < 2) return t;
    for (int l = 1; l <= L; ++l) {
      const bool online = cfg.direction == Direction::shallow2deep ? l >= 2 : l <= L - 1;
      const Index d = (m.task() == Task::node && l == L) ? m.n_classes() : m.config().hidden_dim;
      t.w.push_back(online ? Matrix::Identity(d, d) : Matrix());
    }
    return t;
  }

  std::vector<Tensor> bind(Tape& tape) const {
    std::vector<Tensor> out;
    for (const auto& m : w) out.push_back(m.size() ? tape.variable(m) : Tensor());
    return out;
  }
};

struct ObjectiveTerms {
  Tensor ce, l_l, l_n, l_g, total;
  AdrReport adr;
};

/// NDRs of layers 1..L and, with the learnable transform, the online-side
/// replacements.
inline std::pair<std::vector<NdrVector>, std::vector<NdrVector>> layer_ndrs(const Graph& g,
                                                                             const ForwardResult& fr,
                                                                             const DistillConfig& cfg,
                                                                             std::span<const Tensor> tf) {
  std::shared_ptr<const SparseMatrix> adj =
      cfg.masked_ndr ? std::make_shared<const SparseMatrix>(masked_adjacency(g)) : g.adjacency_ptr();
  std::vector<NdrVector> plain, online;
  const std::size_t L = fr.states.size() - 1;
  for (std::size_t l = 1; l <= L; ++l) plain.push_back(ndr(adj, fr.states[l], static_cast<int>(l)));
  if (!tf.empty()) {
    for (std::size_t l = 1; l <= L; ++l) {
      const Tensor& w = tf[l - 1];
      online.push_back(w.valid() ? ndr(adj, learnable_transform(fr.states[l], w), static_cast<int>(l))
                                 : plain[l - 1]);
    }
  }
  return {std::move(plain), std::move(online)};
}

/// Full node-classification objective on one forward pass. Terms with zero
/// weight are not built.
inline ObjectiveTerms node_objective(const Model& model, std::span<const Tensor> bound, std::span<const Tensor> tf,
                                     const ForwardResult& fr, const Graph& g, const DistillConfig& cfg) {
  ObjectiveTerms o;
  const Mask& train = g.masks().train;
  o.ce = softmax_cross_entropy(fr.logits, g.labels(), train);
  const int L = model.config().n_layers;
  if (cfg.alpha > 0.0) {
    auto inter = model.all_intermediate_logits(bound, fr);
    o.l_l = logit_loss(inter, fr.logits, train);
  }
  if (cfg.beta > 0.0 && L >= 2) {
    auto [plain, online] = layer_ndrs(g, fr, cfg, tf);
    auto [loss, rep] = adr_loss(g, plain, cfg, online);
    o.l_n = loss;
    o.adr = std::move(rep);
  }
  if (cfg.gamma > 0.0) {
    // Hidden layers only: the output layer has class width.
    std::vector<Tensor> emb;
    for (int l = 1; l < L; ++l) emb.push_back(readout(fr.states[static_cast<std::size_t>(l)], model.config().readout));
    if (!emb.empty()) o.l_g = graph_embed_loss(emb);
  }
  o.total = total_loss(o.ce, o.l_l, o.l_n, o.l_g, cfg);
  return o;
}

/// Objective over a mini-batch of graphs: CE and L_L over the stacked graph
/// logits, ADR and L_G averaged over graphs.
inline ObjectiveTerms graph_objective(const Model& model, std::span<const Tensor> bound, std::span<const Tensor> tf,
                                      std::span<const ForwardResult> frs, std::span<const Graph* const> graphs,
                                      std::span<const int> labels, const DistillConfig& cfg) {
  ObjectiveTerms o;
  const std::size_t B = frs.size();
  if (B == 0) throw std::invalid_argument("graph_objective: empty batch");
  std::vector<Tensor> logits;
  for (const auto& fr : frs) logits.push_back(fr.logits);
  Tensor stacked = concat_rows(logits);
  const Mask all(B, 1);
  o.ce = softmax_cross_entropy(stacked, labels, all);
  const int L = model.config().n_layers;
  if (cfg.alpha > 0.0 && L >= 2) {
    std::vector<Tensor> inter;
    for (int l = 1; l < L; ++l) {
      std::vector<Tensor> rows;
      for (const auto& fr : frs) rows.push_back(model.intermediate_logits(bound, fr.states[static_cast<std::size_t>(l)]));
      inter.push_back(concat_rows(rows));
    }
    o.l_l = logit_loss(inter, stacked, all);
  }
  if (cfg.beta > 0.0 && L >= 2) {
    Tensor acc;
    for (std::size_t b = 0; b < B; ++b) {
      auto [plain, online] = layer_ndrs(*graphs[b], frs[b], cfg, tf);
      auto [loss, rep] = adr_loss(*graphs[b], plain, cfg, online);
      acc = acc.valid() ? add(acc, loss) : loss;
      if (b == 0) o.adr = std::move(rep);
    }
    o.l_n = scale(acc, 1.0 / static_cast<double>(B));
  }
  if (cfg.gamma > 0.0) {
    Tensor acc;
    for (const auto& fr : frs) {
      Tensor t = graph_embed_loss(fr.readouts);
      acc = acc.valid() ? add(acc, t) : t;
    }
    o.l_g = scale(acc, 1.0 / static_cast<double>(B));
  }
  o.total = total_loss(o.ce, o.l_l, o.l_n, o.l_g, cfg);
  if (o.adr.summaries.empty()) o.adr.loss = 0.0;
  return o;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

inline int argmax_row(const Matrix& m, Index r) {
  Index best = 0;
  m.row(r).maxCoeff(&best);
  return static_cast<int>(best);
}

/// Fraction of masked rows predicted correctly; 0 for an empty mask.
inline double masked_accuracy(const Matrix& logits, const std::vector<int>& labels, const Mask& mask) {
  std::size_t hit = 0, n = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    ++n;
    if (argmax_row(logits, r) == labels[static_cast<std::size_t>(r)]) ++hit;
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

/// Eval-mode NDR vectors of layers 1..L (values only).
inline std::vector<NdrVector> eval_ndrs(Tape& tape, const Graph& g, const std::vector<Matrix>& states) {
  std::vector<NdrVector> out;
  for (std::size_t l = 1; l < states.size(); ++l) out.push_back(ndr(g, tape.constant(states[l]), static_cast<int>(l)));
  return out;
}

class NdrRangeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws when a valid NDR entry leaves [0, 2] (1e-12 slack).
inline void check_ndr_range(const std::vector<NdrVector>& ndrs) {
  for (const auto& s : ndrs) {
    const Matrix& v = s.values.value();
    for (std::size_t i = 0; i < s.valid.size(); ++i) {
      if (!s.valid[i]) continue;
      const double x = v(static_cast<Index>(i), 0);
      if (!std::isfinite(x) || x < -1e-12 || x > 2.0 + 1e-12) {
        throw NdrRangeError("NDR out of range at layer " + std::to_string(s.layer) + ": " + std::to_string(x));
      }
    }
  }
}

namespace detail {

inline std::vector<Matrix*> param_ptrs(Model& m, Transforms& t) {
  std::vector<Matrix*> out;
  for (auto& p : m.params()) out.push_back(&p.value);
  for (auto& w : t.w) {
    if (w.size()) out.push_back(&w);
  }
  return out;
}

inline std::vector<Matrix> collect_grads(const Tape& tape, std::span<const Tensor> bound,
                                         std::span<const Tensor> tf) {
  std::vector<Matrix> out;
  for (const auto& b : bound) out.push_back(tape.grad(b));
  for (const auto& w : tf) {
    if (w.valid()) out.push_back(tape.grad(w));
  }
  return out;
}

inline bool finite(double x) { return std::isfinite(x); }

inline double value_or_zero(const Tensor& t) { return t.valid() ? t.scalar() : 0.0; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Node classification
// ---------------------------------------------------------------------------

struct TrainOptions {
  bool distill_module = true;  ///< false: plain cross-entropy path, no distillation code at all
  bool log_ndr = true;         ///< eval-mode NDR summaries and ADR rows per epoch
  bool verbose = false;
};

struct NodeRunResult {
  Model model;  ///< parameters at the best-validation epoch
  MetricsLog log;
  int best_epoch = 0;
  double best_val = 0.0;
  double test_at_best = 0.0;
  bool diverged = false;
  double mean_step_seconds = 0.0;
  std::vector<double> loss_trace;  ///< training objective per epoch
};

inline NodeRunResult train_node(const Graph& g, const TrainConfig& cfg, const TrainOptions& opt = {}) {
  cfg.validate();
  if (!g.has_labels()) throw ConfigError("node task needs labels");
  if (mask_count(g.masks().train) == 0) throw ConfigError("node task needs a non-empty train mask");
  const DistillConfig dcfg = opt.distill_module ? cfg.distill : DistillConfig{};
  const bool head = opt.distill_module && dcfg.alpha > 0.0 && cfg.model.n_layers >= 2;
  Model model(cfg.model, Task::node, g.feature_dim(), g.num_classes(), cfg.seed, head);
  Transforms tf = opt.distill_module ? Transforms::identity_for(model, dcfg) : Transforms{};
  Adam adam(cfg.lr, cfg.weight_decay);
  std::mt19937_64 rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  const GraphOps full_ops(g, cfg.model.backbone);

  NodeRunResult res;
  res.best_val = -1.0;
  std::vector<Param> best_params = model.params();
  double step_total = 0.0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool dropping = cfg.drop_edge_ratio > 0.0;
    const Graph ge = dropping ? drop_edge(g, cfg.drop_edge_ratio, rng()) : Graph();
    const Graph& gt = dropping ? ge : g;
    const GraphOps ops = dropping ? GraphOps(gt, cfg.model.backbone) : full_ops;

    Tape tape;
    auto bound = model.bind(tape);
    auto tfb = tf.bind(tape);
    ForwardResult fr = model.forward(tape, bound, gt, ops, true, rng);
    ObjectiveTerms o;
    if (opt.distill_module) {
      o = node_objective(model, bound, tfb, fr, gt, dcfg);
    } else {
      o.ce = softmax_cross_entropy(fr.logits, gt.labels(), gt.masks().train);
      o.total = o.ce;
    }
    EpochRow row;
    row.epoch = epoch;
    row.ce = o.ce.scalar();
    row.l_l = detail::value_or_zero(o.l_l);
    row.l_n = detail::value_or_zero(o.l_n);
    row.l_g = detail::value_or_zero(o.l_g);
    row.total = o.total.scalar();
    res.loss_trace.push_back(row.total);
    if (!detail::finite(row.total)) {
      row.status = "diverged";
      res.log.append(std::move(row));
      res.diverged = true;
      break;
    }
    tape.backward(o.total);
    auto grads = detail::collect_grads(tape, bound, tfb);
    auto ptrs = detail::param_ptrs(model, tf);
    adam.step(ptrs, grads);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    step_total += row.seconds;

    const auto ev = model.evaluate(g, full_ops);
    row.train_acc = masked_accuracy(ev.logits, g.labels(), g.masks().train);
    row.val_acc = masked_accuracy(ev.logits, g.labels(), g.masks().val);
    row.test_acc = masked_accuracy(ev.logits, g.labels(), g.masks().test);
    if (opt.log_ndr) {
      Tape et;
      auto nd = eval_ndrs(et, g, ev.states);
      check_ndr_range(nd);
      for (const auto& s : nd) row.ndr.push_back(ndr_summary(s, SummaryStat::mean));
      if (nd.size() >= 2) {
        auto [unused, rep] = adr_loss(g, nd, dcfg);
        row.l_star = rep.l_star;
        rep.loss = row.l_n;
        res.log.append_adr(epoch, std::move(rep));
      }
    }
    if (row.val_acc > res.best_val) {
      res.best_val = row.val_acc;
      res.test_at_best = row.test_acc;
      res.best_epoch = epoch;
      best_params = model.params();
    }
    if (opt.verbose) {
      std::cerr << "epoch " << epoch << " loss " << row.total << " val " << row.val_acc << " test " << row.test_acc
                << '\n';
    }
    res.log.append(std::move(row));
  }
  const int steps = static_cast<int>(res.loss_trace.size()) - (res.diverged ? 1 : 0);
  res.mean_step_seconds = steps > 0 ? step_total / steps : 0.0;
  model.params() = std::move(best_params);
  res.model = std::move(model);
  return res;
}

// ---------------------------------------------------------------------------
// Graph classification
// ---------------------------------------------------------------------------

struct FoldResult {
  MetricsLog log;
  int best_epoch = 0;
  double best_val = 0.0;
  double test_at_best = 0.0;
  bool diverged = false;
};

struct GraphRunResult {
  std::vector<FoldResult> folds;
  double mean_test = 0.0;
  double std_test = 0.0;  ///< population standard deviation over folds
  double mean_val = 0.0;
};

/// Runs fn(0..n-1) on up to `threads` workers.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

/// Worker cap from SMOOTHKIT_THREADS (default 1).
inline unsigned worker_threads() {
  const char* s = std::getenv("SMOOTHKIT_THREADS");
  if (!s) return 1;
  const int v = std::atoi(s);
  return v > 0 ? static_cast<unsigned>(v) : 1;
}

namespace detail {

inline double graph_accuracy(const Model& m, const GraphBatch& b, const std::vector<GraphOps>& ops,
                             const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i : idx) {
    const auto ev = m.evaluate(b.graphs[i], ops[i]);
    if (argmax_row(ev.logits, 0) == b.labels[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(idx.size());
}

}  // namespace detail

/// One fold: test = fold k, validation = fold (k+1) mod K, train = rest.
inline FoldResult train_graph_fold(const GraphBatch& batch, const TrainConfig& cfg, int k,
                                   const TrainOptions& opt = {}) {
  const int K = cfg.folds;
  std::vector<std::size_t> tr, va, te;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int f = batch.folds[i];
    if (f == k) {
      te.push_back(i);
    } else if (f == (k + 1) % K) {
      va.push_back(i);
    } else {
      tr.push_back(i);
    }
  }
  if (tr.empty()) throw ConfigError("fold has no training graphs");
  const DistillConfig dcfg = opt.distill_module ? cfg.distill : DistillConfig{};
  const Index in_dim = batch.graphs.front().feature_dim();
  const bool head = opt.distill_module && dcfg.alpha > 0.0 && cfg.model.n_layers >= 2;
  const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(k);
  Model model(cfg.model, Task::graph, in_dim, batch.num_classes, seed, head);
  Transforms tf = opt.distill_module ? Transforms::identity_for(model, dcfg) : Transforms{};
  Adam adam(cfg.lr, cfg.weight_decay);
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<GraphOps> ops;
  ops.reserve(batch.size());
  for (const auto& g : batch.graphs) ops.emplace_back(g, cfg.model.backbone);

  FoldResult res;
  res.best_val = -1.0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = tr;
    std::shuffle(order.begin(), order.end(), rng);
    EpochRow row;
    row.epoch = epoch;
    std::size_t nb = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Tape tape;
      auto bound = model.bind(tape);
      auto tfb = tf.bind(tape);
      std::vector<ForwardResult> frs;
      std::vector<Graph> dropped;
      std::vector<const Graph*> gptr;
      std::vector<int> labels;
      dropped.reserve(end - start);
      for (std::size_t s = start; s < end; ++s) {
        const std::size_t i = order[s];
        labels.push_back(batch.labels[i]);
        if (cfg.drop_edge_ratio > 0.0) {
          dropped.push_back(drop_edge(batch.graphs[i], cfg.drop_edge_ratio, rng()));
          gptr.push_back(&dropped.back());
          frs.push_back(model.forward(tape, bound, dropped.back(), GraphOps(dropped.back(), cfg.model.backbone),
                                      true, rng));
        } else {
          gptr.push_back(&batch.graphs[i]);
          frs.push_back(model.forward(tape, bound, batch.graphs[i], ops[i], true, rng));
        }
      }
      ObjectiveTerms o;
      if (opt.distill_module) {
        o = graph_objective(model, bound, tfb, frs, gptr, labels, dcfg);
      } else {
        std::vector<Tensor> lg;
        for (const auto& fr : frs) lg.push_back(fr.logits);
        o.ce = softmax_cross_entropy(concat_rows(lg), labels, Mask(labels.size(), 1));
        o.total = o.ce;
      }
      const double total = o.total.scalar();
      row.ce += o.ce.scalar();
      row.l_l += detail::value_or_zero(o.l_l);
      row.l_n += detail::value_or_zero(o.l_n);
      row.l_g += detail::value_or_zero(o.l_g);
      row.total += total;
      ++nb;
      if (!detail::finite(total)) {
        res.diverged = true;
        break;
      }
      tape.backward(o.total);
      auto grads = detail::collect_grads(tape, bound, tfb);
      auto ptrs = detail::param_ptrs(model, tf);
      adam.step(ptrs, grads);
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double inv = nb ? 1.0 / static_cast<double>(nb) : 0.0;
    row.ce *= inv;
    row.l_l *= inv;
    row.l_n *= inv;
    row.l_g *= inv;
    row.total *= inv;
    if (res.diverged) {
      row.status = "diverged";
      res.log.append(std::move(row));
      break;
    }
    row.train_acc = detail::graph_accuracy(model, batch, ops, tr);
    row.val_acc = detail::graph_accuracy(model, batch, ops, va);
    row.test_acc = detail::graph_accuracy(model, batch, ops, te);
    if (opt.log_ndr) {
      // Mean over training graphs of each layer's mean NDR.
      std::vector<double> acc(static_cast<std::size_t>(cfg.model.n_layers), 0.0);
      for (std::size_t i : tr) {
        const auto ev = model.evaluate(batch.graphs[i], ops[i]);
        Tape et;
        auto nd = eval_ndrs(et, batch.graphs[i], ev.states);
        check_ndr_range(nd);
        for (std::size_t l = 0; l < nd.size(); ++l) acc[l] += ndr_summary(nd[l], SummaryStat::mean);
      }
      for (double& a : acc) a /= static_cast<double>(tr.size());
      row.ndr = std::move(acc);
    }
    if (row.val_acc > res.best_val) {
      res.best_val = row.val_acc;
      res.test_at_best = row.test_acc;
      res.best_epoch = epoch;
    }
    res.log.append(std::move(row));
  }
  return res;
}

inline GraphRunResult train_graph(GraphBatch batch, const TrainConfig& cfg, const TrainOptions& opt = {}) {
  cfg.validate();
  if (batch.size() < static_cast<std::size_t>(cfg.folds)) {
    throw ConfigError("fewer graphs (" + std::to_string(batch.size()) + ") than folds (" +
                      std::to_string(cfg.folds) + ")");
  }
  if (batch.labels.size() != batch.size()) throw ConfigError("one label per graph required");
  if (batch.folds.size() != batch.size()) batch.assign_folds(cfg.folds, cfg.seed);
  GraphRunResult res;
  res.folds.resize(static_cast<std::size_t>(cfg.folds));
  parallel_for(res.folds.size(), worker_threads(), [&](std::size_t k) {
    res.folds[k] = train_graph_fold(batch, cfg, static_cast<int>(k), opt);
  });
  double s = 0.0, sv = 0.0;
  for (const auto& f : res.folds) {
    s += f.test_at_best;
    sv += f.best_val;
  }
  const double K = static_cast<double>(res.folds.size());
  res.mean_test = s / K;
  res.mean_val = sv / K;
  double var = 0.0;
  for (const auto& f : res.folds) var += (f.test_at_best - res.mean_test) * (f.test_at_best - res.mean_test);
  res.std_test = std::sqrt(var / K);
  return res;
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

struct GridRow {
  TrainConfig cfg;
  double val = 0.0;   ///< mean over seeds (and folds for graph tasks)
  double test = 0.0;  ///< same averaging, at the best-validation epoch
  std::vector<double> test_per_seed;
};

inline std::vector<TrainConfig> expand_grid(const TrainConfig& base, const GridSpace& space) {
  auto axis = [](const std::vector<double>& v, double dflt) { return v.empty() ? std::vector<double>{dflt} : v; };
  std::vector<TrainConfig> out;
  for (double a : axis(space.alpha, base.distill.alpha))
    for (double b : axis(space.beta, base.distill.beta))
      for (double g : axis(space.gamma, base.distill.gamma))
        for (double lr : axis(space.lr, base.lr))
          for (double wd : axis(space.weight_decay, base.weight_decay))
            for (double dr : axis(space.dropout, base.model.dropout)) {
              TrainConfig c = base;
              c.distill.alpha = a;
              c.distill.beta = b;
              c.distill.gamma = g;
              c.lr = lr;
              c.weight_decay = wd;
              c.model.dropout = dr;
              c.validate();
              out.push_back(std::move(c));
            }
  return out;
}

/// Runs every combination of `space` over `data`; rows ranked by mean
/// validation accuracy (descending, ties keep grid order).
inline std::vector<GridRow> grid_search(const Dataset& data, const TrainConfig& base, const GridSpace& space,
                                        unsigned threads = worker_threads()) {
  const auto combos = expand_grid(base, space);
  const std::vector<std::uint64_t> seeds = space.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : space.seeds;
  const std::size_t jobs = combos.size() * seeds.size();
  std::vector<double> val(jobs), test(jobs);
  TrainOptions opt;
  opt.log_ndr = false;
  parallel_for(jobs, threads, [&](std::size_t job) {
    TrainConfig c = combos[job / seeds.size()];
    c.seed = seeds[job % seeds.size()];
    if (const auto* g = std::get_if<Graph>(&data)) {
      auto r = train_node(*g, c, opt);
      val[job] = r.best_val;
      test[job] = r.test_at_best;
    } else {
      auto r = train_graph(std::get<GraphBatch>(data), c, opt);
      val[job] = r.mean_val;
      test[job] = r.mean_test;
    }
  });
  std::vector<GridRow> rows;
  for (std::size_t i = 0; i < combos.size(); ++i) {
    GridRow r;
    r.cfg = combos[i];
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      r.val += val[i * seeds.size() + s];
      r.test += test[i * seeds.size() + s];
      r.test_per_seed.push_back(test[i * seeds.size() + s]);
    }
    r.val /= static_cast<double>(seeds.size());
    r.test /= static_cast<double>(seeds.size());
    rows.push_back(std::move(r));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) { return a.val > b.val; });
  return rows;
}

inline void write_grid_csv(std::ostream& out, const std::vector<GridRow>& rows) {
  out << "rank,alpha,beta,gamma,lr,weight_decay,dropout,val,test\n" << std::setprecision(17);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& c = rows[i].cfg;
    out << i + 1 << ',' << c.distill.alpha << ',' << c.distill.beta << ',' << c.distill.gamma << ',' << c.lr << ','
        << c.weight_decay << ',' << c.model.dropout << ',' << rows[i].val << ',' << rows[i].test << '\n';
  }
}

}  // namespace smoothkit

#endif  // SMOOTHKIT_TRAIN_HPP
