#ifndef SMOOTHKIT_LAYERS_HPP
#define SMOOTHKIT_LAYERS_HPP

// GNN backbones (GCN, GraphSage-mean, GAT), readout and prediction heads.
//
// Node task: layers 1..L-1 are hidden (hidden_dim wide), layer L maps to
// class logits with no activation, so X^(L) are the final logits.
// Graph task: all L layers are hidden; a linear classifier reads G^(L).

#include "smoothkit/graph.hpp"
#include "smoothkit/io.hpp"
#include "smoothkit/ops.hpp"

#include "json.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

namespace smoothkit {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Backbone { gcn, sage, gat };
enum class Activation { relu, elu, leaky_relu, identity };
enum class ReadoutKind { mean, sum, max };
enum class Task { node, graph };

NLOHMANN_JSON_SERIALIZE_ENUM(Backbone, {{Backbone::gcn, "gcn"}, {Backbone::sage, "sage"}, {Backbone::gat, "gat"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::relu, "relu"},
                                          {Activation::elu, "elu"},
                                          {Activation::leaky_relu, "leaky_relu"},
                                          {Activation::identity, "identity"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ReadoutKind,
                             {{ReadoutKind::mean, "mean"}, {ReadoutKind::sum, "sum"}, {ReadoutKind::max, "max"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Task, {{Task::node, "node"}, {Task::graph, "graph"}})

namespace detail {

/// Parses a string enum strictly (nlohmann maps unknown strings to the
/// first enumerator).
template <class E>
E parse_enum(const nlohmann::json& j, const char* key, std::initializer_list<const char*> names) {
  const auto s = j.get<std::string>();
  for (const char* n : names) {
    if (s == n) return nlohmann::json(s).get<E>();
  }
  throw ConfigError(std::string("invalid value '") + s + "' for " + key);
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* key : keys) ok = ok || k == key;
    if (!ok) throw ConfigError(std::string("unknown key '") + k + "' in " + where);
  }
}

}  // namespace detail

struct ModelConfig {
  Backbone backbone = Backbone::gcn;
  int n_layers = 2;
  int hidden_dim = 16;  ///< total width of a hidden layer; GAT heads split it
  int n_heads = 1;
  double dropout = 0.5;
  std::optional<Activation> activation;  ///< default: relu (gcn/sage), elu (gat)
  ReadoutKind readout = ReadoutKind::mean;
  bool pre_activation_states = false;  ///< capture X^(l) before the activation

  Activation resolved_activation() const {
    if (activation) return *activation;
    return backbone == Backbone::gat ? Activation::elu : Activation::relu;
  }

  void validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
    if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0,1)");
    if (backbone == Backbone::gat && hidden_dim % n_heads != 0) {
      throw ConfigError("hidden_dim must be divisible by n_heads");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"backbone", c.backbone},   {"n_layers", c.n_layers}, {"hidden_dim", c.hidden_dim},
       {"n_heads", c.n_heads},     {"dropout", c.dropout},   {"activation", c.resolved_activation()},
       {"readout", c.readout},     {"pre_activation_states", c.pre_activation_states}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  detail::reject_unknown(j,
                         {"backbone", "n_layers", "hidden_dim", "n_heads", "dropout", "activation", "readout",
                          "pre_activation_states"},
                         "model");
  c = ModelConfig{};
  if (j.contains("backbone")) c.backbone = detail::parse_enum<Backbone>(j["backbone"], "backbone", {"gcn", "sage", "gat"});
  if (j.contains("n_layers")) c.n_layers = j["n_layers"].get<int>();
  if (j.contains("hidden_dim")) c.hidden_dim = j["hidden_dim"].get<int>();
  if (j.contains("n_heads")) c.n_heads = j["n_heads"].get<int>();
  if (j.contains("dropout")) c.dropout = j["dropout"].get<double>();
  if (j.contains("activation")) {
    c.activation = detail::parse_enum<Activation>(j["activation"], "activation",
                                                  {"relu", "elu", "leaky_relu", "identity"});
  }
  if (j.contains("readout")) c.readout = detail::parse_enum<ReadoutKind>(j["readout"], "readout", {"mean", "sum", "max"});
  if (j.contains("pre_activation_states")) c.pre_activation_states = j["pre_activation_states"].get<bool>();
  c.validate();
}

/// Normalized operators derived from one graph's adjacency. Rebuilt whenever
/// the edge set changes (DropEdge).
struct GraphOps {
  std::shared_ptr<const SparseMatrix> adjacency;
  std::shared_ptr<const SparseMatrix> gcn;        ///< D^-1/2 (A+I) D^-1/2
  std::shared_ptr<const SparseMatrix> mean;       ///< D^-1 A
  std::shared_ptr<const SparseMatrix> self_loop;  ///< A + I (attention structure)

  GraphOps() = default;
  GraphOps(const Graph& g, Backbone b) : adjacency(g.adjacency_ptr()) {
    switch (b) {
      case Backbone::gcn:
        gcn = std::make_shared<const SparseMatrix>(gcn_normalized(g.adjacency()));
        break;
      case Backbone::sage:
        mean = std::make_shared<const SparseMatrix>(mean_normalized(g.adjacency()));
        break;
      case Backbone::gat:
        self_loop = std::make_shared<const SparseMatrix>(with_self_loops(g.adjacency()));
        break;
    }
  }
};

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::relu:
      return relu(x);
    case Activation::elu:
      return elu(x);
    case Activation::leaky_relu:
      return leaky_relu(x, 0.2);
    case Activation::identity:
      return x;
  }
  return x;
}

/// Permutation-invariant row aggregation to a 1 x d embedding.
inline Tensor readout(const Tensor& x, ReadoutKind kind) {
  if (x.rows() == 0) throw std::invalid_argument("readout of an empty graph");
  switch (kind) {
    case ReadoutKind::mean:
      return mean_rows(x);
    case ReadoutKind::sum:
      return sum_rows(x);
    case ReadoutKind::max:
      return max_rows(x);
  }
  return mean_rows(x);
}

inline Tensor gcn_forward(const SparseMatrix& gcn_op, const Tensor& x, const Tensor& w) {
  return spmm(gcn_op, matmul(x, w));
}

inline Tensor gcn_forward(std::shared_ptr<const SparseMatrix> gcn_op, const Tensor& x, const Tensor& w) {
  return spmm(std::move(gcn_op), matmul(x, w));
}

inline Tensor sage_forward(std::shared_ptr<const SparseMatrix> mean_op, const Tensor& x, const Tensor& w_self,
                           const Tensor& w_neigh) {
  return add(matmul(x, w_self), matmul(spmm(std::move(mean_op), x), w_neigh));
}

struct GatHead {
  Tensor w;      ///< in x d_head
  Tensor a_src;  ///< d_head x 1
  Tensor a_dst;  ///< d_head x 1
};

/// Multi-head attention layer; heads are concatenated, or averaged when
/// `average` is set. No activation is applied here.
inline Tensor gat_forward(std::shared_ptr<const SparseMatrix> structure, const Tensor& x,
                          std::span<const GatHead> heads, bool average) {
  if (heads.empty()) throw ConfigError("gat needs at least one head");
  std::vector<Tensor> outs;
  outs.reserve(heads.size());
  for (const auto& h : heads) {
    Tensor z = matmul(x, h.w);
    outs.push_back(gat_attention(structure, z, matmul(z, h.a_src), matmul(z, h.a_dst)));
  }
  if (outs.size() == 1) return outs.front();
  if (!average) return concat_cols(outs);
  Tensor acc = outs.front();
  for (std::size_t k = 1; k < outs.size(); ++k) acc = add(acc, outs[k]);
  return scale(acc, 1.0 / static_cast<double>(outs.size()));
}

struct Param {
  std::string name;
  Matrix value;
};

/// Glorot-uniform initialization.
template <class Rng>
Matrix glorot(Index rows, Index cols, Rng& rng) {
  const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-lim, lim);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Everything one forward pass produces.
struct ForwardResult {
  std::vector<Tensor> states;    ///< X^(0)..X^(L)
  std::vector<Tensor> readouts;  ///< graph task: G^(1)..G^(L); empty for node task
  Tensor logits;                 ///< node task: X^(L); graph task: 1 x C
};

/// Parameters and forward definition of one network.
///
/// Weights are plain matrices; `bind` puts them on a tape as leaves in the
/// order of params().
class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, Task task, Index in_dim, int n_classes, std::uint64_t seed, bool with_head)
      : cfg_(cfg), task_(task), in_dim_(in_dim), n_classes_(n_classes), with_head_(with_head) {
    cfg_.validate();
    if (in_dim < 1) throw ConfigError("input dimension must be >= 1");
    if (n_classes < 1) throw ConfigError("class count must be >= 1");
    std::mt19937_64 rng(seed);
    const int L = cfg_.n_layers;
    for (int l = 1; l <= L; ++l) {
      const Index din = l == 1 ? in_dim : cfg_.hidden_dim;
      const bool out_layer = task_ == Task::node && l == L;
      const Index dout = out_layer ? n_classes : cfg_.hidden_dim;
      const std::string p = "layer" + std::to_string(l);
      switch (cfg_.backbone) {
        case Backbone::gcn:
          add_param(p + ".W", glorot(din, dout, rng));
          break;
        case Backbone::sage:
          add_param(p + ".W_self", glorot(din, dout, rng));
          add_param(p + ".W_neigh", glorot(din, dout, rng));
          break;
        case Backbone::gat: {
          const Index dh = out_layer ? dout : dout / cfg_.n_heads;
          for (int k = 0; k < cfg_.n_heads; ++k) {
            const std::string hp = p + ".head" + std::to_string(k);
            add_param(hp + ".W", glorot(din, dh, rng));
            add_param(hp + ".a_src", glorot(dh, 1, rng));
            add_param(hp + ".a_dst", glorot(dh, 1, rng));
          }
          break;
        }
      }
    }
    if (task_ == Task::graph) {
      add_param("classifier.W", glorot(cfg_.hidden_dim, n_classes, rng));
      add_param("classifier.b", Matrix::Zero(1, n_classes));
    }
    // The head is drawn last so the backbone init is the same with or
    // without it.
    if (with_head_) {
      add_param("head.W1", glorot(cfg_.hidden_dim, cfg_.hidden_dim, rng));
      add_param("head.b1", Matrix::Zero(1, cfg_.hidden_dim));
      add_param("head.W2", glorot(cfg_.hidden_dim, n_classes, rng));
      add_param("head.b2", Matrix::Zero(1, n_classes));
    }
  }

  const ModelConfig& config() const { return cfg_; }
  Task task() const { return task_; }
  Index in_dim() const { return in_dim_; }
  int n_classes() const { return n_classes_; }
  bool has_head() const { return with_head_; }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    throw std::out_of_range("no parameter named " + name);
  }
  Matrix& param(const std::string& name) { return params_[index_of(name)].value; }
  const Matrix& param(const std::string& name) const { return params_[index_of(name)].value; }

  /// Puts every parameter on `tape` as a trainable leaf.
  std::vector<Tensor> bind(Tape& tape) const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(tape.variable(p.value));
    return out;
  }

  /// Full forward. `rng` drives dropout and is only touched when `train`.
  template <class Rng>
  ForwardResult forward(Tape& tape, std::span<const Tensor> bound, const Graph& g, const GraphOps& ops, bool train,
                        Rng& rng) const {
    if (g.feature_dim() != in_dim_) {
      throw DimensionError("graph feature dim " + std::to_string(g.feature_dim()) + " != model input dim " +
                           std::to_string(in_dim_));
    }
    if (bound.size() != params_.size()) throw std::invalid_argument("bound parameter count mismatch");
    auto get = [&](const std::string& name) { return bound[index_of(name)]; };
    const Activation act = cfg_.resolved_activation();
    const int L = cfg_.n_layers;
    ForwardResult r;
    r.states.push_back(tape.constant(g.features()));
    Tensor x = r.states.front();
    for (int l = 1; l <= L; ++l) {
      const bool out_layer = task_ == Task::node && l == L;
      const std::string p = "layer" + std::to_string(l);
      Tensor in = train ? dropout(x, cfg_.dropout, rng) : x;
      Tensor z;
      switch (cfg_.backbone) {
        case Backbone::gcn:
          z = gcn_forward(ops.gcn, in, get(p + ".W"));
          break;
        case Backbone::sage:
          z = sage_forward(ops.mean, in, get(p + ".W_self"), get(p + ".W_neigh"));
          break;
        case Backbone::gat: {
          std::vector<GatHead> heads;
          for (int k = 0; k < cfg_.n_heads; ++k) {
            const std::string hp = p + ".head" + std::to_string(k);
            heads.push_back({get(hp + ".W"), get(hp + ".a_src"), get(hp + ".a_dst")});
          }
          z = gat_forward(ops.self_loop, in, heads, out_layer);
          break;
        }
      }
      if (out_layer) {
        x = z;
        r.states.push_back(z);
      } else {
        x = activate(z, act);
        r.states.push_back(cfg_.pre_activation_states ? z : x);
      }
    }
    if (task_ == Task::graph) {
      for (int l = 1; l <= L; ++l) r.readouts.push_back(readout(r.states[static_cast<std::size_t>(l)], cfg_.readout));
      // The classifier reads the propagated (post-activation) output.
      Tensor gL = cfg_.pre_activation_states ? readout(x, cfg_.readout) : r.readouts.back();
      r.logits = add(matmul(gL, get("classifier.W")), get("classifier.b"));
    } else {
      r.logits = x;
    }
    return r;
  }

  /// Shared 2-layer MLP applied to an intermediate state (node task) or its
  /// readout (graph task).
  Tensor intermediate_logits(std::span<const Tensor> bound, const Tensor& x_l) const {
    if (!with_head_) throw ConfigError("model has no intermediate head");
    auto get = [&](const std::string& name) { return bound[index_of(name)]; };
    Tensor in = task_ == Task::graph ? readout(x_l, cfg_.readout) : x_l;
    if (in.cols() != cfg_.hidden_dim) {
      throw ConfigError("shared head expects width " + std::to_string(cfg_.hidden_dim) + ", got " +
                        std::to_string(in.cols()));
    }
    Tensor h = relu(add(matmul(in, get("head.W1")), get("head.b1")));
    return add(matmul(h, get("head.W2")), get("head.b2"));
  }

  /// Intermediate logits for layers 1..L-1.
  std::vector<Tensor> all_intermediate_logits(std::span<const Tensor> bound, const ForwardResult& fr) const {
    std::vector<Tensor> out;
    for (int l = 1; l < cfg_.n_layers; ++l) {
      out.push_back(intermediate_logits(bound, fr.states[static_cast<std::size_t>(l)]));
    }
    return out;
  }

  /// Deterministic dropout-free forward on a private tape; returns the
  /// state values X^(0)..X^(L) and logits.
  struct EvalResult {
    std::vector<Matrix> states;
    Matrix logits;
  };
  EvalResult evaluate(const Graph& g, const GraphOps& ops) const {
    Tape tape;
    auto bound = bind(tape);
    std::mt19937_64 unused(0);
    ForwardResult fr = forward(tape, bound, g, ops, false, unused);
    EvalResult e;
    for (const auto& s : fr.states) e.states.push_back(s.value());
    e.logits = fr.logits.value();
    return e;
  }

 private:
  void add_param(std::string name, Matrix m) { params_.push_back({std::move(name), std::move(m)}); }

  ModelConfig cfg_;
  Task task_ = Task::node;
  Index in_dim_ = 0;
  int n_classes_ = 0;
  bool with_head_ = false;
  std::vector<Param> params_;
};

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest + little-endian float64 blob
// ---------------------------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
};

namespace detail {

inline void put_le(std::ostream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

inline double get_le(const unsigned char* b) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

}  // namespace detail

/// Writes `path` (manifest) and the sibling `.bin` blob.
inline void save_checkpoint(const std::filesystem::path& path, const Model& m, const CheckpointMeta& meta) {
  const auto blob = detail::blob_path(path);
  detail::make_parent_dirs(path);
  std::ofstream bout(blob, std::ios::binary);
  if (!bout) throw CheckpointError("cannot write " + blob.string());
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : m.params()) {
    tensors.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"offset", offset}});
    for (Index i = 0; i < p.value.size(); ++i) detail::put_le(bout, p.value.data()[i]);
    offset += static_cast<std::uint64_t>(p.value.size()) * 8;
  }
  nlohmann::json j = {{"config", m.config()},
                      {"task", m.task()},
                      {"in_dim", m.in_dim()},
                      {"n_classes", m.n_classes()},
                      {"with_head", m.has_head()},
                      {"seed", meta.seed},
                      {"epoch", meta.epoch},
                      {"blob", blob.filename().string()},
                      {"blob_bytes", offset},
                      {"tensors", tensors}};
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline Model load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  const auto cfg = j.at("config").get<ModelConfig>();
  const auto task = detail::parse_enum<Task>(j.at("task"), "task", {"node", "graph"});
  Model m(cfg, task, j.at("in_dim").get<Index>(), j.at("n_classes").get<int>(), 0, j.value("with_head", false));
  const auto blob = path.parent_path() / j.at("blob").get<std::string>();
  std::ifstream bin(blob, std::ios::binary);
  if (!bin) throw CheckpointError("cannot open " + blob.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const auto& tensors = j.at("tensors");
  if (tensors.size() != m.params().size()) throw CheckpointError("tensor count does not match the model");
  for (const auto& t : tensors) {
    Matrix& dst = m.param(t.at("name").get<std::string>());
    const auto rows = t.at("rows").get<Index>(), cols = t.at("cols").get<Index>();
    const auto off = t.at("offset").get<std::size_t>();
    if (rows != dst.rows() || cols != dst.cols()) throw CheckpointError("shape mismatch for " + t.at("name").get<std::string>());
    if (off + static_cast<std::size_t>(rows * cols) * 8 > bytes.size()) throw CheckpointError("blob too short");
    for (Index i = 0; i < dst.size(); ++i) dst.data()[i] = detail::get_le(bytes.data() + off + static_cast<std::size_t>(i) * 8);
  }
  if (meta) {
    meta->seed = j.value("seed", std::uint64_t{0});
    meta->epoch = j.value("epoch", 0);
  }
  return m;
}

}  // namespace smoothkit

#endif  // SMOOTHKIT_LAYERS_HPP
