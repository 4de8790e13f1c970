#ifndef SMOOTHKIT_IO_HPP
#define SMOOTHKIT_IO_HPP

// Dataset ingestion (citation text, TU graph-kernel text) and the canonical
// JSON graph form.

#include "smoothkit/graph.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace smoothkit {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::ifstream open_or_throw(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open " + p.string());
  return in;
}

/// Creates missing parent directories of an output path.
inline void make_parent_dirs(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline long long parse_int(const std::string& tok, const std::string& file, std::size_t line) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(tok, &used);
    if (trim(tok.substr(used)).empty()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError(file, line, "expected integer, got '" + tok + "'");
}

inline double parse_double(const std::string& tok, const std::string& file, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(tok, &used);
    if (trim(tok.substr(used)).empty()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError(file, line, "expected number, got '" + tok + "'");
}

/// Non-empty lines with their 1-based line numbers.
inline std::vector<std::pair<std::size_t, std::string>> read_lines(const std::filesystem::path& p) {
  auto in = open_or_throw(p);
  std::vector<std::pair<std::size_t, std::string>> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    line = trim(line);
    if (!line.empty()) out.emplace_back(no, std::move(line));
  }
  return out;
}

}  // namespace detail

struct CitationStats {
  std::size_t dangling_citations = 0;
  std::size_t self_citations = 0;
  std::vector<std::string> class_names;  ///< index = label id
};

/// Loads `<id>\t<w1>...<wd>\t<class>` / `<cited>\t<citing>` files.
///
/// Features are row-normalized. Class ids follow sorted class names. Splits
/// follow the semi-supervised layout (20 per class, 500 val, 1000 test) in
/// file order.
inline Graph load_citation(const std::filesystem::path& content_path, const std::filesystem::path& cites_path,
                           CitationStats* stats = nullptr) {
  const std::string cfile = content_path.string();
  auto lines = detail::read_lines(content_path);
  std::unordered_map<std::string, Index> id_of;
  std::vector<std::vector<double>> rows;
  std::vector<std::string> raw_class;
  std::size_t dim = 0;
  for (const auto& [no, line] : lines) {
    auto tok = detail::split(line, '\t');
    if (tok.size() < 2) throw ParseError(cfile, no, "expected id, features and class");
    const std::size_t d = tok.size() - 2;
    if (rows.empty()) dim = d;
    if (d != dim) throw ParseError(cfile, no, "feature count " + std::to_string(d) + " != " + std::to_string(dim));
    if (!id_of.emplace(tok.front(), static_cast<Index>(rows.size())).second) {
      throw ParseError(cfile, no, "duplicate node id '" + tok.front() + "'");
    }
    std::vector<double> r(d);
    for (std::size_t k = 0; k < d; ++k) r[k] = detail::parse_double(tok[k + 1], cfile, no);
    rows.push_back(std::move(r));
    raw_class.push_back(tok.back());
  }
  std::vector<std::string> names(raw_class.begin(), raw_class.end());
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  std::vector<int> labels(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    labels[i] = static_cast<int>(std::lower_bound(names.begin(), names.end(), raw_class[i]) - names.begin());
  }
  const auto n = static_cast<Index>(rows.size());
  Matrix x(n, static_cast<Index>(dim));
  for (Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) s += rows[static_cast<std::size_t>(i)][k];
    for (std::size_t k = 0; k < dim; ++k) {
      const double v = rows[static_cast<std::size_t>(i)][k];
      x(i, static_cast<Index>(k)) = s != 0.0 ? v / s : 0.0;
    }
  }

  CitationStats local;
  const std::string efile = cites_path.string();
  std::vector<Edge> edges;
  for (const auto& [no, line] : detail::read_lines(cites_path)) {
    std::istringstream is(line);
    std::string a, b, extra;
    if (!(is >> a >> b) || (is >> extra)) throw ParseError(efile, no, "expected '<cited>\\t<citing>'");
    auto ia = id_of.find(a), ib = id_of.find(b);
    if (ia == id_of.end() || ib == id_of.end()) {
      ++local.dangling_citations;
      continue;
    }
    if (ia->second == ib->second) {
      ++local.self_citations;
      continue;
    }
    edges.push_back({ia->second, ib->second});
  }
  local.class_names = names;
  const int c = static_cast<int>(names.size());
  Masks masks = planetoid_split(labels, c);
  Graph g(n, std::move(edges), std::move(x), std::move(labels), std::move(masks));
  g.set_num_classes(c);
  if (stats) *stats = std::move(local);
  return g;
}

/// Loads NAME_A.txt, NAME_graph_indicator.txt, NAME_graph_labels.txt and the
/// optional NAME_node_labels.txt / NAME_node_attributes.txt from `dir`.
inline GraphBatch load_tu(const std::filesystem::path& dir, const std::string& name) {
  auto file = [&](const std::string& suffix) { return dir / (name + "_" + suffix + ".txt"); };
  for (const char* req : {"A", "graph_indicator", "graph_labels"}) {
    if (!std::filesystem::exists(file(req))) throw FormatError("missing mandatory file " + file(req).string());
  }
  const std::string ind_file = file("graph_indicator").string();
  std::vector<long long> indicator;
  for (const auto& [no, line] : detail::read_lines(file("graph_indicator"))) {
    indicator.push_back(detail::parse_int(line, ind_file, no));
  }
  const std::string gl_file = file("graph_labels").string();
  std::vector<long long> raw_glabels;
  for (const auto& [no, line] : detail::read_lines(file("graph_labels"))) {
    raw_glabels.push_back(detail::parse_int(line, gl_file, no));
  }
  const std::size_t num_graphs = raw_glabels.size();
  const std::size_t num_nodes = indicator.size();

  // Graph ids are 1-based and nodes of one graph are contiguous.
  std::vector<std::size_t> first(num_graphs + 1, num_nodes), count(num_graphs, 0);
  for (std::size_t v = 0; v < num_nodes; ++v) {
    const long long gid = indicator[v];
    if (gid < 1 || static_cast<std::size_t>(gid) > num_graphs) {
      throw ParseError(ind_file, v + 1, "graph id out of range");
    }
    const auto g = static_cast<std::size_t>(gid - 1);
    first[g] = std::min(first[g], v);
    ++count[g];
  }
  for (std::size_t g = 0; g < num_graphs; ++g) {
    if (count[g] == 0) throw FormatError("graph " + std::to_string(g + 1) + " has no nodes");
    for (std::size_t v = first[g]; v < first[g] + count[g]; ++v) {
      if (static_cast<std::size_t>(indicator[v] - 1) != g) throw FormatError("graph nodes are not contiguous");
    }
  }

  std::vector<std::vector<Edge>> edges(num_graphs);
  const std::string a_file = file("A").string();
  for (const auto& [no, line] : detail::read_lines(file("A"))) {
    auto tok = detail::split(line, ',');
    if (tok.size() != 2) throw ParseError(a_file, no, "expected 'i, j'");
    const long long i = detail::parse_int(detail::trim(tok[0]), a_file, no);
    const long long j = detail::parse_int(detail::trim(tok[1]), a_file, no);
    if (i < 1 || j < 1 || static_cast<std::size_t>(i) > num_nodes || static_cast<std::size_t>(j) > num_nodes) {
      throw ParseError(a_file, no, "node id out of range");
    }
    const auto gi = static_cast<std::size_t>(indicator[static_cast<std::size_t>(i - 1)] - 1);
    const auto gj = static_cast<std::size_t>(indicator[static_cast<std::size_t>(j - 1)] - 1);
    if (gi != gj) throw FormatError(a_file + ":" + std::to_string(no) + ": edge crosses graph boundary");
    edges[gi].push_back({static_cast<Index>(static_cast<std::size_t>(i - 1) - first[gi]),
                         static_cast<Index>(static_cast<std::size_t>(j - 1) - first[gi])});
  }

  // Features: attributes when present and non-empty, else one-hot node
  // labels, else a constant column.
  Matrix x;
  std::vector<std::pair<std::size_t, std::string>> attr_lines;
  if (std::filesystem::exists(file("node_attributes"))) attr_lines = detail::read_lines(file("node_attributes"));
  if (!attr_lines.empty()) {
    if (attr_lines.size() != num_nodes) throw FormatError("node_attributes must have one line per node");
    const std::string at_file = file("node_attributes").string();
    const std::size_t d = detail::split(attr_lines.front().second, ',').size();
    x.resize(static_cast<Index>(num_nodes), static_cast<Index>(d));
    for (std::size_t v = 0; v < num_nodes; ++v) {
      auto tok = detail::split(attr_lines[v].second, ',');
      if (tok.size() != d) throw ParseError(at_file, attr_lines[v].first, "attribute count mismatch");
      for (std::size_t k = 0; k < d; ++k) {
        x(static_cast<Index>(v), static_cast<Index>(k)) =
            detail::parse_double(detail::trim(tok[k]), at_file, attr_lines[v].first);
      }
    }
  } else if (std::filesystem::exists(file("node_labels"))) {
    const std::string nl_file = file("node_labels").string();
    auto nl = detail::read_lines(file("node_labels"));
    if (nl.size() != num_nodes) throw FormatError("node_labels must have one line per node");
    std::vector<long long> raw(num_nodes);
    for (std::size_t v = 0; v < num_nodes; ++v) raw[v] = detail::parse_int(nl[v].second, nl_file, nl[v].first);
    std::vector<long long> vals(raw);
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    x = Matrix::Zero(static_cast<Index>(num_nodes), static_cast<Index>(vals.size()));
    for (std::size_t v = 0; v < num_nodes; ++v) {
      x(static_cast<Index>(v), std::lower_bound(vals.begin(), vals.end(), raw[v]) - vals.begin()) = 1.0;
    }
  } else {
    x = Matrix::Ones(static_cast<Index>(num_nodes), 1);
  }

  std::vector<long long> gvals(raw_glabels);
  std::sort(gvals.begin(), gvals.end());
  gvals.erase(std::unique(gvals.begin(), gvals.end()), gvals.end());

  GraphBatch batch;
  batch.num_classes = static_cast<int>(gvals.size());
  for (std::size_t g = 0; g < num_graphs; ++g) {
    Matrix xg = x.middleRows(static_cast<Index>(first[g]), static_cast<Index>(count[g]));
    batch.graphs.emplace_back(static_cast<Index>(count[g]), std::move(edges[g]), std::move(xg));
    batch.labels.push_back(
        static_cast<int>(std::lower_bound(gvals.begin(), gvals.end(), raw_glabels[g]) - gvals.begin()));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Canonical JSON
// ---------------------------------------------------------------------------

using Json = nlohmann::json;

namespace detail {

inline Json mask_to_json(const Mask& m) {
  Json a = Json::array();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i]) a.push_back(i);
  }
  return a;
}

inline Mask mask_from_json(const Json& a, std::size_t n) {
  Mask m(n, 0);
  for (const auto& v : a) {
    const auto i = v.get<std::size_t>();
    if (i >= n) throw FormatError("mask index out of range");
    m[i] = 1;
  }
  return m;
}

}  // namespace detail

/// `{n, edges: [[i,j],...] (i<j), features, labels, masks: {train, val, test}}`
/// with masks as sorted index lists.
inline Json graph_to_json(const Graph& g) {
  Json j;
  j["n"] = g.num_nodes();
  Json edges = Json::array();
  for (const auto& e : g.edges()) edges.push_back({e.u, e.v});
  j["edges"] = std::move(edges);
  Json feats = Json::array();
  for (Index i = 0; i < g.num_nodes(); ++i) {
    Json row = Json::array();
    for (Index c = 0; c < g.feature_dim(); ++c) row.push_back(g.features()(i, c));
    feats.push_back(std::move(row));
  }
  j["features"] = std::move(feats);
  j["labels"] = g.labels();
  j["masks"] = {{"train", detail::mask_to_json(g.masks().train)},
                {"val", detail::mask_to_json(g.masks().val)},
                {"test", detail::mask_to_json(g.masks().test)}};
  return j;
}

inline Graph graph_from_json(const Json& j) {
  static const std::set<std::string> allowed{"n", "edges", "features", "labels", "masks"};
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw FormatError("unknown graph key '" + k + "'");
  }
  const auto n = j.at("n").get<Index>();
  std::vector<Edge> edges;
  for (const auto& e : j.at("edges")) {
    if (e.size() != 2) throw FormatError("edge must be a pair");
    const auto u = e[0].get<Index>(), v = e[1].get<Index>();
    if (u >= v) throw FormatError("canonical edges must satisfy i < j");
    edges.push_back({u, v});
  }
  const Json& f = j.at("features");
  const Index d = f.empty() ? 0 : static_cast<Index>(f.front().size());
  if (static_cast<Index>(f.size()) != n) throw FormatError("features must have n rows");
  Matrix x(n, d);
  for (Index i = 0; i < n; ++i) {
    const Json& row = f[static_cast<std::size_t>(i)];
    if (static_cast<Index>(row.size()) != d) throw FormatError("ragged feature rows");
    for (Index c = 0; c < d; ++c) x(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  std::vector<int> labels = j.value("labels", std::vector<int>{});
  Masks masks;
  if (j.contains("masks")) {
    const Json& m = j.at("masks");
    for (const auto& [k, v] : m.items()) {
      if (k != "train" && k != "val" && k != "test") throw FormatError("unknown mask '" + k + "'");
    }
    masks.train = detail::mask_from_json(m.value("train", Json::array()), static_cast<std::size_t>(n));
    masks.val = detail::mask_from_json(m.value("val", Json::array()), static_cast<std::size_t>(n));
    masks.test = detail::mask_from_json(m.value("test", Json::array()), static_cast<std::size_t>(n));
  }
  return Graph(n, std::move(edges), std::move(x), std::move(labels), std::move(masks));
}

/// `{graphs: [graph...], graph_labels: [...], num_classes}`
inline Json batch_to_json(const GraphBatch& b) {
  Json j;
  j["graphs"] = Json::array();
  for (const auto& g : b.graphs) j["graphs"].push_back(graph_to_json(g));
  j["graph_labels"] = b.labels;
  j["num_classes"] = b.num_classes;
  return j;
}

inline GraphBatch batch_from_json(const Json& j) {
  for (const auto& [k, v] : j.items()) {
    if (k != "graphs" && k != "graph_labels" && k != "num_classes") throw FormatError("unknown batch key '" + k + "'");
  }
  GraphBatch b;
  for (const auto& g : j.at("graphs")) b.graphs.push_back(graph_from_json(g));
  b.labels = j.at("graph_labels").get<std::vector<int>>();
  if (b.labels.size() != b.graphs.size()) throw FormatError("one graph label per graph required");
  int mx = -1;
  for (int y : b.labels) mx = std::max(mx, y);
  b.num_classes = j.value("num_classes", mx + 1);
  return b;
}

inline Json read_json(const std::filesystem::path& p) {
  auto in = detail::open_or_throw(p);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& p, const Json& j) {
  detail::make_parent_dirs(p);
  std::ofstream out(p);
  if (!out) throw FormatError("cannot write " + p.string());
  out << j.dump() << '\n';
}

inline void save_graph(const std::filesystem::path& p, const Graph& g) { write_json(p, graph_to_json(g)); }
inline Graph load_graph(const std::filesystem::path& p) { return graph_from_json(read_json(p)); }

}  // namespace smoothkit

#endif  // SMOOTHKIT_IO_HPP
