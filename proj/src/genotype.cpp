// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#include "mmnas/darts.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mmnas {

const char* darts_op_name(DartsOp op) {
  switch (op) {
    case DartsOp::SepConv3x3: return "sep_conv_3x3";
    case DartsOp::SepConv5x5: return "sep_conv_5x5";
    case DartsOp::DilConv3x3: return "dil_conv_3x3";
    case DartsOp::DilConv5x5: return "dil_conv_5x5";
    case DartsOp::MaxPool3x3: return "max_pool_3x3";
    case DartsOp::AvgPool3x3: return "avg_pool_3x3";
    case DartsOp::Identity: return "identity";
    case DartsOp::Zero: return "zero";
  }
  throw std::invalid_argument("unknown darts op");
}

DartsOp darts_op_from_name(const std::string& name) {
  for (int o = 0; o < kNumOps; ++o) {
    if (name == darts_op_name(static_cast<DartsOp>(o))) return static_cast<DartsOp>(o);
  }
  throw std::invalid_argument("unknown darts op name: " + name);
}

void validate_genotype(const Genotype& g) {
  for (const auto* edges : {&g.normal, &g.reduce}) {
    if (edges->size() != 2 * kCellIntermediates) {
      throw std::invalid_argument("genotype cell must have exactly " +
                                  std::to_string(2 * kCellIntermediates) + " edges, got " +
                                  std::to_string(edges->size()));
    }
    for (int t = 0; t < kCellIntermediates; ++t) {
      const auto& a = (*edges)[static_cast<std::size_t>(2 * t)];
      const auto& b = (*edges)[static_cast<std::size_t>(2 * t + 1)];
      for (const auto& e : {a, b}) {
        if (e.pred < 0 || e.pred >= t + 2) {
          throw std::invalid_argument("genotype node " + std::to_string(t) +
                                      " has predecessor out of range: " + std::to_string(e.pred));
        }
        if (e.op == DartsOp::Zero) {
          throw std::invalid_argument("genotype node " + std::to_string(t) + " uses the zero op");
        }
      }
      if (a.pred == b.pred) {
        throw std::invalid_argument("genotype node " + std::to_string(t) +
                                    " has duplicate predecessor " + std::to_string(a.pred));
      }
    }
  }
}

namespace {

nlohmann::json edges_to_json(const std::vector<GenotypeEdge>& edges) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : edges) arr.push_back({e.pred, darts_op_name(e.op)});
  return arr;
}

std::vector<GenotypeEdge> edges_from_json(const nlohmann::json& arr) {
  std::vector<GenotypeEdge> edges;
  for (const auto& item : arr) {
    if (!item.is_array() || item.size() != 2) throw std::invalid_argument("genotype edge must be [pred, op]");
    GenotypeEdge e;
    e.pred = item[0].get<int>();
    e.op = darts_op_from_name(item[1].get<std::string>());
    edges.push_back(e);
  }
  return edges;
}

}  // namespace

std::string genotype_to_json(const Genotype& g) {
  nlohmann::json j;
  j["normal"] = edges_to_json(g.normal);
  j["reduce"] = edges_to_json(g.reduce);
  return j.dump(2) + "\n";
}

Genotype genotype_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  Genotype g;
  g.normal = edges_from_json(j.at("normal"));
  g.reduce = edges_from_json(j.at("reduce"));
  validate_genotype(g);
  return g;
}

void save_genotype(const std::string& path, const Genotype& g) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << genotype_to_json(g);
}

Genotype load_genotype(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open genotype file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return genotype_from_json(ss.str());
}

std::string export_genotype_dot(const Genotype& g, CellKind kind) {
  const auto& edges = kind == CellKind::Normal ? g.normal : g.reduce;
  validate_genotype(g);

  auto node_name = [](int pred) -> std::string {
    if (pred == 0) return "c_{k-2}";
    if (pred == 1) return "c_{k-1}";
    return std::to_string(pred - 2);
  };

  std::ostringstream os;
  os << "digraph " << (kind == CellKind::Normal ? "normal_cell" : "reduce_cell") << " {\n";
  os << "  rankdir=LR;\n";
  os << "  \"c_{k-2}\" [shape=box];\n";
  os << "  \"c_{k-1}\" [shape=box];\n";
  for (int t = 0; t < kCellIntermediates; ++t) os << "  \"" << t << "\" [shape=ellipse];\n";
  os << "  \"c_k\" [shape=box];\n";
  for (int t = 0; t < kCellIntermediates; ++t) {
    for (int slot = 0; slot < 2; ++slot) {
      const auto& e = edges[static_cast<std::size_t>(2 * t + slot)];
      os << "  \"" << node_name(e.pred) << "\" -> \"" << t << "\" [label=\"" << darts_op_name(e.op)
         << "\"];\n";
    }
  }
  for (int t = 0; t < kCellIntermediates; ++t) os << "  \"" << t << "\" -> \"c_k\";\n";
  os << "}\n";
  return os.str();
}

}  // namespace mmnas
