// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmnas/nn.hpp"
#include "mmnas/tensor.hpp"

namespace mmnas {

// The eight candidate operations on a cell edge. Order is load-bearing:
// architecture weight columns, discretization tie-breaks, and genotype
// serialization all use it.
enum class DartsOp : int {
  SepConv3x3 = 0,
  SepConv5x5 = 1,
  DilConv3x3 = 2,
  DilConv5x5 = 3,
  MaxPool3x3 = 4,
  AvgPool3x3 = 5,
  Identity = 6,
  Zero = 7,
};

constexpr int kNumOps = 8;
constexpr int kCellIntermediates = 4;
constexpr int kCellEdges = 14;  // 2 + 3 + 4 + 5

const char* darts_op_name(DartsOp op);
DartsOp darts_op_from_name(const std::string& name);

// Edge (node t, predecessor i) lives at flat index edge_offset(t) + i,
// t in [0,4), i in [0, t+2).
inline int edge_offset(int node) { return node * (node + 3) / 2; }

struct GenotypeEdge {
  int pred = 0;
  DartsOp op = DartsOp::SepConv3x3;

  bool operator==(const GenotypeEdge&) const = default;
};

// Discrete cell description: per intermediate node of each cell kind,
// exactly two (predecessor, op) pairs, ops never zero.
struct Genotype {
  std::vector<GenotypeEdge> normal;  // 8 entries, node t owns entries 2t and 2t+1
  std::vector<GenotypeEdge> reduce;

  bool operator==(const Genotype&) const = default;
};

enum class CellKind { Normal, Reduce };

void validate_genotype(const Genotype& g);
std::string genotype_to_json(const Genotype& g);
Genotype genotype_from_json(const std::string& text);
void save_genotype(const std::string& path, const Genotype& g);
Genotype load_genotype(const std::string& path);

// Deterministic DOT digraph of one cell: nodes c_{k-2}, c_{k-1}, 0..3, c_k;
// a labeled edge per kept (predecessor, op) and unlabeled concat edges into
// c_k.
std::string export_genotype_dot(const Genotype& g, CellKind kind = CellKind::Normal);

// Continuous architecture weights, one row per edge, one column per op,
// shared across all cells of the same kind.
template <typename S>
struct ArchParams {
  Tensor<S> normal;  // [14, 8]
  Tensor<S> reduce;  // [14, 8]

  ArchParams() = default;
  explicit ArchParams(RngStream rng)
      : normal(Tensor<S>::randn({kCellEdges, kNumOps}, rng, 1e-3, true)),
        reduce(Tensor<S>::randn({kCellEdges, kNumOps}, rng, 1e-3, true)) {}

  void visit(const std::string& prefix, ParamVisitor<S>& v) {
    v.param(prefix + ".normal", normal);
    v.param(prefix + ".reduce", reduce);
  }
};

// Argmax discretization. The zero op is excluded from both the per-edge
// argmax and the per-node top-2 edge retention; edges are ranked by the
// softmax weight of their chosen op so the decision is invariant to
// per-edge constant shifts. Ties break toward the lower op index, then the
// lower predecessor index.
template <typename S>
std::vector<GenotypeEdge> discretize_one(const Tensor<S>& alpha) {
  if (alpha.rank() != 2 || alpha.dim(0) != kCellEdges || alpha.dim(1) != kNumOps) {
    throw std::invalid_argument("discretize: expected [14,8] architecture weights, got " +
                                shape_str(alpha.shape()));
  }
  std::vector<GenotypeEdge> out;
  for (int t = 0; t < kCellIntermediates; ++t) {
    struct Cand {
      int pred;
      int op;
      double weight;
    };
    std::vector<Cand> cands;
    for (int i = 0; i < t + 2; ++i) {
      const int e = edge_offset(t) + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int o = 0; o < kNumOps; ++o) mx = std::max(mx, static_cast<double>(alpha.at({e, o})));
      double z = 0.0;
      for (int o = 0; o < kNumOps; ++o) z += std::exp(static_cast<double>(alpha.at({e, o})) - mx);
      int best_op = -1;
      double best_w = 0.0;
      for (int o = 0; o < kNumOps; ++o) {
        if (o == static_cast<int>(DartsOp::Zero)) continue;
        const double w = std::exp(static_cast<double>(alpha.at({e, o})) - mx) / z;
        if (best_op < 0 || w > best_w) {
          best_op = o;
          best_w = w;
        }
      }
      cands.push_back({i, best_op, best_w});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.weight != b.weight) return a.weight > b.weight;
      if (a.op != b.op) return a.op < b.op;
      return a.pred < b.pred;
    });
    GenotypeEdge e0{cands[0].pred, static_cast<DartsOp>(cands[0].op)};
    GenotypeEdge e1{cands[1].pred, static_cast<DartsOp>(cands[1].op)};
    if (e1.pred < e0.pred) std::swap(e0, e1);
    out.push_back(e0);
    out.push_back(e1);
  }
  return out;
}

template <typename S>
Genotype discretize(const ArchParams<S>& a) {
  Genotype g;
  g.normal = discretize_one(a.normal);
  g.reduce = discretize_one(a.reduce);
  return g;
}

// ---------------------------------------------------------------------------
// Candidate operations
// ---------------------------------------------------------------------------

template <typename S>
struct CellOp {
  virtual ~CellOp() = default;
  virtual Tensor<S> forward(const Tensor<S>& x, bool training) = 0;
  virtual void visit(const std::string&, ParamVisitor<S>&) {}
};

// ReLU -> conv -> channel norm, the block layout every parametric op uses.
template <typename S>
struct ReluConvBn final : CellOp<S> {
  Conv2dLayer<S> conv;
  BatchNorm2dLayer<S> bn;

  ReluConvBn(int in_c, int out_c, int kernel, int stride, int padding, RngStream rng)
      : conv(in_c, out_c, kernel, {.stride = stride, .padding = padding}, rng), bn(out_c) {}

  Tensor<S> forward(const Tensor<S>& x, bool training) override {
    return bn.forward(conv.forward(relu(x)), training);
  }
  void visit(const std::string& p, ParamVisitor<S>& v) override {
    conv.visit(p + ".conv", v);
    bn.visit(p + ".bn", v);
  }
};

// Depthwise k x k followed by 1 x 1 pointwise; dilation > 1 gives the
// dilated variant. Padding keeps spatial size at stride 1.
template <typename S>
struct SepConv final : CellOp<S> {
  Conv2dLayer<S> depthwise, pointwise;
  BatchNorm2dLayer<S> bn;

  SepConv(int channels, int kernel, int stride, int dilation, RngStream rng)
      : depthwise(channels, channels, kernel,
                  {.stride = stride,
                   .padding = dilation * (kernel - 1) / 2,
                   .dilation = dilation,
                   .groups = channels},
                  rng.split("dw")),
        pointwise(channels, channels, 1, {}, rng.split("pw")),
        bn(channels) {}

  Tensor<S> forward(const Tensor<S>& x, bool training) override {
    return bn.forward(pointwise.forward(depthwise.forward(relu(x))), training);
  }
  void visit(const std::string& p, ParamVisitor<S>& v) override {
    depthwise.visit(p + ".dw", v);
    pointwise.visit(p + ".pw", v);
    bn.visit(p + ".bn", v);
  }
};

template <typename S>
struct PoolOp final : CellOp<S> {
  PoolKind kind;
  int stride;

  PoolOp(PoolKind k, int stride) : kind(k), stride(stride) {}

  Tensor<S> forward(const Tensor<S>& x, bool) override { return pool2d(x, kind, 3, stride, 1); }
};

template <typename S>
struct IdentityOp final : CellOp<S> {
  Tensor<S> forward(const Tensor<S>& x, bool) override { return x; }
};

// Stride-2 identity: relu, then two 1x1 stride-2 convs over the original
// and the one-pixel-shifted image, channel-concatenated and normalized.
template <typename S>
struct FactorizedReduce final : CellOp<S> {
  Conv2dLayer<S> conv1, conv2;
  BatchNorm2dLayer<S> bn;

  FactorizedReduce(int in_c, int out_c, RngStream rng)
      : conv1(in_c, out_c / 2, 1, {.stride = 2}, rng.split("c1")),
        conv2(in_c, out_c - out_c / 2, 1, {.stride = 2}, rng.split("c2")),
        bn(out_c) {
    if (out_c < 2) throw std::invalid_argument("factorized reduce needs at least 2 output channels");
  }

  Tensor<S> forward(const Tensor<S>& x, bool training) override {
    auto a = relu(x);
    auto y1 = conv1.forward(a);
    auto y2 = conv2.forward(slice2d(a, 1, 1));
    return bn.forward(concat<S>({y1, y2}, 1), training);
  }
  void visit(const std::string& p, ParamVisitor<S>& v) override {
    conv1.visit(p + ".c1", v);
    conv2.visit(p + ".c2", v);
    bn.visit(p + ".bn", v);
  }
};

template <typename S>
struct ZeroOp final : CellOp<S> {
  int stride;
  explicit ZeroOp(int stride) : stride(stride) {}

  Tensor<S> forward(const Tensor<S>& x, bool) override {
    if (stride == 1) return Tensor<S>::zeros(x.shape());
    Shape s = x.shape();
    s[2] = (s[2] + stride - 1) / stride;
    s[3] = (s[3] + stride - 1) / stride;
    return Tensor<S>::zeros(s);
  }
};

template <typename S>
std::unique_ptr<CellOp<S>> make_cell_op(DartsOp kind, int channels, int stride, RngStream rng) {
  switch (kind) {
    case DartsOp::SepConv3x3: return std::make_unique<SepConv<S>>(channels, 3, stride, 1, rng);
    case DartsOp::SepConv5x5: return std::make_unique<SepConv<S>>(channels, 5, stride, 1, rng);
    case DartsOp::DilConv3x3: return std::make_unique<SepConv<S>>(channels, 3, stride, 2, rng);
    case DartsOp::DilConv5x5: return std::make_unique<SepConv<S>>(channels, 5, stride, 2, rng);
    case DartsOp::MaxPool3x3: return std::make_unique<PoolOp<S>>(PoolKind::Max, stride);
    case DartsOp::AvgPool3x3: return std::make_unique<PoolOp<S>>(PoolKind::Avg, stride);
    case DartsOp::Identity:
      if (stride == 1) return std::make_unique<IdentityOp<S>>();
      return std::make_unique<FactorizedReduce<S>>(channels, channels, rng);
    case DartsOp::Zero: return std::make_unique<ZeroOp<S>>(stride);
  }
  throw std::invalid_argument("unknown cell op");
}

// ---------------------------------------------------------------------------
// Mixed operation and cells
// ---------------------------------------------------------------------------

// Softmax-weighted sum of all eight candidate ops on one edge. `weights`
// is the softmaxed [14,8] matrix for this cell kind; coupling goes through
// scale_element so both x and the architecture weights receive gradients.
template <typename S>
struct MixedOp {
  std::array<std::unique_ptr<CellOp<S>>, kNumOps> ops;

  MixedOp(int channels, int stride, RngStream rng) {
    for (int o = 0; o < kNumOps; ++o) {
      ops[static_cast<std::size_t>(o)] = make_cell_op<S>(static_cast<DartsOp>(o), channels, stride,
                                                         rng.split(darts_op_name(static_cast<DartsOp>(o))));
    }
  }

  Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& weights, int edge, bool training) {
    Tensor<S> acc;
    for (int o = 0; o < kNumOps; ++o) {
      auto y = ops[static_cast<std::size_t>(o)]->forward(x, training);
      auto term = scale_element(y, weights, static_cast<std::int64_t>(edge) * kNumOps + o);
      acc = acc.valid() ? add(acc, term) : term;
    }
    return acc;
  }

  void visit(const std::string& p, ParamVisitor<S>& v) {
    for (int o = 0; o < kNumOps; ++o)
      ops[static_cast<std::size_t>(o)]->visit(p + "." + darts_op_name(static_cast<DartsOp>(o)), v);
  }
};

// One searched cell: 2 input nodes, 4 intermediates (sum over predecessor
// edges), output = channel concat of the intermediates. In reduce cells
// edges leaving the input nodes use stride 2.
template <typename S>
struct Cell {
  bool reduction = false;
  std::unique_ptr<CellOp<S>> pre0, pre1;
  bool search_mode = true;

  std::vector<MixedOp<S>> mixed;  // search mode: one per edge

  struct FixedEdge {
    int pred;
    std::unique_ptr<CellOp<S>> op;
  };
  std::vector<FixedEdge> fixed;  // fixed mode: 2 per node

  Cell(int c_prev_prev, int c_prev, int channels, bool reduce_cell, bool reduction_prev,
       const std::vector<GenotypeEdge>* genotype_edges, RngStream rng)
      : reduction(reduce_cell), search_mode(genotype_edges == nullptr) {
    if (reduction_prev) {
      pre0 = std::make_unique<FactorizedReduce<S>>(c_prev_prev, channels, rng.split("pre0"));
    } else {
      pre0 = std::make_unique<ReluConvBn<S>>(c_prev_prev, channels, 1, 1, 0, rng.split("pre0"));
    }
    pre1 = std::make_unique<ReluConvBn<S>>(c_prev, channels, 1, 1, 0, rng.split("pre1"));

    if (search_mode) {
      for (int t = 0; t < kCellIntermediates; ++t) {
        for (int i = 0; i < t + 2; ++i) {
          const int stride = reduction && i < 2 ? 2 : 1;
          mixed.emplace_back(channels, stride,
                             rng.split("edge" + std::to_string(edge_offset(t) + i)));
        }
      }
    } else {
      validate_genotype_edges(*genotype_edges);
      for (int t = 0; t < kCellIntermediates; ++t) {
        for (int slot = 0; slot < 2; ++slot) {
          const GenotypeEdge& ge = (*genotype_edges)[static_cast<std::size_t>(2 * t + slot)];
          const int stride = reduction && ge.pred < 2 ? 2 : 1;
          FixedEdge fe;
          fe.pred = ge.pred;
          fe.op = make_cell_op<S>(ge.op, channels, stride,
                                  rng.split("node" + std::to_string(t) + "_" + std::to_string(slot)));
          fixed.push_back(std::move(fe));
        }
      }
    }
  }

  static void validate_genotype_edges(const std::vector<GenotypeEdge>& edges) {
    if (edges.size() != 2 * kCellIntermediates) {
      throw std::invalid_argument("genotype must have 8 edges per cell");
    }
  }

  Tensor<S> forward(const Tensor<S>& s0, const Tensor<S>& s1, const Tensor<S>& weights,
                    bool training) {
    std::vector<Tensor<S>> states;
    states.push_back(pre0->forward(s0, training));
    states.push_back(pre1->forward(s1, training));

    for (int t = 0; t < kCellIntermediates; ++t) {
      Tensor<S> node;
      if (search_mode) {
        for (int i = 0; i < t + 2; ++i) {
          const int e = edge_offset(t) + i;
          auto term = mixed[static_cast<std::size_t>(e)].forward(states[static_cast<std::size_t>(i)],
                                                                 weights, e, training);
          node = node.valid() ? add(node, term) : term;
        }
      } else {
        for (int slot = 0; slot < 2; ++slot) {
          auto& fe = fixed[static_cast<std::size_t>(2 * t + slot)];
          auto term = fe.op->forward(states[static_cast<std::size_t>(fe.pred)], training);
          node = node.valid() ? add(node, term) : term;
        }
      }
      states.push_back(node);
    }
    return concat<S>({states[2], states[3], states[4], states[5]}, 1);
  }

  void visit(const std::string& p, ParamVisitor<S>& v) {
    pre0->visit(p + ".pre0", v);
    pre1->visit(p + ".pre1", v);
    if (search_mode) {
      for (std::size_t e = 0; e < mixed.size(); ++e) mixed[e].visit(p + ".edge" + std::to_string(e), v);
    } else {
      for (std::size_t e = 0; e < fixed.size(); ++e) {
        if (fixed[e].op) fixed[e].op->visit(p + ".fixed" + std::to_string(e), v);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Stacked network
// ---------------------------------------------------------------------------

struct NetworkConfig {
  int layers = 8;
  int init_channels = 16;
  int in_channels = 3;
  int stem_kernel = 7;
  int stem_stride = 4;
  int out_dim = 64;
};

// Stem conv, `layers` cells with reduce cells at floor(L/3) and
// floor(2L/3) (channels double there), global average pooling, affine
// projection to the 64-dim acoustic representation.
template <typename S>
struct Network {
  NetworkConfig cfg;
  Conv2dLayer<S> stem;
  BatchNorm2dLayer<S> stem_bn;
  std::vector<Cell<S>> cells;
  LinearLayer<S> proj;
  std::optional<ArchParams<S>> alphas;  // search mode only
  std::optional<Genotype> genotype;     // fixed mode only

  static std::pair<int, int> reduce_positions(int layers) {
    return {layers / 3, 2 * layers / 3};
  }

  Network(const NetworkConfig& config, std::optional<Genotype> fixed, RngStream rng) : cfg(config) {
    if (cfg.layers < 2) {
      throw std::invalid_argument("network needs at least 2 cells, got " + std::to_string(cfg.layers));
    }
    if (cfg.init_channels < 2 || cfg.init_channels % 2 != 0) {
      throw std::invalid_argument("init_channels must be even and >= 2, got " +
                                  std::to_string(cfg.init_channels));
    }
    stem = Conv2dLayer<S>(cfg.in_channels, cfg.init_channels, cfg.stem_kernel,
                          {.stride = cfg.stem_stride, .padding = cfg.stem_kernel / 2},
                          rng.split("stem"));
    stem_bn = BatchNorm2dLayer<S>(cfg.init_channels);

    if (fixed.has_value()) {
      validate_genotype(*fixed);
      genotype = std::move(fixed);
    } else {
      alphas.emplace(rng.split("alphas"));
    }

    const auto [r1, r2] = reduce_positions(cfg.layers);
    int c_pp = cfg.init_channels, c_p = cfg.init_channels, c_curr = cfg.init_channels;
    bool reduction_prev = false;
    for (int i = 0; i < cfg.layers; ++i) {
      const bool reduce_cell = i == r1 || i == r2;
      if (reduce_cell) c_curr *= 2;
      const std::vector<GenotypeEdge>* edges = nullptr;
      if (genotype.has_value()) edges = reduce_cell ? &genotype->reduce : &genotype->normal;
      cells.emplace_back(c_pp, c_p, c_curr, reduce_cell, reduction_prev, edges,
                         rng.split("cell" + std::to_string(i)));
      reduction_prev = reduce_cell;
      c_pp = c_p;
      c_p = kCellIntermediates * c_curr;
    }
    proj = LinearLayer<S>(c_p, cfg.out_dim, rng.split("proj"));
  }

  bool search_mode() const { return alphas.has_value(); }

  // x: [N, 3, H, W] -> z_v: [N, out_dim]
  Tensor<S> forward(const Tensor<S>& x, bool training) {
    Tensor<S> w_normal, w_reduce;
    if (alphas.has_value()) {
      w_normal = softmax(alphas->normal, 1);
      w_reduce = softmax(alphas->reduce, 1);
    }
    auto s0 = stem_bn.forward(stem.forward(x), training);
    auto s1 = s0;
    for (auto& cell : cells) {
      auto next = cell.forward(s0, s1, cell.reduction ? w_reduce : w_normal, training);
      s0 = s1;
      s1 = next;
    }
    return proj.forward(gap2d(s1));
  }

  // weights only; architecture parameters are visited separately
  void visit(const std::string& p, ParamVisitor<S>& v) {
    stem.visit(p + ".stem", v);
    stem_bn.visit(p + ".stem_bn", v);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i].visit(p + ".cell" + std::to_string(i), v);
    proj.visit(p + ".proj", v);
  }

  void visit_arch(const std::string& p, ParamVisitor<S>& v) {
    if (alphas.has_value()) alphas->visit(p + ".alphas", v);
  }
};

}  // namespace mmnas
