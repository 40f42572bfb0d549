// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "mmnas/nn.hpp"
#include "mmnas/tensor.hpp"

namespace mmnas {

enum class FusionMethod { Tucker, Mfb, Mfh, Block, Concat };

inline const char* fusion_method_name(FusionMethod m) {
  switch (m) {
    case FusionMethod::Tucker: return "tucker";
    case FusionMethod::Mfb: return "mfb";
    case FusionMethod::Mfh: return "mfh";
    case FusionMethod::Block: return "block";
    case FusionMethod::Concat: return "concat";
  }
  throw std::invalid_argument("unknown fusion method");
}

inline FusionMethod fusion_method_from_name(const std::string& name) {
  for (FusionMethod m : {FusionMethod::Tucker, FusionMethod::Mfb, FusionMethod::Mfh,
                         FusionMethod::Block, FusionMethod::Concat}) {
    if (name == fusion_method_name(m)) return m;
  }
  throw std::invalid_argument("unknown fusion method: " + name);
}

// 64 + 64 -> 16 contract with method-specific internals. The internal
// ranks are tunable (the random-search "fusion hidden dimension" maps onto
// them); defaults keep the per-method budgets small.
struct FusionConfig {
  FusionMethod method = FusionMethod::Block;
  int t_dim = 64;
  int v_dim = 64;
  int out_dim = 16;
  int tucker_rank = 16;  // t' = v'
  int mfb_factor = 5;    // k
  int mfh_depth = 2;     // p
  int block_rank = 32;   // R
  int block_chunks = 4;  // C

  void validate() const {
    if (out_dim != 16) throw std::invalid_argument("fusion out_dim is fixed at 16");
    if (mfb_factor < 1) throw std::invalid_argument("mfb factor k must be >= 1");
    if (mfh_depth < 1) throw std::invalid_argument("mfh depth p must be >= 1");
    if (block_chunks < 1 || block_rank % block_chunks != 0) {
      throw std::invalid_argument("block rank " + std::to_string(block_rank) +
                                  " must be divisible by chunks " + std::to_string(block_chunks));
    }
  }

  // Scales the method-specific internal dimension from one knob.
  void apply_hidden_dim(int hidden) {
    if (hidden < 4) throw std::invalid_argument("fusion hidden dimension must be >= 4");
    tucker_rank = hidden;
    mfb_factor = std::max(1, hidden / 16);
    block_rank = hidden;
    while (block_rank % block_chunks != 0) --block_chunks;
  }
};

template <typename S>
struct FusionModule {
  FusionConfig cfg;

  // tucker: z_f = T x1 (U z_t) x2 (V z_v)
  LinearLayer<S> tucker_u, tucker_v;
  Tensor<S> tucker_core;  // [rank*rank, out]

  // mfb / mfh: per block, h = (P z_t) .* (Q z_v) (.* carry), sum-pooled in
  // windows of k, then signed sqrt and l2 normalization
  std::vector<LinearLayer<S>> mfb_p, mfb_q;
  LinearLayer<S> mfh_out;  // p*out -> out

  // block: per chunk, a small bilinear with its own projections and core
  std::vector<LinearLayer<S>> block_a, block_b;
  std::vector<Tensor<S>> block_cores;  // [chunk_dim*chunk_dim, out]

  // concat: affine 128 -> 16 with relu
  LinearLayer<S> concat_fc;

  FusionModule() = default;

  FusionModule(const FusionConfig& config, RngStream rng) : cfg(config) {
    cfg.validate();
    switch (cfg.method) {
      case FusionMethod::Tucker: {
        tucker_u = LinearLayer<S>(cfg.t_dim, cfg.tucker_rank, rng.split("u"), false);
        tucker_v = LinearLayer<S>(cfg.v_dim, cfg.tucker_rank, rng.split("v"), false);
        tucker_core = Tensor<S>::kaiming_uniform({cfg.tucker_rank * cfg.tucker_rank, cfg.out_dim},
                                                 cfg.tucker_rank * cfg.tucker_rank, rng.split("core"));
        break;
      }
      case FusionMethod::Mfb:
      case FusionMethod::Mfh: {
        const int blocks = cfg.method == FusionMethod::Mfb ? 1 : cfg.mfh_depth;
        const int expanded = cfg.mfb_factor * cfg.out_dim;
        for (int i = 0; i < blocks; ++i) {
          mfb_p.emplace_back(cfg.t_dim, expanded, rng.split("p" + std::to_string(i)), false);
          mfb_q.emplace_back(cfg.v_dim, expanded, rng.split("q" + std::to_string(i)), false);
        }
        if (cfg.method == FusionMethod::Mfh) {
          mfh_out = LinearLayer<S>(blocks * cfg.out_dim, cfg.out_dim, rng.split("out"));
        }
        break;
      }
      case FusionMethod::Block: {
        const int chunk_dim = cfg.block_rank / cfg.block_chunks;
        for (int c = 0; c < cfg.block_chunks; ++c) {
          block_a.emplace_back(cfg.t_dim, chunk_dim, rng.split("a" + std::to_string(c)), false);
          block_b.emplace_back(cfg.v_dim, chunk_dim, rng.split("b" + std::to_string(c)), false);
          block_cores.push_back(Tensor<S>::kaiming_uniform({chunk_dim * chunk_dim, cfg.out_dim},
                                                           chunk_dim * chunk_dim,
                                                           rng.split("core" + std::to_string(c))));
        }
        break;
      }
      case FusionMethod::Concat: {
        concat_fc = LinearLayer<S>(cfg.t_dim + cfg.v_dim, cfg.out_dim, rng.split("fc"));
        break;
      }
    }
  }

  // z_t: [B, 64], z_v: [B, 64] -> [B, 16]
  Tensor<S> forward(const Tensor<S>& z_t, const Tensor<S>& z_v) const {
    if (z_t.rank() != 2 || z_t.dim(1) != cfg.t_dim || z_v.rank() != 2 || z_v.dim(1) != cfg.v_dim) {
      throw std::invalid_argument("fusion expects [B," + std::to_string(cfg.t_dim) + "] and [B," +
                                  std::to_string(cfg.v_dim) + "] inputs, got " +
                                  shape_str(z_t.shape()) + " and " + shape_str(z_v.shape()));
    }
    switch (cfg.method) {
      case FusionMethod::Tucker: {
        auto t1 = tucker_u.forward(z_t);
        auto v1 = tucker_v.forward(z_v);
        return matmul(rowwise_outer(t1, v1), tucker_core);
      }
      case FusionMethod::Mfb: {
        auto h = mul(mfb_p[0].forward(z_t), mfb_q[0].forward(z_v));
        return l2_normalize(signed_sqrt(sum_pool1d(h, cfg.mfb_factor)));
      }
      case FusionMethod::Mfh: {
        Tensor<S> carry;  // h_0 = all-ones: first block multiplies by nothing
        std::vector<Tensor<S>> pooled;
        for (std::size_t i = 0; i < mfb_p.size(); ++i) {
          auto h = mul(mfb_p[i].forward(z_t), mfb_q[i].forward(z_v));
          if (carry.valid()) h = mul(h, carry);
          carry = h;
          pooled.push_back(l2_normalize(signed_sqrt(sum_pool1d(h, cfg.mfb_factor))));
        }
        return mfh_out.forward(pooled.size() == 1 ? pooled[0] : concat<S>(pooled, 1));
      }
      case FusionMethod::Block: {
        Tensor<S> acc;
        for (std::size_t c = 0; c < block_a.size(); ++c) {
          auto xc = block_a[c].forward(z_t);
          auto yc = block_b[c].forward(z_v);
          auto partial = matmul(rowwise_outer(xc, yc), block_cores[c]);
          acc = acc.valid() ? add(acc, partial) : partial;
        }
        return l2_normalize(acc);
      }
      case FusionMethod::Concat: {
        return relu(concat_fc.forward(concat<S>({z_t, z_v}, 1)));
      }
    }
    throw std::invalid_argument("unknown fusion method");
  }

  void visit(const std::string& p, ParamVisitor<S>& v) {
    switch (cfg.method) {
      case FusionMethod::Tucker:
        tucker_u.visit(p + ".u", v);
        tucker_v.visit(p + ".v", v);
        v.param(p + ".core", tucker_core);
        break;
      case FusionMethod::Mfb:
      case FusionMethod::Mfh:
        for (std::size_t i = 0; i < mfb_p.size(); ++i) {
          mfb_p[i].visit(p + ".p" + std::to_string(i), v);
          mfb_q[i].visit(p + ".q" + std::to_string(i), v);
        }
        if (cfg.method == FusionMethod::Mfh) mfh_out.visit(p + ".out", v);
        break;
      case FusionMethod::Block:
        for (std::size_t c = 0; c < block_a.size(); ++c) {
          block_a[c].visit(p + ".a" + std::to_string(c), v);
          block_b[c].visit(p + ".b" + std::to_string(c), v);
          v.param(p + ".core" + std::to_string(c), block_cores[c]);
        }
        break;
      case FusionMethod::Concat:
        concat_fc.visit(p + ".fc", v);
        break;
    }
  }
};

// Two-unit classification head over the fused vector.
template <typename S>
struct Classifier {
  LinearLayer<S> fc;  // in -> 2

  Classifier() = default;
  Classifier(int in_dim, RngStream rng) : fc(in_dim, 2, rng) {}

  Tensor<S> logits(const Tensor<S>& z) const { return fc.forward(z); }

  void visit(const std::string& p, ParamVisitor<S>& v) { fc.visit(p + ".fc", v); }
};

// Predicted class per row: argmax logit, ties toward class 0.
template <typename S>
std::vector<int> predict_classes(const Tensor<S>& logits) {
  const int B = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    int best = 0;
    for (int k = 1; k < K; ++k) {
      if (logits.at({b, k}) > logits.at({b, best})) best = k;
    }
    out[static_cast<std::size_t>(b)] = best;
  }
  return out;
}

}  // namespace mmnas
