// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "mmnas/nn.hpp"
#include "mmnas/tensor.hpp"

namespace mmnas {

// Hashing vocabulary standing in for a pretrained tokenizer. Reserved ids
// never collide with hashed ids; hashing is FNV-1a 64 into [4, size).
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;

  int size = 8192;

  int token_id(const std::string& token) const;
};

// Fixed length 512: [cls] tokens... [sep] then pad. attention_mask is a
// prefix of ones covering cls/tokens/sep.
struct TokenSequence {
  static constexpr int kLength = 512;
  std::vector<int> input_ids;
  std::vector<int> attention_mask;
};

// Lowercases, splits on whitespace/punctuation, hashes into the
// vocabulary, truncates so the total length including [cls] and the final
// [sep] is exactly 512.
TokenSequence tokenize(const std::string& transcript, const Vocabulary& vocab);

// Trainable stand-in for the pretrained language model: mask-weighted mean
// of token embeddings, affine -> tanh -> affine to 64. Same input/output
// contract as a transformer encoder so one can be swapped in behind this
// signature.
template <typename S>
struct TextEncoder {
  int vocab_size = 8192;
  int embed_dim = 128;
  int hidden_dim = 64;
  int out_dim = 64;

  Tensor<S> embeddings;  // [V, embed_dim]
  LinearLayer<S> proj1;  // embed_dim -> hidden_dim
  LinearLayer<S> proj2;  // hidden_dim -> out_dim

  TextEncoder() = default;
  TextEncoder(const Vocabulary& vocab, RngStream rng)
      : vocab_size(vocab.size),
        embeddings(Tensor<S>::randn({vocab.size, 128}, rng, 0.02, true)),
        proj1(128, 64, rng.split("proj1")),
        proj2(64, 64, rng.split("proj2")) {}

  // [B, out_dim]
  Tensor<S> forward(const std::vector<TokenSequence>& batch) const {
    const int B = static_cast<int>(batch.size());
    std::vector<int> ids, mask;
    ids.reserve(static_cast<std::size_t>(B) * TokenSequence::kLength);
    mask.reserve(ids.capacity());
    for (const auto& seq : batch) {
      ids.insert(ids.end(), seq.input_ids.begin(), seq.input_ids.end());
      mask.insert(mask.end(), seq.attention_mask.begin(), seq.attention_mask.end());
    }
    auto pooled = embedding_bag_mean(embeddings, ids, mask, B, TokenSequence::kLength);
    return proj2.forward(tanh_op(proj1.forward(pooled)));
  }

  void visit(const std::string& prefix, ParamVisitor<S>& v) {
    v.param(prefix + ".embeddings", embeddings);
    proj1.visit(prefix + ".proj1", v);
    proj2.visit(prefix + ".proj2", v);
  }
};

}  // namespace mmnas
