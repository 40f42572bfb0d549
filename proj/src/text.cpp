// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#include "mmnas/text.hpp"

#include <cctype>
#include <cstdint>

namespace mmnas {

int Vocabulary::token_id(const std::string& token) const {
  std::uint64_t h = 14695981039346656037ULL;  // FNV-1a 64
  for (char c : token) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h *= 1099511628211ULL;
  }
  return 4 + static_cast<int>(h % static_cast<std::uint64_t>(size - 4));
}

TokenSequence tokenize(const std::string& transcript, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.push_back(Vocabulary::kCls);

  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      ids.push_back(vocab.token_id(cur));
      cur.clear();
    }
  };
  for (unsigned char c : transcript) {
    // alnum runs form tokens; non-ASCII bytes stay inside tokens so UTF-8
    // words survive; everything else separates
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();

  // truncate so [cls] + body + [sep] is at most the fixed length
  if (static_cast<int>(ids.size()) > TokenSequence::kLength - 1) {
    ids.resize(TokenSequence::kLength - 1);
  }
  ids.push_back(Vocabulary::kSep);

  TokenSequence seq;
  seq.input_ids = ids;
  seq.attention_mask.assign(ids.size(), 1);
  seq.input_ids.resize(TokenSequence::kLength, Vocabulary::kPad);
  seq.attention_mask.resize(TokenSequence::kLength, 0);
  return seq;
}

}  // namespace mmnas
