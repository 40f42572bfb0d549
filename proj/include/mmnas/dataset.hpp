// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmnas/audio_features.hpp"
#include "mmnas/text.hpp"

namespace mmnas {

// One subject: the 224x224x3 acoustic feature image, the 512-token
// id/mask pair, and a binary label (1 = screening positive).
struct Sample {
  std::string id;
  FeatureImage image;
  TokenSequence tokens;
  int label = 0;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct LoadOptions {
  AudioFeatureConfig audio;
  Vocabulary vocab;
  bool use_feature_cache = true;   // read <split>/features/<id>.dfim when present
  bool write_feature_cache = false;
};

// Directory layout: root/{train,test}/audio/<id>.wav,
// root/{train,test}/transcripts/<id>.txt, root/{train,test}/labels.csv with
// header "id,label".
Dataset load_dataset(const std::string& root, const LoadOptions& opts = {});

// Only computes/caches feature images for every sample; returns the number
// of images written.
int precompute_features(const std::string& root, const AudioFeatureConfig& audio, bool parallel);

// Latent-bit rule tying the label to the modalities.
enum class CrossmodalRule { AudioOnly, TextOnly, Xor };

const char* crossmodal_rule_name(CrossmodalRule r);
CrossmodalRule crossmodal_rule_from_name(const std::string& name);

struct SyntheticSpec {
  int train_pos = 78;
  int train_neg = 78;
  int test_pos = 24;
  int test_neg = 24;
  CrossmodalRule rule = CrossmodalRule::Xor;
  std::uint64_t seed = 0;
  int sample_rate = 22050;
  double duration_seconds = 1.2;
};

// Writes a corpus in the loader's directory format. Audio encodes a latent
// bit as a pure tone (0) versus a band of noise (1); transcripts encode a
// bit through hesitation-marker words; the label follows the rule. Byte
// deterministic for a fixed spec.
void generate_synthetic_dataset(const std::string& root, const SyntheticSpec& spec);

// The latent audio/text bits assigned to a synthetic sample, reproduced
// from the spec; used by tests and the data-quality oracle.
struct SyntheticAssignment {
  std::string id;
  int audio_bit;
  int text_bit;
  int label;
};
std::vector<SyntheticAssignment> synthetic_assignments(const SyntheticSpec& spec, bool train_split);

}  // namespace mmnas
