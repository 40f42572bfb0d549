// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

namespace mmnas {

// Mono waveform in [-1, 1].
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 0;
};

// Reads PCM 16-bit or IEEE float32 WAV; stereo is averaged to mono.
AudioClip read_wav(const std::string& path);

// Writes mono PCM 16-bit.
void write_wav(const std::string& path, const AudioClip& clip);

}  // namespace mmnas
