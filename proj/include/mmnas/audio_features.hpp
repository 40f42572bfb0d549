// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <complex>
#include <string>
#include <vector>

#include "mmnas/wav.hpp"

namespace mmnas {

// Analysis settings. The paper-level contract is 224 mel bands, hop 1024,
// Hann window, 224x224x3 output; the rest are fixed toolchain-style
// defaults.
struct AudioFeatureConfig {
  int target_sample_rate = 22050;
  int n_fft = 2048;
  int hop_length = 1024;
  int n_mels = 224;
  double fmin = 0.0;
  double fmax = -1.0;  // <=0 means sample_rate / 2
  int delta_width = 9;
  double top_db = 80.0;
  int image_size = 224;
};

// 3-channel feature image, channel-last (height x width x channels),
// channels ordered (log-mel, delta, delta-delta).
struct FeatureImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  float at(int i, int j, int c) const {
    return data[(static_cast<std::size_t>(i) * width + j) * channels + c];
  }
  float& at(int i, int j, int c) {
    return data[(static_cast<std::size_t>(i) * width + j) * channels + c];
  }
};

// Windowed-sinc resampling to `target_rate`; identity when rates match.
std::vector<float> resample_sinc(const std::vector<float>& samples, int source_rate, int target_rate);

// Centered STFT: reflect padding by n_fft/2, periodic Hann window, radix-2
// FFT. Returns (n_fft/2 + 1) x frames with frames = 1 + floor(len / hop).
Eigen::MatrixXcd stft(const AudioClip& clip, int n_fft, int hop_length);

// Triangular mel filterbank, n_mels x (n_fft/2 + 1), HTK mel scale
// mel(f) = 2595 log10(1 + f/700), each filter area-normalized by
// 2 / (upper - lower) in Hz.
Eigen::MatrixXd mel_filterbank(int sample_rate, int n_fft, int n_mels, double fmin, double fmax);

// dB-scaled mel power spectrogram, referenced to the peak and clipped to a
// `top_db` dynamic range. The clip is resampled to the configured rate
// first. Output is n_mels x frames.
Eigen::MatrixXd log_mel_spectrogram(const AudioClip& clip, const AudioFeatureConfig& cfg = {});

// Local least-squares slope along time (columns), edge-replicated; order 2
// applies the operator twice.
Eigen::MatrixXd delta(const Eigen::MatrixXd& features, int width = 9, int order = 1);

// Corner-aligned bilinear resize.
Eigen::MatrixXd resize_bilinear(const Eigen::MatrixXd& src, int out_rows, int out_cols);

// Full pipeline: log-mel + delta + delta-delta, resized to
// image_size x image_size, each channel min-max normalized to [0,1]
// (constant channels map to 0.5).
FeatureImage build_feature_image(const AudioClip& clip, const AudioFeatureConfig& cfg = {});

// Feature cache format: magic "DFIM", u32 height/width/channels
// little-endian, f32 little-endian row-major payload.
void write_feature_image(const std::string& path, const FeatureImage& img);
FeatureImage read_feature_image(const std::string& path);

}  // namespace mmnas
