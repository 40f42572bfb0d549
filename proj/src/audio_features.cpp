// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#include "mmnas/audio_features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mmnas {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kAmin = 1e-10;

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 Cooley-Tukey.
void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

// Mirror index without repeating the edge sample (librosa-style reflect).
std::size_t reflect_index(long long idx, long long n) {
  if (n == 1) return 0;
  const long long period = 2 * (n - 1);
  long long m = idx % period;
  if (m < 0) m += period;
  if (m >= n) m = period - m;
  return static_cast<std::size_t>(m);
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace

std::vector<float> resample_sinc(const std::vector<float>& samples, int source_rate, int target_rate) {
  if (source_rate <= 0 || target_rate <= 0) throw std::invalid_argument("sample rates must be positive");
  if (samples.empty()) throw std::invalid_argument("cannot resample an empty clip");
  if (source_rate == target_rate) return samples;

  const double ratio = static_cast<double>(target_rate) / source_rate;
  const double cutoff = 0.95 * std::min(1.0, ratio);  // of source Nyquist
  const int half_taps = 32;
  const std::size_t out_len =
      static_cast<std::size_t>(std::max(1.0, std::floor(samples.size() * ratio)));

  std::vector<float> out(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    const double t = static_cast<double>(i) / ratio;  // position in source samples
    const long long center = static_cast<long long>(std::floor(t));
    double acc = 0.0;
    for (long long m = center - half_taps + 1; m <= center + half_taps; ++m) {
      if (m < 0 || m >= static_cast<long long>(samples.size())) continue;
      const double x = t - static_cast<double>(m);
      double sinc = cutoff;
      if (x != 0.0) sinc = std::sin(kPi * cutoff * x) / (kPi * x);
      const double win = 0.5 + 0.5 * std::cos(kPi * x / half_taps);  // Hann lobe over the taps
      acc += static_cast<double>(samples[static_cast<std::size_t>(m)]) * sinc * win;
    }
    out[i] = static_cast<float>(acc);
  }
  return out;
}

Eigen::MatrixXcd stft(const AudioClip& clip, int n_fft, int hop_length) {
  if (!is_power_of_two(n_fft)) {
    throw std::invalid_argument("stft: n_fft must be a power of two, got " + std::to_string(n_fft));
  }
  if (hop_length <= 0) throw std::invalid_argument("stft: hop length must be positive");
  if (clip.samples.empty()) throw std::invalid_argument("stft: empty clip");

  const long long n = static_cast<long long>(clip.samples.size());
  const int bins = n_fft / 2 + 1;
  const int frames = 1 + static_cast<int>(n / hop_length);

  // periodic Hann
  std::vector<double> window(static_cast<std::size_t>(n_fft));
  for (int i = 0; i < n_fft; ++i)
    window[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n_fft);

  Eigen::MatrixXcd out(bins, frames);
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(n_fft));
  const long long pad = n_fft / 2;
  for (int f = 0; f < frames; ++f) {
    const long long start = static_cast<long long>(f) * hop_length - pad;
    for (int i = 0; i < n_fft; ++i) {
      const long long idx = start + i;
      const double s = (idx >= 0 && idx < n)
                           ? static_cast<double>(clip.samples[static_cast<std::size_t>(idx)])
                           : static_cast<double>(clip.samples[reflect_index(idx, n)]);
      buf[static_cast<std::size_t>(i)] = s * window[static_cast<std::size_t>(i)];
    }
    fft_radix2(buf);
    for (int k = 0; k < bins; ++k) out(k, f) = buf[static_cast<std::size_t>(k)];
  }
  return out;
}

Eigen::MatrixXd mel_filterbank(int sample_rate, int n_fft, int n_mels, double fmin, double fmax) {
  if (fmax <= 0.0) fmax = sample_rate / 2.0;
  if (n_mels < 1) throw std::invalid_argument("mel_filterbank: need at least one filter");
  if (fmin < 0.0 || fmin >= fmax || fmax > sample_rate / 2.0 + 1e-9) {
    throw std::invalid_argument("mel_filterbank: invalid frequency range [" + std::to_string(fmin) +
                                ", " + std::to_string(fmax) + "] for sample rate " +
                                std::to_string(sample_rate));
  }
  const int bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);

  std::vector<double> edges(static_cast<std::size_t>(n_mels) + 2);
  for (int m = 0; m < n_mels + 2; ++m)
    edges[static_cast<std::size_t>(m)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * m / (n_mels + 1));

  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(n_mels, bins);
  for (int m = 0; m < n_mels; ++m) {
    const double lower = edges[static_cast<std::size_t>(m)];
    const double center = edges[static_cast<std::size_t>(m) + 1];
    const double upper = edges[static_cast<std::size_t>(m) + 2];
    const double norm = 2.0 / (upper - lower);
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n_fft;
      double w = 0.0;
      if (f > lower && f < upper) {
        w = f <= center ? (f - lower) / (center - lower) : (upper - f) / (upper - center);
      }
      fb(m, k) = w * norm;
    }
  }
  return fb;
}

Eigen::MatrixXd log_mel_spectrogram(const AudioClip& clip, const AudioFeatureConfig& cfg) {
  if (clip.samples.empty() || clip.sample_rate <= 0) {
    throw std::invalid_argument("log_mel_spectrogram: invalid clip");
  }
  AudioClip work;
  work.sample_rate = cfg.target_sample_rate;
  work.samples = resample_sinc(clip.samples, clip.sample_rate, cfg.target_sample_rate);

  const Eigen::MatrixXcd spec = stft(work, cfg.n_fft, cfg.hop_length);
  const Eigen::MatrixXd power = spec.cwiseAbs2();
  const Eigen::MatrixXd fb =
      mel_filterbank(cfg.target_sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax);
  Eigen::MatrixXd mel_power = fb * power;

  const double ref = std::max(mel_power.maxCoeff(), kAmin);
  const double ref_db = 10.0 * std::log10(ref);
  Eigen::MatrixXd db = mel_power.unaryExpr(
      [ref_db](double p) { return 10.0 * std::log10(std::max(p, kAmin)) - ref_db; });

  const double top = db.maxCoeff();
  const double floor_db = top - cfg.top_db;
  return db.unaryExpr([floor_db](double v) { return std::max(v, floor_db); });
}

Eigen::MatrixXd delta(const Eigen::MatrixXd& features, int width, int order) {
  if (width < 3 || width % 2 == 0) {
    throw std::invalid_argument("delta: width must be odd and >= 3, got " + std::to_string(width));
  }
  if (order < 1 || order > 2) throw std::invalid_argument("delta: order must be 1 or 2");
  const int half = (width - 1) / 2;
  double denom = 0.0;
  for (int d = 1; d <= half; ++d) denom += 2.0 * d * d;

  Eigen::MatrixXd cur = features;
  for (int pass = 0; pass < order; ++pass) {
    Eigen::MatrixXd next(cur.rows(), cur.cols());
    const int frames = static_cast<int>(cur.cols());
    for (int t = 0; t < frames; ++t) {
      next.col(t).setZero();
      for (int d = -half; d <= half; ++d) {
        const int idx = std::clamp(t + d, 0, frames - 1);
        next.col(t) += static_cast<double>(d) * cur.col(idx);
      }
      next.col(t) /= denom;
    }
    cur = std::move(next);
  }
  return cur;
}

Eigen::MatrixXd resize_bilinear(const Eigen::MatrixXd& src, int out_rows, int out_cols) {
  const int in_rows = static_cast<int>(src.rows());
  const int in_cols = static_cast<int>(src.cols());
  if (in_rows < 1 || in_cols < 1 || out_rows < 1 || out_cols < 1) {
    throw std::invalid_argument("resize_bilinear: degenerate geometry");
  }
  Eigen::MatrixXd dst(out_rows, out_cols);
  const double rscale = out_rows > 1 ? static_cast<double>(in_rows - 1) / (out_rows - 1) : 0.0;
  const double cscale = out_cols > 1 ? static_cast<double>(in_cols - 1) / (out_cols - 1) : 0.0;
  for (int i = 0; i < out_rows; ++i) {
    const double sr = i * rscale;
    const int r0 = std::min(static_cast<int>(sr), in_rows - 1);
    const int r1 = std::min(r0 + 1, in_rows - 1);
    const double fr = sr - r0;
    for (int j = 0; j < out_cols; ++j) {
      const double sc = j * cscale;
      const int c0 = std::min(static_cast<int>(sc), in_cols - 1);
      const int c1 = std::min(c0 + 1, in_cols - 1);
      const double fc = sc - c0;
      dst(i, j) = (1 - fr) * ((1 - fc) * src(r0, c0) + fc * src(r0, c1)) +
                  fr * ((1 - fc) * src(r1, c0) + fc * src(r1, c1));
    }
  }
  return dst;
}

FeatureImage build_feature_image(const AudioClip& clip, const AudioFeatureConfig& cfg) {
  const Eigen::MatrixXd logmel = log_mel_spectrogram(clip, cfg);
  const Eigen::MatrixXd d1 = delta(logmel, cfg.delta_width, 1);
  const Eigen::MatrixXd d2 = delta(logmel, cfg.delta_width, 2);

  FeatureImage img;
  img.height = cfg.image_size;
  img.width = cfg.image_size;
  img.channels = 3;
  img.data.assign(static_cast<std::size_t>(img.height) * img.width * img.channels, 0.0f);

  const Eigen::MatrixXd* planes[3] = {&logmel, &d1, &d2};
  for (int c = 0; c < 3; ++c) {
    Eigen::MatrixXd resized = resize_bilinear(*planes[c], cfg.image_size, cfg.image_size);
    const double lo = resized.minCoeff();
    const double hi = resized.maxCoeff();
    const double range = hi - lo;
    for (int i = 0; i < cfg.image_size; ++i) {
      for (int j = 0; j < cfg.image_size; ++j) {
        const double v = range > 0.0 ? (resized(i, j) - lo) / range : 0.5;
        img.at(i, j, c) = static_cast<float>(v);
      }
    }
  }
  return img;
}

void write_feature_image(const std::string& path, const FeatureImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write("DFIM", 4);
  auto wr_u32 = [&os](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  wr_u32(static_cast<std::uint32_t>(img.height));
  wr_u32(static_cast<std::uint32_t>(img.width));
  wr_u32(static_cast<std::uint32_t>(img.channels));
  for (float v : img.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    wr_u32(bits);
  }
}

FeatureImage read_feature_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DFIM", 4) != 0) throw std::runtime_error("bad feature image magic in " + path);
  auto rd_u32 = [&is, &path]() {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("feature image truncated: " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  FeatureImage img;
  img.height = static_cast<int>(rd_u32());
  img.width = static_cast<int>(rd_u32());
  img.channels = static_cast<int>(rd_u32());
  img.data.resize(static_cast<std::size_t>(img.height) * img.width * img.channels);
  for (auto& v : img.data) {
    const std::uint32_t bits = rd_u32();
    std::memcpy(&v, &bits, 4);
  }
  return img;
}

}  // namespace mmnas
