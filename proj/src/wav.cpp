// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#include "mmnas/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mmnas {

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t rd_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void wr_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void wr_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

AudioClip read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open wav file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw std::runtime_error("not a RIFF/WAVE file: " + path);
  }

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  const unsigned char* data = nullptr;
  std::uint32_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t chunk_len = rd_u32(hdr + 4);
    const unsigned char* body = hdr + 8;
    if (pos + 8 + chunk_len > bytes.size()) break;
    if (std::memcmp(hdr, "fmt ", 4) == 0 && chunk_len >= 16) {
      format = rd_u16(body);
      channels = rd_u16(body + 2);
      sample_rate = rd_u32(body + 4);
      bits = rd_u16(body + 14);
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = body;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }

  if (!data) throw std::runtime_error("wav file has no data chunk: " + path);
  if (channels == 0 || sample_rate == 0) throw std::runtime_error("wav file has no fmt chunk: " + path);
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32) {
    throw std::runtime_error("unsupported wav encoding (format " + std::to_string(format) + ", " +
                             std::to_string(bits) + " bits) in " + path);
  }

  const std::uint32_t bytes_per_sample = bits / 8;
  const std::uint32_t frame_size = bytes_per_sample * channels;
  const std::uint32_t frames = data_len / frame_size;
  if (frames == 0) throw std::runtime_error("wav file has no samples: " + path);

  AudioClip clip;
  clip.sample_rate = static_cast<int>(sample_rate);
  clip.samples.resize(frames);
  for (std::uint32_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::uint16_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + static_cast<std::size_t>(f) * frame_size + c * bytes_per_sample;
      if (pcm16) {
        const std::int16_t v = static_cast<std::int16_t>(p[0] | (p[1] << 8));
        acc += static_cast<double>(v) / 32768.0;
      } else {
        std::uint32_t u = rd_u32(p);
        float fv;
        std::memcpy(&fv, &u, 4);
        acc += static_cast<double>(fv);
      }
    }
    clip.samples[f] = static_cast<float>(std::clamp(acc / channels, -1.0, 1.0));
  }
  return clip;
}

void write_wav(const std::string& path, const AudioClip& clip) {
  if (clip.samples.empty() || clip.sample_rate <= 0) {
    throw std::invalid_argument("cannot write empty audio clip");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  const std::uint32_t n = static_cast<std::uint32_t>(clip.samples.size());
  const std::uint32_t data_len = n * 2;
  os.write("RIFF", 4);
  wr_u32(os, 36 + data_len);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  wr_u32(os, 16);
  wr_u16(os, 1);  // PCM
  wr_u16(os, 1);  // mono
  wr_u32(os, static_cast<std::uint32_t>(clip.sample_rate));
  wr_u32(os, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  wr_u16(os, 2);
  wr_u16(os, 16);
  os.write("data", 4);
  wr_u32(os, data_len);
  for (float s : clip.samples) {
    const double v = std::clamp(static_cast<double>(s), -1.0, 1.0);
    const std::int16_t q = static_cast<std::int16_t>(std::lrint(v * 32767.0));
    wr_u16(os, static_cast<std::uint16_t>(q));
  }
}

}  // namespace mmnas
