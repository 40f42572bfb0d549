// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmnas/tensor.hpp"

namespace mmnas {

// Tensor file format: magic "DFTN", u8 rank, u32 little-endian extents,
// f32 little-endian row-major payload.

namespace detail {

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("tensor file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32_le(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32_le(os, bits);
}

inline float read_f32_le(std::istream& is) {
  std::uint32_t bits = read_u32_le(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

template <typename S>
void write_tensor(std::ostream& os, const Tensor<S>& t) {
  os.write("DFTN", 4);
  const unsigned char rank = static_cast<unsigned char>(t.rank());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int e : t.shape()) detail::write_u32_le(os, static_cast<std::uint32_t>(e));
  const S* v = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) detail::write_f32_le(os, static_cast<float>(v[i]));
}

template <typename S>
Tensor<S> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DFTN", 4) != 0) throw std::runtime_error("bad tensor magic");
  unsigned char rank;
  is.read(reinterpret_cast<char*>(&rank), 1);
  if (!is) throw std::runtime_error("tensor file truncated");
  Shape shape(rank);
  for (int i = 0; i < static_cast<int>(rank); ++i)
    shape[static_cast<std::size_t>(i)] = static_cast<int>(detail::read_u32_le(is));
  Tensor<S> t(shape);
  S* v = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) v[i] = static_cast<S>(detail::read_f32_le(is));
  return t;
}

template <typename S>
void save_tensor(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(os, t);
}

template <typename S>
Tensor<S> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_tensor<S>(is);
}

}  // namespace mmnas
