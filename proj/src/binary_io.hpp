// Copyright 2026 The RelayAttn Authors
// SPDX-License-Identifier: Apache-2.0

// Little-endian scalar IO shared by the on-disk containers.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>

#include "relayattn/errors.hpp"
#include "relayattn/numerics.hpp"

namespace relayattn::detail {

template <typename T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw ParseError(std::string("truncated file while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void write_values(std::ostream& out, std::span<const double> values, Precision precision) {
  for (double v : values) {
    if (precision == Precision::kFloat32) {
      write_le(out, static_cast<float>(v));
    } else {
      write_le(out, v);
    }
  }
}

inline void read_values(std::istream& in, std::span<double> values, Precision precision) {
  for (double& v : values) {
    v = precision == Precision::kFloat32 ? static_cast<double>(read_le<float>(in, "tensor data"))
                                         : read_le<double>(in, "tensor data");
  }
}

inline void write_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
  char got[4] = {};
  if (!in.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
    throw ParseError(std::string("bad magic, expected ") + magic);
  }
}

inline std::uint32_t precision_code(Precision p) { return p == Precision::kFloat32 ? 1U : 0U; }

inline Precision precision_from_code(std::uint32_t code) {
  if (code == 0) return Precision::kFloat64;
  if (code == 1) return Precision::kFloat32;
  throw ParseError("unknown precision code " + std::to_string(code));
}

}  // namespace relayattn::detail
