#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

namespace palnet {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Base class for all library failures.
class Error : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File / format problems.
class IoError : public Error {
  using Error::Error;
};

/// Bad user input: configuration, flags, mismatched schemas. Maps to CLI exit code 1.
class UsageError : public Error {
  using Error::Error;
};

/// Numeric or algorithmic failure at runtime. Maps to CLI exit code 2.
class NumericError : public Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

constexpr double kPi = 3.14159265358979323846;

inline double deg_to_rad(double d) { return d * kPi / 180.0; }
inline double rad_to_deg(double r) { return r * 180.0 / kPi; }

/// FNV-1a 64-bit hash over a byte range.
inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t seed = 14695981039346656037ull) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t hash = seed;
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= static_cast<std::uint64_t>(bytes[i]);
    hash *= 1099511628211ull;
  }
  return hash;
}

/// FNV-1a 64-bit hash of a whole file, as a fixed-width lowercase hex string.
/// Used for content checksums in dataset and stage manifests.
inline std::string file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("file_checksum: cannot open '" + path + "'");
  std::uint64_t hash = 14695981039346656037ull;
  char buffer[1 << 16];
  while (in) {
    in.read(buffer, sizeof(buffer));
    const std::streamsize got = in.gcount();
    if (got > 0) hash = fnv1a64(buffer, static_cast<std::size_t>(got), hash);
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(hash));
  return std::string(out);
}

}  // namespace palnet
