#pragma once

#include <cstdint>
#include <random>

#include "vokit/geometry.hpp"

namespace vokit {

using Rng = std::mt19937_64;

inline std::uint64_t SplitMix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (master seed, stream tag, index). Streams never
/// depend on execution order, so parallel and serial runs draw identical numbers.
inline std::uint64_t DeriveSeed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return SplitMix64(SplitMix64(SplitMix64(master) ^ stream) ^ index);
}

inline Rng MakeRng(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return Rng(DeriveSeed(master, stream, index));
}

namespace stream {
inline constexpr std::uint64_t kCloud = 0x636c6f7564ULL;
inline constexpr std::uint64_t kFrame = 0x6672616d65ULL;
inline constexpr std::uint64_t kTrial = 0x747269616cULL;
inline constexpr std::uint64_t kRepetition = 0x7265706574ULL;
}  // namespace stream

inline double Uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double Gaussian(Rng& rng, double sigma) {
  return std::normal_distribution<double>(0.0, sigma)(rng);
}

inline Vector3 RandomUnitVector(Rng& rng) {
  Vector3 v;
  do {
    v = Vector3(Gaussian(rng, 1.0), Gaussian(rng, 1.0), Gaussian(rng, 1.0));
  } while (v.norm() < 1e-12);
  return v.normalized();
}

/// Rotation about a uniformly random axis by an angle uniform in [0, max_angle].
inline Matrix3 RandomRotation(Rng& rng, double max_angle_rad) {
  const Vector3 axis = RandomUnitVector(rng);
  return ExpSO3(axis * Uniform(rng, 0.0, max_angle_rad));
}

}  // namespace vokit
