#include "fuse/rng.hpp"

#include <cmath>
#include <numbers>

namespace fuse {
namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

// Murmur3 fmix64; used to key seeds so nearby seeds land far apart on the
// SplitMix64 orbit.
std::uint64_t key_of(std::uint64_t seed) noexcept {
  seed ^= seed >> 33;
  seed *= 0xff51afd7ed558ccdULL;
  seed ^= seed >> 33;
  seed *= 0xc4ceb9fe1a85ec53ULL;
  seed ^= seed >> 33;
  return seed;
}

}  // namespace

std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t position) noexcept
    : seed_(seed), key_(key_of(seed)), position_(position) {}

RngStream::result_type RngStream::operator()() noexcept {
  ++position_;
  return mix64(key_ + position_ * kGolden);
}

double RngStream::uniform() noexcept {
  return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
}

double RngStream::normal() noexcept {
  // u1 in (0, 1] keeps the log finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t bound) noexcept {
  // Reject the top partial block so every residue is equally likely.
  const std::uint64_t limit = max() - max() % bound;
  std::uint64_t x = (*this)();
  while (x >= limit) x = (*this)();
  return x % bound;
}

RngStream RngStream::split(std::uint64_t stream_id) const noexcept {
  return RngStream(mix64(seed_ ^ mix64(stream_id + kGolden)) + stream_id);
}

}  // namespace fuse
