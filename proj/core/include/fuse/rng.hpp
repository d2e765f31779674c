#pragma once

#include <cstdint>
#include <limits>

namespace fuse {

/// Counter-based random stream built on the SplitMix64 output function.
///
/// The full state is (seed, position): draw k of a stream is a pure function
/// of both, so a stream can be checkpointed and restored exactly. Children
/// created with split() get a re-keyed seed and never share a sequence with
/// their parent in practice.
///
/// Normal and uniform variates are generated here rather than through
/// <random> distributions, whose algorithms are implementation-defined and
/// which carry hidden cached state.
class RngStream {
 public:
  using result_type = std::uint64_t;

  explicit RngStream(std::uint64_t seed, std::uint64_t position = 0) noexcept;

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() noexcept;

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  /// Standard normal via Box-Muller; consumes exactly two raw draws.
  double normal() noexcept;
  /// Uniform integer in [0, bound). bound must be positive.
  std::uint64_t below(std::uint64_t bound) noexcept;

  /// Independent child stream identified by `stream_id`.
  RngStream split(std::uint64_t stream_id) const noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t position() const noexcept { return position_; }

  friend bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t position_;
};

/// The SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z) noexcept;

}  // namespace fuse
