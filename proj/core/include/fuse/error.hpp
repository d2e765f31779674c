#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fuse {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity was encountered. `particle()` is the offending row when
/// one is known.
class NumericError : public Error {
 public:
  static constexpr std::size_t kNoParticle = static_cast<std::size_t>(-1);

  explicit NumericError(const std::string& what, std::size_t particle = kNoParticle)
      : Error(what), particle_(particle) {}

  std::size_t particle() const noexcept { return particle_; }

 private:
  std::size_t particle_;
};

/// The adaptive schedule cannot produce a finite step (zero denominator).
class StepUndefined : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fuse
