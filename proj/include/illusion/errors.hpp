#pragma once

#include <stdexcept>
#include <string>

namespace illusion {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Label-bank rejection sampling ran out of attempts (embed_dim too small for C).
class GenerationError : public Error {
 public:
  using Error::Error;
};

class RankDeficientError : public Error {
 public:
  RankDeficientError(const std::string& what, long rank, long expected)
      : Error(what + " (rank " + std::to_string(rank) + " of " + std::to_string(expected) + ")"),
        rank_(rank),
        expected_(expected) {}

  long rank() const { return rank_; }
  long expected() const { return expected_; }

 private:
  long rank_;
  long expected_;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Cosine or its gradient requested at a (near) zero vector.
class SingularError : public Error {
 public:
  using Error::Error;
};

class NumericFailure : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace illusion
