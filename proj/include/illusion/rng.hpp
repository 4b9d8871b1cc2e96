#pragma once

#include <cstdint>
#include <random>

namespace illusion {

/// Tags separating the independent random streams of an experiment.
enum class Stream : std::uint64_t {
  prototype = 1,
  label_bank = 2,
  train_noise = 3,
  eval_noise = 4,
  encoder_prior = 5,
  mlp_init = 6,
  mlp_shuffle = 7,
  target = 8,
  eot = 9,
  consensus = 10,
  eta = 11,
  sanitizer = 12,
  calibration = 13,
};

constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed for one random stream.
///
/// The four coordinates are folded in sequentially, each through a full
/// splitmix64 finalizer:
///   h0 = splitmix64(master)
///   h1 = splitmix64(h0 ^ tag)
///   h2 = splitmix64(h1 ^ sample_id)
///   h3 = splitmix64(h2 ^ draw_index)
/// Every stream is then an independent std::mt19937_64 seeded with h3.
constexpr std::uint64_t derive_seed(std::uint64_t master, Stream tag, std::uint64_t sample_id,
                                    std::uint64_t draw_index = 0) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ static_cast<std::uint64_t>(tag));
  h = splitmix64(h ^ sample_id);
  return splitmix64(h ^ draw_index);
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t master, Stream tag, std::uint64_t sample_id,
                          std::uint64_t draw_index = 0) {
  return Engine(derive_seed(master, tag, sample_id, draw_index));
}

}  // namespace illusion
