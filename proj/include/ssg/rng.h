#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace ssg {

// Counter-based random stream. Every draw is a pure function of
// (seed, stream_id, counter), so two streams built from the same pair
// produce the same sequence no matter which thread or process runs them.
class RngStream {
 public:
  RngStream(uint64_t seed, uint64_t stream_id);

  // Seed fan-out: (seed, purpose, index) -> independent stream. Adding a new
  // purpose tag never shifts the draws of existing ones.
  static RngStream ForPurpose(uint64_t seed, std::string_view purpose,
                              uint64_t index = 0);

  // Child stream keyed on this stream's identity (not its counter).
  RngStream Derive(uint64_t tag) const;

  uint64_t NextU64();
  // Uniform in [0, 1) with 53 random bits.
  double Uniform();
  // Standard normal via Box-Muller; the second variate of each pair is kept.
  double Normal();
  // Uniform integer in [0, n). n must be > 0.
  size_t UniformIndex(size_t n);

  uint64_t seed() const { return seed_; }
  uint64_t stream_id() const { return stream_id_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t seed_;
  uint64_t stream_id_;
  uint64_t key_;
  uint64_t counter_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace ssg
