#include "ssg/rng.h"

#include <cmath>
#include <numbers>

namespace ssg {
namespace {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// splitmix64 finalizer.
uint64_t Mix(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint64_t HashTag(std::string_view tag) {
  uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

RngStream::RngStream(uint64_t seed, uint64_t stream_id)
    : seed_(seed),
      stream_id_(stream_id),
      key_(Mix(Mix(seed + kGolden) ^ (stream_id * kGolden + 0x632BE59BD9B4E019ull))) {}

RngStream RngStream::ForPurpose(uint64_t seed, std::string_view purpose,
                                uint64_t index) {
  return RngStream(Mix(seed ^ HashTag(purpose)), index);
}

RngStream RngStream::Derive(uint64_t tag) const { return RngStream(key_, tag); }

uint64_t RngStream::NextU64() {
  ++counter_;
  return Mix(key_ + counter_ * kGolden);
}

double RngStream::Uniform() {
  return static_cast<double>(NextU64() >> 11) * 0x1.0p-53;
}

double RngStream::Normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_normal_;
  }
  // 1 - U lies in (0, 1], so the log is finite.
  const double u1 = 1.0 - Uniform();
  const double u2 = Uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

size_t RngStream::UniformIndex(size_t n) {
  // Lemire-style rejection to avoid modulo bias.
  const uint64_t bound = static_cast<uint64_t>(n);
  const uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const uint64_t r = NextU64();
    const __uint128_t product = static_cast<__uint128_t>(r) * bound;
    if (static_cast<uint64_t>(product) >= threshold) {
      return static_cast<size_t>(product >> 64);
    }
  }
}

}  // namespace ssg
