#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "ssg/config.h"
#include "ssg/denoiser.h"

namespace ssg {

inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'G', 'C', 'K', 'P', 'T', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kHeader, kVersion, kTruncated, kShape };
  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  ModelConfig model;
  ScheduleConfig schedule;
  uint64_t step = 0;
  ModelParameters params;
};

// Layout, little-endian throughout:
//   magic[8] version:u32
//   model fields (u64 x7 with mlp_ratio and dropout as f64 in place)
//   schedule: train_steps:u64 beta_start:f64 beta_end:f64
//   step:u64 tensor_count:u64
//   per tensor: name_len:u64 name rank:u64 dims:u64[rank] values:f64[prod]
std::string SerializeCheckpoint(const Checkpoint& ckpt);
Checkpoint ParseCheckpoint(const std::string& bytes);

void SaveCheckpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint LoadCheckpoint(const std::string& path);

}  // namespace ssg
