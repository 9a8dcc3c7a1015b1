#include "ssg/checkpoint.h"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssg/errors.h"

namespace ssg {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void Bytes(const void* p, size_t n) { out_.append(static_cast<const char*>(p), n); }
  void U32(uint32_t v) { Bytes(&v, sizeof v); }
  void U64(uint64_t v) { Bytes(&v, sizeof v); }
  void F64(double v) { Bytes(&v, sizeof v); }
  std::string Take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  // `what` names the item for truncation errors.
  void Bytes(void* p, size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::kTruncated,
                            "checkpoint truncated while reading " + what);
    }
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  uint32_t U32(const std::string& what) {
    uint32_t v;
    Bytes(&v, sizeof v, what);
    return v;
  }
  uint64_t U64(const std::string& what) {
    uint64_t v;
    Bytes(&v, sizeof v, what);
    return v;
  }
  double F64(const std::string& what) {
    double v;
    Bytes(&v, sizeof v, what);
    return v;
  }
  bool AtEnd() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  size_t pos_ = 0;
};

}  // namespace

std::string SerializeCheckpoint(const Checkpoint& ckpt) {
  Writer w;
  w.Bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.U32(kCheckpointVersion);
  const ModelConfig& m = ckpt.model;
  w.U64(m.image_side);
  w.U64(m.patch_side);
  w.U64(m.channels);
  w.U64(m.blocks);
  w.U64(m.heads);
  w.F64(m.mlp_ratio);
  w.U64(m.num_classes);
  w.F64(m.cond_dropout_prob);
  w.U64(ckpt.schedule.train_steps);
  w.F64(ckpt.schedule.beta_start);
  w.F64(ckpt.schedule.beta_end);
  w.U64(ckpt.step);
  const auto tensors = ckpt.params.Tensors();
  w.U64(tensors.size());
  for (const ConstParamSlot& t : tensors) {
    w.U64(t.name.size());
    w.Bytes(t.name.data(), t.name.size());
    w.U64(t.shape.size());
    for (size_t d : t.shape) w.U64(d);
    w.Bytes(t.values->data(), t.values->size() * sizeof(double));
  }
  return w.Take();
}

Checkpoint ParseCheckpoint(const std::string& bytes) {
  Reader r(bytes);
  char magic[sizeof kCheckpointMagic];
  try {
    r.Bytes(magic, sizeof magic, "magic");
  } catch (const CheckpointError&) {
    throw CheckpointError(CheckpointError::Kind::kHeader, "checkpoint header: file too short");
  }
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError(CheckpointError::Kind::kHeader,
                          "checkpoint header: bad magic (not an SSGCKPT1 file)");
  }
  const uint32_t version = r.U32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::kVersion,
                          "checkpoint version " + std::to_string(version) +
                              " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ModelConfig& m = ckpt.model;
  m.image_side = r.U64("model config");
  m.patch_side = r.U64("model config");
  m.channels = r.U64("model config");
  m.blocks = r.U64("model config");
  m.heads = r.U64("model config");
  m.mlp_ratio = r.F64("model config");
  m.num_classes = r.U64("model config");
  m.cond_dropout_prob = r.F64("model config");
  ckpt.schedule.train_steps = r.U64("schedule");
  ckpt.schedule.beta_start = r.F64("schedule");
  ckpt.schedule.beta_end = r.F64("schedule");
  ckpt.step = r.U64("step count");
  try {
    m.Validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointError::Kind::kHeader,
                          std::string("checkpoint header: invalid model config: ") + e.what());
  }

  ckpt.params = ModelParameters::Zeros(m);
  auto slots = ckpt.params.Tensors();
  const uint64_t count = r.U64("tensor count");
  if (count != slots.size()) {
    throw CheckpointError(CheckpointError::Kind::kShape,
                          "checkpoint holds " + std::to_string(count) + " tensors, model needs " +
                              std::to_string(slots.size()));
  }
  for (ParamSlot& slot : slots) {
    const std::string what = "tensor '" + slot.name + "'";
    const uint64_t name_len = r.U64(what);
    if (name_len > 4096) {
      throw CheckpointError(CheckpointError::Kind::kShape, what + ": implausible name length");
    }
    std::string name(name_len, '\0');
    r.Bytes(name.data(), name_len, what);
    if (name != slot.name) {
      throw CheckpointError(CheckpointError::Kind::kShape,
                            "expected " + what + ", found '" + name + "'");
    }
    const uint64_t rank = r.U64(what);
    if (rank != slot.shape.size()) {
      throw CheckpointError(CheckpointError::Kind::kShape, what + ": rank mismatch");
    }
    for (size_t d : slot.shape) {
      if (r.U64(what) != d) {
        throw CheckpointError(CheckpointError::Kind::kShape, what + ": shape mismatch");
      }
    }
    r.Bytes(slot.values->data(), slot.values->size() * sizeof(double), what);
  }
  if (!r.AtEnd()) {
    throw CheckpointError(CheckpointError::Kind::kShape, "checkpoint has trailing bytes");
  }
  return ckpt;
}

void SaveCheckpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = SerializeCheckpoint(ckpt);
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

Checkpoint LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return ParseCheckpoint(buf.str());
}

}  // namespace ssg
