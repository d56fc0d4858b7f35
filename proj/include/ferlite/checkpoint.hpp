#pragma once

#include "ferlite/layers.hpp"
#include "ferlite/optim.hpp"

#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace ferlite {

struct CheckpointVersionError : IoError {
  using IoError::IoError;
};
struct CheckpointCorruptError : IoError {
  using IoError::IoError;
};
struct CheckpointNameMismatchError : IoError {
  using IoError::IoError;
};

// Versioned binary container: magic + version + JSON metadata (config
// snapshot, tensor table with offsets, optimizer table, payload checksum)
// followed by a raw little-endian float payload.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string config_json;  // opaque snapshot of the training config
  long epoch = 0;
  std::uint64_t rng_state = 0;
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();

  struct Tens {
    std::string name;
    bool buffer = false;
    Shape shape;
    std::vector<float> data;
  };
  std::vector<Tens> tensors;

  struct OptState {
    long t = 0;
    // aligned with `names`: first-moment and second-moment vectors
    std::vector<std::string> names;
    std::vector<std::vector<float>> m, v;
  };
  std::optional<OptState> optimizer;

  static Checkpoint from_model(const Module<float>& model, std::string config_json,
                               long epoch, std::uint64_t rng_state, double val_accuracy,
                               const Adam<float>* adam = nullptr);

  // Strict mode requires the exact same tensor name set; partial mode loads
  // the intersection and reports what was skipped either way.
  struct LoadReport {
    std::vector<std::string> loaded, missing_in_file, unknown_in_file;
  };
  LoadReport apply_to(const Module<float>& model, bool partial = false) const;
  void apply_optimizer(Adam<float>& adam) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ferlite
