#pragma once

namespace ferlite {
inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kCheckpointMagicNote = "FERLCKPT";
}  // namespace ferlite
