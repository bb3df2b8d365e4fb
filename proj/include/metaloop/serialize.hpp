#pragma once

#include <optional>
#include <string>

#include "metaloop/optim.hpp"

namespace metaloop {

/// Checkpoint layout (version 1, little-endian throughout):
///   magic "MLCP", u32 version
///   parameter block: u32 group count; per group: string name,
///     u32 tensor count; per tensor: string name, u32 rank,
///     u64 extents, f64 values
///   u8 state flag; when set: u8 optimizer kind, i64 step count,
///     u32 slot count, then one parameter block per slot
/// Strings are a u32 byte length followed by the bytes.
struct Checkpoint {
  ParameterSet params;
  std::optional<OptState> opt_state;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace metaloop
