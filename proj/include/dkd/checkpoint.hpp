#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "dkd/model.hpp"

namespace dkd {

/// Training provenance stored alongside the weights. `mode` is the ensemble
/// training mode tag ("ri" / "kd" / "dkd"); member checkpoints of one run
/// all carry the run's mode and zeta.
struct CheckpointMeta {
  int format_version = 1;
  Arch arch = Arch::toy;
  int tap = -1;  // -1: the architecture default
  std::string mode = "ri";
  double zeta = 0.0;
  std::uint64_t seed = 0;
};

/// Single-file layout: an 8-byte magic, a length-prefixed JSON manifest
/// (meta + parameter count + SHA-256 of the blob section), then one
/// shape-prefixed little-endian float32 blob per parameter tensor.
/// Parameters that sit on the f32 grid (everything the trainer produces)
/// round-trip losslessly, so reloaded forwards are bit-identical.
void save_checkpoint(const std::string& path, const ModelGraph& model,
                     const CheckpointMeta& meta);

/// Rebuilds the architecture named in the manifest and overwrites its
/// parameters from the blobs. Throws on bad magic, digest mismatch,
/// truncation, trailing bytes, or any shape disagreement with the
/// architecture's parameter table.
ModelGraph load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

/// Hex SHA-256 of a byte range (checkpoint digests, freeze checks).
std::string sha256_hex(const void* data, std::size_t size);

}  // namespace dkd
