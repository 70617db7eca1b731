#pragma once

#include <cstdint>
#include <string>

#include "clface/model.hpp"

namespace clface {

// Checkpoint file layout (little-endian):
//   bytes 0..7    magic "CLFC0001"
//   bytes 8..15   uint64 manifest length M
//   bytes 16..    manifest, a JSON object with backbone_spec, step_index,
//                 frozen, the named parameter table (name + element count,
//                 in canonical order) and payload_hash
//   then          the payload: all parameter arrays concatenated in
//                 canonical order as raw doubles
// payload_hash is FNV-1a(64) over the payload bytes; load_checkpoint
// recomputes and verifies it.

void save_checkpoint(const ModelSnapshot& model, const std::string& path);

/// Throws ValidationError on malformed files or hash mismatch.
ModelSnapshot load_checkpoint(const std::string& path);

/// Hash of the parameter payload as stored in (and verified against) a
/// checkpoint file.
uint64_t payload_hash(const ModelSnapshot& model);

std::string hash_hex(uint64_t h);

}  // namespace clface
