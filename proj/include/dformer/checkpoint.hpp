#pragma once

#include <string>

#include "dformer/model.hpp"

namespace dformer {

// Versioned container: magic "DFCKPT01", u32 version, u64 seed, the model
// config echoed as key=value text, then the named parameter tensors (name,
// u32 extents, little-endian float64 data). Round-trips byte-exactly.
void save_checkpoint(const std::string& path, const Model& m);
Model load_checkpoint(const std::string& path);

}  // namespace dformer
