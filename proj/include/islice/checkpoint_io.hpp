#pragma once

#include "islice/model.hpp"

#include <string>

namespace islice {

// Container layout: 8-byte magic "ISLICE01", a 64-bit little-endian header
// length, a JSON header mapping tensor name -> {dtype, shape, offset, length}
// (with "layout" and "config" as reserved keys), then the packed f32
// little-endian payload.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace islice
