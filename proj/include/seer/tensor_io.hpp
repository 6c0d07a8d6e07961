#pragma once

#include <iosfwd>
#include <string>

#include "seer/tensor.hpp"

namespace seer {

// Binary tensor dump: magic "SATR", u32 version=1, u32 rank, rank x u64 dims,
// then little-endian f32 payload in row-major order. Round-trips bit-exact.

void save_tensor(const Tensor& t, std::ostream& out);
void save_tensor(const Tensor& t, const std::string& path);

Tensor load_tensor(std::istream& in);
Tensor load_tensor(const std::string& path);

}  // namespace seer
