// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "shardtrain/model.hpp"

namespace shardtrain {

// Checkpoint byte layout, all integers and floats little-endian:
//
//   magic       8 bytes  "STCKPT01"
//   count       u64      number of records
//   record × count:
//     name_len  u32
//     name      name_len bytes, UTF-8, no terminator
//     ndim      u32
//     dims      u64 × ndim
//     values    f64 × prod(dims), IEEE-754 binary64, row-major

std::vector<std::uint8_t> serialize_checkpoint(const ParameterSet& params);
ParameterSet deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_checkpoint(const std::filesystem::path& path);

}  // namespace shardtrain
