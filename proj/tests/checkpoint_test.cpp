// Copyright 2026 The shardtrain Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "shardtrain/checkpoint.hpp"
#include "shardtrain/error.hpp"
#include "test_util.hpp"

namespace shardtrain {
namespace {

TEST(Checkpoint, RoundTripIsBitExact) {
  ParameterSet ps = init_params(testing::tiny_model());
  auto bytes = serialize_checkpoint(ps);
  ParameterSet back = deserialize_checkpoint(bytes);
  ASSERT_EQ(back.size(), ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(back[i].name, ps[i].name);
    EXPECT_EQ(back[i].tensor.shape(), ps[i].tensor.shape());
    EXPECT_EQ(std::memcmp(back[i].tensor.values().data(), ps[i].tensor.values().data(),
                          ps[i].tensor.numel() * sizeof(double)),
              0);
  }
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, ByteLayout) {
  ParameterSet ps;
  ps.add("ab", Tensor::from({1, 2}, {1.0, -2.0}));
  auto bytes = serialize_checkpoint(ps);
  ASSERT_EQ(bytes.size(), 8u + 8u + 4u + 2u + 4u + 16u + 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "STCKPT01");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[16], 2);
  EXPECT_EQ(bytes[20], 'a');
  EXPECT_EQ(bytes[22], 2);
  EXPECT_EQ(bytes[26], 1);
  EXPECT_EQ(bytes[34], 2);
  double v = 0.0;
  std::memcpy(&v, bytes.data() + 42, 8);
  EXPECT_EQ(v, 1.0);
}

TEST(Checkpoint, RejectsCorruptInput) {
  ParameterSet ps;
  ps.add("w", Tensor::from({2}, {1.0, 2.0}));
  auto bytes = serialize_checkpoint(ps);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(deserialize_checkpoint(truncated), ValidationError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), ValidationError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_checkpoint(trailing), ValidationError);
}

TEST(Checkpoint, FileRoundTrip) {
  auto path = std::filesystem::temp_directory_path() / "shardtrain_checkpoint_test.bin";
  ParameterSet ps = init_params(testing::tiny_model(1));
  save_checkpoint(ps, path);
  ParameterSet back = load_checkpoint(path);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ps));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), ValidationError);
}

}  // namespace
}  // namespace shardtrain
