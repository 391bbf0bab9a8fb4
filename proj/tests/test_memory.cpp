#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "npcl/memory.hpp"

using namespace npcl;

namespace {

Sample item(std::uint32_t id, std::uint32_t task = 0) {
  return Sample{{static_cast<double>(id), 0.5 * id}, id % 3, task};
}

}  // namespace

TEST(Reservoir, FillsThenKeepsCapacity) {
  EpisodicMemory m(5);
  std::mt19937_64 rng(1);
  for (std::uint32_t i = 0; i < 3; ++i) m.reservoir_update(item(i), rng);
  EXPECT_EQ(m.size(), 3u);
  for (std::uint32_t i = 3; i < 100; ++i) m.reservoir_update(item(i), rng);
  EXPECT_EQ(m.size(), 5u);
  EXPECT_EQ(m.seen_count(), 100u);
}

TEST(Reservoir, ZeroCapacityOnlyCounts) {
  EpisodicMemory m(0);
  std::mt19937_64 rng(1);
  m.reservoir_update(item(1), rng);
  EXPECT_TRUE(m.empty());
  EXPECT_EQ(m.seen_count(), 1u);
}

TEST(Reservoir, InclusionIsUniform) {
  const int trials = 400, stream = 200, cap = 40;
  std::vector<int> hits(stream, 0);
  std::mt19937_64 rng(5);
  for (int t = 0; t < trials; ++t) {
    EpisodicMemory m(cap);
    for (int i = 0; i < stream; ++i) m.reservoir_update(item(static_cast<std::uint32_t>(i)), rng);
    for (auto& s : m.items()) ++hits[static_cast<std::size_t>(s.x[0])];
  }
  const double p = double(cap) / stream, band = 4 * std::sqrt(p * (1 - p) / trials);
  for (int i = 0; i < stream; ++i) EXPECT_NEAR(hits[i] / double(trials), p, band) << "item " << i;
}

TEST(Reservoir, SampleBatchIsWithoutReplacement) {
  EpisodicMemory m(20);
  std::mt19937_64 rng(2);
  for (std::uint32_t i = 0; i < 20; ++i) m.reservoir_update(item(i), rng);
  auto b = m.sample_batch(8, rng);
  ASSERT_EQ(b.size(), 8u);
  std::set<double> ids;
  for (auto& s : b) ids.insert(s.x[0]);
  EXPECT_EQ(ids.size(), 8u);
  EXPECT_EQ(m.sample_batch(50, rng).size(), 20u);
  EXPECT_THROW(EpisodicMemory(3).sample_batch(1, rng), std::logic_error);
}

TEST(Reservoir, SaveLoadRoundTrip) {
  EpisodicMemory m(4);
  std::mt19937_64 rng(3);
  for (std::uint32_t i = 0; i < 9; ++i) m.reservoir_update(item(i, i / 3), rng);
  std::stringstream ss;
  m.save(ss);
  auto back = EpisodicMemory::load(ss);
  EXPECT_EQ(back.capacity(), 4u);
  EXPECT_EQ(back.seen_count(), 9u);
  EXPECT_EQ(back.items(), m.items());
}

TEST(Reservoir, FileLayoutIsLittleEndian) {
  EpisodicMemory m(2);
  std::mt19937_64 rng(3);
  m.reservoir_update(Sample{{1.0}, 7, 2}, rng);
  std::stringstream ss;
  m.save(ss);
  auto bytes = ss.str();
  ASSERT_EQ(bytes.size(), 3 * 8 + 3 * 4 + 8u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 2);   // capacity
  EXPECT_EQ(static_cast<unsigned char>(bytes[24]), 2);  // task id
  EXPECT_EQ(static_cast<unsigned char>(bytes[28]), 7);  // label
  EXPECT_EQ(static_cast<unsigned char>(bytes[32]), 1);  // feature count
  EXPECT_EQ(static_cast<unsigned char>(bytes[43]), 0x3f);  // 1.0 high byte
}

TEST(DistributionMemoryType, TaskEntriesAreWrittenOnce) {
  DistributionMemory d;
  EXPECT_TRUE(d.insert_task(0, DiagGaussian::from_values({0.0}, {1.0}), 0));
  EXPECT_FALSE(d.insert_task(0, DiagGaussian::from_values({5.0}, {2.0}), 3));
  EXPECT_EQ(d.tasks().at(0).dist.mean[0], 0.0);
  EXPECT_EQ(d.tasks().at(0).step_recorded, 0u);
}

TEST(DistributionMemoryType, JsonRoundTrip) {
  DistributionMemory d;
  auto empty = d.to_json(2);
  EXPECT_TRUE(empty["global"].is_null());
  d.set_global(DiagGaussian::from_values({0.25, -1.0}, {0.5, 2.0}));
  d.insert_task(1, DiagGaussian::from_values({1.0, 2.0}, {3.0, 4.0}), 1);
  auto j = d.to_json(2);
  EXPECT_EQ(j["latent_dim"], 2);
  EXPECT_EQ(j["tasks"][0]["task_id"], 1);
  auto back = DistributionMemory::from_json(j);
  EXPECT_EQ(back.global()->mean.to_vector(), d.global()->mean.to_vector());
  EXPECT_EQ(back.tasks().at(1).dist.var.to_vector(), (std::vector<double>{3.0, 4.0}));
  j["latent_dim"] = 3;
  EXPECT_THROW(DistributionMemory::from_json(j), IoError);
}

TEST(DistributionMemoryType, RecordingStoresGlobalAndTask) {
  ModelConfig c;
  c.input_dim = 3;
  c.backbone_hidden = 4;
  c.feature_dim = 3;
  c.hidden_dim = 4;
  c.n_train = 2;
  c.attention_heads = 2;
  c.class_count_per_task = {2, 2};
  NpclModel model(c);
  SampleSet data;
  for (std::uint32_t i = 0; i < 10; ++i) data.push_back(Sample{{0.1 * i, 1.0, -0.2 * i}, i % 2, 0});
  EpisodicMemory mem(4);
  DistributionMemory dm;
  std::mt19937_64 rng(1);
  record_distributions(model, data, mem, dm, 4, 0, rng);
  ASSERT_TRUE(dm.global().has_value());
  ASSERT_TRUE(dm.tasks().contains(0));
  EXPECT_EQ(dm.tasks().at(0).dist.mean.shape(), (Shape{4}));
  EXPECT_FALSE(dm.global()->mean.requires_grad());
}

TEST(Storage, FootprintAccounting) {
  EXPECT_EQ(storage_footprint(256, 10, 500), 6132u);
  EXPECT_EQ(logits_replay_footprint(500, 200), 100000u);
  EXPECT_EQ(storage_footprint(4, 0, 0), 8u);
}
