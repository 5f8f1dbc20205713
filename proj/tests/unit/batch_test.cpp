#include "wsforge/batch.hpp"

#include <gtest/gtest.h>

#include <random>

#include "wsforge/error.hpp"

namespace wsforge {
namespace {

using namespace std::chrono_literals;

// Wire bytes when every message travels in its own frame, counted from the
// header-size rule directly.
std::int64_t oracle_individual(const std::vector<std::size_t> &sizes, bool masked) {
  std::int64_t total = 0;
  for (auto s : sizes) total += static_cast<std::int64_t>((s <= 125 ? 2 : s <= 65535 ? 4 : 10) + (masked ? 4 : 0) + s);
  return total;
}

std::int64_t oracle_batched(const std::vector<std::size_t> &sizes, bool masked) {
  std::int64_t env = 0;
  for (auto s : sizes) env += 4 + static_cast<std::int64_t>(s);
  return (env <= 125 ? 2 : env <= 65535 ? 4 : 10) + (masked ? 4 : 0) + env;
}

TEST(Batch, SingletonFlush) {
  Batcher b;
  EXPECT_FALSE(b.enqueue(as_bytes("hi")));
  const auto msg = b.flush();
  ASSERT_TRUE(msg);
  EXPECT_EQ(msg->kind, MessageKind::Binary);
  const auto entries = unbatch(msg->data);
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_EQ(entries[0], to_bytes("hi"));
}

TEST(Batch, EnvelopeLengthArithmetic) {
  Batcher b;
  b.enqueue(as_bytes("abc"));
  b.enqueue(as_bytes("defgh"));
  EXPECT_EQ(b.pending_wire_bytes(), 16u);
  const auto msg = b.flush();
  ASSERT_TRUE(msg);
  EXPECT_EQ(msg->data.size(), 16u);
  EXPECT_EQ(msg->data, (Bytes{0, 0, 0, 3, 'a', 'b', 'c', 0, 0, 0, 5, 'd', 'e', 'f', 'g', 'h'}));
}

TEST(Batch, FlushOnEmptyIsIdempotent) {
  Batcher b;
  EXPECT_FALSE(b.flush());
  EXPECT_FALSE(b.flush());
  b.enqueue(as_bytes("x"));
  EXPECT_TRUE(b.flush());
  EXPECT_FALSE(b.flush());
}

TEST(Batch, ThresholdTriggersFlush) {
  Batcher b(BatchConfig{.flush_threshold = 20, .max_delay = 1h});
  const auto t0 = Batcher::Clock::now();
  EXPECT_FALSE(b.enqueue(Bytes(5), t0));   // 9
  EXPECT_FALSE(b.enqueue(Bytes(5), t0));   // 18
  const auto out = b.enqueue(Bytes(1), t0);  // 23 >= 20
  ASSERT_TRUE(out);
  EXPECT_EQ(unbatch(out->data).size(), 3u);
  EXPECT_EQ(b.pending_count(), 0u);
}

TEST(Batch, AgeTriggersFlush) {
  Batcher b(BatchConfig{.flush_threshold = 1400, .max_delay = 50ms});
  const auto t0 = Batcher::Clock::now();
  EXPECT_FALSE(b.enqueue(as_bytes("a"), t0));
  EXPECT_FALSE(b.poll(t0 + 49ms));
  const auto out = b.poll(t0 + 50ms);
  ASSERT_TRUE(out);
  EXPECT_EQ(unbatch(out->data).size(), 1u);

  EXPECT_FALSE(b.enqueue(as_bytes("b"), t0 + 60ms));
  const auto via_enqueue = b.enqueue(as_bytes("c"), t0 + 200ms);
  ASSERT_TRUE(via_enqueue);
  EXPECT_EQ(unbatch(via_enqueue->data).size(), 2u);
}

TEST(Batch, UnbatchEmptyEntry) {
  const auto out = unbatch(Bytes{0, 0, 0, 0});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_TRUE(out[0].empty());
}

TEST(Batch, UnbatchTruncated) {
  for (const Bytes &bad : {Bytes{0, 0}, Bytes{0, 0, 0, 5, 'a'}, Bytes{0, 0, 0, 1, 'a', 0, 0}, Bytes{}}) {
    try {
      unbatch(bad);
      ADD_FAILURE();
    } catch (const Error &e) {
      EXPECT_EQ(e.code(), ErrorCode::TruncatedEnvelope);
    }
  }
}

TEST(Batch, RoundTripProperty) {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 1000; ++i) {
    std::vector<Bytes> msgs(1 + rng() % 30);
    for (auto &m : msgs) {
      m.resize(rng() % 200);
      for (auto &c : m) c = static_cast<std::uint8_t>(rng());
    }
    Batcher b(BatchConfig{.flush_threshold = SIZE_MAX, .max_delay = 1h});
    const auto t0 = Batcher::Clock::now();
    for (const auto &m : msgs) ASSERT_FALSE(b.enqueue(m, t0));
    const auto env = b.flush();
    ASSERT_TRUE(env);
    ASSERT_EQ(unbatch(env->data), msgs);
  }
}

TEST(Batch, AutoFlushPreservesOrderAcrossEnvelopes) {
  std::mt19937_64 rng(78);
  for (int i = 0; i < 200; ++i) {
    std::vector<Bytes> msgs(1 + rng() % 60);
    for (auto &m : msgs) m.assign(rng() % 100, static_cast<std::uint8_t>(rng()));
    Batcher b(BatchConfig{.flush_threshold = 1 + rng() % 400, .max_delay = 1h});
    std::vector<Bytes> got;
    const auto t0 = Batcher::Clock::now();
    for (const auto &m : msgs) {
      if (auto env = b.enqueue(m, t0)) {
        for (auto &e : unbatch(env->data)) got.push_back(std::move(e));
      }
    }
    if (auto env = b.flush()) {
      for (auto &e : unbatch(env->data)) got.push_back(std::move(e));
    }
    ASSERT_EQ(got, msgs);
  }
}

TEST(Savings, FortyMaskedTwentyByteMessages) {
  const std::vector<std::size_t> sizes(40, 20);
  EXPECT_EQ(oracle_individual(sizes, true), 1040);
  // 960-byte envelope needs the 16-bit extended length: 2 + 2 + 4 header bytes.
  EXPECT_EQ(oracle_batched(sizes, true), 968);
  EXPECT_EQ(batching_savings(sizes, true), 72);
}

TEST(Savings, SingleMessageCostsThePrefix) {
  for (std::size_t s : {0u, 20u, 121u, 1000u}) {
    const std::vector<std::size_t> one{s};
    EXPECT_EQ(batching_savings(one, true), -4) << s;
    EXPECT_EQ(batching_savings(one, false), -4) << s;
  }
}

TEST(Savings, MatchesOracleOnRandomLists) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 500; ++i) {
    std::vector<std::size_t> sizes(1 + rng() % 50);
    for (auto &s : sizes) s = rng() % 3 == 0 ? rng() % 70000 : rng() % 130;
    const bool masked = rng() % 2;
    ASSERT_EQ(batching_savings(sizes, masked), oracle_individual(sizes, masked) - oracle_batched(sizes, masked));
  }
}

TEST(Savings, MonotoneInCountWhenFrameHeaderExceedsPrefix) {
  for (bool masked : {false, true}) {
    for (std::size_t size : {0u, 1u, 2u, 20u}) {
      // Each extra message saves its own frame header and pays a 4-byte prefix.
      const bool gains = frame_overhead(size, masked) > kEnvelopePrefix;
      std::int64_t prev = batching_savings(std::vector<std::size_t>(1, size), masked);
      for (std::size_t n = 2; n <= 200; ++n) {
        const auto cur = batching_savings(std::vector<std::size_t>(n, size), masked);
        if (gains) {
          EXPECT_GE(cur, prev) << "n=" << n << " size=" << size;
        } else {
          EXPECT_LT(cur, prev) << "n=" << n << " size=" << size;
        }
        prev = cur;
      }
    }
  }
}

TEST(Savings, BatchedWinsOnceSavedHeadersCoverEnvelopeHeader) {
  // Two empty masked messages: 2 x 6 individually, 6 + 2 x 4 batched.
  EXPECT_EQ(batching_savings(std::vector<std::size_t>{0, 0}, true), -2);

  // Exact condition: sum of (per-message header - 4) >= envelope header.
  std::mt19937_64 rng(8);
  for (int i = 0; i < 2000; ++i) {
    std::vector<std::size_t> sizes(2 + rng() % 40);
    for (auto &s : sizes) s = rng() % 200;
    const bool masked = rng() % 2;
    std::int64_t saved_headers = 0;
    std::size_t envelope = 0;
    for (auto s : sizes) {
      saved_headers += static_cast<std::int64_t>(frame_overhead(s, masked)) - 4;
      envelope += 4 + s;
    }
    const bool wins = saved_headers >= static_cast<std::int64_t>(frame_overhead(envelope, masked));
    ASSERT_EQ(batching_savings(sizes, masked) >= 0, wins);
  }
  // Masked messages up to 125 bytes: seven or more always win.
  for (int i = 0; i < 500; ++i) {
    std::vector<std::size_t> sizes(7 + rng() % 40);
    for (auto &s : sizes) s = rng() % 126;
    ASSERT_GE(batching_savings(sizes, true), 0);
  }
}

TEST(Savings, LargeMessagesCanLose) {
  const std::vector<std::size_t> sizes{100, 100};
  EXPECT_LT(batching_savings(sizes, false), 0);
}

}  // namespace
}  // namespace wsforge
