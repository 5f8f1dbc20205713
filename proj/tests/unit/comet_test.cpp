#include "wsforge/comet.hpp"

#include <gtest/gtest.h>

#include <random>

#include "../support/test_support.hpp"
#include "wsforge/analysis.hpp"
#include "wsforge/error.hpp"
#include "wsforge/event.hpp"
#include "wsforge/http.hpp"

namespace wsforge {
namespace {

using Clock = SessionTable::Clock;

Bytes msg(std::string_view s) { return to_bytes(s); }

TEST(SessionTable, EmptyPollAnswersEmpty) {
  SessionTable t;
  const auto r = t.serve_poll("s");
  EXPECT_EQ(r.outcome, PollOutcome::Empty);
  EXPECT_TRUE(r.body.empty());
}

TEST(SessionTable, PollDrainsFifo) {
  SessionTable t;
  t.publish("s", msg("one"));
  t.publish("s", msg("two"));
  EXPECT_EQ(t.pending("s"), 2u);
  EXPECT_EQ(t.serve_poll("s").body, msg("one"));
  EXPECT_EQ(t.serve_poll("s").body, msg("two"));
  EXPECT_EQ(t.serve_poll("s").outcome, PollOutcome::Empty);
  EXPECT_EQ(t.pending("other"), 0u);
}

TEST(SessionTable, PublishDuringHoldAnswersParkedRequest) {
  SessionTable t;
  std::optional<PollReply> got;
  t.serve_long_poll("s", [&](PollReply r) { got = std::move(r); }, Clock::now() + std::chrono::seconds(25));
  EXPECT_TRUE(t.parked("s"));
  EXPECT_FALSE(got);
  t.publish("s", msg("hello"));
  ASSERT_TRUE(got);
  EXPECT_EQ(got->outcome, PollOutcome::Data);
  EXPECT_EQ(got->body, msg("hello"));
  EXPECT_FALSE(t.parked("s"));
  EXPECT_EQ(t.pending("s"), 0u);
}

TEST(SessionTable, HoldTimeoutAnswersEmpty) {
  SessionTable t;
  std::optional<PollReply> got;
  const auto deadline = Clock::now() + std::chrono::milliseconds(100);
  t.serve_long_poll("s", [&](PollReply r) { got = std::move(r); }, deadline);
  EXPECT_EQ(t.next_deadline(), deadline);
  EXPECT_EQ(t.expire(deadline - std::chrono::milliseconds(1)), 0u);
  EXPECT_FALSE(got);
  EXPECT_EQ(t.expire(deadline), 1u);
  ASSERT_TRUE(got);
  EXPECT_EQ(got->outcome, PollOutcome::Timeout);
  EXPECT_TRUE(got->body.empty());
  EXPECT_FALSE(t.next_deadline());
}

TEST(SessionTable, PendingDataAnswersWithoutHolding) {
  SessionTable t;
  t.publish("s", msg("early"));
  std::optional<PollReply> got;
  t.serve_long_poll("s", [&](PollReply r) { got = std::move(r); }, Clock::now() + std::chrono::seconds(25));
  ASSERT_TRUE(got);
  EXPECT_EQ(got->body, msg("early"));
  EXPECT_FALSE(t.parked("s"));
}

TEST(SessionTable, SecondParkSupersedesFirst) {
  SessionTable t;
  std::vector<PollOutcome> first;
  std::vector<PollOutcome> second;
  const auto far = Clock::now() + std::chrono::seconds(25);
  t.serve_long_poll("s", [&](PollReply r) { first.push_back(r.outcome); }, far);
  t.serve_long_poll("s", [&](PollReply r) { second.push_back(r.outcome); }, far);
  EXPECT_EQ(first, std::vector<PollOutcome>{PollOutcome::Superseded});
  EXPECT_TRUE(second.empty());
  EXPECT_TRUE(t.parked("s"));
  t.publish("s", msg("x"));
  EXPECT_EQ(second, std::vector<PollOutcome>{PollOutcome::Data});
}

TEST(SessionTable, CancelKeepsMessagesQueued) {
  SessionTable t;
  bool called = false;
  const auto id = t.serve_long_poll("s", [&](PollReply) { called = true; }, Clock::now() + std::chrono::seconds(25));
  t.cancel("s", id);
  EXPECT_FALSE(t.parked("s"));
  t.publish("s", msg("kept"));
  EXPECT_FALSE(called);
  EXPECT_EQ(t.serve_poll("s").body, msg("kept"));
}

// Random interleavings of publish, park, poll, cancel and expiry over a few
// sessions: every message reaches its session exactly once and in order.
TEST(SessionTable, ExactlyOnceInOrderUnderInterleaving) {
  std::mt19937_64 rng(77);
  for (int round = 0; round < 200; ++round) {
    SessionTable t;
    constexpr int kSessions = 3;
    std::vector<std::vector<Bytes>> published(kSessions);
    std::vector<std::vector<Bytes>> delivered(kSessions);
    std::vector<SessionTable::ParkId> parked(kSessions, 0);
    auto now = Clock::now();
    int seq = 0;
    for (int step = 0; step < 100; ++step) {
      const int s = static_cast<int>(rng() % kSessions);
      const std::string sid = "s" + std::to_string(s);
      switch (rng() % 5) {
        case 0:
        case 1: {
          Bytes m = msg(sid + ":" + std::to_string(seq++));
          published[s].push_back(m);
          t.publish(sid, std::move(m));
          break;
        }
        case 2:
          parked[s] = t.serve_long_poll(
              sid,
              [&delivered, s](PollReply r) {
                if (r.outcome == PollOutcome::Data) delivered[s].push_back(std::move(r.body));
              },
              now + std::chrono::milliseconds(rng() % 50));
          break;
        case 3:
          if (auto r = t.serve_poll(sid); r.outcome == PollOutcome::Data) delivered[s].push_back(std::move(r.body));
          break;
        case 4:
          if (rng() % 2) {
            t.cancel(sid, parked[s]);
          } else {
            now += std::chrono::milliseconds(rng() % 40);
            t.expire(now);
          }
          break;
      }
    }
    for (int s = 0; s < kSessions; ++s) {
      const std::string sid = "s" + std::to_string(s);
      t.cancel(sid, parked[s]);
      while (true) {
        auto r = t.serve_poll(sid);
        if (r.outcome != PollOutcome::Data) break;
        delivered[s].push_back(std::move(r.body));
      }
      ASSERT_EQ(delivered[s], published[s]) << "round " << round << " session " << s;
    }
  }
}

TEST(HeaderProfile, BrowserRealisticTotals871) {
  const auto p = browser_realistic_header_profile();
  EXPECT_EQ(p.total(), 871u);
  EXPECT_GE(p.request_header_bytes, kMinimalHttpFraming);
  EXPECT_GE(p.response_header_bytes, kMinimalHttpFraming);
}

TEST(HeaderProfile, MinimalIsMeasuredFromEmittedHeads) {
  const auto p = minimal_header_profile();
  EXPECT_EQ(p.request_header_bytes, format_poll_request("/lpoll", "00000001", "127.0.0.1:8001").size());
  const std::string body(20, 'x');
  EXPECT_EQ(p.response_header_bytes, format_poll_response(body).size() - 20);
  EXPECT_GE(p.request_header_bytes, kMinimalHttpFraming);
  EXPECT_GE(p.response_header_bytes, kMinimalHttpFraming);
}

TEST(PerMessageBytes, Examples) {
  const auto browser = browser_realistic_header_profile();
  EXPECT_EQ(measure_per_message_bytes(Transport::Poll, 20, browser), 891u);
  EXPECT_EQ(measure_per_message_bytes(Transport::LongPoll, 20, browser), 891u);
  EXPECT_EQ(measure_per_message_bytes(Transport::WebSocket, 20, browser, true), 26u);
  EXPECT_EQ(measure_per_message_bytes(Transport::WebSocket, 20, browser, false), 22u);
  EXPECT_NEAR(static_cast<double>(891) / 22, 40.5, 0.01);
}

TEST(PerMessageBytes, WebSocketAlwaysCheaperThanLongPoll) {
  const auto minimal = minimal_header_profile();
  for (std::size_t p : {0u, 1u, 20u, 125u, 126u, 1000u, 65535u, 65536u, 1000000u}) {
    EXPECT_LT(measure_per_message_bytes(Transport::WebSocket, p, minimal, true),
              measure_per_message_bytes(Transport::LongPoll, p, minimal))
        << p;
  }
}

TEST(Transport, Names) {
  for (auto t : {Transport::WebSocket, Transport::Poll, Transport::LongPoll}) EXPECT_EQ(parse_transport(to_string(t)), t);
  EXPECT_THROW(parse_transport("streaming"), Error);
}

class CometServerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    CometOptions opts;
    opts.port = testing::free_port_block(1);
    opts.hold_timeout = std::chrono::milliseconds(300);
    server_.emplace(opts);
  }
  std::uint16_t port() const { return server_->options().port; }
  std::string get(std::string_view path, std::string_view sid) {
    return testing::http_exchange(port(), format_poll_request(path, sid, "127.0.0.1"));
  }
  std::string post(std::string_view path, std::string_view sid, std::string_view body) {
    return testing::http_exchange(port(), format_post_request(path, sid, "127.0.0.1", body));
  }
  static std::string body_of(const std::string &resp) {
    const auto p = parse_http_response(resp);
    return p ? resp.substr(p->consumed) : std::string("<unparsed>");
  }
  static int status_of(const std::string &resp) {
    const auto p = parse_http_response(resp);
    return p ? p->value.status : -1;
  }

  std::optional<CometServerProcess> server_;
};

TEST_F(CometServerTest, EmptyPollIs200WithEmptyBody) {
  const auto r = get("/poll", "a");
  EXPECT_EQ(status_of(r), 200);
  EXPECT_NE(r.find("Content-Length: 0\r\n"), std::string::npos);
  EXPECT_EQ(body_of(r), "");
}

TEST_F(CometServerTest, PublishThenPollInOrder) {
  EXPECT_EQ(status_of(post("/publish", "a", "first")), 204);
  EXPECT_EQ(status_of(post("/publish", "a", "second")), 204);
  EXPECT_EQ(body_of(get("/poll", "a")), "first");
  EXPECT_EQ(body_of(get("/lpoll", "a")), "second");
  EXPECT_EQ(body_of(get("/poll", "a")), "");
}

TEST_F(CometServerTest, LongPollTimesOutEmpty) {
  const auto start = std::chrono::steady_clock::now();
  const auto r = get("/lpoll", "idle");
  const auto waited = std::chrono::steady_clock::now() - start;
  EXPECT_EQ(status_of(r), 200);
  EXPECT_EQ(body_of(r), "");
  EXPECT_GE(waited, std::chrono::milliseconds(250));
}

TEST_F(CometServerTest, EmitPingDeliversPongOnNextPoll) {
  EXPECT_EQ(status_of(post("/emit", "c", R"({"e":"ping","d":1})")), 204);
  const auto ev = decode_event(body_of(get("/lpoll", "c")));
  ASSERT_TRUE(ev);
  EXPECT_EQ(ev->e, "pong");
  EXPECT_EQ(ev->c, 1);
  const auto stats = parse_kv_line(server_->stats().value_or(""));
  EXPECT_EQ(stats.at("pings_received"), "1");
  EXPECT_EQ(stats.at("pongs_sent"), "1");
}

TEST_F(CometServerTest, MissingSidAndUnknownPath) {
  EXPECT_EQ(status_of(testing::http_exchange(port(), "GET /poll HTTP/1.1\r\nHost: x\r\n\r\n")), 404);
  EXPECT_EQ(status_of(get("/elsewhere", "a")), 404);
  EXPECT_EQ(status_of(testing::http_exchange(port(), "BROKEN\r\n\r\n")), 400);
}

TEST(CometServer, PortInUse) {
  const auto port = testing::free_port_block(1);
  Fd holder = listen_tcp(port);
  CometOptions opts;
  opts.port = port;
  try {
    CometServerProcess p(opts);
    FAIL();
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::PortInUse);
  }
}

}  // namespace
}  // namespace wsforge
