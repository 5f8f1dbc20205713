#include "wsforge/cluster.hpp"

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <map>
#include <thread>

#include "../support/test_support.hpp"
#include "wsforge/codec.hpp"
#include "wsforge/store.hpp"
#include "wsforge/worker.hpp"

namespace wsforge {
namespace {

using namespace std::chrono_literals;
using testing::error_of;
using testing::WsTestClient;

TEST(Balancer, RoundRobinCycles) {
  BalancerState b(3, LbStrategy::RoundRobin);
  std::vector<std::size_t> picks;
  for (int i = 0; i < 6; ++i) picks.push_back(b.balance());
  EXPECT_EQ(picks, (std::vector<std::size_t>{0, 1, 2, 0, 1, 2}));
}

TEST(Balancer, LeastConnectionsPicksLowestThenLowestIndex) {
  BalancerState b(3, LbStrategy::LeastConnections);
  b.set_active(0, 5);
  b.set_active(1, 2);
  b.set_active(2, 2);
  EXPECT_EQ(b.balance(), 1u);
}

TEST(Balancer, EvenSpreadOverManyConnections) {
  for (auto strategy : {LbStrategy::RoundRobin, LbStrategy::LeastConnections}) {
    BalancerState b(4, strategy);
    std::map<std::size_t, int> count;
    for (int i = 0; i < 10000; ++i) {
      const auto w = b.balance();
      b.on_open(w);
      ++count[w];
    }
    for (std::size_t w = 0; w < 4; ++w) EXPECT_EQ(count[w], 2500) << to_string(strategy);
  }
}

TEST(Balancer, SkipsUnhealthyAndFailsWhenNoneLeft) {
  BalancerState b(2, LbStrategy::RoundRobin);
  b.set_healthy(0, false);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(b.balance(), 1u);
  b.set_healthy(1, false);
  EXPECT_EQ(error_of([&] { (void)b.balance(); }), ErrorCode::NoWorkerAvailable);
}

TEST(Balancer, StrategyNames) {
  EXPECT_EQ(parse_lb_strategy("round_robin"), LbStrategy::RoundRobin);
  EXPECT_EQ(parse_lb_strategy("least_connections"), LbStrategy::LeastConnections);
  EXPECT_EQ(error_of([] { (void)parse_lb_strategy("random"); }), ErrorCode::BadConfig);
}

TEST(Store, LineProtocol) {
  CounterStore s;
  EXPECT_EQ(s.handle_line("GET pings:0"), "0\n");
  EXPECT_EQ(s.handle_line("INCR pings:0\n"), "1\n");
  s.handle_line("INCR pings:0");
  EXPECT_EQ(s.handle_line("INCR pings:0"), "3\n");
  s.handle_line("INCR pings:1");
  s.handle_line("INCR other");
  EXPECT_EQ(s.handle_line("SUM pings:"), "4\n");
  EXPECT_EQ(s.handle_line("BOGUS x"), "-ERR\n");
  EXPECT_EQ(s.handle_line("INCR"), "-ERR\n");
}

TEST(FdLimit, WarnsBelowExpectedPlusHeadroom) {
  EXPECT_TRUE(fd_limit_warning(1000, 1024));
  EXPECT_TRUE(fd_limit_warning(1000, 1099));
  EXPECT_FALSE(fd_limit_warning(1000, 1100));
  EXPECT_FALSE(fd_limit_warning(10, 1024));
}

TEST(ClusterConfig, ValidateAndRoundTrip) {
  ClusterConfig c;
  c.n_workers = 3;
  c.lb_strategy = LbStrategy::LeastConnections;
  c.send_queue_cap = 7;
  c.validate();
  const auto back = ClusterConfig::from_key_values(c.to_key_values());
  EXPECT_EQ(back.n_workers, 3u);
  EXPECT_EQ(back.lb_strategy, LbStrategy::LeastConnections);
  EXPECT_EQ(back.send_queue_cap, 7u);

  ClusterConfig bad;
  bad.n_workers = 0;
  EXPECT_EQ(error_of([&] { bad.validate(); }), ErrorCode::BadConfig);
  ClusterConfig overlap;
  overlap.store_port = overlap.public_port;
  overlap.n_stores = 1;
  EXPECT_EQ(error_of([&] { overlap.validate(); }), ErrorCode::BadConfig);
}

ClusterConfig local_config(std::size_t lbs, std::size_t workers, std::size_t stores) {
  const auto base = testing::free_port_block(2 + workers);
  ClusterConfig c;
  c.n_load_balancers = lbs;
  c.n_workers = workers;
  c.n_stores = stores;
  c.public_port = base;
  c.store_port = static_cast<std::uint16_t>(base + 1);
  c.worker_base_port = static_cast<std::uint16_t>(base + 2);
  return c;
}

std::size_t count_role(const ClusterHandle &h, Role r) {
  std::size_t n = 0;
  for (const auto &p : h.processes()) n += p.role == r;
  return n;
}

TEST(Spawn, OneOfEachIsHealthy) {
  auto h = spawn(local_config(1, 1, 1));
  EXPECT_EQ(h.processes().size(), 3u);
  EXPECT_TRUE(h.healthy());
  for (const auto &p : h.processes()) {
    EXPECT_EQ(h.control(p, "PING"), "PONG");
  }
  const auto report = h.shutdown();
  ASSERT_EQ(report.workers.size(), 1u);
  EXPECT_EQ(report.workers[0].active_conns, 0u);
  EXPECT_EQ(report.workers[0].pings_received, 0u);
  EXPECT_EQ(report.workers[0].drops, 0u);
  EXPECT_EQ(report.store_pings_sum, 0);
}

TEST(Spawn, ThreeBalancersThreeWorkers) {
  auto h = spawn(local_config(3, 3, 0));
  EXPECT_EQ(h.processes().size(), 6u);
  EXPECT_EQ(count_role(h, Role::LoadBalancer), 3u);
  EXPECT_EQ(count_role(h, Role::Worker), 3u);
  EXPECT_TRUE(h.healthy());
  const auto report = h.shutdown();
  EXPECT_EQ(report.workers.size(), 3u);
  EXPECT_FALSE(report.store_pings_sum);
}

TEST(Spawn, PortInUseStartsNothing) {
  auto cfg = local_config(1, 1, 0);
  Fd squatter = listen_tcp(cfg.public_port);
  ASSERT_TRUE(squatter);
  EXPECT_EQ(error_of([&] { (void)spawn(cfg); }), ErrorCode::PortInUse);
  EXPECT_EQ(::waitpid(-1, nullptr, WNOHANG), -1);
}

class ClusterE2E : public ::testing::Test {
 protected:
  void start(ClusterConfig cfg) { handle_.emplace(spawn(cfg)); }
  std::uint16_t port() const { return handle_->config().public_port; }
  std::optional<ClusterHandle> handle_;
};

TEST_F(ClusterE2E, PingThroughBalancerGetsCounterOne) {
  start(local_config(1, 1, 1));
  WsTestClient c(port());
  c.send_text(R"({"e":"ping","d":42})");
  const auto f = c.read_frame();
  ASSERT_TRUE(f);
  EXPECT_EQ(f->opcode, Opcode::Text);
  const auto ev = decode_event(as_chars(f->payload));
  ASSERT_TRUE(ev);
  EXPECT_EQ(ev->e, "pong");
  EXPECT_EQ(ev->c, 1);
  c.send(Opcode::Close, "");
  const auto report = handle_->shutdown();
  EXPECT_EQ(report.workers.at(0).pings_received, 1u);
  EXPECT_EQ(report.workers.at(0).pongs_sent, 1u);
  EXPECT_EQ(report.store_pings_sum, 1);
}

TEST_F(ClusterE2E, GetFileReturnsBinaryFixture) {
  start(local_config(1, 1, 0));
  WsTestClient c(port());
  c.send_text(R"({"e":"getfile","d":"foo.txt"})");
  const auto f = c.read_frame();
  ASSERT_TRUE(f);
  EXPECT_EQ(f->opcode, Opcode::Binary);
  EXPECT_EQ(f->payload.size(), 92u);
  const auto reply = decode_file_reply(f->payload);
  ASSERT_TRUE(reply);
  EXPECT_EQ(reply->name, "foo.txt");
}

TEST_F(ClusterE2E, PlainGetServesStaticPage) {
  start(local_config(1, 1, 0));
  const auto resp = testing::http_exchange(port(), "GET / HTTP/1.1\r\nHost: x\r\n\r\n");
  EXPECT_EQ(resp.rfind("HTTP/1.1 200", 0), 0u) << resp;
  EXPECT_NE(resp.find(index_page()), std::string::npos);
}

TEST_F(ClusterE2E, ConnectionPastCapGetsTryAgainLater) {
  auto cfg = local_config(1, 1, 0);
  cfg.max_conns_per_worker = 1;
  start(cfg);
  WsTestClient first(port(), 1);
  first.send_text(R"({"e":"ping"})");
  ASSERT_TRUE(first.read_frame());
  WsTestClient second(port(), 2);
  const auto f = second.read_frame();
  ASSERT_TRUE(f);
  EXPECT_EQ(f->opcode, Opcode::Close);
  EXPECT_EQ(close_status(*f), close_code::kTryAgainLater);
  EXPECT_GE(handle_->worker_stats().at(0).drops, 1u);
}

TEST_F(ClusterE2E, ShutdownSendsGoingAway) {
  start(local_config(1, 1, 0));
  WsTestClient c(port());
  c.send_text(R"({"e":"ping"})");
  ASSERT_TRUE(c.read_frame());
  std::thread t([&] { handle_->shutdown(); });
  const auto f = c.read_frame(5000ms);
  if (f && f->opcode == Opcode::Close) c.send(Opcode::Close, "");
  t.join();
  ASSERT_TRUE(f);
  EXPECT_EQ(f->opcode, Opcode::Close);
  EXPECT_EQ(close_status(*f), close_code::kGoingAway);
}

TEST_F(ClusterE2E, OversizedMessageClosesWithTooBig) {
  auto cfg = local_config(1, 1, 0);
  cfg.max_payload = 1024;
  start(cfg);
  WsTestClient c(port());
  c.send_text(std::string(4096, 'x'));
  const auto f = c.read_frame();
  ASSERT_TRUE(f);
  EXPECT_EQ(f->opcode, Opcode::Close);
  EXPECT_EQ(close_status(*f), close_code::kMessageTooBig);
}

TEST_F(ClusterE2E, SlowReaderIsDroppedAtQueueCap) {
  auto cfg = local_config(1, 1, 0);
  cfg.send_queue_cap = 4;
  start(cfg);
  WsTestClient c(port());
  // Pipeline far more large replies than the cap without reading any.
  Bytes burst;
  MaskGenerator masks(9);
  for (int i = 0; i < 64; ++i) {
    Frame f;
    f.opcode = Opcode::Text;
    f.mask_key = masks.next();
    const std::string body = R"({"e":"getfile","d":"gen-512000.bin"})";
    f.payload.assign(body.begin(), body.end());
    const auto wire = encode_frame(f);
    burst.insert(burst.end(), wire.begin(), wire.end());
  }
  testing::send_all(c.fd(), burst);
  EXPECT_TRUE(c.wait_closed(10000ms));
  std::this_thread::sleep_for(100ms);
  const auto stats = handle_->worker_stats().at(0);
  EXPECT_GE(stats.drops, 1u);
  EXPECT_EQ(stats.active_conns, 0u);
}

TEST_F(ClusterE2E, StoreSumMatchesWorkerPings) {
  start(local_config(1, 2, 1));
  std::vector<std::unique_ptr<WsTestClient>> clients;
  for (int i = 0; i < 4; ++i) clients.push_back(std::make_unique<WsTestClient>(port(), 100 + i));
  std::uint64_t sent = 0;
  for (int round = 0; round < 5; ++round) {
    for (auto &c : clients) {
      c->send_text(R"({"e":"ping"})");
      ASSERT_TRUE(c->read_frame());
      ++sent;
    }
  }
  for (auto &c : clients) c->send(Opcode::Close, "");
  const auto report = handle_->shutdown();
  std::uint64_t pings = 0;
  for (const auto &w : report.workers) pings += w.pings_received;
  EXPECT_EQ(pings, sent);
  EXPECT_EQ(report.store_pings_sum, static_cast<std::int64_t>(sent));
  EXPECT_GT(report.workers.at(0).pings_received, 0u);
  EXPECT_GT(report.workers.at(1).pings_received, 0u);
}

}  // namespace
}  // namespace wsforge
