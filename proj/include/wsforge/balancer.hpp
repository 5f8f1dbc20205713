#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace wsforge {

enum class LbStrategy { RoundRobin, LeastConnections };

std::string_view to_string(LbStrategy s) noexcept;
LbStrategy parse_lb_strategy(std::string_view text);

/// Worker selection for one load balancer. Counts are this balancer's own
/// view of the connections it has spliced to each worker.
class BalancerState {
 public:
  BalancerState(std::size_t n_workers, LbStrategy strategy);

  /// Picks a healthy worker. Throws NoWorkerAvailable when none is.
  std::size_t balance();

  void on_open(std::size_t worker) { ++active_.at(worker); }
  void on_close(std::size_t worker) {
    if (active_.at(worker) > 0) --active_[worker];
  }
  void set_healthy(std::size_t worker, bool healthy) { healthy_.at(worker) = healthy; }
  void set_active(std::size_t worker, std::size_t n) { active_.at(worker) = n; }

  [[nodiscard]] std::size_t active(std::size_t worker) const { return active_.at(worker); }
  [[nodiscard]] std::size_t size() const noexcept { return active_.size(); }
  [[nodiscard]] LbStrategy strategy() const noexcept { return strategy_; }

 private:
  LbStrategy strategy_;
  std::vector<std::size_t> active_;
  std::vector<bool> healthy_;
  std::size_t next_ = 0;
};

struct BalancerOptions {
  int index = 0;
  std::uint16_t public_port = 0;
  std::uint16_t worker_base_port = 0;
  std::size_t n_workers = 1;
  LbStrategy strategy = LbStrategy::RoundRobin;
  std::string control_name;
};

/// Accepts public connections and splices each one to a worker.
int run_balancer(const BalancerOptions &options);

}  // namespace wsforge
