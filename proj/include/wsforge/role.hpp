#pragma once

#include <string_view>

namespace wsforge {

enum class Role { LoadBalancer, Worker, Store, Client };

std::string_view to_string(Role role) noexcept;
/// Throws BadConfig.
Role parse_role(std::string_view text);

}  // namespace wsforge
