#pragma once

namespace logitlens {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace logitlens
