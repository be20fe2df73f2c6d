#pragma once

namespace prethermal {

inline constexpr const char* version = "0.1.0";

}  // namespace prethermal
