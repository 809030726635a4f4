#pragma once

namespace bridgeseg {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace bridgeseg
