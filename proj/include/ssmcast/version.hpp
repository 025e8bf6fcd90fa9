#pragma once

namespace ssmcast {

inline constexpr const char* kToolName = "ssmcast";
inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace ssmcast
