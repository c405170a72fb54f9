#pragma once

namespace ikdrive {

inline constexpr const char* kToolVersion = "0.1.0";

}
