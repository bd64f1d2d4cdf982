#pragma once

namespace whorl {
inline constexpr const char* kVersion = "0.3.0";
}
