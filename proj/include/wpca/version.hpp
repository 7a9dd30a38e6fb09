#pragma once

namespace wpca {

inline constexpr const char* version = "0.1.0";

}  // namespace wpca
