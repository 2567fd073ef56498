#pragma once

namespace gaitcl {

inline constexpr const char* kVersion = "gaitcl 0.1.0";

}  // namespace gaitcl
