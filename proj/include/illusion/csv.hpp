#pragma once

#include <cstdio>
#include <string>

namespace illusion {

/// Six significant digits, the numeric format of every emitted table.
inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v == 0.0 ? 0.0 : v);  // no "-0"
  return buf;
}

}  // namespace illusion
