#pragma once

#include <string>

#include "attrsearch/errors.hpp"

namespace attrsearch {

/// Bounding box in normalized [0,1] coordinates (row first, like the maps).
struct RoiBox {
  double y1 = 0.0;
  double x1 = 0.0;
  double y2 = 1.0;
  double x2 = 1.0;

  static RoiBox full() { return {0.0, 0.0, 1.0, 1.0}; }

  bool valid() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    return in01(y1) && in01(x1) && in01(y2) && in01(x2) && y1 <= y2 && x1 <= x2;
  }

  void validate() const {
    if (!valid()) {
      throw ArgumentError("invalid box [" + std::to_string(y1) + ", " + std::to_string(x1) +
                          ", " + std::to_string(y2) + ", " + std::to_string(x2) + "]");
    }
  }

  friend bool operator==(const RoiBox&, const RoiBox&) = default;
};

}  // namespace attrsearch
