#pragma once

#include <compare>

namespace msnet {

/// 1-based data-site identifier, as used in files and reports.
struct SiteId {
  int value = 1;

  constexpr int index() const { return value - 1; }
  static constexpr SiteId from_index(int i) { return SiteId{i + 1}; }
  auto operator<=>(const SiteId&) const = default;
};

}  // namespace msnet
