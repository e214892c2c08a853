#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace msnet {

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;  // row-major, entries in {0,1}

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w);
  BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> values);

  std::uint8_t operator()(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::uint8_t& operator()(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  bool operator==(const BinaryMask&) const = default;
};

/// 2|A∩B| / (|A|+|B|); 1 when both are empty.
double dice_coefficient(const BinaryMask& a, const BinaryMask& b);

/// Foreground pixels with at least one background 4-neighbour; outside the image counts as background.
BinaryMask boundary(const BinaryMask& mask);

/// Symmetric mean boundary-to-boundary Euclidean distance in pixels. Throws
/// UndefinedMetricError when either mask is empty.
double avg_symmetric_distance(const BinaryMask& a, const BinaryMask& b);

/// Largest 8-connected component; ties go to the component whose first pixel comes earliest in row-major order.
BinaryMask largest_component(const BinaryMask& mask);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  int dof = 0;
  bool degenerate = false;  // zero-variance differences
};

/// Two-sided paired t-test on x - y. Zero-variance differences give p = 1
/// when the mean difference is zero and p = 0 (flagged degenerate) otherwise.
TTestResult paired_t_test(std::span<const double> x, std::span<const double> y);

}  // namespace msnet
