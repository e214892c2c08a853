#include "msnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/special_functions/beta.hpp>

#include "msnet/errors.hpp"

namespace msnet {

namespace {

void check_binary(const BinaryMask& m) {
  if (m.bits.size() != m.height * m.width)
    throw DimensionError("mask holds " + std::to_string(m.bits.size()) + " entries for " + std::to_string(m.height) + "x" +
                         std::to_string(m.width));
  for (std::uint8_t b : m.bits)
    if (b > 1) throw DataError("mask entries must be 0 or 1");
}

void check_same(const BinaryMask& a, const BinaryMask& b) {
  check_binary(a);
  check_binary(b);
  if (a.height != b.height || a.width != b.width)
    throw DimensionError("mask shapes differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width));
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Exact 1-D squared distance transform (lower envelope of parabolas).
void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    while (k >= 0) {
      double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
      if (s <= z[k]) --k;
      else break;
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : ((f[q] + double(q) * q) - (f[v[k - 1]] + double(v[k - 1]) * v[k - 1])) /
                                 (2.0 * q - 2.0 * v[k - 1]);
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    double dq = q - v[j];
    d[q] = dq * dq + f[v[j]];
  }
}

// Squared Euclidean distance from every pixel to the nearest set pixel of `sites`.
std::vector<double> squared_distance_map(const BinaryMask& sites) {
  const std::size_t h = sites.height, w = sites.width;
  std::vector<double> grid(h * w);
  for (std::size_t k = 0; k < h * w; ++k) grid[k] = sites.bits[k] ? 0.0 : kInf;
  const std::size_t n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  f.resize(h);
  d.resize(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = grid[y * w + x];
    edt_1d(f, d, v, z);
    for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = d[y];
  }
  f.resize(w);
  d.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(grid.begin() + static_cast<std::ptrdiff_t>(y * w), w, f.begin());
    edt_1d(f, d, v, z);
    std::copy_n(d.begin(), w, grid.begin() + static_cast<std::ptrdiff_t>(y * w));
  }
  return grid;
}

}  // namespace

BinaryMask::BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

BinaryMask::BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> values)
    : height(h), width(w), bits(std::move(values)) {
  check_binary(*this);
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

double dice_coefficient(const BinaryMask& a, const BinaryMask& b) {
  check_same(a, b);
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t k = 0; k < a.bits.size(); ++k) {
    na += a.bits[k];
    nb += b.bits[k];
    both += a.bits[k] & b.bits[k];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

BinaryMask boundary(const BinaryMask& m) {
  check_binary(m);
  BinaryMask out(m.height, m.width);
  const std::size_t h = m.height, w = m.width;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!m(y, x)) continue;
      bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || !m(y - 1, x) || !m(y + 1, x) || !m(y, x - 1) ||
                  !m(y, x + 1);
      out(y, x) = edge ? 1 : 0;
    }
  return out;
}

double avg_symmetric_distance(const BinaryMask& a, const BinaryMask& b) {
  check_same(a, b);
  if (a.empty() || b.empty()) throw UndefinedMetricError("average symmetric distance is undefined for an empty mask");
  BinaryMask ba = boundary(a), bb = boundary(b);
  std::vector<double> to_b = squared_distance_map(bb), to_a = squared_distance_map(ba);
  double sum_a = 0.0, sum_b = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < ba.bits.size(); ++k)
    if (ba.bits[k]) {
      sum_a += std::sqrt(to_b[k]);
      ++n;
    }
  for (std::size_t k = 0; k < bb.bits.size(); ++k)
    if (bb.bits[k]) {
      sum_b += std::sqrt(to_a[k]);
      ++n;
    }
  return (sum_a + sum_b) / static_cast<double>(n);
}

BinaryMask largest_component(const BinaryMask& mask) {
  check_binary(mask);
  const std::size_t h = mask.height, w = mask.width;
  std::vector<int> label(h * w, -1);
  std::vector<std::size_t> stack;
  int best = -1, current = 0;
  std::size_t best_size = 0;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!mask.bits[start] || label[start] >= 0) continue;
    std::size_t size = 0;
    label[start] = current;
    stack.push_back(start);
    while (!stack.empty()) {
      std::size_t k = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t y = k / w, x = k % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
          const std::size_t nk = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
          if (mask.bits[nk] && label[nk] < 0) {
            label[nk] = current;
            stack.push_back(nk);
          }
        }
    }
    // components are discovered in row-major order of their first pixel, so strict > keeps the earliest on ties
    if (size > best_size) {
      best_size = size;
      best = current;
    }
    ++current;
  }
  BinaryMask out(h, w);
  for (std::size_t k = 0; k < h * w; ++k) out.bits[k] = label[k] == best && best >= 0 ? 1 : 0;
  return out;
}

TTestResult paired_t_test(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("paired t-test needs equal lengths");
  if (x.size() < 2) throw ContractError("paired t-test needs at least two pairs");
  const std::size_t n = x.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - y[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  TTestResult r;
  r.dof = static_cast<int>(n - 1);
  if (sd == 0.0) {
    r.degenerate = mean != 0.0;
    r.t = mean == 0.0 ? 0.0 : std::copysign(kInf, mean);
    r.p = mean == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.t = mean * std::sqrt(static_cast<double>(n)) / sd;
  const double nu = r.dof;
  r.p = boost::math::ibeta(nu / 2.0, 0.5, nu / (nu + r.t * r.t));
  return r;
}

}  // namespace msnet
