#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "sonoseg/tensor.hpp"

namespace sonoseg {

struct BinaryMask {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> v;  // row-major 0/1

  BinaryMask() = default;
  BinaryMask(int64_t h_, int64_t w_) : h(h_), w(w_), v(static_cast<size_t>(h_ * w_), 0) {}

  bool at(int64_t y, int64_t x) const { return v[static_cast<size_t>(y * w + x)] != 0; }
  void set(int64_t y, int64_t x, bool on) { v[static_cast<size_t>(y * w + x)] = on ? 1 : 0; }
  int64_t count() const {
    int64_t c = 0;
    for (uint8_t b : v) c += b;
    return c;
  }
  bool empty_mask() const { return count() == 0; }
};

// sigmoid(logit) > 0.5 is exactly logit > 0
inline BinaryMask threshold_mask(const Tensor& logits) {
  if (logits.rank() != 3 || logits.dim(0) != 1)
    throw ShapeError("threshold expects logits [1,H,W], got " + shape_str(logits.shape()));
  BinaryMask m(logits.dim(1), logits.dim(2));
  for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = logits.data()[i] > 0.0 ? 1 : 0;
  return m;
}

inline Tensor mask_to_tensor(const BinaryMask& m) {
  std::vector<double> d(m.v.size());
  for (size_t i = 0; i < m.v.size(); ++i) d[i] = m.v[i] ? 1.0 : 0.0;
  return Tensor::from_data({1, m.h, m.w}, std::move(d));
}

namespace detail {
inline void check_same_extent(const BinaryMask& a, const BinaryMask& b, const char* what) {
  if (a.h != b.h || a.w != b.w)
    throw ShapeError(std::string(what) + ": mask extents differ (" + std::to_string(a.h) + "x" +
                     std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                     std::to_string(b.w) + ")");
}
}  // namespace detail

// 2|A∩B| / (|A|+|B|); both masks empty counts as perfect agreement.
inline double dice(const BinaryMask& a, const BinaryMask& b) {
  detail::check_same_extent(a, b, "dice");
  int64_t inter = 0, total = 0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    inter += a.v[i] & b.v[i];
    total += a.v[i] + b.v[i];
  }
  if (total == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

inline double iou(const BinaryMask& a, const BinaryMask& b) {
  detail::check_same_extent(a, b, "iou");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    inter += a.v[i] & b.v[i];
    uni += a.v[i] | b.v[i];
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double miou(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts) {
  if (preds.size() != gts.size())
    throw ContractViolation("miou: " + std::to_string(preds.size()) + " predictions vs " +
                            std::to_string(gts.size()) + " ground truths");
  if (preds.empty()) throw ContractViolation("miou of empty set");
  double s = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) s += iou(preds[i], gts[i]);
  return s / static_cast<double>(preds.size());
}

namespace detail {

// Felzenszwalb-Huttenlocher 1-D squared distance transform (lower envelope of
// parabolas rooted at f). Exact for integer grid distances.
inline void sq_dist_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
                       std::vector<double>& z) {
  int n = static_cast<int>(f.size());
  d.resize(n);
  v.resize(n);
  z.resize(n + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      int p = v[k];
      s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p));
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    int p = v[k];
    d[q] = (q - p) * (q - p) + f[p];
  }
}

// Squared Euclidean distance to the nearest foreground pixel, everywhere.
// Columns with no foreground use a large finite height instead of infinity so
// the parabola intersections stay well-defined; any such candidate is beaten
// by a true distance in the row pass as long as the mask is non-empty.
inline std::vector<double> sq_edt(const BinaryMask& m) {
  const double far = 1e15;
  std::vector<double> g(static_cast<size_t>(m.h * m.w));
  std::vector<double> col(static_cast<size_t>(m.h)), dcol;
  std::vector<int> vbuf;
  std::vector<double> zbuf;
  // columns first
  for (int64_t x = 0; x < m.w; ++x) {
    for (int64_t y = 0; y < m.h; ++y) col[y] = m.at(y, x) ? 0.0 : far;
    sq_dist_1d(col, dcol, vbuf, zbuf);
    for (int64_t y = 0; y < m.h; ++y) g[y * m.w + x] = dcol[y];
  }
  // then rows
  std::vector<double> row(static_cast<size_t>(m.w)), drow;
  for (int64_t y = 0; y < m.h; ++y) {
    for (int64_t x = 0; x < m.w; ++x) row[x] = g[y * m.w + x];
    sq_dist_1d(row, drow, vbuf, zbuf);
    for (int64_t x = 0; x < m.w; ++x) g[y * m.w + x] = drow[x];
  }
  return g;
}

}  // namespace detail

// Symmetric Hausdorff distance between foreground pixel sets (Euclidean, in
// pixels), via two exact distance transforms. Conventions: both masks empty
// -> 0; exactly one empty -> the image diagonal as an "infinitely wrong"
// sentinel that still aggregates finitely.
inline double hausdorff(const BinaryMask& a, const BinaryMask& b) {
  detail::check_same_extent(a, b, "hausdorff");
  bool ea = a.empty_mask(), eb = b.empty_mask();
  if (ea && eb) return 0.0;
  if (ea || eb) return std::hypot(static_cast<double>(a.h), static_cast<double>(a.w));
  auto da = detail::sq_edt(a);  // distance to A
  auto db = detail::sq_edt(b);  // distance to B
  double worst = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    if (a.v[i] && db[i] > worst) worst = db[i];
    if (b.v[i] && da[i] > worst) worst = da[i];
  }
  return std::sqrt(worst);
}

struct MetricReport {
  double dice = 0.0;
  double iou = 0.0;
  double hd = 0.0;
};

inline MetricReport score_pair(const BinaryMask& pred, const BinaryMask& gt) {
  return {dice(pred, gt), iou(pred, gt), hausdorff(pred, gt)};
}

}  // namespace sonoseg
