/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The sonosynth Authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef SONOSYNTH_METRICS_HPP
#define SONOSYNTH_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sonosynth/io.hpp"
#include "sonosynth/volume.hpp"

namespace sonosynth {

struct Pixel {
  int i = 0;  // column
  int j = 0;  // row

  auto operator<=>(const Pixel&) const = default;
};

/// One connected component of same-label pixels. `pixels` and `boundary` are
/// sorted row-major.
struct Island {
  int class_label = 0;
  std::vector<Pixel> pixels;
  std::vector<Pixel> boundary;

  std::size_t area_px() const { return pixels.size(); }
};

struct MatchConfig {
  int min_area_px = 50;
  double tol_mm = 5.0;
  double pixel_spacing_mm = 0.3;
  int connectivity = 8;   // 4 or 8, for components; boundaries always use 4
  bool gate_gt = true;    // apply min_area_px to ground-truth islands as well

  void validate() const {
    if (min_area_px < 0) throw std::invalid_argument("min_area_px must be >= 0");
    if (!(tol_mm >= 0.0)) throw std::invalid_argument("tol_mm must be >= 0");
    if (!(pixel_spacing_mm > 0.0)) throw std::invalid_argument("pixel_spacing_mm must be > 0");
    if (connectivity != 4 && connectivity != 8) throw std::invalid_argument("connectivity must be 4 or 8");
  }
};

struct ClassCounts {
  int tp = 0;
  int fp = 0;
  int fn = 0;

  bool operator==(const ClassCounts&) const = default;
};

struct FrameMatch {
  std::map<int, ClassCounts> per_class;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (pred index, nearest gt index) per TP
};

/// Connected components of every nonzero class; islands smaller than
/// `min_area_px` are dropped. Order: by first pixel in row-major scan.
inline std::vector<Island> extract_islands(const LabelSlice2D& image, int connectivity,
                                           int min_area_px) {
  if (connectivity != 4 && connectivity != 8) throw std::invalid_argument("connectivity must be 4 or 8");
  const int W = image.width;
  const int H = image.height;
  std::vector<int> component(image.pixels.size(), -1);
  std::vector<Island> islands;
  std::vector<Pixel> stack;
  static constexpr int kOffsets8[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1},
                                          {1, 1}, {-1, -1}, {1, -1}, {-1, 1}};
  const int n_offsets = connectivity == 8 ? 8 : 4;
  int next_id = 0;
  for (int j = 0; j < H; ++j) {
    for (int i = 0; i < W; ++i) {
      const std::size_t start = static_cast<std::size_t>(j) * W + i;
      const int label = image.pixels[start];
      if (label == 0 || component[start] >= 0) continue;
      Island island;
      island.class_label = label;
      component[start] = next_id;
      stack.assign(1, {i, j});
      while (!stack.empty()) {
        const Pixel p = stack.back();
        stack.pop_back();
        island.pixels.push_back(p);
        for (int o = 0; o < n_offsets; ++o) {
          const int x = p.i + kOffsets8[o][0];
          const int y = p.j + kOffsets8[o][1];
          if (x < 0 || y < 0 || x >= W || y >= H) continue;
          const std::size_t q = static_cast<std::size_t>(y) * W + x;
          if (component[q] >= 0 || image.pixels[q] != label) continue;
          component[q] = next_id;
          stack.push_back({x, y});
        }
      }
      ++next_id;
      if (static_cast<int>(island.pixels.size()) < min_area_px) continue;
      std::sort(island.pixels.begin(), island.pixels.end(),
                [](const Pixel& a, const Pixel& b) { return a.j != b.j ? a.j < b.j : a.i < b.i; });
      for (const Pixel& p : island.pixels) {
        auto outside = [&](int x, int y) {
          return x < 0 || y < 0 || x >= W || y >= H ||
                 component[static_cast<std::size_t>(y) * W + x] != component[start];
        };
        if (outside(p.i + 1, p.j) || outside(p.i - 1, p.j) || outside(p.i, p.j + 1) ||
            outside(p.i, p.j - 1)) {
          island.boundary.push_back(p);
        }
      }
      islands.push_back(std::move(island));
    }
  }
  return islands;
}

inline std::vector<Island> extract_islands(const LabelSlice2D& image, const MatchConfig& config) {
  config.validate();
  return extract_islands(image, config.connectivity, config.min_area_px);
}

namespace detail {

inline bool row_major_less(const Pixel& a, const Pixel& b) {
  return a.j != b.j ? a.j < b.j : a.i < b.i;
}

inline bool overlaps(const std::vector<Pixel>& a, const std::vector<Pixel>& b) {
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia == *ib) return true;
    if (row_major_less(*ia, *ib)) {
      ++ia;
    } else {
      ++ib;
    }
  }
  return false;
}

}  // namespace detail

/// Minimum center-to-center distance between boundary pixels, in mm.
/// Islands that share any pixel are at distance 0.
inline double surface_distance_mm(const Island& a, const Island& b, double spacing_mm) {
  if (a.pixels.empty() || b.pixels.empty() || a.boundary.empty() || b.boundary.empty()) {
    throw std::invalid_argument("surface distance needs two non-empty islands");
  }
  if (detail::overlaps(a.pixels, b.pixels)) return 0.0;

  // b.boundary is row-major sorted: index its rows, then for each pixel of a
  // visit rows outward from its own until the row gap alone exceeds the best.
  const auto& bb = b.boundary;
  const int row_lo = bb.front().j;
  const int row_hi = bb.back().j;
  std::vector<std::size_t> row_start(static_cast<std::size_t>(row_hi - row_lo) + 2, bb.size());
  for (std::size_t n = bb.size(); n-- > 0;) row_start[bb[n].j - row_lo] = n;
  for (std::size_t r = row_start.size() - 1; r-- > 0;) {
    row_start[r] = std::min(row_start[r], row_start[r + 1]);
  }
  auto row_range = [&](int row) -> std::pair<std::size_t, std::size_t> {
    if (row < row_lo || row > row_hi) return {0, 0};
    return {row_start[row - row_lo], row_start[row - row_lo + 1]};
  };

  long long best = std::numeric_limits<long long>::max();
  for (const Pixel& p : a.boundary) {
    for (int dr = 0;; ++dr) {
      const long long row_gap2 = static_cast<long long>(dr) * dr;
      if (row_gap2 >= best) break;
      if (p.j - dr < row_lo && p.j + dr > row_hi) break;
      for (int row : {p.j - dr, p.j + dr}) {
        if (dr == 0 && row != p.j) continue;
        const auto [first, last] = row_range(row);
        if (first >= last) continue;
        auto it = std::lower_bound(bb.begin() + first, bb.begin() + last, p.i,
                                   [](const Pixel& q, int col) { return q.i < col; });
        for (auto cand : {it, it == bb.begin() + first ? bb.begin() + last : it - 1}) {
          if (cand == bb.begin() + last) continue;
          const long long dx = cand->i - p.i;
          best = std::min(best, row_gap2 + dx * dx);
        }
        if (dr == 0) break;
      }
    }
  }
  return std::sqrt(static_cast<double>(best)) * spacing_mm;
}

/// Island-level matching: a predicted island is TP if some same-label GT island
/// lies within tol_mm, else FP; a GT island with no same-label prediction
/// within tol_mm is FN.
inline FrameMatch match_islands(const std::vector<Island>& pred, const std::vector<Island>& gt,
                                const MatchConfig& config) {
  config.validate();
  FrameMatch m;
  std::vector<bool> gt_hit(gt.size(), false);
  for (std::size_t a = 0; a < pred.size(); ++a) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_gt = gt.size();
    for (std::size_t b = 0; b < gt.size(); ++b) {
      if (gt[b].class_label != pred[a].class_label) continue;
      const double d = surface_distance_mm(pred[a], gt[b], config.pixel_spacing_mm);
      if (d <= config.tol_mm) {
        gt_hit[b] = true;
        if (d < best) {
          best = d;
          best_gt = b;
        }
      }
    }
    auto& counts = m.per_class[pred[a].class_label];
    if (best_gt < gt.size()) {
      ++counts.tp;
      m.pairs.emplace_back(a, best_gt);
    } else {
      ++counts.fp;
    }
  }
  for (std::size_t b = 0; b < gt.size(); ++b) {
    auto& counts = m.per_class[gt[b].class_label];
    if (!gt_hit[b]) ++counts.fn;
  }
  return m;
}

/// Extract (with gating) and match one prediction / ground-truth frame.
inline FrameMatch evaluate_frame(const LabelSlice2D& pred, const LabelSlice2D& gt,
                                 const MatchConfig& config) {
  config.validate();
  if (pred.width != gt.width || pred.height != gt.height) {
    throw std::invalid_argument("prediction and ground truth sizes differ");
  }
  const auto p = extract_islands(pred, config.connectivity, config.min_area_px);
  const auto g = extract_islands(gt, config.connectivity, config.gate_gt ? config.min_area_px : 0);
  return match_islands(p, g, config);
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
  int n = 0;         // contributing values
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  r.n = static_cast<int>(v.size());
  if (v.empty()) return r;
  double sum = 0.0;
  for (double x : v) sum += x;
  r.mean = sum / v.size();
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / v.size());
  return r;
}

/// Per-frame scores for one class; empty optional when excluded.
struct FrameScore {
  bool has_precision = false;
  bool has_recall = false;
  double precision = 0.0;
  double recall = 0.0;
};

/// Precision is tp/(tp+fp); a class with GT islands but no predictions scores 0;
/// a class absent from both is excluded. Recall is tp/(tp+fn), excluded when no
/// GT island and no TP exist.
inline FrameScore frame_score(const ClassCounts& c) {
  FrameScore s;
  if (c.tp + c.fp > 0) {
    s.has_precision = true;
    s.precision = static_cast<double>(c.tp) / (c.tp + c.fp);
  } else if (c.fn > 0) {
    s.has_precision = true;
  }
  if (c.tp + c.fn > 0) {
    s.has_recall = true;
    s.recall = static_cast<double>(c.tp) / (c.tp + c.fn);
  }
  return s;
}

struct ClassReport {
  MeanStd precision;
  MeanStd recall;
};

struct PRReport {
  std::map<int, ClassReport> per_class;
  ClassReport class_mean;  // mean / std over the per-class means
  ClassReport frame_mean;  // mean / std over frames of each frame's class-averaged score
  int frames = 0;
};

/// Aggregate frames into per-class mean +- std. `classes` restricts the report
/// to those labels; empty means every label seen in any frame.
inline PRReport precision_recall(const std::vector<FrameMatch>& frames,
                                 std::vector<int> classes = {}) {
  if (frames.empty()) throw std::invalid_argument("precision_recall needs at least one frame");
  if (classes.empty()) {
    for (const auto& f : frames) {
      for (const auto& [k, c] : f.per_class) classes.push_back(k);
    }
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  }
  PRReport report;
  report.frames = static_cast<int>(frames.size());
  std::map<int, std::vector<double>> prec;
  std::map<int, std::vector<double>> rec;
  std::vector<double> frame_prec;
  std::vector<double> frame_rec;
  for (const auto& f : frames) {
    std::vector<double> fp;
    std::vector<double> fr;
    for (int k : classes) {
      auto it = f.per_class.find(k);
      const FrameScore s = frame_score(it == f.per_class.end() ? ClassCounts{} : it->second);
      if (s.has_precision) {
        prec[k].push_back(s.precision);
        fp.push_back(s.precision);
      }
      if (s.has_recall) {
        rec[k].push_back(s.recall);
        fr.push_back(s.recall);
      }
    }
    if (!fp.empty()) frame_prec.push_back(mean_std(fp).mean);
    if (!fr.empty()) frame_rec.push_back(mean_std(fr).mean);
  }
  std::vector<double> class_prec;
  std::vector<double> class_rec;
  for (int k : classes) {
    ClassReport r{mean_std(prec[k]), mean_std(rec[k])};
    if (r.precision.n > 0) class_prec.push_back(r.precision.mean);
    if (r.recall.n > 0) class_rec.push_back(r.recall.mean);
    report.per_class[k] = r;
  }
  report.class_mean = {mean_std(class_prec), mean_std(class_rec)};
  report.frame_mean = {mean_std(frame_prec), mean_std(frame_rec)};
  return report;
}

inline Json to_json(const MeanStd& m) { return Json{{"mean", m.mean}, {"std", m.std}, {"n", m.n}}; }

inline std::string class_name(const std::map<int, std::string>& names, int k) {
  auto it = names.find(k);
  return it == names.end() ? "class" + std::to_string(k) : it->second;
}

inline Json to_json(const PRReport& r, const std::map<int, std::string>& names = {}) {
  Json j;
  j["frames"] = r.frames;
  j["classes"] = Json::array();
  for (const auto& [k, c] : r.per_class) {
    j["classes"].push_back({{"id", k},
                            {"name", class_name(names, k)},
                            {"precision", to_json(c.precision)},
                            {"recall", to_json(c.recall)}});
  }
  j["mean_over_classes"] = {{"precision", to_json(r.class_mean.precision)},
                            {"recall", to_json(r.class_mean.recall)}};
  j["mean_over_frames"] = {{"precision", to_json(r.frame_mean.precision)},
                           {"recall", to_json(r.frame_mean.recall)}};
  return j;
}

/// Aligned text table: one column per class plus the two mean columns.
inline std::string format_table(const PRReport& r, const std::map<int, std::string>& names = {}) {
  std::vector<std::string> header{"Metric"};
  for (const auto& [k, c] : r.per_class) header.push_back(class_name(names, k));
  header.push_back("Mean(classes)");
  header.push_back("Mean(frames)");
  auto cell = [](const MeanStd& m) {
    if (m.n == 0) return std::string("n/a");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f \xC2\xB1 %.2f", m.mean, m.std);
    return std::string(buf);
  };
  std::vector<std::vector<std::string>> rows{header};
  for (int which = 0; which < 2; ++which) {
    std::vector<std::string> row{which == 0 ? "Precision" : "Recall"};
    for (const auto& [k, c] : r.per_class) row.push_back(cell(which == 0 ? c.precision : c.recall));
    row.push_back(cell(which == 0 ? r.class_mean.precision : r.class_mean.recall));
    row.push_back(cell(which == 0 ? r.frame_mean.precision : r.frame_mean.recall));
    rows.push_back(row);
  }
  // Display width: the +- sign is two bytes in UTF-8 but one column.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], width(row[c]));
  }
  std::string out;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      out += row[c];
      if (c + 1 < row.size()) out += std::string(widths[c] - width(row[c]) + 2, ' ');
    }
    out += "\n";
  }
  return out;
}

inline void to_json(Json& j, const MatchConfig& c) {
  j = Json{{"min_area_px", c.min_area_px},
           {"tol_mm", c.tol_mm},
           {"pixel_spacing_mm", c.pixel_spacing_mm},
           {"connectivity", c.connectivity},
           {"gate_gt", c.gate_gt}};
}

inline void from_json(const Json& j, MatchConfig& c) {
  c.min_area_px = j.value("min_area_px", c.min_area_px);
  c.tol_mm = j.value("tol_mm", c.tol_mm);
  c.pixel_spacing_mm = j.value("pixel_spacing_mm", c.pixel_spacing_mm);
  c.connectivity = j.value("connectivity", c.connectivity);
  c.gate_gt = j.value("gate_gt", c.gate_gt);
}

}  // namespace sonosynth

#endif  // SONOSYNTH_METRICS_HPP
