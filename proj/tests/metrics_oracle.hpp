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

// Naive reference implementation of island evaluation for tests.

#ifndef SONOSYNTH_TESTS_METRICS_ORACLE_HPP
#define SONOSYNTH_TESTS_METRICS_ORACLE_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "sonosynth/metrics.hpp"
#include "sonosynth/volume.hpp"

namespace sonosynth::oracle {

struct NaiveIsland {
  int label = 0;
  std::set<std::pair<int, int>> pixels;    // (i, j)
  std::vector<std::pair<int, int>> boundary;
};

inline int find_root(std::vector<int>& parent, int x) {
  while (parent[x] != x) x = parent[x];
  return x;
}

/// Union-find labeling followed by an explicit area gate.
inline std::vector<NaiveIsland> islands(const LabelSlice2D& img, int connectivity, int min_area) {
  const int W = img.width, H = img.height;
  std::vector<int> parent(W * H);
  std::iota(parent.begin(), parent.end(), 0);
  auto label = [&](int i, int j) { return static_cast<int>(img.pixels[j * W + i]); };
  for (int j = 0; j < H; ++j)
    for (int i = 0; i < W; ++i) {
      if (label(i, j) == 0) continue;
      for (int dj = -1; dj <= 1; ++dj)
        for (int di = -1; di <= 1; ++di) {
          if (di == 0 && dj == 0) continue;
          if (connectivity == 4 && di != 0 && dj != 0) continue;
          const int x = i + di, y = j + dj;
          if (x < 0 || y < 0 || x >= W || y >= H || label(x, y) != label(i, j)) continue;
          parent[find_root(parent, j * W + i)] = find_root(parent, y * W + x);
        }
    }
  std::map<int, NaiveIsland> by_root;
  for (int j = 0; j < H; ++j)
    for (int i = 0; i < W; ++i) {
      if (label(i, j) == 0) continue;
      auto& isl = by_root[find_root(parent, j * W + i)];
      isl.label = label(i, j);
      isl.pixels.insert({i, j});
    }
  std::vector<NaiveIsland> out;
  for (auto& [root, isl] : by_root) {
    if (static_cast<int>(isl.pixels.size()) < min_area) continue;
    for (const auto& [i, j] : isl.pixels) {
      const bool edge = !isl.pixels.count({i + 1, j}) || !isl.pixels.count({i - 1, j}) ||
                        !isl.pixels.count({i, j + 1}) || !isl.pixels.count({i, j - 1});
      if (edge) isl.boundary.emplace_back(i, j);
    }
    out.push_back(std::move(isl));
  }
  return out;
}

inline double distance_mm(const NaiveIsland& a, const NaiveIsland& b, double spacing) {
  for (const auto& p : a.pixels)
    if (b.pixels.count(p)) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [ai, aj] : a.boundary)
    for (const auto& [bi, bj] : b.boundary) {
      const double dx = ai - bi, dy = aj - bj;
      best = std::min(best, std::sqrt(dx * dx + dy * dy));
    }
  return best * spacing;
}

inline std::map<int, ClassCounts> match(const std::vector<NaiveIsland>& pred, const std::vector<NaiveIsland>& gt,
                                        double tol, double spacing) {
  std::map<int, ClassCounts> counts;
  for (const auto& p : pred) {
    bool hit = false;
    for (const auto& g : gt) hit = hit || (g.label == p.label && distance_mm(p, g, spacing) <= tol);
    ++(hit ? counts[p.label].tp : counts[p.label].fp);
  }
  for (const auto& g : gt) {
    bool hit = false;
    for (const auto& p : pred) hit = hit || (g.label == p.label && distance_mm(p, g, spacing) <= tol);
    if (!hit) ++counts[g.label].fn;
  }
  return counts;
}

/// Drops classes whose counts are all zero so maps compare by content.
inline std::map<int, ClassCounts> nonzero(std::map<int, ClassCounts> m) {
  std::erase_if(m, [](const auto& kv) { return kv.second == ClassCounts{}; });
  return m;
}

inline std::map<int, ClassCounts> evaluate(const LabelSlice2D& pred, const LabelSlice2D& gt, const MatchConfig& c) {
  return nonzero(match(islands(pred, c.connectivity, c.min_area_px),
                       islands(gt, c.connectivity, c.gate_gt ? c.min_area_px : 0), c.tol_mm, c.pixel_spacing_mm));
}

/// Flat per-class mean / population std over the frames where each score is defined.
struct FlatAggregate {
  std::map<int, std::pair<double, double>> precision, recall;  // (mean, std)
};

inline std::pair<double, double> flat_mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= v.size();
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / v.size())};
}

inline FlatAggregate aggregate(const std::vector<std::map<int, ClassCounts>>& frames) {
  std::map<int, std::vector<double>> p, r;
  for (const auto& f : frames)
    for (const auto& [k, c] : f) {
      if (c.tp + c.fp > 0) p[k].push_back(double(c.tp) / (c.tp + c.fp));
      else if (c.fn > 0) p[k].push_back(0.0);
      if (c.tp + c.fn > 0) r[k].push_back(double(c.tp) / (c.tp + c.fn));
    }
  FlatAggregate a;
  for (const auto& [k, v] : p) a.precision[k] = flat_mean_std(v);
  for (const auto& [k, v] : r) a.recall[k] = flat_mean_std(v);
  return a;
}

/// Random frame pair: up to five GT blobs of mixed labels and a perturbed prediction.
struct FramePair {
  LabelSlice2D pred, gt;
  MatchConfig config;
};

inline void paint_blob(LabelSlice2D& img, std::mt19937& gen, int label) {
  std::uniform_int_distribution<int> shape(0, 2);
  std::uniform_real_distribution<double> cx(0, img.width - 1), cy(0, img.height - 1), r(1.5, 7.0);
  const double x0 = cx(gen), y0 = cy(gen), rx = r(gen), ry = r(gen);
  const int kind = shape(gen);
  if (kind == 2) {
    // Random walk stroke: thin, vessel-like.
    double x = x0, y = y0;
    std::normal_distribution<double> step(0.0, 1.0);
    const int len = std::uniform_int_distribution<int>(20, 90)(gen);
    for (int n = 0; n < len; ++n) {
      x = std::clamp(x + step(gen), 0.0, img.width - 1.0);
      y = std::clamp(y + step(gen), 0.0, img.height - 1.0);
      img.at(static_cast<int>(std::lround(x)), static_cast<int>(std::lround(y))) = static_cast<std::uint8_t>(label);
    }
    return;
  }
  for (int j = 0; j < img.height; ++j)
    for (int i = 0; i < img.width; ++i) {
      const double dx = (i - x0) / rx, dy = (j - y0) / ry;
      const bool in = kind == 0 ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
      if (in) img.at(i, j) = static_cast<std::uint8_t>(label);
    }
}

inline FramePair random_frame(std::uint32_t seed) {
  std::mt19937 gen(seed);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen); };
  const int W = pick(8, 64), H = pick(8, 64);
  FramePair f{LabelSlice2D(W, H, 1.0, 5), LabelSlice2D(W, H, 1.0, 5), {}};
  // Overlapping strokes can split blobs; redraw until at most five islands remain.
  do {
    std::fill(f.gt.pixels.begin(), f.gt.pixels.end(), 0);
    const int n = pick(0, 5);
    for (int b = 0; b < n; ++b) paint_blob(f.gt, gen, pick(1, 4));
  } while (islands(f.gt, 4, 0).size() > 5);
  const bool shifted = pick(0, 1) == 1;
  do {
    std::fill(f.pred.pixels.begin(), f.pred.pixels.end(), 0);
    if (shifted) {
      // Prediction is the ground truth moved by a few pixels, plus maybe one extra blob.
      const int dx = pick(-8, 8), dy = pick(-8, 8);
      for (int j = 0; j < H; ++j)
        for (int i = 0; i < W; ++i) {
          const int x = i - dx, y = j - dy;
          if (x >= 0 && y >= 0 && x < W && y < H) f.pred.at(i, j) = f.gt.at(x, y);
        }
      if (pick(0, 1)) paint_blob(f.pred, gen, pick(1, 4));
    } else {
      const int n = pick(0, 5);
      for (int b = 0; b < n; ++b) paint_blob(f.pred, gen, pick(1, 4));
    }
  } while (islands(f.pred, 4, 0).size() > 5);
  f.config.min_area_px = pick(0, 3) == 0 ? 0 : pick(5, 60);
  f.config.tol_mm = std::uniform_real_distribution<double>(0.0, 6.0)(gen);
  f.config.pixel_spacing_mm = std::uniform_real_distribution<double>(0.1, 0.6)(gen);
  f.config.connectivity = pick(0, 1) ? 8 : 4;
  f.config.gate_gt = pick(0, 3) != 0;
  return f;
}

}  // namespace sonosynth::oracle

#endif  // SONOSYNTH_TESTS_METRICS_ORACLE_HPP
