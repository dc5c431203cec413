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

// Synthetic slices and tissue tables shared by the unit and acceptance tests.

#ifndef SONOSYNTH_TESTS_FIXTURES_HPP
#define SONOSYNTH_TESTS_FIXTURES_HPP

#include <cmath>
#include <cstdint>
#include <random>

#include "sonosynth/render.hpp"
#include "sonosynth/volume.hpp"

namespace sonosynth::fixtures {

/// Background-free slice: class 1 everywhere plus random ellipses of classes 2..classes-1.
inline LabelSlice2D blob_slice(int width, int height, double spacing_mm, int classes, std::uint32_t seed,
                               int blobs = 6) {
  LabelSlice2D s(width, height, spacing_mm, classes);
  std::fill(s.pixels.begin(), s.pixels.end(), static_cast<std::uint8_t>(classes > 1 ? 1 : 0));
  std::mt19937 gen(seed);
  std::uniform_real_distribution<double> cx(0.0, width), cy(0.0, height);
  std::uniform_real_distribution<double> rad(0.05 * width, 0.25 * width);
  std::uniform_int_distribution<int> cls(std::min(2, classes - 1), classes - 1);
  for (int b = 0; b < blobs; ++b) {
    const double x0 = cx(gen), y0 = cy(gen), rx = rad(gen), ry = rad(gen);
    const auto k = static_cast<std::uint8_t>(cls(gen));
    for (int j = 0; j < height; ++j)
      for (int i = 0; i < width; ++i) {
        const double dx = (i - x0) / rx, dy = (j - y0) / ry;
        if (dx * dx + dy * dy <= 1.0) s.at(i, j) = k;
      }
  }
  return s;
}

/// Parameters drawn from ranges where the amplitude clamp is rarely active.
inline TissueTable random_table(int classes, std::uint32_t seed) {
  std::mt19937 gen(seed);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen); };
  TissueTable t;
  for (int k = 0; k < classes; ++k) {
    t.classes.push_back({"c" + std::to_string(k), u(0.1, 1.0), u(1.3, 1.8), u(0.2, 0.8), u(0.3, 0.7),
                         u(0.02, 0.08)});
  }
  return t;
}

/// Small probe for fast tests: fan fully inside a `n` x `n` slice at `spacing` mm.
inline ProbeGeometry small_probe(int n, double spacing_mm, int lines, int samples) {
  ProbeGeometry g;
  g.apex_radius_mm = 0.4 * n * spacing_mm;
  g.depth_mm = 0.9 * n * spacing_mm;
  g.sector_deg = 60.0;
  g.n_scanlines = lines;
  g.n_samples = samples;
  g.frequency_mhz = 3.5;
  g.out_dims = {n, n};
  return g;
}

}  // namespace sonosynth::fixtures

#endif  // SONOSYNTH_TESTS_FIXTURES_HPP
