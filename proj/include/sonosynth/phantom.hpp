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

#ifndef SONOSYNTH_PHANTOM_HPP
#define SONOSYNTH_PHANTOM_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sonosynth/render.hpp"
#include "sonosynth/rng.hpp"
#include "sonosynth/volume.hpp"

namespace sonosynth {

/// Class ids of the synthetic liver phantom.
namespace phantom_class {
inline constexpr std::uint8_t background = 0;
inline constexpr std::uint8_t liver = 1;
inline constexpr std::uint8_t mpv = 2;
inline constexpr std::uint8_t lpv = 3;
inline constexpr std::uint8_t rpv = 4;
inline constexpr std::uint8_t hv = 5;
inline constexpr int count = 6;
}  // namespace phantom_class

struct Phantom {
  LabelVolume labels;
  ScalarVolume ct;
};

/// Ellipsoidal liver with a portal trunk splitting into left and right
/// branches and two hepatic veins. Centered on the world origin.
inline Phantom make_liver_phantom(int n = 64, double spacing_mm = 2.0, std::uint64_t seed = 0) {
  const double half = 0.5 * (n - 1) * spacing_mm;
  Phantom ph;
  ph.labels = make_label_volume({n, n, n}, {spacing_mm, spacing_mm, spacing_mm},
                                {-half, -half, -half}, phantom_class::count);
  ph.ct = make_scalar_volume({n, n, n}, {spacing_mm, spacing_mm, spacing_mm},
                             {-half, -half, -half});

  struct Segment {
    Vec3 a;
    Vec3 b;
    double radius;
    std::uint8_t label;
  };
  const double s = half / 60.0;  // geometry below is laid out for a 120 mm box
  const std::vector<Segment> vessels = {
      {{0, 35 * s, 0}, {0, 5 * s, 0}, 6 * s, phantom_class::mpv},
      {{0, 5 * s, 0}, {-35 * s, -10 * s, 8 * s}, 4.5 * s, phantom_class::lpv},
      {{0, 5 * s, 0}, {35 * s, -8 * s, -6 * s}, 5 * s, phantom_class::rpv},
      {{-12 * s, -45 * s, 10 * s}, {-20 * s, -5 * s, 25 * s}, 4.5 * s, phantom_class::hv},
      {{12 * s, -45 * s, 10 * s}, {28 * s, -15 * s, 20 * s}, 4.5 * s, phantom_class::hv},
  };
  const Vec3 radii{50 * s, 40 * s, 35 * s};
  const double ct_values[phantom_class::count] = {-1000.0, 60.0, 180.0, 180.0, 180.0, 150.0};
  const std::uint64_t noise = rng::tag("phantom.ct");

  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        const Vec3 p = ph.labels.header.index_to_world(i, j, k);
        std::uint8_t label = phantom_class::background;
        const double e = (p.x / radii.x) * (p.x / radii.x) + (p.y / radii.y) * (p.y / radii.y) +
                         (p.z / radii.z) * (p.z / radii.z);
        if (e <= 1.0) label = phantom_class::liver;
        for (const auto& v : vessels) {
          const Vec3 ab = v.b - v.a;
          const double t = std::clamp(dot(p - v.a, ab) / dot(ab, ab), 0.0, 1.0);
          if (norm(p - (v.a + ab * t)) <= v.radius) label = v.label;
        }
        const std::size_t idx = ph.labels.index(i, j, k);
        ph.labels.voxels[idx] = label;
        ph.ct.voxels[idx] =
            static_cast<float>(ct_values[label] + 10.0 * rng::normal(seed, noise, idx));
      }
    }
  }
  return ph;
}

/// Tissue table matching the phantom classes: the four branches share
/// vessel-lumen acoustics.
inline TissueTable phantom_tissue_table() {
  const TissueTable base = TissueTable::defaults();
  TissueTable t{{base[0], base[1], base[2], base[2], base[2], base[2]}};
  t[2].name = "MPV";
  t[3].name = "LPV";
  t[4].name = "RPV";
  t[5].name = "HV";
  return t;
}

}  // namespace sonosynth

#endif  // SONOSYNTH_PHANTOM_HPP
