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

#ifndef SONOSYNTH_RESLICE_HPP
#define SONOSYNTH_RESLICE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>

#include "json.hpp"
#include "sonosynth/io.hpp"
#include "sonosynth/parallel.hpp"
#include "sonosynth/rng.hpp"
#include "sonosynth/vec3.hpp"
#include "sonosynth/volume.hpp"

namespace sonosynth {

/// Rigid placement of the imaging rectangle in world space. Pixel (i, j) sits at
/// center + (i*spacing - width/2) * basis_u + (j*spacing - height/2) * basis_v.
struct ProbePose {
  Vec3 center;
  Vec3 basis_u{1.0, 0.0, 0.0};
  Vec3 basis_v{0.0, 1.0, 0.0};
  std::array<double, 2> extent_mm{76.8, 76.8};
  double pixel_spacing_mm = 0.3;

  Vec3 normal() const { return cross(basis_u, basis_v); }

  int width_px() const { return pixels_for(extent_mm[0]); }
  int height_px() const { return pixels_for(extent_mm[1]); }

  Vec3 pixel_to_world(double i, double j) const {
    return center + basis_u * (i * pixel_spacing_mm - 0.5 * extent_mm[0]) +
           basis_v * (j * pixel_spacing_mm - 0.5 * extent_mm[1]);
  }

  void validate() const {
    constexpr double tol = 1e-9;
    if (std::abs(norm(basis_u) - 1.0) > tol || std::abs(norm(basis_v) - 1.0) > tol ||
        std::abs(dot(basis_u, basis_v)) > tol) {
      throw std::invalid_argument("pose basis must be orthonormal");
    }
    if (!(extent_mm[0] > 0.0 && extent_mm[1] > 0.0 && pixel_spacing_mm > 0.0)) {
      throw std::invalid_argument("pose extent and pixel spacing must be positive");
    }
  }

 private:
  int pixels_for(double extent) const {
    return std::max(1, static_cast<int>(std::ceil(extent / pixel_spacing_mm - 1e-9)));
  }
};

/// Ranges of the random probe motions around a base pose.
struct PoseSamplerConfig {
  ProbePose base_pose;
  double tilt_deg = 20.0;     // about basis_u
  double rock_deg = 20.0;     // about basis_v
  double slide_mm = 10.0;     // along basis_u and basis_v
  double outplane_deg = 10.0; // about the plane normal
  std::uint64_t seed = 0;

  void validate() const {
    base_pose.validate();
    if (!(tilt_deg >= 0 && rock_deg >= 0 && slide_mm >= 0 && outplane_deg >= 0)) {
      throw std::invalid_argument("pose sampler ranges must be >= 0");
    }
  }
};

/// One realized set of motion parameters (angles in degrees).
struct PosePerturbation {
  double tilt_deg = 0.0;
  double rock_deg = 0.0;
  double outplane_deg = 0.0;
  double slide_u_mm = 0.0;
  double slide_v_mm = 0.0;
};

/// Rotate about the base pose's basis_u (tilt), then basis_v (rock), then its
/// normal, all right-handed and about the fixed base axes; then translate
/// in the base plane.
inline ProbePose perturb_pose(const ProbePose& base, const PosePerturbation& d) {
  constexpr double deg = std::numbers::pi / 180.0;
  if (d.tilt_deg == 0.0 && d.rock_deg == 0.0 && d.outplane_deg == 0.0 && d.slide_u_mm == 0.0 &&
      d.slide_v_mm == 0.0) {
    return base;
  }
  const Vec3 u0 = base.basis_u;
  const Vec3 v0 = base.basis_v;
  const Vec3 n0 = base.normal();
  auto apply = [&](Vec3 x) {
    x = rotate(x, u0, d.tilt_deg * deg);
    x = rotate(x, v0, d.rock_deg * deg);
    return rotate(x, n0, d.outplane_deg * deg);
  };
  ProbePose pose = base;
  Vec3 u = normalized(apply(u0));
  Vec3 v = apply(v0);
  v = normalized(v - u * dot(u, v));
  pose.basis_u = u;
  pose.basis_v = v;
  pose.center = base.center + u0 * d.slide_u_mm + v0 * d.slide_v_mm;
  return pose;
}

/// Draws for pose `draw_index`; a pure function of (seed, draw_index).
inline PosePerturbation sample_perturbation(const PoseSamplerConfig& config,
                                            std::uint64_t draw_index) {
  const std::uint64_t stream = rng::tag("reslice.pose");
  auto draw = [&](int m, double range) {
    return rng::uniform(config.seed, stream, 5 * draw_index + m, -range, range);
  };
  return {draw(0, config.tilt_deg), draw(1, config.rock_deg), draw(2, config.outplane_deg),
          draw(3, config.slide_mm), draw(4, config.slide_mm)};
}

inline ProbePose sample_pose(const PoseSamplerConfig& config, std::uint64_t draw_index) {
  config.validate();
  return perturb_pose(config.base_pose, sample_perturbation(config, draw_index));
}

/// Nearest-neighbor label slice; off-volume pixels are background.
inline LabelSlice2D reslice_labels(const LabelVolume& volume, const ProbePose& pose, int jobs = 1) {
  pose.validate();
  LabelSlice2D out(pose.width_px(), pose.height_px(), pose.pixel_spacing_mm,
                   volume.header.num_classes);
  parallel_for(static_cast<std::size_t>(out.height), jobs, [&](std::size_t j) {
    for (int i = 0; i < out.width; ++i) {
      out.at(i, static_cast<int>(j)) = nearest_sample(volume, pose.pixel_to_world(i, static_cast<double>(j)));
    }
  });
  return out;
}

namespace detail {

inline void catmull_rom_weights(double t, double w[4]) {
  const double t2 = t * t;
  const double t3 = t2 * t;
  w[0] = 0.5 * (-t3 + 2.0 * t2 - t);
  w[1] = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0);
  w[2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + t);
  w[3] = 0.5 * (t3 - t2);
}

}  // namespace detail

/// Catmull-Rom cubic along each axis. Neighbors beyond the grid are linear
/// extrapolations of the two edge samples, so linear functions are reproduced
/// up to the boundary. Points outside the grid give 0.
inline double cubic_sample(const ScalarVolume& volume, const Vec3& p) {
  Vec3 f = volume.header.world_to_index(p);
  // Per axis: four (index, weight) taps with ghost taps folded onto the edge.
  int idx[3][4];
  double w[3][4];
  for (int a = 0; a < 3; ++a) {
    const int n = volume.header.dims[a];
    if (!detail::snap_to_domain(f[a], n)) return 0.0;
    const int base = static_cast<int>(std::floor(f[a]));
    double cw[4];
    detail::catmull_rom_weights(f[a] - base, cw);
    for (int m = 0; m < 4; ++m) {
      idx[a][m] = std::clamp(base + m - 1, 0, n - 1);
      w[a][m] = 0.0;
    }
    for (int m = 0; m < 4; ++m) {
      const int i = base + m - 1;
      if (i >= 0 && i < n) {
        w[a][m] += cw[m];
      } else if (n == 1) {
        w[a][m] += cw[m];
      } else {
        // f(-1) = 2 f(0) - f(1); f(n) = 2 f(n-1) - f(n-2)
        const int edge = i < 0 ? 0 : n - 1;
        const int inner = i < 0 ? 1 : n - 2;
        const int d = i < 0 ? -i : i - (n - 1);
        for (int q = 0; q < 4; ++q) {
          if (base + q - 1 == edge) w[a][q] += (1.0 + d) * cw[m];
          if (base + q - 1 == inner) w[a][q] -= d * cw[m];
        }
      }
    }
  }
  double acc = 0.0;
  for (int dz = 0; dz < 4; ++dz) {
    if (w[2][dz] == 0.0) continue;
    for (int dy = 0; dy < 4; ++dy) {
      if (w[1][dy] == 0.0) continue;
      double row = 0.0;
      for (int dx = 0; dx < 4; ++dx) {
        if (w[0][dx] != 0.0) row += w[0][dx] * volume.at(idx[0][dx], idx[1][dy], idx[2][dz]);
      }
      acc += w[2][dz] * w[1][dy] * row;
    }
  }
  return acc;
}

/// Scalar reslice without intensity normalization. order 1 = trilinear, 3 = Catmull-Rom.
inline Image2D reslice_scalar_raw(const ScalarVolume& volume, const ProbePose& pose, int order,
                                  int jobs = 1) {
  pose.validate();
  if (order != 1 && order != 3) throw std::invalid_argument("reslice order must be 1 or 3");
  Image2D out(pose.width_px(), pose.height_px(), pose.pixel_spacing_mm);
  parallel_for(static_cast<std::size_t>(out.height), jobs, [&](std::size_t j) {
    for (int i = 0; i < out.width; ++i) {
      const Vec3 p = pose.pixel_to_world(i, static_cast<double>(j));
      out.at(i, static_cast<int>(j)) = order == 1 ? trilinear_sample(volume, p) : cubic_sample(volume, p);
    }
  });
  return out;
}

/// Min-max normalization to [0, 1]; a constant image becomes all zero.
inline void normalize_minmax(Image2D& img) {
  if (img.pixels.empty()) return;
  const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const double vmin = *lo;
  const double range = *hi - vmin;
  for (double& x : img.pixels) x = range > 0.0 ? (x - vmin) / range : 0.0;
}

inline Image2D reslice_scalar(const ScalarVolume& volume, const ProbePose& pose, int order,
                              int jobs = 1) {
  Image2D out = reslice_scalar_raw(volume, pose, order, jobs);
  normalize_minmax(out);
  return out;
}

inline Json vec_json(const Vec3& v) { return Json::array({v.x, v.y, v.z}); }

inline Vec3 vec_from_json(const Json& j) {
  const auto v = j.get<std::array<double, 3>>();
  return {v[0], v[1], v[2]};
}

inline void to_json(Json& j, const ProbePose& p) {
  j = Json{{"center", vec_json(p.center)},
           {"basis_u", vec_json(p.basis_u)},
           {"basis_v", vec_json(p.basis_v)},
           {"extent_mm", p.extent_mm},
           {"pixel_spacing_mm", p.pixel_spacing_mm}};
}

inline void from_json(const Json& j, ProbePose& p) {
  if (j.contains("center")) p.center = vec_from_json(j.at("center"));
  if (j.contains("basis_u")) p.basis_u = vec_from_json(j.at("basis_u"));
  if (j.contains("basis_v")) p.basis_v = vec_from_json(j.at("basis_v"));
  if (j.contains("extent_mm")) p.extent_mm = j.at("extent_mm").get<std::array<double, 2>>();
  p.pixel_spacing_mm = j.value("pixel_spacing_mm", p.pixel_spacing_mm);
}

inline void to_json(Json& j, const PoseSamplerConfig& c) {
  j = Json{{"base_pose", c.base_pose},   {"tilt_deg", c.tilt_deg},
           {"rock_deg", c.rock_deg},     {"slide_mm", c.slide_mm},
           {"outplane_deg", c.outplane_deg}, {"seed", c.seed}};
}

inline void from_json(const Json& j, PoseSamplerConfig& c) {
  if (j.contains("base_pose")) c.base_pose = j.at("base_pose").get<ProbePose>();
  c.tilt_deg = j.value("tilt_deg", c.tilt_deg);
  c.rock_deg = j.value("rock_deg", c.rock_deg);
  c.slide_mm = j.value("slide_mm", c.slide_mm);
  c.outplane_deg = j.value("outplane_deg", c.outplane_deg);
  c.seed = j.value("seed", c.seed);
}

}  // namespace sonosynth

#endif  // SONOSYNTH_RESLICE_HPP
