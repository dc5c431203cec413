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

#ifndef SONOSYNTH_VOLUME_HPP
#define SONOSYNTH_VOLUME_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sonosynth/vec3.hpp"

namespace sonosynth {

/// Millimeters per voxel along each axis.
struct Spacing3 {
  double sx = 1.0;
  double sy = 1.0;
  double sz = 1.0;

  constexpr double operator[](int axis) const { return axis == 0 ? sx : (axis == 1 ? sy : sz); }
  constexpr bool operator==(const Spacing3&) const = default;

  bool valid() const { return sx > 0.0 && sy > 0.0 && sz > 0.0; }
};

enum class VolumeKind { label, scalar };

inline const char* to_string(VolumeKind kind) {
  return kind == VolumeKind::label ? "label" : "scalar";
}

/// Grid geometry shared by every 3D container. world = origin + index * spacing,
/// axis aligned; origin is the center of voxel (0,0,0).
struct VolumeHeader {
  std::array<int, 3> dims{1, 1, 1};
  Spacing3 spacing;
  Vec3 origin;
  VolumeKind kind = VolumeKind::scalar;
  int num_classes = 0;  // K+1 for label volumes, 0 for scalar volumes

  bool operator==(const VolumeHeader&) const = default;

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }

  /// Same dims, spacing and origin. Kind is ignored.
  bool same_grid(const VolumeHeader& o) const {
    return dims == o.dims && spacing == o.spacing && origin == o.origin;
  }

  Vec3 index_to_world(double i, double j, double k) const {
    return {origin.x + i * spacing.sx, origin.y + j * spacing.sy, origin.z + k * spacing.sz};
  }

  Vec3 world_to_index(const Vec3& p) const {
    return {(p.x - origin.x) / spacing.sx, (p.y - origin.y) / spacing.sy,
            (p.z - origin.z) / spacing.sz};
  }

  void validate() const {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1) {
      throw std::invalid_argument("volume dims must be >= 1 on every axis");
    }
    if (!spacing.valid()) {
      throw std::invalid_argument("volume spacing must be strictly positive");
    }
    if (kind == VolumeKind::label && (num_classes < 1 || num_classes > 256)) {
      throw std::invalid_argument("label volume num_classes must be in [1, 256]");
    }
  }
};

/// Dense voxel grid, x-fastest layout.
template <typename T>
struct Volume {
  using value_type = T;

  VolumeHeader header;
  std::vector<T> voxels;

  Volume() = default;
  Volume(VolumeHeader h, T fill = T{}) : header(h), voxels(h.voxel_count(), fill) {}

  int nx() const { return header.dims[0]; }
  int ny() const { return header.dims[1]; }
  int nz() const { return header.dims[2]; }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(header.dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(header.dims[1]) * k);
  }

  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < nx() && j < ny() && k < nz();
  }

  T& at(int i, int j, int k) { return voxels[index(i, j, k)]; }
  const T& at(int i, int j, int k) const { return voxels[index(i, j, k)]; }

  bool operator==(const Volume&) const = default;
};

using LabelVolume = Volume<std::uint8_t>;
using ScalarVolume = Volume<float>;

inline LabelVolume make_label_volume(std::array<int, 3> dims, Spacing3 spacing, Vec3 origin,
                                     int num_classes) {
  VolumeHeader h{dims, spacing, origin, VolumeKind::label, num_classes};
  h.validate();
  return LabelVolume(h, 0);
}

inline ScalarVolume make_scalar_volume(std::array<int, 3> dims, Spacing3 spacing, Vec3 origin) {
  VolumeHeader h{dims, spacing, origin, VolumeKind::scalar, 0};
  h.validate();
  return ScalarVolume(h, 0.0f);
}

inline void validate(const LabelVolume& v) {
  v.header.validate();
  if (v.header.kind != VolumeKind::label) throw std::invalid_argument("expected a label volume");
  if (v.voxels.size() != v.header.voxel_count()) {
    throw std::invalid_argument("label volume payload size does not match dims");
  }
  for (auto value : v.voxels) {
    if (value >= v.header.num_classes) {
      throw std::invalid_argument("label value " + std::to_string(value) +
                                  " >= num_classes " + std::to_string(v.header.num_classes));
    }
  }
}

inline void validate(const ScalarVolume& v) {
  v.header.validate();
  if (v.header.kind != VolumeKind::scalar) throw std::invalid_argument("expected a scalar volume");
  if (v.voxels.size() != v.header.voxel_count()) {
    throw std::invalid_argument("scalar volume payload size does not match dims");
  }
  for (float value : v.voxels) {
    if (!std::isfinite(value)) throw std::invalid_argument("scalar volume has non-finite voxel");
  }
}

/// 2D class-index image. Pixel (i, j): column i, row j.
struct LabelSlice2D {
  int width = 0;
  int height = 0;
  double spacing_mm = 1.0;
  int num_classes = 1;
  std::vector<std::uint8_t> pixels;

  LabelSlice2D() = default;
  LabelSlice2D(int w, int h, double spacing, int classes)
      : width(w), height(h), spacing_mm(spacing), num_classes(classes),
        pixels(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int i, int j) { return pixels[static_cast<std::size_t>(j) * width + i]; }
  std::uint8_t at(int i, int j) const { return pixels[static_cast<std::size_t>(j) * width + i]; }

  bool operator==(const LabelSlice2D&) const = default;
};

/// 2D intensity image.
struct Image2D {
  int width = 0;
  int height = 0;
  double spacing_mm = 1.0;
  std::vector<double> pixels;

  Image2D() = default;
  Image2D(int w, int h, double spacing, double fill = 0.0)
      : width(w), height(h), spacing_mm(spacing), pixels(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int i, int j) { return pixels[static_cast<std::size_t>(j) * width + i]; }
  double at(int i, int j) const { return pixels[static_cast<std::size_t>(j) * width + i]; }

  bool operator==(const Image2D&) const = default;
};

namespace detail {

// Continuous indices this close outside the grid are snapped back in, so that
// points computed on exact voxel centers survive floating-point roundoff.
inline constexpr double kEdgeTolerance = 1e-6;

inline bool snap_to_domain(double& f, int n) {
  const double hi = static_cast<double>(n - 1);
  if (!(f >= -kEdgeTolerance && f <= hi + kEdgeTolerance)) return false;  // also rejects NaN
  const double r = std::round(f);
  if (std::abs(f - r) <= 1e-9) f = r;  // voxel centers reproduce stored values exactly
  f = std::clamp(f, 0.0, hi);
  return true;
}

}  // namespace detail

/// Trilinear blend of the 8 voxels around p. Points outside the grid give 0.
inline double trilinear_sample(const ScalarVolume& volume, const Vec3& p) {
  Vec3 f = volume.header.world_to_index(p);
  for (int a = 0; a < 3; ++a) {
    if (!detail::snap_to_domain(f[a], volume.header.dims[a])) return 0.0;
  }
  int i0[3];
  int i1[3];
  double t[3];
  for (int a = 0; a < 3; ++a) {
    const int n = volume.header.dims[a];
    i0[a] = std::min(static_cast<int>(std::floor(f[a])), n - 1);
    i1[a] = std::min(i0[a] + 1, n - 1);
    t[a] = f[a] - i0[a];
  }
  auto v = [&](int x, int y, int z) { return static_cast<double>(volume.at(x, y, z)); };
  const double c00 = v(i0[0], i0[1], i0[2]) * (1 - t[0]) + v(i1[0], i0[1], i0[2]) * t[0];
  const double c10 = v(i0[0], i1[1], i0[2]) * (1 - t[0]) + v(i1[0], i1[1], i0[2]) * t[0];
  const double c01 = v(i0[0], i0[1], i1[2]) * (1 - t[0]) + v(i1[0], i0[1], i1[2]) * t[0];
  const double c11 = v(i0[0], i1[1], i1[2]) * (1 - t[0]) + v(i1[0], i1[1], i1[2]) * t[0];
  const double c0 = c00 * (1 - t[1]) + c10 * t[1];
  const double c1 = c01 * (1 - t[1]) + c11 * t[1];
  return c0 * (1 - t[2]) + c1 * t[2];
}

/// Label of the voxel whose center is nearest in index space (ties round away
/// from zero). Points whose nearest voxel is off-grid give background 0.
inline std::uint8_t nearest_sample(const LabelVolume& volume, const Vec3& p) {
  const Vec3 f = volume.header.world_to_index(p);
  int idx[3];
  for (int a = 0; a < 3; ++a) {
    const double r = std::round(f[a]);
    if (!(r >= 0.0 && r < static_cast<double>(volume.header.dims[a]))) return 0;
    idx[a] = static_cast<int>(r);
  }
  return volume.at(idx[0], idx[1], idx[2]);
}

/// Grow the grid by ceil(margin/spacing) voxels on both sides of each axis.
/// Interior voxels are copied unchanged, new voxels take `fill`.
template <typename T>
Volume<T> pad_volume(const Volume<T>& volume, const Vec3& margin_mm, T fill) {
  int pad[3];
  for (int a = 0; a < 3; ++a) {
    if (!(margin_mm[a] >= 0.0)) throw std::invalid_argument("padding margin must be >= 0");
    // 1e-9 keeps exact multiples of the spacing from rounding up a voxel.
    pad[a] = static_cast<int>(std::ceil(margin_mm[a] / volume.header.spacing[a] - 1e-9));
  }
  VolumeHeader h = volume.header;
  for (int a = 0; a < 3; ++a) {
    h.dims[a] += 2 * pad[a];
    h.origin[a] -= pad[a] * volume.header.spacing[a];
  }
  Volume<T> out(h, fill);
  for (int k = 0; k < volume.nz(); ++k) {
    for (int j = 0; j < volume.ny(); ++j) {
      for (int i = 0; i < volume.nx(); ++i) {
        out.at(i + pad[0], j + pad[1], k + pad[2]) = volume.at(i, j, k);
      }
    }
  }
  return out;
}

}  // namespace sonosynth

#endif  // SONOSYNTH_VOLUME_HPP
