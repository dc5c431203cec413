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

#ifndef SONOSYNTH_DEFORM_HPP
#define SONOSYNTH_DEFORM_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "sonosynth/io.hpp"
#include "sonosynth/numeric.hpp"
#include "sonosynth/parallel.hpp"
#include "sonosynth/rng.hpp"
#include "sonosynth/volume.hpp"

namespace sonosynth {

/// Random smooth displacement field settings. Amplitudes in millimeters.
struct DeformConfig {
  std::array<int, 3> lattice_dims{4, 4, 4};
  double smooth_sigma_mm = 8.0;
  double target_mean_abs_mm = 26.65;
  double clamp_lo_mm = -42.63;
  double clamp_hi_mm = 41.05;
  std::uint64_t seed = 0;

  /// Same config with the clamp interval opened to (-inf, inf).
  DeformConfig unclamped() const {
    DeformConfig c = *this;
    c.clamp_lo_mm = -std::numeric_limits<double>::infinity();
    c.clamp_hi_mm = std::numeric_limits<double>::infinity();
    return c;
  }

  void validate() const {
    for (int n : lattice_dims) {
      if (n < 2) throw std::invalid_argument("lattice_dims must be >= 2 per axis");
    }
    if (!(smooth_sigma_mm >= 0.0)) throw std::invalid_argument("smooth_sigma_mm must be >= 0");
    if (!(target_mean_abs_mm >= 0.0) || !std::isfinite(target_mean_abs_mm)) {
      throw std::invalid_argument("target_mean_abs_mm must be finite and >= 0");
    }
    if (!(clamp_lo_mm < clamp_hi_mm)) throw std::invalid_argument("clamp_lo_mm must be < clamp_hi_mm");
  }
};

/// Per-voxel displacement u(x) in millimeters on a volume grid.
struct DisplacementField {
  VolumeHeader header;
  std::array<std::vector<double>, 3> components;

  DisplacementField() = default;
  explicit DisplacementField(VolumeHeader h) : header(h) {
    header.kind = VolumeKind::scalar;
    header.num_classes = 0;
    for (auto& c : components) c.assign(header.voxel_count(), 0.0);
  }

  Vec3 at(std::size_t index) const {
    return {components[0][index], components[1][index], components[2][index]};
  }
};

struct FieldStats {
  std::array<double, 3> min{};
  std::array<double, 3> max{};
  std::array<double, 3> mean_abs{};
};

inline void to_json(Json& j, const DeformConfig& c) {
  auto bound = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
  j = Json{{"lattice_dims", c.lattice_dims},
           {"smooth_sigma_mm", c.smooth_sigma_mm},
           {"target_mean_abs_mm", c.target_mean_abs_mm},
           {"clamp_lo_mm", bound(c.clamp_lo_mm)},
           {"clamp_hi_mm", bound(c.clamp_hi_mm)},
           {"seed", c.seed}};
}

/// Missing keys keep their defaults; a null clamp bound disables that side.
inline void from_json(const Json& j, DeformConfig& c) {
  if (j.contains("lattice_dims")) c.lattice_dims = j.at("lattice_dims").get<std::array<int, 3>>();
  c.smooth_sigma_mm = j.value("smooth_sigma_mm", c.smooth_sigma_mm);
  c.target_mean_abs_mm = j.value("target_mean_abs_mm", c.target_mean_abs_mm);
  auto bound = [&](const char* key, double& out, double disabled) {
    if (!j.contains(key)) return;
    out = j.at(key).is_null() ? disabled : j.at(key).get<double>();
  };
  bound("clamp_lo_mm", c.clamp_lo_mm, -std::numeric_limits<double>::infinity());
  bound("clamp_hi_mm", c.clamp_hi_mm, std::numeric_limits<double>::infinity());
  c.seed = j.value("seed", c.seed);
}

inline Json to_json(const FieldStats& s) {
  Json j;
  const char* axes[3] = {"x", "y", "z"};
  for (int a = 0; a < 3; ++a) {
    j[axes[a]] = {{"min", s.min[a]}, {"max", s.max[a]}, {"mean_abs", s.mean_abs[a]}};
  }
  return j;
}

namespace detail {

/// Linear resampling of a lattice axis onto n output samples spanning the same extent.
struct AxisWeights {
  std::vector<int> lo;
  std::vector<double> t;
};

inline AxisWeights lattice_axis(int lattice, int n) {
  AxisWeights w;
  w.lo.resize(n);
  w.t.resize(n);
  for (int i = 0; i < n; ++i) {
    const double g = n == 1 ? 0.0 : static_cast<double>(i) * (lattice - 1) / (n - 1);
    const int lo = std::min(static_cast<int>(std::floor(g)), lattice - 2);
    w.lo[i] = lo;
    w.t[i] = g - lo;
  }
  return w;
}

inline std::vector<double> gaussian_taps(double sigma_vox) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma_vox));
  std::vector<double> taps(2 * radius + 1);
  for (int m = -radius; m <= radius; ++m) {
    taps[m + radius] = std::exp(-0.5 * (m * m) / (sigma_vox * sigma_vox));
  }
  return taps;
}

/// In-place Gaussian blur of one component along `axis`. Taps falling outside
/// the grid are dropped and the remaining weights renormalized.
inline void blur_axis(std::vector<double>& data, const std::array<int, 3>& dims, int axis,
                      double sigma_vox, int jobs) {
  if (sigma_vox <= 0.0 || dims[axis] < 2) return;
  const auto taps = gaussian_taps(sigma_vox);
  const int radius = static_cast<int>(taps.size() / 2);
  const std::size_t stride[3] = {1, static_cast<std::size_t>(dims[0]),
                                 static_cast<std::size_t>(dims[0]) * dims[1]};
  const int n = dims[axis];
  const int u_axis = axis == 0 ? 1 : 0;
  const int v_axis = axis == 2 ? 1 : 2;
  parallel_for(static_cast<std::size_t>(dims[v_axis]), jobs, [&](std::size_t v) {
    std::vector<double> line(n);
    for (int u = 0; u < dims[u_axis]; ++u) {
      const std::size_t base = u * stride[u_axis] + v * stride[v_axis];
      for (int i = 0; i < n; ++i) line[i] = data[base + i * stride[axis]];
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        double wsum = 0.0;
        const int lo = std::max(-radius, -i);
        const int hi = std::min(radius, n - 1 - i);
        for (int m = lo; m <= hi; ++m) {
          acc += taps[m + radius] * line[i + m];
          wsum += taps[m + radius];
        }
        data[base + i * stride[axis]] = acc / wsum;
      }
    }
  });
}

}  // namespace detail

/// Random smooth field on `domain`: standard-normal vectors on the control
/// lattice, trilinear upsampling, Gaussian smoothing (3 sigma truncation),
/// per-axis scaling to the target mean |u|, then clamping.
inline DisplacementField generate_field(const DeformConfig& config, const VolumeHeader& domain,
                                        int jobs = 1) {
  config.validate();
  domain.validate();
  for (int n : domain.dims) {
    if (n < 2) throw std::invalid_argument("deformation domain needs >= 2 voxels per axis");
  }
  DisplacementField field(domain);
  const auto& dims = domain.dims;
  const auto& lat = config.lattice_dims;
  const std::uint64_t stream = rng::tag("deform.lattice");

  std::array<std::vector<double>, 3> lattice;
  const std::size_t lattice_count = static_cast<std::size_t>(lat[0]) * lat[1] * lat[2];
  for (int c = 0; c < 3; ++c) {
    lattice[c].resize(lattice_count);
    for (std::size_t m = 0; m < lattice_count; ++m) {
      lattice[c][m] = rng::normal(config.seed, stream, 3 * m + c);
    }
  }

  const auto wx = detail::lattice_axis(lat[0], dims[0]);
  const auto wy = detail::lattice_axis(lat[1], dims[1]);
  const auto wz = detail::lattice_axis(lat[2], dims[2]);
  auto lat_index = [&](int a, int b, int c) {
    return static_cast<std::size_t>(a) + static_cast<std::size_t>(lat[0]) * (b + lat[1] * c);
  };
  parallel_for(static_cast<std::size_t>(dims[2]), jobs, [&](std::size_t k) {
    const int z0 = wz.lo[k];
    const double tz = wz.t[k];
    for (int j = 0; j < dims[1]; ++j) {
      const int y0 = wy.lo[j];
      const double ty = wy.t[j];
      for (int i = 0; i < dims[0]; ++i) {
        const int x0 = wx.lo[i];
        const double tx = wx.t[i];
        const std::size_t out = static_cast<std::size_t>(i) +
                                static_cast<std::size_t>(dims[0]) * (j + static_cast<std::size_t>(dims[1]) * k);
        for (int c = 0; c < 3; ++c) {
          const auto& L = lattice[c];
          auto lx = [&](int y, int z) {
            return L[lat_index(x0, y, z)] * (1 - tx) + L[lat_index(x0 + 1, y, z)] * tx;
          };
          const double c0 = lx(y0, z0) * (1 - ty) + lx(y0 + 1, z0) * ty;
          const double c1 = lx(y0, z0 + 1) * (1 - ty) + lx(y0 + 1, z0 + 1) * ty;
          field.components[c][out] = c0 * (1 - tz) + c1 * tz;
        }
      }
    }
  });

  if (config.smooth_sigma_mm > 0.0) {
    for (int c = 0; c < 3; ++c) {
      for (int axis = 0; axis < 3; ++axis) {
        detail::blur_axis(field.components[c], dims, axis,
                          config.smooth_sigma_mm / domain.spacing[axis], jobs);
      }
    }
  }

  for (int c = 0; c < 3; ++c) {
    auto& comp = field.components[c];
    if (config.target_mean_abs_mm == 0.0) {
      std::fill(comp.begin(), comp.end(), 0.0);
      continue;
    }
    CompensatedSum sum;
    for (double v : comp) sum += std::abs(v);
    const double mean_abs = sum.value() / static_cast<double>(comp.size());
    if (!(mean_abs > 0.0)) {
      throw std::runtime_error("displacement component has zero amplitude; cannot scale");
    }
    const double scale = config.target_mean_abs_mm / mean_abs;
    for (double& v : comp) v = std::clamp(v * scale, config.clamp_lo_mm, config.clamp_hi_mm);
  }
  return field;
}

inline FieldStats field_stats(const DisplacementField& field) {
  FieldStats s;
  for (int c = 0; c < 3; ++c) {
    const auto& comp = field.components[c];
    if (comp.empty()) continue;
    const auto [lo, hi] = std::minmax_element(comp.begin(), comp.end());
    s.min[c] = *lo;
    s.max[c] = *hi;
    CompensatedSum sum;
    for (double v : comp) sum += std::abs(v);
    s.mean_abs[c] = sum.value() / static_cast<double>(comp.size());
  }
  return s;
}

namespace detail {

template <typename T, typename Sampler>
Volume<T> pull_warp(const Volume<T>& input, const DisplacementField& field, int jobs,
                    Sampler sample) {
  if (!input.header.same_grid(field.header)) {
    throw std::invalid_argument("volume and displacement field grids differ");
  }
  Volume<T> out(input.header);
  const auto& h = input.header;
  parallel_for(static_cast<std::size_t>(h.dims[2]), jobs, [&](std::size_t k) {
    for (int j = 0; j < h.dims[1]; ++j) {
      for (int i = 0; i < h.dims[0]; ++i) {
        const std::size_t idx = out.index(i, j, static_cast<int>(k));
        out.voxels[idx] = sample(input, h.index_to_world(i, j, static_cast<double>(k)) + field.at(idx));
      }
    }
  });
  return out;
}

}  // namespace detail

/// L~(x) = L(x + u(x)) with nearest-neighbor lookup.
inline LabelVolume warp_labels(const LabelVolume& labels, const DisplacementField& field,
                               int jobs = 1) {
  return detail::pull_warp(labels, field, jobs, [](const LabelVolume& v, const Vec3& p) {
    return nearest_sample(v, p);
  });
}

/// I~(x) = I(x + u(x)) with trilinear lookup.
inline ScalarVolume warp_scalar(const ScalarVolume& scalar, const DisplacementField& field,
                                int jobs = 1) {
  return detail::pull_warp(scalar, field, jobs, [](const ScalarVolume& v, const Vec3& p) {
    return static_cast<float>(trilinear_sample(v, p));
  });
}

/// All-zero field on `domain`.
inline DisplacementField zero_field(const VolumeHeader& domain) { return DisplacementField(domain); }

inline constexpr const char* kFieldChannelExt[3] = {".ux.raw", ".uy.raw", ".uz.raw"};

/// Header at `path`, components in `<stem>.ux.raw`, `.uy.raw`, `.uz.raw` (float32 LE).
inline void save_field(const DisplacementField& field, const fs::path& path) {
  for (int c = 0; c < 3; ++c) {
    std::vector<float> values(field.components[c].size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      // Round toward zero so stored values never leave the clamp interval.
      const double v = field.components[c][i];
      float f = static_cast<float>(v);
      if (std::abs(static_cast<double>(f)) > std::abs(v)) f = std::nextafter(f, 0.0f);
      values[i] = f;
    }
    io::write_file(io::payload_path(path, kFieldChannelExt[c]), io::to_le_bytes(values));
  }
  Json j = io::header_to_json(field.header);
  j["components"] = {"ux", "uy", "uz"};
  io::write_json(path, j);
}

inline DisplacementField load_field(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no such file: " + path.string());
  const Json j = io::read_json(path);
  DisplacementField field(io::header_from_json(j));
  for (int c = 0; c < 3; ++c) {
    const fs::path raw = io::payload_path(path, kFieldChannelExt[c]);
    const std::string bytes = io::read_file(raw);
    io::check_payload_size(bytes, field.header, 4, raw);
    const auto values = io::from_bytes<float>(bytes, 0, field.header.voxel_count(), false);
    field.components[c].assign(values.begin(), values.end());
  }
  return field;
}

}  // namespace sonosynth

#endif  // SONOSYNTH_DEFORM_HPP
