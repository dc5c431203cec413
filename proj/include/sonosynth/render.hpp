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

#ifndef SONOSYNTH_RENDER_HPP
#define SONOSYNTH_RENDER_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sonosynth/io.hpp"
#include "sonosynth/numeric.hpp"
#include "sonosynth/parallel.hpp"
#include "sonosynth/rng.hpp"
#include "sonosynth/volume.hpp"

namespace sonosynth {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum class Param : int { alpha = 0, z = 1, mu0 = 2, mu1 = 3, sigma0 = 4 };
inline constexpr int kParamCount = 5;
inline constexpr const char* kParamNames[kParamCount] = {"alpha", "z", "mu0", "mu1", "sigma0"};

/// Acoustic and speckle parameters of one tissue class.
///   alpha   attenuation, dB / (cm MHz)
///   z       acoustic impedance, MRayl
///   mu0     scatterer density (probability)
///   mu1     mean scatterer amplitude
///   sigma0  scatterer amplitude standard deviation
struct TissueParams {
  std::string name;
  double alpha = 0.0;
  double z = 1.5;
  double mu0 = 0.0;
  double mu1 = 0.0;
  double sigma0 = 0.0;

  double operator[](Param p) const {
    switch (p) {
      case Param::alpha: return alpha;
      case Param::z: return z;
      case Param::mu0: return mu0;
      case Param::mu1: return mu1;
      case Param::sigma0: return sigma0;
    }
    return 0.0;
  }
  double& operator[](Param p) {
    switch (p) {
      case Param::alpha: return alpha;
      case Param::z: return z;
      case Param::mu0: return mu0;
      case Param::mu1: return mu1;
      case Param::sigma0: break;
    }
    return sigma0;
  }

  bool valid() const {
    return alpha >= 0.0 && z > 0.0 && mu0 >= 0.0 && mu0 <= 1.0 && mu1 >= 0.0 && mu1 <= 1.0 &&
           sigma0 >= 0.0 && std::isfinite(alpha) && std::isfinite(z) && std::isfinite(sigma0);
  }
};

/// Box constraints used by the fitter's projection step.
inline double project_param(Param p, double value) {
  switch (p) {
    case Param::alpha: return std::max(value, 0.0);
    case Param::z: return std::max(value, 1e-3);
    case Param::mu0:
    case Param::mu1: return std::clamp(value, 0.0, 1.0);
    case Param::sigma0: return std::max(value, 0.0);
  }
  return value;
}

/// Per-class parameters indexed by class id; class 0 is background / coupling gel.
struct TissueTable {
  std::vector<TissueParams> classes;

  std::size_t size() const { return classes.size(); }
  TissueParams& operator[](std::size_t k) { return classes[k]; }
  const TissueParams& operator[](std::size_t k) const { return classes[k]; }

  void validate() const {
    if (classes.empty()) throw std::invalid_argument("tissue table is empty");
    for (std::size_t k = 0; k < classes.size(); ++k) {
      if (!classes[k].valid()) {
        throw std::invalid_argument("tissue class " + std::to_string(k) + " has invalid parameters");
      }
    }
  }

  /// Engineering starting values for background, liver, vessel lumen and
  /// vessel wall (soft-tissue literature ranges, not fitted data).
  static TissueTable defaults() {
    return TissueTable{{
        {"background", 0.0, 1.48, 0.0, 0.0, 0.0},
        {"liver", 0.5, 1.65, 0.7, 0.5, 0.1},
        {"vessel_lumen", 0.18, 1.61, 0.01, 0.1, 0.0},
        {"vessel_wall", 1.0, 1.70, 0.9, 0.8, 0.1},
    }};
  }
};

/// Curvilinear probe. Scanlines fan out from a virtual apex sitting
/// apex_radius_mm above the transducer face; the face touches the top edge of
/// the slice at its horizontal center.
struct ProbeGeometry {
  double apex_radius_mm = 30.0;
  double sector_deg = 60.0;
  int n_scanlines = 128;
  int n_samples = 256;
  double depth_mm = 70.0;
  double frequency_mhz = 3.5;
  std::array<int, 2> out_dims{256, 256};

  double sample_step_mm() const { return depth_mm / n_samples; }

  void validate() const {
    if (!(apex_radius_mm > 0 && sector_deg > 0 && sector_deg < 180 && n_scanlines > 0 &&
          n_samples > 0 && depth_mm > 0 && frequency_mhz > 0 && out_dims[0] > 0 &&
          out_dims[1] > 0)) {
      throw std::invalid_argument("probe geometry fields must be positive and sector_deg < 180");
    }
  }
};

/// Renderer constants that are not tissue parameters.
struct RenderSettings {
  double beta_refl = 1.0;             // weight of interface reflections in the echo
  double beta_scat = 0.5;             // weight of scatterers in the echo
  double gamma = 50.0;                // log compression; 0 disables it
  double speed_of_sound_mm_us = 1.54;
  double axial_sigma_mm = 0.0;        // 0 means lambda / 6
  double lateral_sigma_lines = 1.0;
  double presence_temperature = 0.1;  // logistic relaxation of the scatterer indicator

  double wavelength_mm(double frequency_mhz) const { return speed_of_sound_mm_us / frequency_mhz; }
};

struct SubMaps {
  Image2D attenuation;
  Image2D impedance;
  Image2D scatter;
};

/// Scanline-by-sample image: column = scanline, row = sample along depth.
using FanImage = Image2D;

struct TraceResult {
  FanImage echo;
  FanImage transmission;
};

struct RenderOutput {
  Image2D bmode;
  FanImage fan;  // after the PSF, before scan conversion
  FanImage transmission;
  SubMaps submaps;
};

/// dLoss / dParam per class, in native parameter units.
struct ParamGradients {
  std::vector<std::array<double, kParamCount>> per_class;

  explicit ParamGradients(std::size_t classes = 0) : per_class(classes, {0, 0, 0, 0, 0}) {}
  double& operator()(std::size_t k, Param p) { return per_class[k][static_cast<int>(p)]; }
  double operator()(std::size_t k, Param p) const { return per_class[k][static_cast<int>(p)]; }
};

// ---------------------------------------------------------------------------
// Physics primitives
// ---------------------------------------------------------------------------

/// Intensity reflection coefficient of an impedance step.
inline double reflection(double z1, double z2) {
  const double q = (z2 - z1) / (z2 + z1);
  return q * q;
}

/// Energy kept after `distance_cm` of tissue: 10^(-alpha f d / 10).
inline double attenuation_factor(double alpha, double frequency_mhz, double distance_cm) {
  return std::pow(10.0, -alpha * frequency_mhz * distance_cm / 10.0);
}

/// Relaxed scatterer indicator. Exactly 0 for mu0 = 0, exactly 1 for mu0 = 1,
/// and >= 1/2 exactly when uniform_draw <= mu0, so thresholding at 1/2 gives
/// a Bernoulli(mu0) realization. Smooth in mu0 on (0, 1).
inline double scatter_presence(double uniform_draw, double mu0, double temperature) {
  if (mu0 <= 0.0) return 0.0;
  if (mu0 >= 1.0) return 1.0;
  const double logit_mu = std::log(mu0 / (1.0 - mu0));
  const double logit_u = std::log(uniform_draw / (1.0 - uniform_draw));
  return 1.0 / (1.0 + std::exp(-(logit_mu - logit_u) / temperature));
}

inline double scatter_presence_dmu0(double presence, double mu0, double temperature) {
  if (mu0 <= 0.0 || mu0 >= 1.0) return 0.0;
  return presence * (1.0 - presence) / (temperature * mu0 * (1.0 - mu0));
}

namespace detail {

/// Per-pixel random draws; fixed by (seed, pixel index), never by parameters.
struct ScatterDraws {
  std::vector<double> uniform;
  std::vector<double> normal;

  ScatterDraws(std::size_t count, std::uint64_t seed) : uniform(count), normal(count) {
    const std::uint64_t us = rng::tag("render.scatter.presence");
    const std::uint64_t ns = rng::tag("render.scatter.amplitude");
    for (std::size_t p = 0; p < count; ++p) {
      uniform[p] = rng::uniform(seed, us, p);
      normal[p] = rng::normal(seed, ns, p);
    }
  }
};

inline void check_classes(const LabelSlice2D& slice, const TissueTable& table) {
  table.validate();
  for (auto c : slice.pixels) {
    if (c >= table.size()) {
      throw std::invalid_argument("slice class " + std::to_string(c) + " missing from tissue table");
    }
  }
}

}  // namespace detail

/// Attenuation, impedance and scatter maps on the slice grid.
/// scatter = presence(u, mu0) * clamp(mu1 + sigma0 * n, 0, 1) with u, n drawn per pixel.
inline SubMaps build_submaps(const LabelSlice2D& slice, const TissueTable& table,
                             std::uint64_t seed, const RenderSettings& settings = {}) {
  detail::check_classes(slice, table);
  const detail::ScatterDraws draws(slice.pixels.size(), seed);
  SubMaps maps{Image2D(slice.width, slice.height, slice.spacing_mm),
               Image2D(slice.width, slice.height, slice.spacing_mm),
               Image2D(slice.width, slice.height, slice.spacing_mm)};
  for (std::size_t p = 0; p < slice.pixels.size(); ++p) {
    const TissueParams& t = table[slice.pixels[p]];
    maps.attenuation.pixels[p] = t.alpha;
    maps.impedance.pixels[p] = t.z;
    const double b = scatter_presence(draws.uniform[p], t.mu0, settings.presence_temperature);
    maps.scatter.pixels[p] = b * std::clamp(t.mu1 + t.sigma0 * draws.normal[p], 0.0, 1.0);
  }
  return maps;
}

// ---------------------------------------------------------------------------
// Precomputed geometry
// ---------------------------------------------------------------------------

/// Lookup tables that depend only on slice size, probe geometry and settings.
/// Build once and reuse across renders of same-sized slices.
class RenderPlan {
 public:
  struct SampleLookup {
    std::uint32_t nearest = 0;               // clamped into the slice
    std::array<std::int32_t, 4> neighbors{}; // -1 when off-slice
    std::array<double, 4> weights{};
  };

  struct PixelLookup {
    std::int32_t line = -1;  // -1: outside the sector
    std::int32_t sample = 0;
    double t_line = 0.0;
    double t_sample = 0.0;
  };

  RenderPlan(int width, int height, double spacing_mm, const ProbeGeometry& geometry,
             const RenderSettings& settings = {})
      : width_(width), height_(height), spacing_mm_(spacing_mm), geometry_(geometry),
        settings_(settings) {
    geometry.validate();
    if (width < 1 || height < 1 || !(spacing_mm > 0.0)) {
      throw std::invalid_argument("render plan needs a non-empty slice with positive spacing");
    }
    build_rays();
    build_kernels();
    build_scan_conversion();
  }

  int width() const { return width_; }
  int height() const { return height_; }
  double spacing_mm() const { return spacing_mm_; }
  const ProbeGeometry& geometry() const { return geometry_; }
  const RenderSettings& settings() const { return settings_; }
  int lines() const { return geometry_.n_scanlines; }
  int samples() const { return geometry_.n_samples; }

  const SampleLookup& sample(int line, int s) const {
    return rays_[static_cast<std::size_t>(line) * geometry_.n_samples + s];
  }
  const std::vector<PixelLookup>& scan_map() const { return scan_; }
  const std::vector<double>& axial_kernel() const { return axial_; }
  const std::vector<double>& lateral_kernel() const { return lateral_; }

  double line_angle(int line) const {
    const double sector = geometry_.sector_deg * std::numbers::pi / 180.0;
    if (geometry_.n_scanlines == 1) return 0.0;
    return -0.5 * sector + line * sector / (geometry_.n_scanlines - 1);
  }

  /// Apex position in slice millimeters (x right, y down).
  double apex_x_mm() const { return 0.5 * (width_ - 1) * spacing_mm_; }
  double apex_y_mm() const { return -geometry_.apex_radius_mm; }

 private:
  void build_rays() {
    const int L = geometry_.n_scanlines;
    const int S = geometry_.n_samples;
    const double ds = geometry_.sample_step_mm();
    rays_.resize(static_cast<std::size_t>(L) * S);
    for (int l = 0; l < L; ++l) {
      const double theta = line_angle(l);
      const double st = std::sin(theta);
      const double ct = std::cos(theta);
      for (int s = 0; s < S; ++s) {
        const double r = geometry_.apex_radius_mm + s * ds;
        const double px = (apex_x_mm() + r * st) / spacing_mm_;
        const double py = (apex_y_mm() + r * ct) / spacing_mm_;
        SampleLookup& lk = rays_[static_cast<std::size_t>(l) * S + s];
        const int ni = std::clamp(static_cast<int>(std::lround(px)), 0, width_ - 1);
        const int nj = std::clamp(static_cast<int>(std::lround(py)), 0, height_ - 1);
        lk.nearest = static_cast<std::uint32_t>(nj * width_ + ni);
        const int x0 = static_cast<int>(std::floor(px));
        const int y0 = static_cast<int>(std::floor(py));
        const double tx = px - x0;
        const double ty = py - y0;
        const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
        const double ws[4] = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
        for (int m = 0; m < 4; ++m) {
          const bool inside = xs[m] >= 0 && ys[m] >= 0 && xs[m] < width_ && ys[m] < height_;
          lk.neighbors[m] = inside ? ys[m] * width_ + xs[m] : -1;
          lk.weights[m] = inside ? ws[m] : 0.0;
        }
      }
    }
  }

  void build_kernels() {
    const double ds = geometry_.sample_step_mm();
    const double lambda = settings_.wavelength_mm(geometry_.frequency_mhz);
    const double sigma_a = settings_.axial_sigma_mm > 0.0 ? settings_.axial_sigma_mm : lambda / 6.0;
    const int ha = static_cast<int>(std::ceil(3.0 * sigma_a / ds));
    axial_.resize(2 * ha + 1);
    for (int m = -ha; m <= ha; ++m) {
      const double d = m * ds;
      axial_[m + ha] = std::exp(-0.5 * d * d / (sigma_a * sigma_a)) *
                       std::cos(2.0 * std::numbers::pi * d / lambda);
    }

    const double sigma_l = settings_.lateral_sigma_lines;
    if (sigma_l <= 0.0) {
      lateral_ = {1.0};
      return;
    }
    const int hl = static_cast<int>(std::ceil(3.0 * sigma_l));
    lateral_.resize(2 * hl + 1);
    double sum = 0.0;
    for (int m = -hl; m <= hl; ++m) {
      lateral_[m + hl] = std::exp(-0.5 * m * m / (sigma_l * sigma_l));
      sum += lateral_[m + hl];
    }
    for (double& k : lateral_) k /= sum;
  }

  void build_scan_conversion() {
    const int W = geometry_.out_dims[0];
    const int H = geometry_.out_dims[1];
    const int L = geometry_.n_scanlines;
    const int S = geometry_.n_samples;
    const double ds = geometry_.sample_step_mm();
    const double sector = geometry_.sector_deg * std::numbers::pi / 180.0;
    const double dtheta = L > 1 ? sector / (L - 1) : 0.0;
    scan_.assign(static_cast<std::size_t>(W) * H, PixelLookup{});
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        const double dx = (c - 0.5 * (W - 1)) * spacing_mm_;
        const double dy = r * spacing_mm_ + geometry_.apex_radius_mm;
        const double rho = std::hypot(dx, dy);
        const double theta = std::atan2(dx, dy);
        const double fs = (rho - geometry_.apex_radius_mm) / ds;
        double fl = 0.0;
        if (L > 1) {
          fl = (theta + 0.5 * sector) / dtheta;
        } else if (std::abs(theta) > 1e-12) {
          continue;
        }
        if (fs < 0.0 || fs > S - 1 || fl < 0.0 || fl > L - 1) continue;
        PixelLookup& px = scan_[static_cast<std::size_t>(r) * W + c];
        px.line = std::min(static_cast<int>(fl), std::max(L - 2, 0));
        px.sample = std::min(static_cast<int>(fs), std::max(S - 2, 0));
        px.t_line = L > 1 ? fl - px.line : 0.0;
        px.t_sample = S > 1 ? fs - px.sample : 0.0;
      }
    }
  }

  int width_;
  int height_;
  double spacing_mm_;
  ProbeGeometry geometry_;
  RenderSettings settings_;
  std::vector<SampleLookup> rays_;
  std::vector<double> axial_;
  std::vector<double> lateral_;
  std::vector<PixelLookup> scan_;
};

// ---------------------------------------------------------------------------
// Forward stages
// ---------------------------------------------------------------------------

namespace detail {

inline double bilinear_gather(const std::vector<double>& map, const RenderPlan::SampleLookup& lk) {
  double v = 0.0;
  for (int m = 0; m < 4; ++m) {
    if (lk.neighbors[m] >= 0) v += lk.weights[m] * map[lk.neighbors[m]];
  }
  return v;
}

/// Echo and transmission along one scanline from per-sample media values.
/// E_0 = 1, E_{s+1} = E_s * 10^(-alpha_s f ds/10) * (1 - R_s).
template <typename MediumAt>
void trace_line(const RenderPlan& plan, int line, const MediumAt& medium, FanImage& echo,
                FanImage& transmission) {
  const auto& g = plan.geometry();
  const auto& st = plan.settings();
  const int S = g.n_samples;
  const double ds_cm = g.sample_step_mm() / 10.0;
  double energy = 1.0;
  for (int s = 0; s < S; ++s) {
    const auto here = medium(line, s);
    const double R = s + 1 < S ? reflection(here.z, medium(line, s + 1).z) : 0.0;
    transmission.at(line, s) = energy;
    echo.at(line, s) = energy * (st.beta_refl * R + st.beta_scat * here.scatter);
    energy *= attenuation_factor(here.alpha, g.frequency_mhz, ds_cm) * (1.0 - R);
  }
}

struct Medium {
  double alpha;
  double z;
  double scatter;
};

/// Separable PSF: axial kernel along each scanline, then lateral kernel
/// across scanlines; zero padded, same size output.
inline FanImage convolve_fan(const FanImage& in, const std::vector<double>& axial,
                             const std::vector<double>& lateral) {
  const int L = in.width;
  const int S = in.height;
  const int ha = static_cast<int>(axial.size() / 2);
  const int hl = static_cast<int>(lateral.size() / 2);
  FanImage tmp(L, S, in.spacing_mm);
  for (int s = 0; s < S; ++s) {
    const int lo = std::max(-ha, s - (S - 1));
    const int hi = std::min(ha, s);
    for (int l = 0; l < L; ++l) {
      double acc = 0.0;
      for (int m = lo; m <= hi; ++m) acc += axial[m + ha] * in.at(l, s - m);
      tmp.at(l, s) = acc;
    }
  }
  FanImage out(L, S, in.spacing_mm);
  for (int s = 0; s < S; ++s) {
    for (int l = 0; l < L; ++l) {
      const int lo = std::max(-hl, l - (L - 1));
      const int hi = std::min(hl, l);
      double acc = 0.0;
      for (int m = lo; m <= hi; ++m) acc += lateral[m + hl] * tmp.at(l - m, s);
      out.at(l, s) = acc;
    }
  }
  return out;
}

/// Adjoint of convolve_fan (correlation with the same kernels, reverse order).
inline FanImage convolve_fan_adjoint(const FanImage& grad_out, const std::vector<double>& axial,
                                     const std::vector<double>& lateral) {
  const int L = grad_out.width;
  const int S = grad_out.height;
  const int ha = static_cast<int>(axial.size() / 2);
  const int hl = static_cast<int>(lateral.size() / 2);
  FanImage tmp(L, S, grad_out.spacing_mm);
  for (int s = 0; s < S; ++s) {
    for (int l = 0; l < L; ++l) {
      const int lo = std::max(-hl, -l);
      const int hi = std::min(hl, L - 1 - l);
      double acc = 0.0;
      for (int m = lo; m <= hi; ++m) acc += lateral[m + hl] * grad_out.at(l + m, s);
      tmp.at(l, s) = acc;
    }
  }
  FanImage out(L, S, grad_out.spacing_mm);
  for (int s = 0; s < S; ++s) {
    const int lo = std::max(-ha, -s);
    const int hi = std::min(ha, S - 1 - s);
    for (int l = 0; l < L; ++l) {
      double acc = 0.0;
      for (int m = lo; m <= hi; ++m) acc += axial[m + ha] * tmp.at(l, s + m);
      out.at(l, s) = acc;
    }
  }
  return out;
}

inline double log_compress(double x, double gamma) {
  return gamma > 0.0 ? std::log1p(gamma * x) / std::log1p(gamma) : x;
}

inline double log_compress_derivative(double x, double gamma) {
  return gamma > 0.0 ? gamma / ((1.0 + gamma * x) * std::log1p(gamma)) : 1.0;
}

inline double fan_lookup(const FanImage& fan, const RenderPlan::PixelLookup& px) {
  const int l1 = std::min(px.line + 1, fan.width - 1);
  const int s1 = std::min(px.sample + 1, fan.height - 1);
  const double a = fan.at(px.line, px.sample) * (1 - px.t_line) + fan.at(l1, px.sample) * px.t_line;
  const double b = fan.at(px.line, s1) * (1 - px.t_line) + fan.at(l1, s1) * px.t_line;
  return a * (1 - px.t_sample) + b * px.t_sample;
}

}  // namespace detail

/// March every scanline through the sub-maps. Attenuation and impedance are
/// read from the nearest slice pixel (clamped to the slice), scatter is
/// bilinear with zero outside the slice.
inline TraceResult trace_scanlines(const SubMaps& maps, const RenderPlan& plan) {
  TraceResult out{FanImage(plan.lines(), plan.samples(), plan.geometry().sample_step_mm()),
                  FanImage(plan.lines(), plan.samples(), plan.geometry().sample_step_mm())};
  auto medium = [&](int l, int s) {
    const auto& lk = plan.sample(l, s);
    return detail::Medium{maps.attenuation.pixels[lk.nearest], maps.impedance.pixels[lk.nearest],
                          detail::bilinear_gather(maps.scatter.pixels, lk)};
  };
  for (int l = 0; l < plan.lines(); ++l) detail::trace_line(plan, l, medium, out.echo, out.transmission);
  return out;
}

inline TraceResult trace_scanlines(const SubMaps& maps, const ProbeGeometry& geometry,
                                   const RenderSettings& settings = {}) {
  const RenderPlan plan(maps.attenuation.width, maps.attenuation.height,
                        maps.attenuation.spacing_mm, geometry, settings);
  return trace_scanlines(maps, plan);
}

/// Linear part of the PSF. The lateral kernel sums to 1 and the axial kernel
/// has unit peak; psf_kernel_sum() gives the resulting DC gain.
inline FanImage convolve_psf(const FanImage& fan, const ProbeGeometry& geometry,
                             const RenderSettings& settings = {}) {
  const RenderPlan plan(1, 1, 1.0, geometry, settings);
  return detail::convolve_fan(fan, plan.axial_kernel(), plan.lateral_kernel());
}

inline double psf_kernel_sum(const ProbeGeometry& geometry, const RenderSettings& settings = {}) {
  const RenderPlan plan(1, 1, 1.0, geometry, settings);
  double a = 0.0;
  double l = 0.0;
  for (double k : plan.axial_kernel()) a += k;
  for (double k : plan.lateral_kernel()) l += k;
  return a * l;
}

/// PSF convolution followed by clamping at zero.
inline FanImage apply_psf(const FanImage& fan, const ProbeGeometry& geometry,
                          const RenderSettings& settings = {}) {
  FanImage out = convolve_psf(fan, geometry, settings);
  for (double& v : out.pixels) v = std::max(v, 0.0);
  return out;
}

/// Polar-to-Cartesian conversion, log compression and clamp to [0, 1].
inline Image2D scan_convert(const FanImage& fan, const RenderPlan& plan) {
  const auto& g = plan.geometry();
  Image2D out(g.out_dims[0], g.out_dims[1], plan.spacing_mm());
  const auto& map = plan.scan_map();
  for (std::size_t p = 0; p < map.size(); ++p) {
    if (map[p].line < 0) continue;
    const double x = detail::fan_lookup(fan, map[p]);
    out.pixels[p] = std::clamp(detail::log_compress(x, plan.settings().gamma), 0.0, 1.0);
  }
  return out;
}

/// `pixel_spacing_mm` is the Cartesian output spacing (the slice spacing in a full render).
inline Image2D scan_convert(const FanImage& fan, const ProbeGeometry& geometry,
                            double pixel_spacing_mm, const RenderSettings& settings = {}) {
  if (fan.width != geometry.n_scanlines || fan.height != geometry.n_samples) {
    throw std::invalid_argument("fan image size does not match probe geometry");
  }
  const RenderPlan plan(geometry.out_dims[0], geometry.out_dims[1], pixel_spacing_mm, geometry,
                        settings);
  return scan_convert(fan, plan);
}

// ---------------------------------------------------------------------------
// Full render and gradients
// ---------------------------------------------------------------------------

namespace detail {

/// Forward pass that keeps what the backward pass needs.
struct RenderTape {
  ScatterDraws draws;
  SubMaps maps;
  TraceResult trace;
  FanImage convolved;  // before the zero clamp
  RenderOutput output;

  RenderTape(std::size_t pixels, std::uint64_t seed) : draws(pixels, seed) {}
};

inline void check_plan(const RenderPlan& plan, const LabelSlice2D& slice) {
  if (plan.width() != slice.width || plan.height() != slice.height ||
      plan.spacing_mm() != slice.spacing_mm) {
    throw std::invalid_argument("render plan was built for a different slice size");
  }
}

inline RenderTape forward(const LabelSlice2D& slice, const TissueTable& table,
                          const RenderPlan& plan, std::uint64_t seed) {
  check_plan(plan, slice);
  check_classes(slice, table);
  const auto& st = plan.settings();
  RenderTape tape(slice.pixels.size(), seed);
  tape.maps = SubMaps{Image2D(slice.width, slice.height, slice.spacing_mm),
                      Image2D(slice.width, slice.height, slice.spacing_mm),
                      Image2D(slice.width, slice.height, slice.spacing_mm)};
  for (std::size_t p = 0; p < slice.pixels.size(); ++p) {
    const TissueParams& t = table[slice.pixels[p]];
    tape.maps.attenuation.pixels[p] = t.alpha;
    tape.maps.impedance.pixels[p] = t.z;
    const double b = scatter_presence(tape.draws.uniform[p], t.mu0, st.presence_temperature);
    tape.maps.scatter.pixels[p] = b * std::clamp(t.mu1 + t.sigma0 * tape.draws.normal[p], 0.0, 1.0);
  }
  tape.trace = trace_scanlines(tape.maps, plan);
  tape.convolved = convolve_fan(tape.trace.echo, plan.axial_kernel(), plan.lateral_kernel());
  tape.output.fan = tape.convolved;
  for (double& v : tape.output.fan.pixels) v = std::max(v, 0.0);
  tape.output.bmode = scan_convert(tape.output.fan, plan);
  tape.output.transmission = tape.trace.transmission;
  return tape;
}

/// Reverse-mode pass: gradient of sum(cotangent * bmode) w.r.t. the table.
inline ParamGradients backward(const LabelSlice2D& slice, const TissueTable& table,
                               const RenderPlan& plan, const RenderTape& tape,
                               const std::vector<double>& cotangent) {
  const auto& g = plan.geometry();
  const auto& st = plan.settings();
  const int L = g.n_scanlines;
  const int S = g.n_samples;

  // Scan conversion and log compression.
  FanImage fan_bar(L, S, g.sample_step_mm());
  const auto& map = plan.scan_map();
  for (std::size_t p = 0; p < map.size(); ++p) {
    const auto& px = map[p];
    if (px.line < 0 || cotangent[p] == 0.0) continue;
    const double x = fan_lookup(tape.output.fan, px);
    const double y = log_compress(x, st.gamma);
    if (y > 1.0 || y < 0.0) continue;
    const double xb = cotangent[p] * log_compress_derivative(x, st.gamma);
    const int l1 = std::min(px.line + 1, L - 1);
    const int s1 = std::min(px.sample + 1, S - 1);
    fan_bar.at(px.line, px.sample) += xb * (1 - px.t_line) * (1 - px.t_sample);
    fan_bar.at(l1, px.sample) += xb * px.t_line * (1 - px.t_sample);
    fan_bar.at(px.line, s1) += xb * (1 - px.t_line) * px.t_sample;
    fan_bar.at(l1, s1) += xb * px.t_line * px.t_sample;
  }

  // Zero clamp and PSF.
  for (std::size_t i = 0; i < fan_bar.pixels.size(); ++i) {
    if (!(tape.convolved.pixels[i] > 0.0)) fan_bar.pixels[i] = 0.0;
  }
  const FanImage echo_bar = convolve_fan_adjoint(fan_bar, plan.axial_kernel(), plan.lateral_kernel());

  // Scanline recursion, per line, merged in line order.
  ParamGradients grads(table.size());
  std::vector<double> scatter_bar(slice.pixels.size(), 0.0);
  const double ds_cm = g.sample_step_mm() / 10.0;
  const double dlog_a = -std::log(10.0) * g.frequency_mhz * ds_cm / 10.0;  // d ln(a) / d alpha
  const auto& att = tape.maps.attenuation.pixels;
  const auto& imp = tape.maps.impedance.pixels;
  for (int l = 0; l < L; ++l) {
    double energy_bar = 0.0;  // dLoss / dE_{s+1}
    for (int s = S - 1; s >= 0; --s) {
      const auto& lk = plan.sample(l, s);
      const int k = slice.pixels[lk.nearest];
      const double E = tape.trace.transmission.at(l, s);
      const double za = imp[lk.nearest];
      double R = 0.0;
      double zb = za;
      int kb = k;
      if (s + 1 < S) {
        const auto& next = plan.sample(l, s + 1);
        zb = imp[next.nearest];
        kb = slice.pixels[next.nearest];
        R = reflection(za, zb);
      }
      const double a = attenuation_factor(att[lk.nearest], g.frequency_mhz, ds_cm);
      const double scat = bilinear_gather(tape.maps.scatter.pixels, lk);
      const double eb = echo_bar.at(l, s);

      grads(k, Param::alpha) += energy_bar * E * (1.0 - R) * a * dlog_a;
      if (s + 1 < S) {
        const double R_bar = eb * E * st.beta_refl - energy_bar * E * a;
        const double sum = za + zb;
        const double q = (zb - za) / sum;
        grads(k, Param::z) += R_bar * 2.0 * q * (-2.0 * zb / (sum * sum));
        grads(kb, Param::z) += R_bar * 2.0 * q * (2.0 * za / (sum * sum));
      }
      const double scat_bar = eb * E * st.beta_scat;
      if (scat_bar != 0.0) {
        for (int m = 0; m < 4; ++m) {
          if (lk.neighbors[m] >= 0) scatter_bar[lk.neighbors[m]] += lk.weights[m] * scat_bar;
        }
      }
      energy_bar = eb * (st.beta_refl * R + st.beta_scat * scat) + energy_bar * a * (1.0 - R);
    }
  }

  // Scatter map construction.
  for (std::size_t p = 0; p < slice.pixels.size(); ++p) {
    const double sb = scatter_bar[p];
    if (sb == 0.0) continue;
    const int k = slice.pixels[p];
    const TissueParams& t = table[k];
    const double n = tape.draws.normal[p];
    const double raw = t.mu1 + t.sigma0 * n;
    const double amp = std::clamp(raw, 0.0, 1.0);
    const double b = scatter_presence(tape.draws.uniform[p], t.mu0, st.presence_temperature);
    grads(k, Param::mu0) += sb * amp * scatter_presence_dmu0(b, t.mu0, st.presence_temperature);
    if (raw > 0.0 && raw < 1.0) {
      grads(k, Param::mu1) += sb * b;
      grads(k, Param::sigma0) += sb * b * n;
    }
  }
  return grads;
}

}  // namespace detail

/// build_submaps -> trace_scanlines -> apply_psf -> scan_convert.
inline RenderOutput render(const LabelSlice2D& slice, const TissueTable& table,
                           const RenderPlan& plan, std::uint64_t seed) {
  auto tape = detail::forward(slice, table, plan, seed);
  tape.output.submaps = std::move(tape.maps);
  return std::move(tape.output);
}

inline RenderOutput render(const LabelSlice2D& slice, const TissueTable& table,
                           const ProbeGeometry& geometry, std::uint64_t seed,
                           const RenderSettings& settings = {}) {
  const RenderPlan plan(slice.width, slice.height, slice.spacing_mm, geometry, settings);
  return render(slice, table, plan, seed);
}

/// Gradient of sum_p cotangent[p] * bmode[p] with the noise realization fixed.
inline ParamGradients render_vjp(const LabelSlice2D& slice, const TissueTable& table,
                                 const RenderPlan& plan, std::uint64_t seed,
                                 const std::vector<double>& cotangent) {
  const auto tape = detail::forward(slice, table, plan, seed);
  if (cotangent.size() != tape.output.bmode.pixels.size()) {
    throw std::invalid_argument("cotangent size does not match the B-mode image");
  }
  return detail::backward(slice, table, plan, tape, cotangent);
}

inline double mse(const Image2D& a, const Image2D& b) {
  CompensatedSum sum;
  for (std::size_t p = 0; p < a.pixels.size(); ++p) {
    const double d = a.pixels[p] - b.pixels[p];
    sum += d * d;
  }
  return sum.value() / static_cast<double>(a.pixels.size());
}

struct LossAndGradients {
  double loss = 0.0;
  ParamGradients grads;
};

/// Mean squared error between the render and `target`, with analytic gradients.
inline LossAndGradients loss_and_gradients(const LabelSlice2D& slice, const TissueTable& table,
                                           const RenderPlan& plan, std::uint64_t seed,
                                           const Image2D& target) {
  const auto& g = plan.geometry();
  if (target.width != g.out_dims[0] || target.height != g.out_dims[1]) {
    throw std::invalid_argument("target image size does not match geometry out_dims");
  }
  const auto tape = detail::forward(slice, table, plan, seed);
  const Image2D& y = tape.output.bmode;
  const double n = static_cast<double>(y.pixels.size());
  std::vector<double> cot(y.pixels.size());
  for (std::size_t p = 0; p < cot.size(); ++p) cot[p] = 2.0 * (y.pixels[p] - target.pixels[p]) / n;
  return {mse(y, target), detail::backward(slice, table, plan, tape, cot)};
}

inline LossAndGradients loss_and_gradients(const LabelSlice2D& slice, const TissueTable& table,
                                           const ProbeGeometry& geometry, std::uint64_t seed,
                                           const Image2D& target,
                                           const RenderSettings& settings = {}) {
  const RenderPlan plan(slice.width, slice.height, slice.spacing_mm, geometry, settings);
  return loss_and_gradients(slice, table, plan, seed, target);
}

// ---------------------------------------------------------------------------
// Parameter fitting
// ---------------------------------------------------------------------------

struct FitPair {
  LabelSlice2D slice;
  Image2D target;
  std::optional<std::uint64_t> seed;  // render seed; derived from the fit seed if absent
};

struct FitOptions {
  double step_size = 1.0;
  int iterations = 200;
  std::uint64_t seed = 0;
  /// free[k][p]: whether parameter p of class k is optimized. Empty = all free.
  std::vector<std::array<bool, kParamCount>> free;
  int jobs = 1;
};

struct FitResult {
  TissueTable table;
  std::vector<double> loss_trace;  // entry 0 is the initial loss
  int accepted_steps = 0;
};

inline std::uint64_t fit_pair_seed(const FitPair& pair, const FitOptions& opt, std::size_t index) {
  return pair.seed ? *pair.seed : rng::derive(opt.seed, "fit.pair", index);
}

/// Projected gradient descent with backtracking: a step is accepted only if
/// it does not increase the loss, then the next trial step doubles; rejected
/// steps are halved. The loss trace is therefore nonincreasing.
inline FitResult fit_tissue_params(const std::vector<FitPair>& pairs, const TissueTable& init,
                                   const ProbeGeometry& geometry, const FitOptions& opt = {},
                                   const RenderSettings& settings = {}) {
  if (pairs.empty()) throw std::invalid_argument("fit needs at least one (slice, target) pair");
  init.validate();
  if (!opt.free.empty() && opt.free.size() != init.size()) {
    throw std::invalid_argument("free-parameter mask must have one row per tissue class");
  }
  std::vector<RenderPlan> plans;
  plans.reserve(pairs.size());
  for (const auto& p : pairs) {
    plans.emplace_back(p.slice.width, p.slice.height, p.slice.spacing_mm, geometry, settings);
  }
  auto is_free = [&](std::size_t k, int p) { return opt.free.empty() || opt.free[k][p]; };

  auto evaluate = [&](const TissueTable& table, bool with_grad) {
    std::vector<LossAndGradients> parts(pairs.size());
    parallel_for(pairs.size(), opt.jobs, [&](std::size_t i) {
      const std::uint64_t seed = fit_pair_seed(pairs[i], opt, i);
      if (with_grad) {
        parts[i] = loss_and_gradients(pairs[i].slice, table, plans[i], seed, pairs[i].target);
      } else {
        parts[i].loss = mse(render(pairs[i].slice, table, plans[i], seed).bmode, pairs[i].target);
      }
    });
    LossAndGradients total{0.0, ParamGradients(table.size())};
    CompensatedSum loss;
    for (const auto& part : parts) {
      loss += part.loss;
      if (!with_grad) continue;
      for (std::size_t k = 0; k < table.size(); ++k) {
        for (int p = 0; p < kParamCount; ++p) total.grads.per_class[k][p] += part.grads.per_class[k][p];
      }
    }
    const double scale = 1.0 / static_cast<double>(pairs.size());
    total.loss = loss.value() * scale;
    for (auto& row : total.grads.per_class) {
      for (double& v : row) v *= scale;
    }
    return total;
  };

  FitResult result{init, {}, 0};
  auto current = evaluate(result.table, true);
  result.loss_trace.push_back(current.loss);
  double step = opt.step_size;
  const double min_step = opt.step_size * 1e-12;
  for (int it = 0; it < opt.iterations; ++it) {
    bool accepted = false;
    while (step >= min_step) {
      TissueTable trial = result.table;
      for (std::size_t k = 0; k < trial.size(); ++k) {
        for (int p = 0; p < kParamCount; ++p) {
          if (!is_free(k, p)) continue;
          const Param param = static_cast<Param>(p);
          trial[k][param] = project_param(param, trial[k][param] - step * current.grads.per_class[k][p]);
        }
      }
      const double trial_loss = evaluate(trial, false).loss;
      if (trial_loss <= current.loss) {
        result.table = std::move(trial);
        current = evaluate(result.table, true);
        accepted = true;
        ++result.accepted_steps;
        step *= 2.0;
        break;
      }
      step *= 0.5;
    }
    result.loss_trace.push_back(current.loss);
    if (!accepted) step = min_step;  // stalled: no descent direction at machine precision
  }
  return result;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline void to_json(Json& j, const TissueTable& t) {
  j = Json{{"classes", Json::array()}};
  for (const auto& c : t.classes) {
    j["classes"].push_back(
        {{"name", c.name}, {"alpha", c.alpha}, {"z", c.z}, {"mu0", c.mu0}, {"mu1", c.mu1}, {"sigma0", c.sigma0}});
  }
}

inline void from_json(const Json& j, TissueTable& t) {
  t.classes.clear();
  for (const auto& c : j.at("classes")) {
    TissueParams p;
    p.name = c.value("name", "class" + std::to_string(t.classes.size()));
    p.alpha = c.at("alpha").get<double>();
    p.z = c.at("z").get<double>();
    p.mu0 = c.at("mu0").get<double>();
    p.mu1 = c.at("mu1").get<double>();
    p.sigma0 = c.at("sigma0").get<double>();
    t.classes.push_back(std::move(p));
  }
}

inline void to_json(Json& j, const ProbeGeometry& g) {
  j = Json{{"apex_radius_mm", g.apex_radius_mm}, {"sector_deg", g.sector_deg},
           {"n_scanlines", g.n_scanlines},       {"n_samples", g.n_samples},
           {"depth_mm", g.depth_mm},             {"frequency_mhz", g.frequency_mhz},
           {"out_dims", g.out_dims}};
}

inline void from_json(const Json& j, ProbeGeometry& g) {
  g.apex_radius_mm = j.value("apex_radius_mm", g.apex_radius_mm);
  g.sector_deg = j.value("sector_deg", g.sector_deg);
  g.n_scanlines = j.value("n_scanlines", g.n_scanlines);
  g.n_samples = j.value("n_samples", g.n_samples);
  g.depth_mm = j.value("depth_mm", g.depth_mm);
  g.frequency_mhz = j.value("frequency_mhz", g.frequency_mhz);
  if (j.contains("out_dims")) g.out_dims = j.at("out_dims").get<std::array<int, 2>>();
}

inline void to_json(Json& j, const RenderSettings& s) {
  j = Json{{"beta_refl", s.beta_refl},
           {"beta_scat", s.beta_scat},
           {"gamma", s.gamma},
           {"speed_of_sound_mm_us", s.speed_of_sound_mm_us},
           {"axial_sigma_mm", s.axial_sigma_mm},
           {"lateral_sigma_lines", s.lateral_sigma_lines},
           {"presence_temperature", s.presence_temperature}};
}

inline void from_json(const Json& j, RenderSettings& s) {
  s.beta_refl = j.value("beta_refl", s.beta_refl);
  s.beta_scat = j.value("beta_scat", s.beta_scat);
  s.gamma = j.value("gamma", s.gamma);
  s.speed_of_sound_mm_us = j.value("speed_of_sound_mm_us", s.speed_of_sound_mm_us);
  s.axial_sigma_mm = j.value("axial_sigma_mm", s.axial_sigma_mm);
  s.lateral_sigma_lines = j.value("lateral_sigma_lines", s.lateral_sigma_lines);
  s.presence_temperature = j.value("presence_temperature", s.presence_temperature);
}

inline Json to_json(const ParamGradients& g) {
  Json j = Json::array();
  for (const auto& row : g.per_class) {
    Json r;
    for (int p = 0; p < kParamCount; ++p) r[kParamNames[p]] = row[p];
    j.push_back(r);
  }
  return j;
}

}  // namespace sonosynth

#endif  // SONOSYNTH_RENDER_HPP
