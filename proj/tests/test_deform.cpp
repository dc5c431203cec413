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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sonosynth/deform.hpp"
#include "test_util.hpp"

namespace {

using namespace sonosynth;
using sonosynth::testing::TempDir;

VolumeHeader grid(std::array<int, 3> dims, double spacing = 2.0) {
  VolumeHeader h;
  h.dims = dims;
  h.spacing = {spacing, spacing, spacing};
  h.origin = {-10.0, 5.0, 0.0};
  return h;
}

DisplacementField constant_field(const VolumeHeader& h, const Vec3& u) {
  DisplacementField f(h);
  for (int c = 0; c < 3; ++c) std::fill(f.components[c].begin(), f.components[c].end(), u[c]);
  return f;
}

LabelVolume random_labels(const VolumeHeader& h, int classes, std::uint32_t seed) {
  VolumeHeader lh = h;
  lh.kind = VolumeKind::label;
  lh.num_classes = classes;
  LabelVolume v(lh);
  std::mt19937 gen(seed);
  std::uniform_int_distribution<int> d(0, classes - 1);
  for (auto& x : v.voxels) x = static_cast<std::uint8_t>(d(gen));
  return v;
}

TEST(DeformConfig, Validation) {
  DeformConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lattice_dims = {4, 1, 4};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.smooth_sigma_mm = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.clamp_lo_mm = 5;
  c.clamp_hi_mm = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.target_mean_abs_mm = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(DeformConfig, JsonRoundTripWithDisabledClamp) {
  const DeformConfig c = DeformConfig{}.unclamped();
  const Json j = c;
  EXPECT_TRUE(j.at("clamp_lo_mm").is_null());
  EXPECT_TRUE(j.at("clamp_hi_mm").is_null());
  const auto back = j.get<DeformConfig>();
  EXPECT_TRUE(std::isinf(back.clamp_lo_mm) && back.clamp_lo_mm < 0);
  EXPECT_TRUE(std::isinf(back.clamp_hi_mm) && back.clamp_hi_mm > 0);
  const auto defaults = Json::object().get<DeformConfig>();
  EXPECT_EQ(defaults.clamp_lo_mm, -42.63);
  EXPECT_EQ(defaults.clamp_hi_mm, 41.05);
  EXPECT_EQ(defaults.target_mean_abs_mm, 26.65);
}

TEST(GenerateField, ZeroTargetGivesZeroField) {
  DeformConfig c;
  c.target_mean_abs_mm = 0.0;
  const auto f = generate_field(c, grid({10, 9, 8}));
  for (const auto& comp : f.components)
    for (double v : comp) EXPECT_EQ(v, 0.0);
}

TEST(GenerateField, DefaultClampBounds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    DeformConfig c;
    c.seed = seed;
    const auto s = field_stats(generate_field(c, grid({24, 20, 16})));
    for (int a = 0; a < 3; ++a) {
      EXPECT_GE(s.min[a], -42.63);
      EXPECT_LE(s.max[a], 41.05);
    }
  }
}

TEST(GenerateField, UnclampedMeanAbsEqualsTarget) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    DeformConfig c = DeformConfig{}.unclamped();
    c.seed = seed;
    const auto f = generate_field(c, grid({20, 24, 18}));
    for (int a = 0; a < 3; ++a) {
      long double acc = 0;
      for (double v : f.components[a]) acc += std::abs(static_cast<long double>(v));
      EXPECT_NEAR(static_cast<double>(acc / f.components[a].size()), 26.65, 1e-6);
    }
  }
}

TEST(GenerateField, DeterministicAcrossJobs) {
  DeformConfig c;
  c.seed = 99;
  const auto a = generate_field(c, grid({17, 13, 11}), 1);
  const auto b = generate_field(c, grid({17, 13, 11}), 4);
  const auto d = generate_field(c, grid({17, 13, 11}), 1);
  EXPECT_EQ(a.components, b.components);
  EXPECT_EQ(a.components, d.components);
  c.seed = 100;
  EXPECT_NE(generate_field(c, grid({17, 13, 11})).components, a.components);
}

TEST(GenerateField, DomainNeedsTwoVoxels) {
  EXPECT_THROW(generate_field(DeformConfig{}, grid({1, 5, 5})), std::invalid_argument);
}

double max_gradient(const DisplacementField& f, int c) {
  const auto& d = f.header.dims;
  double g = 0.0;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i + 1 < d[0]; ++i) {
        const std::size_t a = i + d[0] * (j + static_cast<std::size_t>(d[1]) * k);
        g = std::max(g, std::abs(f.components[c][a + 1] - f.components[c][a]));
      }
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j + 1 < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        const std::size_t a = i + d[0] * (j + static_cast<std::size_t>(d[1]) * k);
        g = std::max(g, std::abs(f.components[c][a + d[0]] - f.components[c][a]));
      }
  return g;
}

TEST(GenerateField, SmoothingReducesMaxGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    double previous[3] = {INFINITY, INFINITY, INFINITY};
    for (double sigma : {4.0, 8.0, 16.0, 32.0}) {
      DeformConfig c = DeformConfig{}.unclamped();
      c.seed = seed;
      c.smooth_sigma_mm = sigma;
      const auto f = generate_field(c, grid({40, 40, 40}));
      for (int a = 0; a < 3; ++a) {
        const double g = max_gradient(f, a);
        EXPECT_LT(g, previous[a]) << "seed " << seed << " sigma " << sigma << " axis " << a;
        previous[a] = g;
      }
    }
  }
}

TEST(FieldStats, WorkedExample) {
  DisplacementField f(grid({2, 1, 1}));
  f.components[0][0] = 3.0;
  f.components[1][0] = -4.0;
  const auto s = field_stats(f);
  EXPECT_EQ(s.max[0], 3.0);
  EXPECT_EQ(s.min[1], -4.0);
  EXPECT_EQ(s.mean_abs[0], 1.5);
  EXPECT_EQ(s.mean_abs[1], 2.0);
  EXPECT_EQ(s.mean_abs[2], 0.0);
  const auto z = field_stats(zero_field(grid({3, 3, 3})));
  for (int a = 0; a < 3; ++a) {
    EXPECT_EQ(z.min[a], 0.0);
    EXPECT_EQ(z.max[a], 0.0);
    EXPECT_EQ(z.mean_abs[a], 0.0);
  }
  const Json j = to_json(s);
  EXPECT_EQ(j.at("x").at("max"), 3.0);
  EXPECT_EQ(j.at("y").at("min"), -4.0);
  EXPECT_EQ(j.at("x").at("mean_abs"), 1.5);
}

TEST(Warp, ZeroFieldIsIdentity) {
  const auto h = grid({9, 7, 5}, 1.3);
  const LabelVolume labels = random_labels(h, 5, 1);
  EXPECT_EQ(warp_labels(labels, zero_field(h)), labels);
  ScalarVolume s(h);
  std::mt19937 gen(2);
  std::normal_distribution<float> d;
  for (auto& x : s.voxels) x = d(gen);
  const auto w = warp_scalar(s, zero_field(h));
  for (std::size_t i = 0; i < s.voxels.size(); ++i) EXPECT_NEAR(w.voxels[i], s.voxels[i], 1e-6);
}

TEST(Warp, ConstantShiftMatchesIndexShift) {
  const auto h = grid({8, 6, 5}, 1.5);
  const LabelVolume labels = random_labels(h, 4, 3);
  ScalarVolume scalar(h);
  for (std::size_t i = 0; i < scalar.voxels.size(); ++i) scalar.voxels[i] = static_cast<float>(i % 17) - 3.0f;
  for (int axis = 0; axis < 3; ++axis) {
    for (int shift : {1, -2}) {
      Vec3 u;
      u[axis] = shift * h.spacing[axis];
      const auto field = constant_field(h, u);
      const auto wl = warp_labels(labels, field);
      const auto ws = warp_scalar(scalar, field);
      for (int k = 0; k < h.dims[2]; ++k)
        for (int j = 0; j < h.dims[1]; ++j)
          for (int i = 0; i < h.dims[0]; ++i) {
            int src[3] = {i, j, k};
            src[axis] += shift;
            const bool inside = labels.contains(src[0], src[1], src[2]);
            EXPECT_EQ(wl.at(i, j, k), inside ? labels.at(src[0], src[1], src[2]) : 0);
            EXPECT_NEAR(ws.at(i, j, k), inside ? scalar.at(src[0], src[1], src[2]) : 0.0f, 1e-6);
          }
    }
  }
}

TEST(Warp, LabelClosureAndScalarRange) {
  const auto h = grid({16, 16, 16}, 2.0);
  const LabelVolume labels = random_labels(h, 7, 5);
  ScalarVolume scalar(h);
  std::mt19937 gen(6);
  std::uniform_real_distribution<float> d(2.0f, 9.0f);
  for (auto& x : scalar.voxels) x = d(gen);
  DeformConfig c;
  c.target_mean_abs_mm = 3.0;
  c.seed = 4;
  const auto field = generate_field(c, h);
  for (auto v : warp_labels(labels, field).voxels) EXPECT_LT(v, 7);
  // Fully interior pulls are convex combinations; off-grid pulls give 0.
  for (float v : warp_scalar(scalar, field).voxels) {
    EXPECT_TRUE(v == 0.0f || (v >= 2.0f && v <= 9.0f));
  }
}

TEST(Warp, ForwardThenInverseRecoversInterior) {
  const auto h = grid({32, 32, 32}, 1.0);
  VolumeHeader lh = h;
  lh.kind = VolumeKind::label;
  lh.num_classes = 4;
  LabelVolume labels(lh);
  for (int k = 0; k < 32; ++k)
    for (int j = 0; j < 32; ++j)
      for (int i = 0; i < 32; ++i) labels.at(i, j, k) = static_cast<std::uint8_t>((i / 8 + j / 8 + k / 8) % 4);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    DeformConfig c;
    c.seed = seed;
    c.target_mean_abs_mm = 0.8;
    c.clamp_lo_mm = -2.0;
    c.clamp_hi_mm = 2.0;
    const auto u = generate_field(c, h);
    DisplacementField minus_u(h);
    for (int a = 0; a < 3; ++a)
      for (std::size_t i = 0; i < u.components[a].size(); ++i) minus_u.components[a][i] = -u.components[a][i];
    const auto back = warp_labels(warp_labels(labels, u), minus_u);
    int total = 0, same = 0;
    for (int k = 3; k < 29; ++k)
      for (int j = 3; j < 29; ++j)
        for (int i = 3; i < 29; ++i) {
          ++total;
          same += back.at(i, j, k) == labels.at(i, j, k);
        }
    EXPECT_GE(same, 0.95 * total) << "seed " << seed;
  }
}

TEST(Warp, GridMismatchThrows) {
  const LabelVolume labels = random_labels(grid({4, 4, 4}), 2, 1);
  EXPECT_THROW(warp_labels(labels, zero_field(grid({4, 4, 5}))), std::invalid_argument);
  ScalarVolume s(grid({4, 4, 4}));
  auto shifted = grid({4, 4, 4});
  shifted.origin.x += 1.0;
  EXPECT_THROW(warp_scalar(s, zero_field(shifted)), std::invalid_argument);
}

TEST(FieldIo, ChannelFilesAndRoundTrip) {
  TempDir tmp;
  DeformConfig c;
  c.seed = 12;
  const auto f = generate_field(c, grid({6, 5, 4}));
  save_field(f, tmp / "field.json");
  for (const char* ext : {"field.ux.raw", "field.uy.raw", "field.uz.raw"}) {
    ASSERT_TRUE(fs::exists(tmp / ext)) << ext;
    EXPECT_EQ(fs::file_size(tmp / ext), 6u * 5 * 4 * 4);
  }
  const auto g = load_field(tmp / "field.json");
  EXPECT_EQ(g.header.dims, f.header.dims);
  for (int a = 0; a < 3; ++a)
    for (std::size_t i = 0; i < f.components[a].size(); ++i) {
      // Stored in single precision, rounded toward zero.
      const double v = f.components[a][i], r = g.components[a][i];
      EXPECT_LE(std::abs(r), std::abs(v));
      EXPECT_TRUE(r == 0.0 || v == 0.0 || std::signbit(r) == std::signbit(v));
      EXPECT_LE(std::abs(r - v), std::abs(v) * 1.2e-7);
    }
  EXPECT_THROW(load_field(tmp / "none.json"), IoError);
}

}  // namespace
