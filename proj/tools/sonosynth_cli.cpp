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

// sonosynth command-line front end.

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "sonosynth/sonosynth.hpp"

namespace {

using sonosynth::Json;
using sonosynth::UsageError;
namespace fs = std::filesystem;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  int jobs = 0;  // 0: SONOSYNTH_JOBS or hardware concurrency
  std::string out;
};

Json read_config(const Globals& g) {
  if (g.config.empty()) return Json::object();
  if (!fs::exists(g.config)) throw UsageError("config not found: " + g.config);
  try {
    return sonosynth::io::read_json(g.config);
  } catch (const sonosynth::FormatError& e) {
    throw UsageError(e.what());
  }
}

fs::path config_dir(const Globals& g) {
  return g.config.empty() ? fs::path{} : fs::absolute(g.config).parent_path();
}

fs::path require_out(const Globals& g) {
  if (g.out.empty()) throw UsageError("--out is required");
  return g.out;
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("no such file: " + path);
}

template <class T>
T config_section(const Json& cfg, const char* key, const fs::path& base, T fallback) {
  if (!cfg.contains(key)) return fallback;
  const Json& v = cfg.at(key);
  try {
    if (v.is_string()) {
      const fs::path p = base.empty() || fs::path(v.get<std::string>()).is_absolute()
                             ? fs::path(v.get<std::string>())
                             : base / v.get<std::string>();
      require_file(p.string());
      return sonosynth::io::read_json(p).get<T>();
    }
    return v.get<T>();
  } catch (const Json::exception& e) {
    throw UsageError(std::string("invalid \"") + key + "\": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sonosynth: deformation-augmented ultrasound data synthesis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", sonosynth::kToolVersion);

  Globals g;
  app.add_option("--config", g.config, "JSON configuration file");
  app.add_option("--seed", g.seed, "random seed (u64)");
  app.add_option("--jobs", g.jobs, "worker threads (overrides SONOSYNTH_JOBS)")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");

  auto* dataset = app.add_subcommand("dataset", "deform -> reslice -> render a paired dataset");
  std::optional<int> n_slices;
  dataset->add_option("--n-slices", n_slices, "override n_slices_total")->check(CLI::PositiveNumber);

  auto* deform = app.add_subcommand("deform", "warp a label volume by a random smooth field");
  std::string labels_path, ct_path;
  std::optional<double> pad_mm;
  deform->add_option("--labels", labels_path, "label volume (.json or .mhd/.mha)")->required();
  deform->add_option("--ct", ct_path, "optional CT volume on the same grid");
  deform->add_option("--pad-mm", pad_mm, "zero padding before warping");

  auto* reslice = app.add_subcommand("reslice", "extract a 2D slice along a probe pose");
  std::string volume_path;
  std::optional<std::uint64_t> draw;
  int order = 1;
  reslice->add_option("--volume", volume_path, "label or scalar volume")->required();
  reslice->add_option("--draw", draw, "sample pose draw k from the config's pose sampler");
  reslice->add_option("--order", order, "scalar interpolation order (1 or 3)")->check(CLI::IsMember({1, 3}));

  auto* render = app.add_subcommand("render", "render a B-mode image from a label slice");
  std::string slice_path;
  render->add_option("--slice", slice_path, "label slice (.json)")->required();

  auto* fit = app.add_subcommand("fit", "fit tissue parameters to (slice, image) pairs");

  auto* eval = app.add_subcommand("eval", "island-level precision/recall");
  std::string pred_dir, gt_dir, classes_path;
  eval->add_option("--pred", pred_dir, "predicted label slices")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--gt", gt_dir, "ground-truth label slices")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--classes", classes_path, "class-name sidecar JSON")->required()->check(CLI::ExistingFile);

  auto* stats = app.add_subcommand("stats", "per-axis statistics of a displacement field");
  std::string field_path;
  stats->add_option("--field", field_path, "displacement field header (.json)")->required();

  auto* phantom = app.add_subcommand("phantom", "write the synthetic liver phantom volumes");
  int phantom_size = 64;
  double phantom_spacing = 2.0;
  phantom->add_option("--size", phantom_size, "voxels per axis")->check(CLI::Range(8, 1024));
  phantom->add_option("--spacing", phantom_spacing, "voxel spacing in mm")->check(CLI::PositiveNumber);

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const Json cfg = read_config(g);
    const fs::path base = config_dir(g);
    Json summary;

    if (*dataset) {
      if (g.config.empty()) throw UsageError("dataset needs --config");
      sonosynth::DatasetConfig dc = sonosynth::dataset_config_from_json(cfg, base);
      if (g.seed) dc.master_seed = *g.seed;
      if (n_slices) dc.n_slices_total = *n_slices;
      const fs::path out = g.out.empty() ? sonosynth::detail::resolve(base, dc.output_dir) : fs::path(g.out);
      summary = sonosynth::cmd_dataset(dc, out, g.jobs);
    } else if (*deform) {
      require_file(labels_path);
      if (!ct_path.empty()) require_file(ct_path);
      auto dcfg = cfg.contains("deform") ? config_section(cfg, "deform", base, sonosynth::DeformConfig{})
                                         : config_section(Json{{"d", cfg}}, "d", base, sonosynth::DeformConfig{});
      if (g.seed) dcfg.seed = *g.seed;
      summary = sonosynth::cmd_deform(labels_path, ct_path.empty() ? std::nullopt : std::optional<fs::path>(ct_path),
                                      dcfg, pad_mm, require_out(g), g.jobs);
    } else if (*reslice) {
      require_file(volume_path);
      sonosynth::ProbePose pose;
      if (draw) {
        auto sampler = config_section(cfg, "poses", base, sonosynth::PoseSamplerConfig{});
        if (g.seed) sampler.seed = *g.seed;
        pose = sonosynth::sample_pose(sampler, *draw);
      } else {
        pose = config_section(cfg, "pose", base, sonosynth::ProbePose{});
      }
      summary = sonosynth::cmd_reslice(volume_path, pose, order, require_out(g));
    } else if (*render) {
      require_file(slice_path);
      const auto table = cfg.contains("tissue_table")
                             ? config_section(cfg, "tissue_table", base, sonosynth::TissueTable{})
                             : config_section(cfg, "tissue", base, sonosynth::TissueTable::defaults());
      const auto geometry = config_section(cfg, "geometry", base, sonosynth::ProbeGeometry{});
      const auto settings = config_section(cfg, "renderer", base, sonosynth::RenderSettings{});
      summary = sonosynth::cmd_render(slice_path, table, geometry, settings, g.seed.value_or(0), require_out(g));
    } else if (*fit) {
      if (g.config.empty()) throw UsageError("fit needs --config");
      auto job = sonosynth::fit_job_from_json(cfg, base);
      if (g.seed) job.options.seed = *g.seed;
      summary = sonosynth::cmd_fit(std::move(job), require_out(g), g.jobs);
    } else if (*eval) {
      const auto match = config_section(cfg.contains("match") ? cfg : Json{{"match", cfg}}, "match", base,
                                        sonosynth::MatchConfig{});
      const auto names = sonosynth::read_class_names(classes_path);
      const std::optional<fs::path> out = g.out.empty() ? std::nullopt : std::optional<fs::path>(g.out);
      auto result = sonosynth::cmd_eval(pred_dir, gt_dir, match, names, out, g.jobs);
      std::cerr << result.table;
      summary = std::move(result.report);
    } else if (*stats) {
      require_file(field_path);
      summary = sonosynth::cmd_stats(field_path);
    } else if (*phantom) {
      const fs::path out = require_out(g);
      const auto ph = sonosynth::make_liver_phantom(phantom_size, phantom_spacing, g.seed.value_or(0));
      sonosynth::save_volume(ph.labels, out / "labels.json");
      sonosynth::save_volume(ph.ct, out / "ct.json");
      sonosynth::io::write_json(out / "tissue_table.json", Json(sonosynth::phantom_tissue_table()));
      summary = Json{{"labels", (out / "labels.json").string()},
                     {"ct", (out / "ct.json").string()},
                     {"tissue_table", (out / "tissue_table.json").string()},
                     {"dims", ph.labels.header.dims}};
    }
    std::cout << summary.dump(2) << '\n';
    return 0;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
