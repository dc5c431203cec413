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

#ifndef SONOSYNTH_PIPELINE_HPP
#define SONOSYNTH_PIPELINE_HPP

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sonosynth/deform.hpp"
#include "sonosynth/io.hpp"
#include "sonosynth/metrics.hpp"
#include "sonosynth/parallel.hpp"
#include "sonosynth/render.hpp"
#include "sonosynth/reslice.hpp"
#include "sonosynth/rng.hpp"
#include "sonosynth/volume.hpp"

namespace sonosynth {

inline constexpr const char* kToolVersion = "sonosynth 0.1.0";

/// Bad command-line usage or configuration (CLI exit status 2).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline fs::path resolve(const fs::path& base_dir, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
}

/// Native header (.json) or MetaImage (.mhd / .mha).
inline AnyVolume read_any_volume(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".mhd" || ext == ".mha") {
    if (!fs::exists(path)) throw IoError("no such file: " + path.string());
    return import_metaimage(path);
  }
  return load_volume(path);
}

inline LabelVolume read_labels(const fs::path& path) {
  auto v = read_any_volume(path);
  if (auto* l = std::get_if<LabelVolume>(&v)) return std::move(*l);
  throw FormatError(path.string() + " is not a label volume");
}

inline ScalarVolume read_scalar(const fs::path& path) {
  auto v = read_any_volume(path);
  if (auto* s = std::get_if<ScalarVolume>(&v)) return std::move(*s);
  throw FormatError(path.string() + " is not a scalar volume");
}

/// Either an inline object or a path to a JSON file.
inline Json inline_or_file(const Json& j, const fs::path& base_dir) {
  if (j.is_string()) return io::read_json(resolve(base_dir, j.get<std::string>()));
  return j;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string sample_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%06zu", index);
  return buf;
}

/// Paths of the two files behind a native header.
inline std::vector<std::string> native_files(const std::string& header_rel) {
  return {header_rel, io::payload_path(header_rel).generic_string()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

struct DatasetConfig {
  std::string labels_path;
  std::optional<std::string> ct_path;
  DeformConfig deform;
  int n_deformations = 0;
  std::optional<double> pad_mm;  // default: the larger clamp magnitude
  PoseSamplerConfig poses;
  int n_slices_total = 1000;
  TissueTable tissue = TissueTable::defaults();
  ProbeGeometry geometry;
  RenderSettings renderer;
  std::uint64_t master_seed = 0;
  std::string output_dir = "dataset";
  bool write_submaps = false;
  bool write_png = true;
  fs::path base_dir;  // relative input paths resolve against this

  void validate() const {
    if (labels_path.empty()) throw UsageError("dataset config needs \"labels\"");
    if (n_slices_total < 1) throw UsageError("n_slices_total must be >= 1");
    if (n_deformations < 0) throw UsageError("n_deformations must be >= 0");
    if (pad_mm && !(*pad_mm >= 0.0)) throw UsageError("pad_mm must be >= 0");
    deform.validate();
    poses.validate();
    tissue.validate();
    geometry.validate();
  }

  double effective_pad_mm() const {
    if (pad_mm) return *pad_mm;
    double m = 0.0;
    if (std::isfinite(deform.clamp_lo_mm)) m = std::max(m, std::abs(deform.clamp_lo_mm));
    if (std::isfinite(deform.clamp_hi_mm)) m = std::max(m, std::abs(deform.clamp_hi_mm));
    return m;
  }

  /// Everything that determines the output tree; excludes output_dir.
  Json snapshot() const {
    Json j{{"labels", labels_path},
           {"ct", ct_path ? Json(*ct_path) : Json(nullptr)},
           {"deform", deform},
           {"n_deformations", n_deformations},
           {"pad_mm", effective_pad_mm()},
           {"poses", poses},
           {"n_slices_total", n_slices_total},
           {"tissue", tissue},
           {"geometry", geometry},
           {"renderer", renderer},
           {"master_seed", master_seed},
           {"write_submaps", write_submaps},
           {"write_png", write_png}};
    return j;
  }
};

inline DatasetConfig dataset_config_from_json(const Json& j, const fs::path& base_dir = {}) {
  DatasetConfig c;
  c.base_dir = base_dir;
  try {
    c.labels_path = j.at("labels").get<std::string>();
    if (j.contains("ct") && !j.at("ct").is_null()) c.ct_path = j.at("ct").get<std::string>();
    if (j.contains("deform")) c.deform = detail::inline_or_file(j.at("deform"), base_dir).get<DeformConfig>();
    c.n_deformations = j.value("n_deformations", c.n_deformations);
    if (j.contains("pad_mm") && !j.at("pad_mm").is_null()) c.pad_mm = j.at("pad_mm").get<double>();
    if (j.contains("poses")) c.poses = detail::inline_or_file(j.at("poses"), base_dir).get<PoseSamplerConfig>();
    c.n_slices_total = j.value("n_slices_total", c.n_slices_total);
    for (const char* key : {"tissue_table", "tissue"}) {
      if (j.contains(key)) c.tissue = detail::inline_or_file(j.at(key), base_dir).get<TissueTable>();
    }
    if (j.contains("geometry")) c.geometry = detail::inline_or_file(j.at("geometry"), base_dir).get<ProbeGeometry>();
    if (j.contains("renderer")) c.renderer = j.at("renderer").get<RenderSettings>();
    c.master_seed = j.value("master_seed", c.master_seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.write_submaps = j.value("write_submaps", c.write_submaps);
    c.write_png = j.value("write_png", c.write_png);
  } catch (const Json::exception& e) {
    throw UsageError(std::string("invalid dataset config: ") + e.what());
  }
  return c;
}

/// Deformation index and pose draw index of a sample (round-robin over deformations).
struct SampleAssignment {
  int deformation = -1;  // -1: undeformed input
  std::uint64_t pose_index = 0;
};

inline SampleAssignment assign_sample(std::size_t sample, int n_deformations) {
  return {n_deformations > 0 ? static_cast<int>(sample % n_deformations) : -1, sample};
}

/// Deform -> reslice -> render over n_slices_total samples. Writes paired
/// label slices and B-mode images plus manifest.json under `out_dir`.
/// The tree is a pure function of the config; `jobs` only changes speed.
inline Json cmd_dataset(const DatasetConfig& config, const fs::path& out_dir, int jobs = 1) {
  config.validate();
  jobs = resolve_jobs(jobs);
  const LabelVolume input = detail::read_labels(detail::resolve(config.base_dir, config.labels_path));
  if (static_cast<std::size_t>(input.header.num_classes) > config.tissue.size()) {
    throw UsageError("tissue table has fewer classes than the label volume");
  }
  std::optional<ScalarVolume> ct;
  if (config.ct_path) {
    ct = detail::read_scalar(detail::resolve(config.base_dir, *config.ct_path));
    if (!ct->header.same_grid(input.header)) throw UsageError("CT and label grids differ");
  }
  fs::create_directories(out_dir);

  // Deformed anatomies, cached on disk by (config hash, index).
  struct Anatomy {
    LabelVolume labels;
    std::optional<ScalarVolume> ct;
    std::uint64_t seed = 0;
    std::vector<std::string> files;
  };
  std::vector<Anatomy> anatomies(static_cast<std::size_t>(config.n_deformations));
  Json deform_snapshot = config.snapshot();
  const std::uint64_t config_hash = rng::tag(deform_snapshot["deform"].dump() + "|" +
                                             deform_snapshot["labels"].dump() + "|" +
                                             deform_snapshot["ct"].dump() + "|" +
                                             std::to_string(config.effective_pad_mm()) + "|" +
                                             std::to_string(config.master_seed));
  if (config.n_deformations > 0) {
    const double pad = config.effective_pad_mm();
    const LabelVolume padded = pad_volume(input, {pad, pad, pad}, std::uint8_t{0});
    std::optional<ScalarVolume> padded_ct;
    if (ct) {
      const float fill = *std::min_element(ct->voxels.begin(), ct->voxels.end());
      padded_ct = pad_volume(*ct, {pad, pad, pad}, fill);
    }
    for (int d = 0; d < config.n_deformations; ++d) {
      Anatomy& a = anatomies[d];
      a.seed = rng::derive(config.master_seed, "dataset.deform", static_cast<std::uint64_t>(d));
      const std::string stem = "deformed/def_" + detail::hex64(config_hash) + "_" + std::to_string(d);
      const fs::path label_path = out_dir / (stem + ".labels.json");
      const fs::path ct_path = out_dir / (stem + ".ct.json");
      a.files = detail::native_files(stem + ".labels.json");
      if (ct) {
        for (auto& f : detail::native_files(stem + ".ct.json")) a.files.push_back(f);
      }
      const bool cached = fs::exists(label_path) && fs::exists(io::payload_path(label_path)) &&
                          (!ct || (fs::exists(ct_path) && fs::exists(io::payload_path(ct_path))));
      if (cached) {
        a.labels = load_label_volume(label_path);
        if (ct) a.ct = load_scalar_volume(ct_path);
        continue;
      }
      DeformConfig dc = config.deform;
      dc.seed = a.seed;
      const DisplacementField field = generate_field(dc, padded.header, jobs);
      a.labels = warp_labels(padded, field, jobs);
      save_volume(a.labels, label_path);
      if (ct) {
        a.ct = warp_scalar(*padded_ct, field, jobs);
        save_volume(*a.ct, ct_path);
      }
    }
  }

  PoseSamplerConfig poses = config.poses;
  poses.seed = rng::derive(config.master_seed, "dataset.poses", 0);
  const ProbePose probe0 = poses.base_pose;
  const RenderPlan plan(probe0.width_px(), probe0.height_px(), probe0.pixel_spacing_mm,
                        config.geometry, config.renderer);

  const std::size_t n = static_cast<std::size_t>(config.n_slices_total);
  std::vector<Json> records(n);
  std::vector<std::string> errors(n);
  parallel_for(n, jobs, [&](std::size_t s) {
    const SampleAssignment as = assign_sample(s, config.n_deformations);
    const std::string dir = "samples/" + detail::sample_name(s);
    Json rec{{"sample_id", s},
             {"deformation_index", as.deformation},
             {"deformation_seed", as.deformation >= 0 ? Json(anatomies[as.deformation].seed) : Json(nullptr)},
             {"pose_draw_index", as.pose_index}};
    std::vector<std::string> files;
    try {
      const LabelVolume& labels = as.deformation >= 0 ? anatomies[as.deformation].labels : input;
      const ScalarVolume* ct_vol = nullptr;
      if (ct) ct_vol = as.deformation >= 0 ? &*anatomies[as.deformation].ct : &*ct;
      const ProbePose pose = sample_pose(poses, as.pose_index);
      const std::uint64_t render_seed = rng::derive(config.master_seed, "dataset.render", s);
      rec["pose"] = pose;
      rec["render_seed"] = render_seed;

      const LabelSlice2D slice = reslice_labels(labels, pose);
      const RenderOutput out = render(slice, config.tissue, plan, render_seed);
      auto emit = [&](const std::string& rel) {
        for (auto& f : detail::native_files(rel)) files.push_back(f);
        return out_dir / rel;
      };
      save_slice(slice, emit(dir + "/label.json"));
      save_image(out.bmode, emit(dir + "/bmode.json"));
      rec["label"] = dir + "/label.json";
      rec["bmode"] = dir + "/bmode.json";
      if (config.write_png) {
        save_png(out.bmode, out_dir / (dir + "/bmode.png"));
        files.push_back(dir + "/bmode.png");
        rec["bmode_png"] = dir + "/bmode.png";
      }
      if (ct_vol) {
        save_image(reslice_scalar(*ct_vol, pose, 1), emit(dir + "/ct.json"));
        rec["ct"] = dir + "/ct.json";
      }
      if (config.write_submaps) {
        save_image(out.submaps.attenuation, emit(dir + "/attenuation.json"));
        save_image(out.submaps.impedance, emit(dir + "/impedance.json"));
        save_image(out.submaps.scatter, emit(dir + "/scatter.json"));
        rec["submaps"] = {{"attenuation", dir + "/attenuation.json"},
                          {"impedance", dir + "/impedance.json"},
                          {"scatter", dir + "/scatter.json"}};
      }
      Json meta = rec;
      meta.erase("files");
      io::write_json(out_dir / (dir + "/meta.json"), meta);
      files.push_back(dir + "/meta.json");
      rec["status"] = "ok";
    } catch (const std::exception& e) {
      errors[s] = e.what();
      rec["status"] = "failed";
      rec["error"] = e.what();
    }
    rec["files"] = files;
    records[s] = std::move(rec);
  });

  Json manifest;
  manifest["tool_version"] = kToolVersion;
  manifest["config"] = config.snapshot();
  manifest["deformations"] = Json::array();
  for (std::size_t d = 0; d < anatomies.size(); ++d) {
    manifest["deformations"].push_back(
        {{"index", d}, {"seed", anatomies[d].seed}, {"files", anatomies[d].files}});
  }
  manifest["samples"] = records;
  std::size_t failed = 0;
  for (const auto& e : errors) failed += !e.empty();
  manifest["complete"] = failed == 0;
  io::write_json(out_dir / "manifest.json", manifest);
  for (std::size_t s = 0; s < n; ++s) {
    if (!errors[s].empty()) {
      throw std::runtime_error("sample " + std::to_string(s) + " failed: " + errors[s]);
    }
  }
  return Json{{"output_dir", out_dir.string()},
              {"samples", n},
              {"deformations", config.n_deformations},
              {"manifest", (out_dir / "manifest.json").string()}};
}

// ---------------------------------------------------------------------------
// single-step commands
// ---------------------------------------------------------------------------

/// Warp a label volume (and optionally a CT) by one generated field.
inline Json cmd_deform(const fs::path& labels_path, const std::optional<fs::path>& ct_path,
                       const DeformConfig& config, std::optional<double> pad_mm,
                       const fs::path& out_dir, int jobs = 1) {
  config.validate();
  jobs = resolve_jobs(jobs);
  const LabelVolume labels = detail::read_labels(labels_path);
  double pad = 0.0;
  if (pad_mm) {
    pad = *pad_mm;
  } else {
    if (std::isfinite(config.clamp_lo_mm)) pad = std::max(pad, std::abs(config.clamp_lo_mm));
    if (std::isfinite(config.clamp_hi_mm)) pad = std::max(pad, std::abs(config.clamp_hi_mm));
  }
  const LabelVolume padded = pad_volume(labels, {pad, pad, pad}, std::uint8_t{0});
  const DisplacementField field = generate_field(config, padded.header, jobs);
  save_field(field, out_dir / "field.json");
  save_volume(warp_labels(padded, field, jobs), out_dir / "labels.json");
  if (ct_path) {
    const ScalarVolume ct = detail::read_scalar(*ct_path);
    if (!ct.header.same_grid(labels.header)) throw UsageError("CT and label grids differ");
    const float fill = *std::min_element(ct.voxels.begin(), ct.voxels.end());
    save_volume(warp_scalar(pad_volume(ct, {pad, pad, pad}, fill), field, jobs), out_dir / "ct.json");
  }
  return Json{{"field", (out_dir / "field.json").string()},
              {"labels", (out_dir / "labels.json").string()},
              {"pad_mm", pad},
              {"stats", to_json(field_stats(field))}};
}

inline Json cmd_reslice(const fs::path& volume_path, const ProbePose& pose, int order,
                        const fs::path& out_dir) {
  const AnyVolume any = detail::read_any_volume(volume_path);
  Json summary{{"pose", pose}};
  io::write_json(out_dir / "pose.json", Json(pose));
  if (const auto* labels = std::get_if<LabelVolume>(&any)) {
    const LabelSlice2D slice = reslice_labels(*labels, pose);
    save_slice(slice, out_dir / "slice.json");
    save_pgm(slice, out_dir / "slice.pgm");
    std::size_t foreground = 0;
    for (auto v : slice.pixels) foreground += v != 0;
    summary["slice"] = (out_dir / "slice.json").string();
    summary["dims"] = {slice.width, slice.height};
    summary["foreground_fraction"] = static_cast<double>(foreground) / slice.pixels.size();
  } else {
    const Image2D img = reslice_scalar(std::get<ScalarVolume>(any), pose, order);
    save_image(img, out_dir / "slice.json");
    save_pgm(img, out_dir / "slice.pgm");
    summary["slice"] = (out_dir / "slice.json").string();
    summary["dims"] = {img.width, img.height};
  }
  return summary;
}

inline Json cmd_render(const fs::path& slice_path, const TissueTable& table,
                       const ProbeGeometry& geometry, const RenderSettings& settings,
                       std::uint64_t seed, const fs::path& out_dir) {
  const LabelSlice2D slice = load_slice(slice_path);
  const RenderOutput out = render(slice, table, geometry, seed, settings);
  save_image(out.bmode, out_dir / "bmode.json");
  save_png(out.bmode, out_dir / "bmode.png");
  save_image(out.fan, out_dir / "fan.json");
  double mean = 0.0;
  for (double v : out.bmode.pixels) mean += v;
  mean /= static_cast<double>(out.bmode.pixels.size());
  return Json{{"bmode", (out_dir / "bmode.json").string()},
              {"png", (out_dir / "bmode.png").string()},
              {"seed", seed},
              {"dims", {out.bmode.width, out.bmode.height}},
              {"mean_intensity", mean}};
}

struct FitJob {
  std::vector<FitPair> pairs;
  TissueTable init = TissueTable::defaults();
  ProbeGeometry geometry;
  RenderSettings renderer;
  FitOptions options;
};

/// {"pairs": [{"slice", "target", "seed"?}], "init_table", "geometry", "renderer",
///  "step_size", "iterations", "seed", "free_params": ["alpha", ...], "free_classes": [ids]}
inline FitJob fit_job_from_json(const Json& j, const fs::path& base_dir = {}) {
  FitJob job;
  try {
    for (const auto& p : j.at("pairs")) {
      FitPair pair{load_slice(detail::resolve(base_dir, p.at("slice").get<std::string>())),
                   load_image(detail::resolve(base_dir, p.at("target").get<std::string>())),
                   std::nullopt};
      if (p.contains("seed")) pair.seed = p.at("seed").get<std::uint64_t>();
      job.pairs.push_back(std::move(pair));
    }
    for (const char* key : {"init_table", "tissue_table"}) {
      if (j.contains(key)) job.init = detail::inline_or_file(j.at(key), base_dir).get<TissueTable>();
    }
    if (j.contains("geometry")) job.geometry = detail::inline_or_file(j.at("geometry"), base_dir).get<ProbeGeometry>();
    if (j.contains("renderer")) job.renderer = j.at("renderer").get<RenderSettings>();
    job.options.step_size = j.value("step_size", job.options.step_size);
    job.options.iterations = j.value("iterations", job.options.iterations);
    job.options.seed = j.value("seed", job.options.seed);
    if (j.contains("free_params") || j.contains("free_classes")) {
      std::vector<bool> params(kParamCount, !j.contains("free_params"));
      if (j.contains("free_params")) {
        for (const auto& name : j.at("free_params")) {
          const auto it = std::find(std::begin(kParamNames), std::end(kParamNames), name.get<std::string>());
          if (it == std::end(kParamNames)) throw UsageError("unknown parameter " + name.dump());
          params[it - std::begin(kParamNames)] = true;
        }
      }
      std::vector<bool> classes(job.init.size(), !j.contains("free_classes"));
      if (j.contains("free_classes")) {
        for (const auto& k : j.at("free_classes")) classes.at(k.get<std::size_t>()) = true;
      }
      job.options.free.assign(job.init.size(), {false, false, false, false, false});
      for (std::size_t k = 0; k < job.init.size(); ++k) {
        for (int p = 0; p < kParamCount; ++p) job.options.free[k][p] = classes[k] && params[p];
      }
    }
  } catch (const Json::exception& e) {
    throw UsageError(std::string("invalid fit config: ") + e.what());
  }
  return job;
}

inline Json cmd_fit(FitJob job, const fs::path& out_dir, int jobs = 1) {
  job.options.jobs = resolve_jobs(jobs);
  const FitResult result = fit_tissue_params(job.pairs, job.init, job.geometry, job.options, job.renderer);
  io::write_json(out_dir / "fitted_table.json", Json(result.table));
  io::write_json(out_dir / "loss_trace.json", Json(result.loss_trace));
  return Json{{"fitted_table", (out_dir / "fitted_table.json").string()},
              {"initial_loss", result.loss_trace.front()},
              {"final_loss", result.loss_trace.back()},
              {"iterations", static_cast<int>(result.loss_trace.size()) - 1},
              {"accepted_steps", result.accepted_steps},
              {"table", result.table}};
}

/// Class-id -> display name sidecar: {"2": "MPV", ...}.
inline std::map<int, std::string> read_class_names(const fs::path& path) {
  std::map<int, std::string> names;
  const Json j = io::read_json(path);
  const Json& m = j.contains("classes") ? j.at("classes") : j;
  for (auto it = m.begin(); it != m.end(); ++it) names[std::stoi(it.key())] = it.value().get<std::string>();
  return names;
}

struct EvalResult {
  Json report;
  std::string table;
};

/// Evaluate every native label file present in both directories.
inline EvalResult cmd_eval(const fs::path& pred_dir, const fs::path& gt_dir, const MatchConfig& config,
                     const std::map<int, std::string>& names, const std::optional<fs::path>& out_dir,
                     int jobs = 1) {
  config.validate();
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(gt_dir)) {
    if (entry.path().extension() != ".json") continue;
    if (fs::exists(pred_dir / entry.path().filename())) files.push_back(entry.path().filename().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no paired label files in " + pred_dir.string() + " and " + gt_dir.string());
  std::vector<FrameMatch> frames(files.size());
  parallel_for(files.size(), resolve_jobs(jobs), [&](std::size_t i) {
    frames[i] = evaluate_frame(load_slice(pred_dir / files[i]), load_slice(gt_dir / files[i]), config);
  });
  std::vector<int> classes;
  for (const auto& [k, name] : names) classes.push_back(k);
  const PRReport report = precision_recall(frames, classes);
  EvalResult result{to_json(report, names), format_table(report, names)};
  result.report["match_config"] = config;
  result.report["files"] = files;
  if (out_dir) {
    io::write_json(*out_dir / "report.json", result.report);
    io::write_file(*out_dir / "report.txt", result.table);
  }
  return result;
}

inline Json cmd_stats(const fs::path& field_path) {
  const DisplacementField field = load_field(field_path);
  Json j = to_json(field_stats(field));
  j["dims"] = field.header.dims;
  return j;
}

}  // namespace sonosynth

#endif  // SONOSYNTH_PIPELINE_HPP
