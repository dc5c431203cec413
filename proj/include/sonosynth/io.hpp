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

#ifndef SONOSYNTH_IO_HPP
#define SONOSYNTH_IO_HPP

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "sonosynth/volume.hpp"

namespace sonosynth {

namespace fs = std::filesystem;
using Json = nlohmann::json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

/// Payload file that belongs to a header file: same path, extension swapped.
inline fs::path payload_path(const fs::path& header_path, const std::string& ext = ".raw") {
  fs::path p = header_path;
  p.replace_extension(ext);
  return p;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const void* data, std::size_t size) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw IoError("short write to " + path.string());
}

inline void write_file(const fs::path& path, const std::string& text) {
  write_file(path, text.data(), text.size());
}

inline void write_json(const fs::path& path, const Json& j) { write_file(path, j.dump(2) + "\n"); }

inline Json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

template <typename T>
void byteswap_inplace(T& value) {
  auto* b = reinterpret_cast<unsigned char*>(&value);
  std::reverse(b, b + sizeof(T));
}

/// Little-endian bytes of a vector of trivially copyable values.
template <typename T>
std::string to_le_bytes(const std::vector<T>& values) {
  std::string bytes(values.size() * sizeof(T), '\0');
  std::memcpy(bytes.data(), values.data(), bytes.size());
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    auto* p = reinterpret_cast<T*>(bytes.data());
    for (std::size_t i = 0; i < values.size(); ++i) byteswap_inplace(p[i]);
  }
  return bytes;
}

template <typename T>
std::vector<T> from_bytes(const std::string& bytes, std::size_t offset, std::size_t count,
                          bool big_endian_source) {
  std::vector<T> values(count);
  std::memcpy(values.data(), bytes.data() + offset, count * sizeof(T));
  if constexpr (sizeof(T) > 1) {
    const bool source_is_native = big_endian_source == (std::endian::native == std::endian::big);
    if (!source_is_native) {
      for (auto& v : values) byteswap_inplace(v);
    }
  }
  return values;
}

inline Json header_to_json(const VolumeHeader& h) {
  return Json{{"dims", {h.dims[0], h.dims[1], h.dims[2]}},
              {"spacing_mm", {h.spacing.sx, h.spacing.sy, h.spacing.sz}},
              {"origin_mm", {h.origin.x, h.origin.y, h.origin.z}},
              {"kind", to_string(h.kind)},
              {"num_classes", h.num_classes}};
}

inline VolumeHeader header_from_json(const Json& j) {
  try {
    VolumeHeader h;
    const auto dims = j.at("dims").get<std::vector<int>>();
    const auto spacing = j.at("spacing_mm").get<std::vector<double>>();
    const auto origin = j.at("origin_mm").get<std::vector<double>>();
    if (dims.size() != 3 || spacing.size() != 3 || origin.size() != 3) {
      throw FormatError("dims, spacing_mm and origin_mm must have 3 entries");
    }
    h.dims = {dims[0], dims[1], dims[2]};
    h.spacing = {spacing[0], spacing[1], spacing[2]};
    h.origin = {origin[0], origin[1], origin[2]};
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "label") {
      h.kind = VolumeKind::label;
    } else if (kind == "scalar") {
      h.kind = VolumeKind::scalar;
    } else {
      throw FormatError("unknown volume kind '" + kind + "'");
    }
    h.num_classes = j.value("num_classes", 0);
    h.validate();
    return h;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed volume header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("malformed volume header: ") + e.what());
  }
}

inline void check_payload_size(const std::string& bytes, const VolumeHeader& h,
                               std::size_t bytes_per_voxel, const fs::path& path) {
  const std::size_t expected = h.voxel_count() * bytes_per_voxel;
  if (bytes.size() != expected) {
    throw FormatError("payload size mismatch in " + path.string() + ": expected " +
                      std::to_string(expected) + " bytes, found " + std::to_string(bytes.size()));
  }
}

}  // namespace io

using AnyVolume = std::variant<LabelVolume, ScalarVolume>;

/// Write `<path>` (JSON header) and `<path stem>.raw` (little-endian payload).
inline void save_volume(const LabelVolume& volume, const fs::path& path) {
  validate(volume);
  io::write_file(io::payload_path(path), io::to_le_bytes(volume.voxels));
  io::write_json(path, io::header_to_json(volume.header));
}

inline void save_volume(const ScalarVolume& volume, const fs::path& path) {
  validate(volume);
  io::write_file(io::payload_path(path), io::to_le_bytes(volume.voxels));
  io::write_json(path, io::header_to_json(volume.header));
}

inline AnyVolume load_volume(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no such file: " + path.string());
  const VolumeHeader h = io::header_from_json(io::read_json(path));
  const fs::path raw = io::payload_path(path);
  if (!fs::exists(raw)) throw IoError("missing payload file: " + raw.string());
  const std::string bytes = io::read_file(raw);
  if (h.kind == VolumeKind::label) {
    io::check_payload_size(bytes, h, 1, raw);
    LabelVolume v;
    v.header = h;
    v.voxels = io::from_bytes<std::uint8_t>(bytes, 0, h.voxel_count(), false);
    for (auto value : v.voxels) {
      if (value >= h.num_classes) {
        throw FormatError("label value " + std::to_string(value) + " >= num_classes in " +
                          path.string());
      }
    }
    return v;
  }
  io::check_payload_size(bytes, h, 4, raw);
  ScalarVolume v;
  v.header = h;
  v.voxels = io::from_bytes<float>(bytes, 0, h.voxel_count(), false);
  validate(v);
  return v;
}

inline LabelVolume load_label_volume(const fs::path& path) {
  auto any = load_volume(path);
  if (auto* v = std::get_if<LabelVolume>(&any)) return std::move(*v);
  throw FormatError(path.string() + " is not a label volume");
}

inline ScalarVolume load_scalar_volume(const fs::path& path) {
  auto any = load_volume(path);
  if (auto* v = std::get_if<ScalarVolume>(&any)) return std::move(*v);
  throw FormatError(path.string() + " is not a scalar volume");
}

// 2D images share the volume format with nz = 1.

inline LabelVolume as_volume(const LabelSlice2D& s) {
  LabelVolume v(VolumeHeader{{s.width, s.height, 1},
                             {s.spacing_mm, s.spacing_mm, s.spacing_mm},
                             {},
                             VolumeKind::label,
                             s.num_classes});
  v.voxels = s.pixels;
  return v;
}

inline ScalarVolume as_volume(const Image2D& img) {
  ScalarVolume v(VolumeHeader{{img.width, img.height, 1},
                              {img.spacing_mm, img.spacing_mm, img.spacing_mm},
                              {},
                              VolumeKind::scalar,
                              0});
  std::transform(img.pixels.begin(), img.pixels.end(), v.voxels.begin(),
                 [](double x) { return static_cast<float>(x); });
  return v;
}

inline void save_slice(const LabelSlice2D& s, const fs::path& path) {
  save_volume(as_volume(s), path);
}

inline void save_image(const Image2D& img, const fs::path& path) {
  save_volume(as_volume(img), path);
}

inline LabelSlice2D load_slice(const fs::path& path) {
  const LabelVolume v = load_label_volume(path);
  if (v.nz() != 1) throw FormatError(path.string() + " is not a 2D slice (nz != 1)");
  LabelSlice2D s(v.nx(), v.ny(), v.header.spacing.sx, v.header.num_classes);
  s.pixels = v.voxels;
  return s;
}

inline Image2D load_image(const fs::path& path) {
  const ScalarVolume v = load_scalar_volume(path);
  if (v.nz() != 1) throw FormatError(path.string() + " is not a 2D image (nz != 1)");
  Image2D img(v.nx(), v.ny(), v.header.spacing.sx);
  std::copy(v.voxels.begin(), v.voxels.end(), img.pixels.begin());
  return img;
}

namespace io {

inline std::uint8_t to_byte(double x) {
  return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0)));
}

inline std::vector<std::uint8_t> to_bytes(const Image2D& img) {
  std::vector<std::uint8_t> out(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), out.begin(), to_byte);
  return out;
}

inline std::vector<std::uint8_t> to_bytes(const LabelSlice2D& s) {
  const double scale = 255.0 / std::max(1, s.num_classes - 1);
  std::vector<std::uint8_t> out(s.pixels.size());
  std::transform(s.pixels.begin(), s.pixels.end(), out.begin(), [scale](std::uint8_t v) {
    return static_cast<std::uint8_t>(std::lround(v * scale));
  });
  return out;
}

inline void write_pgm(const fs::path& path, int width, int height,
                      const std::vector<std::uint8_t>& gray) {
  std::string data = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  data.append(reinterpret_cast<const char*>(gray.data()), gray.size());
  write_file(path, data);
}

inline void append_be32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>(v & 0xFF));
}

inline void append_png_chunk(std::string& out, const char* type, const std::string& payload) {
  append_be32(out, static_cast<std::uint32_t>(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  append_be32(out, static_cast<std::uint32_t>(
                       crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                             static_cast<uInt>(body.size()))));
}

/// 8-bit grayscale PNG, filter type 0 on every row.
inline void write_png(const fs::path& path, int width, int height,
                      const std::vector<std::uint8_t>& gray) {
  std::string raw;
  raw.reserve(static_cast<std::size_t>(height) * (width + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(gray.data()) + static_cast<std::size_t>(y) * width,
               width);
  }
  uLongf zsize = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zsize, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zsize,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                6) != Z_OK) {
    throw IoError("zlib compression failed for " + path.string());
  }
  z.resize(zsize);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  append_be32(ihdr, static_cast<std::uint32_t>(width));
  append_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // depth 8, gray, deflate, filter 0, no interlace
  append_png_chunk(png, "IHDR", ihdr);
  append_png_chunk(png, "IDAT", z);
  append_png_chunk(png, "IEND", "");
  write_file(path, png);
}

}  // namespace io

/// Preview export: values round(255 * x).
inline void save_pgm(const Image2D& img, const fs::path& path) {
  io::write_pgm(path, img.width, img.height, io::to_bytes(img));
}

inline void save_png(const Image2D& img, const fs::path& path) {
  io::write_png(path, img.width, img.height, io::to_bytes(img));
}

/// Label preview with classes spread over 0..255.
inline void save_pgm(const LabelSlice2D& s, const fs::path& path) {
  io::write_pgm(path, s.width, s.height, io::to_bytes(s));
}

/// Read-only MetaImage (.mhd/.mha) import, uncompressed MET_UCHAR or MET_FLOAT.
/// MET_UCHAR becomes a label volume with num_classes = max value + 1.
inline AnyVolume import_metaimage(const fs::path& path) {
  const std::string text = io::read_file(path);
  std::map<std::string, std::string> keys;
  std::size_t pos = 0;
  std::size_t data_offset = std::string::npos;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    keys[key] = trim(line.substr(eq + 1));
    if (key == "ElementDataFile") {
      data_offset = std::min(pos, text.size());
      break;
    }
  }

  auto need = [&](const std::string& key) -> const std::string& {
    auto it = keys.find(key);
    if (it == keys.end()) throw FormatError("MetaImage header missing " + key);
    return it->second;
  };
  auto numbers = [](const std::string& s) {
    std::vector<double> v;
    std::istringstream ss(s);
    double x;
    while (ss >> x) v.push_back(x);
    return v;
  };
  auto is_true = [&](const std::string& key) {
    auto it = keys.find(key);
    return it != keys.end() && (it->second == "True" || it->second == "true" || it->second == "1");
  };

  const int ndims = std::stoi(need("NDims"));
  if (ndims != 2 && ndims != 3) throw FormatError("MetaImage NDims must be 2 or 3");
  const auto dim_size = numbers(need("DimSize"));
  if (static_cast<int>(dim_size.size()) != ndims) throw FormatError("MetaImage DimSize arity");
  std::vector<double> spacing(ndims, 1.0);
  for (const char* key : {"ElementSpacing", "ElementSize"}) {
    if (keys.count(key)) {
      spacing = numbers(keys[key]);
      break;
    }
  }
  std::vector<double> offset(ndims, 0.0);
  for (const char* key : {"Offset", "Origin", "Position"}) {
    if (keys.count(key)) {
      offset = numbers(keys[key]);
      break;
    }
  }
  if (static_cast<int>(spacing.size()) != ndims || static_cast<int>(offset.size()) != ndims) {
    throw FormatError("MetaImage spacing/offset arity");
  }
  if (keys.count("TransformMatrix")) {
    const auto m = numbers(keys["TransformMatrix"]);
    for (int r = 0; r < ndims; ++r) {
      for (int c = 0; c < ndims; ++c) {
        if (std::abs(m.at(r * ndims + c) - (r == c ? 1.0 : 0.0)) > 1e-9) {
          throw FormatError("MetaImage with oblique TransformMatrix is not supported");
        }
      }
    }
  }
  if (is_true("CompressedData")) throw FormatError("compressed MetaImage is not supported");
  if (keys.count("ElementNumberOfChannels") && std::stoi(keys["ElementNumberOfChannels"]) != 1) {
    throw FormatError("multi-channel MetaImage is not supported");
  }
  const bool msb = is_true("BinaryDataByteOrderMSB") || is_true("ElementByteOrderMSB");

  VolumeHeader h;
  for (int a = 0; a < 3; ++a) {
    h.dims[a] = a < ndims ? static_cast<int>(dim_size[a]) : 1;
  }
  h.spacing = {spacing[0], spacing[1], ndims == 3 ? spacing[2] : spacing[1]};
  h.origin = {offset[0], offset[1], ndims == 3 ? offset[2] : 0.0};

  const std::string& data_file = need("ElementDataFile");
  std::string bytes;
  if (data_file == "LOCAL") {
    bytes = text.substr(data_offset);
  } else {
    bytes = io::read_file(path.parent_path() / data_file);
  }

  const std::string& type = need("ElementType");
  if (type == "MET_UCHAR") {
    h.kind = VolumeKind::label;
    if (bytes.size() < h.voxel_count()) throw FormatError("MetaImage payload too short");
    LabelVolume v;
    v.voxels = io::from_bytes<std::uint8_t>(bytes, bytes.size() - h.voxel_count(),
                                            h.voxel_count(), msb);
    const auto max_it = std::max_element(v.voxels.begin(), v.voxels.end());
    h.num_classes = (max_it == v.voxels.end() ? 0 : *max_it) + 1;
    h.validate();
    v.header = h;
    return v;
  }
  if (type == "MET_FLOAT") {
    h.kind = VolumeKind::scalar;
    h.num_classes = 0;
    h.validate();
    if (bytes.size() < h.voxel_count() * 4) throw FormatError("MetaImage payload too short");
    ScalarVolume v;
    v.header = h;
    v.voxels = io::from_bytes<float>(bytes, bytes.size() - h.voxel_count() * 4, h.voxel_count(),
                                     msb);
    validate(v);
    return v;
  }
  throw FormatError("unsupported MetaImage ElementType " + type);
}

}  // namespace sonosynth

#endif  // SONOSYNTH_IO_HPP
