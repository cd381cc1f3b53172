// Copyright 2026 The SoSN Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "sosn/datasets.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"

namespace sosn {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

void png_error_handler(png_structp png, png_const_charp message) {
  auto* buffer = static_cast<std::string*>(png_get_error_ptr(png));
  if (buffer) *buffer = message;
  png_longjmp(png, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

bool has_png_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png";
}

double sample_bilinear(const RawImage& img, const CropBox& box, double sx, double sy,
                       std::size_t c) {
  sx = std::clamp(sx, 0.0, static_cast<double>(box.width - 1));
  sy = std::clamp(sy, 0.0, static_cast<double>(box.height - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(sx));
  const auto y0 = static_cast<std::size_t>(std::floor(sy));
  const std::size_t x1 = std::min(x0 + 1, box.width - 1);
  const std::size_t y1 = std::min(y0 + 1, box.height - 1);
  const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
  auto px = [&](std::size_t x, std::size_t y) {
    return static_cast<double>(img.at(box.x0 + x, box.y0 + y, c));
  };
  const double top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
  const double bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
  return top * (1.0 - fy) + bottom * fy;
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    if (to_string(s) == name) return s;
  }
  throw DataError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

RawImage decode_png(const std::string& path) {
  File file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open image " + path);
  unsigned char signature[8];
  if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    throw DataError("not a PNG file: " + path);
  }
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message,
                                           png_error_handler, png_warning_handler);
  if (!png) throw DataError("libpng initialisation failed for " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng initialisation failed for " + path);
  }

  RawImage out;
  int bit_depth = 0;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("cannot decode " + path + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth > 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("unsupported bit depth " + std::to_string(bit_depth) + " in " + path);
  }
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  if (out.channels != 1 && out.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("unsupported channel layout in " + path);
  }
  out.pixels.resize(out.width * out.height * out.channels);
  rows.resize(out.height);
  for (std::size_t y = 0; y < out.height; ++y) {
    rows[y] = out.pixels.data() + y * out.width * out.channels;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void encode_png(const std::string& path, const RawImage& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw DataError("encode_png: expected 1 or 3 channels");
  }
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw DataError("encode_png: pixel buffer does not match the image size");
  }
  File file(std::fopen(path.c_str(), "wb"));
  if (!file) throw DataError("cannot write image " + path);
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message,
                                            png_error_handler, png_warning_handler);
  if (!png) throw DataError("libpng initialisation failed for " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng initialisation failed for " + path);
  }
  std::vector<png_bytep> rows(image.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("cannot encode " + path + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8,
               image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    rows[y] = const_cast<png_bytep>(image.pixels.data() + y * image.width * image.channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void PreprocessSpec::validate() const {
  if (image_size == 0) throw ConfigError("preprocess: image_size must be positive");
  if (channels != 1 && channels != 3) throw ConfigError("preprocess: channels must be 1 or 3");
  if (!(crop_ratio > 0.0 && crop_ratio <= 1.0)) {
    throw ConfigError("preprocess: crop_ratio must lie in (0, 1]");
  }
  if (!channel_means.empty() && channel_means.size() != channels) {
    throw ConfigError("preprocess: expected " + std::to_string(channels) +
                      " channel means, got " + std::to_string(channel_means.size()));
  }
}

CropBox center_crop_box(std::size_t width, std::size_t height, double ratio) {
  const auto cw = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(ratio * static_cast<double>(width))));
  const auto ch = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(ratio * static_cast<double>(height))));
  return {(width - cw) / 2, (height - ch) / 2, cw, ch};
}

Tensor preprocess(const RawImage& image, const PreprocessSpec& spec) {
  spec.validate();
  if (image.width == 0 || image.height == 0) throw DataError("preprocess: empty image");
  const CropBox box = center_crop_box(image.width, image.height, spec.crop_ratio);
  const std::size_t s = spec.image_size;
  const double scale_x = static_cast<double>(box.width) / static_cast<double>(s);
  const double scale_y = static_cast<double>(box.height) / static_cast<double>(s);

  Tensor resized({image.channels, s, s});
  for (std::size_t c = 0; c < image.channels; ++c)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const double sx = (static_cast<double>(x) + 0.5) * scale_x - 0.5;
        const double sy = (static_cast<double>(y) + 0.5) * scale_y - 0.5;
        resized.at(c, y, x) = sample_bilinear(image, box, sx, sy, c) / 255.0;
      }

  Tensor out({spec.channels, s, s});
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      for (std::size_t c = 0; c < spec.channels; ++c) {
        double v;
        if (image.channels == spec.channels) {
          v = resized.at(c, y, x);
        } else if (image.channels == 1) {
          v = resized.at(0, y, x);
        } else {  // RGB to luma
          v = 0.299 * resized.at(0, y, x) + 0.587 * resized.at(1, y, x) +
              0.114 * resized.at(2, y, x);
        }
        if (!spec.channel_means.empty()) v -= spec.channel_means[c];
        out.at(c, y, x) = v;
      }
    }
  return out;
}

Tensor load_image(const std::string& path, const PreprocessSpec& spec) {
  return preprocess(decode_png(path), spec);
}

std::vector<std::string> DatasetManifest::classes_in(Split split) const {
  std::vector<std::string> out;
  for (const auto& [name, s] : splits) {
    if (s == split) out.push_back(name);
  }
  return out;
}

std::size_t DatasetManifest::image_count() const {
  std::size_t n = 0;
  for (const auto& [name, files] : classes) n += files.size();
  return n;
}

DatasetManifest load_manifest(const std::string& root, const std::string& split_file,
                              PreprocessSpec preprocess_spec) {
  preprocess_spec.channel_means.clear();
  preprocess_spec.validate();
  if (!fs::is_directory(root)) throw DataError("dataset root not found: " + root);
  std::ifstream in(split_file);
  if (!in) throw DataError("cannot read split file " + split_file);

  DatasetManifest m;
  m.root = root;
  m.preprocess = preprocess_spec;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(split_file + ":" + std::to_string(line_no) +
                      ": expected 'class<TAB>split'");
    }
    const std::string name = line.substr(0, tab);
    const Split split = parse_split(line.substr(tab + 1));
    auto [it, inserted] = m.splits.emplace(name, split);
    if (!inserted) {
      throw DataError("class '" + name + "' is listed more than once in " + split_file);
    }
  }
  if (m.splits.empty()) throw DataError("split file " + split_file + " lists no classes");

  for (const auto& [name, split] : m.splits) {
    const fs::path dir = fs::path(root) / name;
    if (!fs::is_directory(dir)) throw DataError("missing class directory " + dir.string());
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && has_png_extension(entry.path())) {
        files.push_back(entry.path().filename().string());
      }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("class directory " + dir.string() + " has no images");
    m.classes.emplace(name, std::move(files));
  }

  // Every file must decode; means come from the train split only.
  std::vector<double> sums(preprocess_spec.channels, 0.0);
  double count = 0.0;
  for (const auto& [name, files] : m.classes) {
    const bool train = m.splits.at(name) == Split::kTrain;
    for (const auto& f : files) {
      const Tensor t = load_image((fs::path(root) / name / f).string(), preprocess_spec);
      if (!train) continue;
      const std::size_t area = t.dim(1) * t.dim(2);
      for (std::size_t c = 0; c < t.dim(0); ++c)
        for (std::size_t i = 0; i < area; ++i) sums[c] += t[c * area + i];
      count += static_cast<double>(area);
    }
  }
  if (count > 0.0) {
    for (double& s : sums) s /= count;
    m.preprocess.channel_means = sums;
  }
  return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
  json j;
  j["schema_version"] = kManifestSchemaVersion;
  j["root"] = m.root;
  json classes = json::object();
  for (const auto& [name, files] : m.classes) {
    classes[name] = {{"split", std::string(to_string(m.splits.at(name)))}, {"files", files}};
  }
  j["classes"] = classes;
  j["preprocess"] = {{"image_size", m.preprocess.image_size},
                     {"channels", m.preprocess.channels},
                     {"crop_ratio", m.preprocess.crop_ratio},
                     {"channel_means", m.preprocess.channel_means}};
  return j.dump(2);
}

DatasetManifest manifest_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    const int version = j.at("schema_version").get<int>();
    if (version != kManifestSchemaVersion) {
      throw DataError("manifest schema version " + std::to_string(version) +
                      " is not supported (expected " +
                      std::to_string(kManifestSchemaVersion) + ")");
    }
    DatasetManifest m;
    m.root = j.at("root").get<std::string>();
    for (const auto& [name, entry] : j.at("classes").items()) {
      m.splits.emplace(name, parse_split(entry.at("split").get<std::string>()));
      m.classes.emplace(name, entry.at("files").get<std::vector<std::string>>());
    }
    const json& p = j.at("preprocess");
    m.preprocess.image_size = p.at("image_size").get<std::size_t>();
    m.preprocess.channels = p.at("channels").get<std::size_t>();
    m.preprocess.crop_ratio = p.at("crop_ratio").get<double>();
    m.preprocess.channel_means = p.at("channel_means").get<std::vector<double>>();
    m.preprocess.validate();
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path);
  out << manifest_to_json(manifest) << '\n';
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return manifest_from_json(buffer.str());
}

std::size_t ImageDataset::image_count() const {
  std::size_t n = 0;
  for (const auto& cls : images) n += cls.size();
  return n;
}

ImageDataset load_split(const DatasetManifest& manifest, Split split) {
  ImageDataset d;
  d.image_size = manifest.preprocess.image_size;
  d.channels = manifest.preprocess.channels;
  for (const auto& name : manifest.classes_in(split)) {
    std::vector<Tensor> imgs;
    for (const auto& f : manifest.classes.at(name)) {
      imgs.push_back(
          load_image((fs::path(manifest.root) / name / f).string(), manifest.preprocess));
    }
    d.class_names.push_back(name);
    d.images.push_back(std::move(imgs));
  }
  return d;
}

void SyntheticSpec::validate() const {
  if (classes < 1 || images_per_class < 1) {
    throw ConfigError("synthetic: classes and images_per_class must be positive");
  }
  if (image_size < 8) throw ConfigError("synthetic: image_size must be at least 8");
  if (!(jitter >= 0.0) || !(noise >= 0.0)) {
    throw ConfigError("synthetic: jitter and noise must be non-negative");
  }
}

namespace {

struct PatternParams {
  double theta, period, phase, cx, cy, radius, blob_sign;
};

void render(const PatternParams& p, std::size_t size, double dx, double dy, double dtheta,
            Tensor& out) {
  const double c = std::cos(p.theta + dtheta), s = std::sin(p.theta + dtheta);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) - dx, fy = static_cast<double>(y) - dy;
      const double wave =
          std::sin(2.0 * std::numbers::pi * (fx * c + fy * s) / p.period + p.phase);
      const double r2 = (fx - p.cx) * (fx - p.cx) + (fy - p.cy) * (fy - p.cy);
      const double blob = std::exp(-r2 / (2.0 * p.radius * p.radius));
      out.at(0, y, x) = 0.5 + 0.25 * wave + 0.25 * p.blob_sign * blob;
    }
}

}  // namespace

ImageDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double size = static_cast<double>(spec.image_size);
  const std::size_t area = spec.image_size * spec.image_size;

  // Class parameters are redrawn until each template differs from every
  // earlier one by an RMS margin well above the per-image variation.
  constexpr double kTemplateMargin = 0.12;
  constexpr int kMaxDraws = 200;
  std::vector<PatternParams> params;
  std::vector<Tensor> templates;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    PatternParams best{};
    Tensor best_t;
    double best_gap = -1.0;
    for (int attempt = 0; attempt < kMaxDraws; ++attempt) {
      PatternParams p{std::numbers::pi * unit(rng),
                      size * (0.25 + 0.2 * unit(rng)),
                      2.0 * std::numbers::pi * unit(rng),
                      size * (0.25 + 0.5 * unit(rng)),
                      size * (0.25 + 0.5 * unit(rng)),
                      size * (0.1 + 0.08 * unit(rng)),
                      unit(rng) < 0.5 ? -1.0 : 1.0};
      Tensor t({1, spec.image_size, spec.image_size});
      render(p, spec.image_size, 0.0, 0.0, 0.0, t);
      double gap = std::numeric_limits<double>::infinity();
      for (const auto& other : templates) {
        double d = 0.0;
        for (std::size_t i = 0; i < area; ++i) d += (t[i] - other[i]) * (t[i] - other[i]);
        gap = std::min(gap, std::sqrt(d / static_cast<double>(area)));
      }
      if (gap > best_gap) {
        best_gap = gap;
        best = p;
        best_t = t;
      }
      if (gap > kTemplateMargin) break;
    }
    params.push_back(best);
    templates.push_back(std::move(best_t));
  }

  ImageDataset out;
  out.image_size = spec.image_size;
  out.channels = 1;
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> shift(-1.0, 1.0);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    out.class_names.push_back("synthetic_" + std::to_string(k));
    std::vector<Tensor> imgs;
    for (std::size_t i = 0; i < spec.images_per_class; ++i) {
      Tensor t({1, spec.image_size, spec.image_size});
      const double dx = spec.jitter * shift(rng), dy = spec.jitter * shift(rng);
      const double dtheta = 0.05 * spec.jitter * shift(rng);
      render(params[k], spec.image_size, dx, dy, dtheta, t);
      for (double& v : t.storage()) v += spec.noise * noise(rng);
      imgs.push_back(std::move(t));
    }
    out.images.push_back(std::move(imgs));
  }

  // Class means must be separated by more than five noise sigmas.
  std::vector<std::vector<double>> means;
  for (const auto& cls : out.images) {
    std::vector<double> m(area, 0.0);
    for (const auto& t : cls)
      for (std::size_t i = 0; i < area; ++i) m[i] += t[i] / static_cast<double>(cls.size());
    means.push_back(std::move(m));
  }
  for (std::size_t a = 0; a < means.size(); ++a)
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      double d = 0.0;
      for (std::size_t i = 0; i < area; ++i) d += (means[a][i] - means[b][i]) * (means[a][i] - means[b][i]);
      if (std::sqrt(d) <= 5.0 * spec.noise) {
        throw Error("synthetic: classes " + std::to_string(a) + " and " + std::to_string(b) +
                    " have means closer than 5 noise sigmas");
      }
    }
  return out;
}

ImageDataset class_range(const ImageDataset& data, std::size_t begin, std::size_t end) {
  if (begin > end || end > data.class_count()) {
    throw DataError("class_range: [" + std::to_string(begin) + ", " + std::to_string(end) +
                    ") outside " + std::to_string(data.class_count()) + " classes");
  }
  ImageDataset out;
  out.image_size = data.image_size;
  out.channels = data.channels;
  out.class_names.assign(data.class_names.begin() + begin, data.class_names.begin() + end);
  out.images.assign(data.images.begin() + begin, data.images.begin() + end);
  return out;
}

}  // namespace sosn
