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

// Image datasets: PNG codec, preprocessing, class-folder manifests and the
// synthetic pattern corpus.
//
// Layout on disk:
//   root/<class>/<image>.png
//   split file: one "class<TAB>split" line per class, split in train|val|test

#ifndef SOSN_DATASETS_HPP_
#define SOSN_DATASETS_HPP_

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "sosn/tensor.hpp"

namespace sosn {

enum class Split { kTrain, kVal, kTest };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

/// 8-bit image, rows top to bottom, channels interleaved.
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

/// Decodes a PNG of bit depth 1, 2, 4 or 8. Palette images expand to RGB and
/// alpha is dropped. Throws DataError naming the path on failure.
RawImage decode_png(const std::string& path);
/// Writes an 8-bit gray or RGB PNG.
void encode_png(const std::string& path, const RawImage& image);

struct PreprocessSpec {
  std::size_t image_size = 28;
  std::size_t channels = 1;
  double crop_ratio = 1.0;             // centre crop keeps this fraction of each side
  std::vector<double> channel_means;  // empty: no mean subtraction

  void validate() const;
};

/// Crop rectangle {x0, y0, width, height} for a centre crop.
struct CropBox {
  std::size_t x0, y0, width, height;
};
CropBox center_crop_box(std::size_t width, std::size_t height, double ratio);

/// Centre crop, bilinear resize (half-pixel centres), scale to [0, 1],
/// channel conversion and mean subtraction. Returns [C, S, S].
Tensor preprocess(const RawImage& image, const PreprocessSpec& spec);
Tensor load_image(const std::string& path, const PreprocessSpec& spec);

inline constexpr int kManifestSchemaVersion = 1;

struct DatasetManifest {
  std::string root;
  std::map<std::string, std::vector<std::string>> classes;  // class -> sorted file names
  std::map<std::string, Split> splits;
  PreprocessSpec preprocess;

  /// Class names assigned to `split`, in lexicographic order.
  std::vector<std::string> classes_in(Split split) const;
  std::size_t image_count() const;
};

/// Scans root/<class>/ for PNG files of every class named in the split file,
/// decodes each one and computes per-channel means over the train split.
/// `preprocess.channel_means` is ignored and replaced by those means.
DatasetManifest load_manifest(const std::string& root, const std::string& split_file,
                              PreprocessSpec preprocess);

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const std::string& text);
void save_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& path);

/// In-memory images grouped by class, each [C, S, S].
struct ImageDataset {
  std::size_t image_size = 0;
  std::size_t channels = 0;
  std::vector<std::string> class_names;
  std::vector<std::vector<Tensor>> images;

  std::size_t class_count() const { return images.size(); }
  std::size_t image_count() const;
};

ImageDataset load_split(const DatasetManifest& manifest, Split split);

struct SyntheticSpec {
  std::size_t classes = 20;
  std::size_t images_per_class = 20;
  std::size_t image_size = 28;
  double jitter = 1.0;  // per-image shift in pixels and orientation scale
  double noise = 0.1;   // additive Gaussian sigma
  std::uint64_t seed = 1;

  void validate() const;
};

/// Oriented bar gratings overlaid with a Gaussian blob; orientation, period,
/// phase and blob placement are per-class parameters. Throws Error if two
/// class means lie closer than 5 noise sigmas.
ImageDataset generate_synthetic(const SyntheticSpec& spec);

/// Classes [begin, end) of a dataset.
ImageDataset class_range(const ImageDataset& data, std::size_t begin, std::size_t end);

}  // namespace sosn

#endif  // SOSN_DATASETS_HPP_
