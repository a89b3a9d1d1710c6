#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "epca/tensor.hpp"

namespace epca {

/// Images are [C, H, W] with values in [0, 1].
struct Dataset {
  std::vector<TensorF> images;
  std::vector<int> labels;
  std::vector<std::string> names;
  std::vector<std::string> class_names;
  std::string split = "train";

  std::size_t size() const { return images.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  Shape image_shape() const;
  void validate() const;
  Dataset subset(const std::vector<std::size_t>& indices, std::string split_tag) const;
};

/// Seeded shuffle then split; the second part holds round(fraction * n) items.
std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double fraction, std::uint64_t seed);

/// Stacks the selected images into [B, C, H, W].
TensorF stack_batch(const Dataset& d, std::span<const std::size_t> indices);

// --- PGM / PPM -------------------------------------------------------------

/// Decodes binary P5 (gray) or P6 (RGB), maxval up to 65535.
TensorF decode_pnm(const std::vector<unsigned char>& bytes, const std::string& source = "<memory>");
TensorF read_pnm(const std::string& path);
/// 8-bit P5 for C = 1, P6 for C = 3; values clamped to [0, 1] and scaled by 255.
std::vector<unsigned char> encode_pnm(const TensorF& image);
void write_pnm(const std::string& path, const TensorF& image);

/// Bilinear resampling with half-pixel centers and clamped borders.
TensorF resize_bilinear(const TensorF& image, int height, int width);
/// 1 <-> 3 channel conversion (replicate / ITU-R BT.601 luma).
TensorF convert_channels(const TensorF& image, int channels);

struct IngestOptions {
  int height = 64;
  int width = 64;
  int channels = 0;     // 0: take the channel count of the first file
  int num_classes = 0;  // 0: max label + 1
};

/// labels_csv rows are `filename,label` (an optional header row is skipped);
/// files are resolved relative to dir and ordered by filename.
Dataset ingest(const std::string& dir, const std::string& labels_csv, const IngestOptions& options);

struct SynthOptions {
  double noise = 0.05;
  double texture_amplitude = 0.12;
  double patch_intensity = 0.3;
};

/// Three classes on a smooth bright disk: 0 plain, 1 global tessellation
/// texture, 2 one small bright patch. Single channel, size x size.
Dataset synth_generate(int n_per_class, int size, std::uint64_t seed, const SynthOptions& options = {});

/// Writes img_<i>.pgm files and labels.csv into dir.
void write_dataset(const Dataset& d, const std::string& dir);

}  // namespace epca
