#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lpf/config.hpp"
#include "lpf/tensor.hpp"

namespace lpf::imaging {

// 8-bit grayscale image, row-major.
struct RawImage {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> pixels;

  RawImage() = default;
  RawImage(int h, int w, uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<size_t>(h) * w, fill) {}

  uint8_t& at(int r, int c) { return pixels[static_cast<size_t>(r) * width + c]; }
  uint8_t at(int r, int c) const {
    return pixels[static_cast<size_t>(r) * width + c];
  }
  void validate() const;  // throws on sub-32px or empty images
};

// Binary foreground mask, same grid as its source image.
struct SegMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> bits;  // 0 or 1

  SegMask() = default;
  SegMask(int h, int w, uint8_t fill = 0)
      : height(h), width(w), bits(static_cast<size_t>(h) * w, fill) {}

  uint8_t& at(int r, int c) { return bits[static_cast<size_t>(r) * width + c]; }
  uint8_t at(int r, int c) const {
    return bits[static_cast<size_t>(r) * width + c];
  }
  size_t count() const;
};

// Block-sampled ridge orientation field. theta in [0, pi), coherence in [0, 1].
struct OrientationField {
  int block_rows = 0;
  int block_cols = 0;
  int block_size = 0;
  std::vector<float> theta;
  std::vector<float> coherence;

  float theta_at(int br, int bc) const {
    return theta[static_cast<size_t>(br) * block_cols + bc];
  }
  float coherence_at(int br, int bc) const {
    return coherence[static_cast<size_t>(br) * block_cols + bc];
  }
};

// Normalized 3-channel model input; channels are identical replicated
// grayscale, values in [-1, 1]. Stored as a [3, size, size] tensor.
struct ModelInput {
  int size = 224;
  Tensor channels;  // [3, size, size]

  float at(int ch, int r, int c) const { return channels.at({ch, r, c}); }
};

// Tuning knobs for the preprocessing pipeline; defaults match the shipped
// config schema (block_size, gabor_frequency, threshold_window,
// threshold_offset, variance_threshold).
struct PreprocessConfig {
  int block_size = 16;
  double gabor_frequency = 1.0 / 9.0;  // cycles per pixel
  int threshold_window = 15;
  double threshold_offset = 2.0;
  double variance_threshold = 0.1;  // fraction of global variance
  int model_input_size = 224;

  static PreprocessConfig from_config(const KeyValueConfig& kv);
};

// Block-variance fallback segmenter; returns external_mask verbatim when one
// is supplied.
SegMask segment(const RawImage& img, const std::optional<SegMask>& external_mask,
                const PreprocessConfig& cfg = {});

// Keeps only the largest 4-connected component (ties: smallest row-major
// top-left coordinate). Throws EmptySegmentationError on all-false masks.
SegMask largest_component(const SegMask& mask);

// Structure-tensor orientation estimation with Gaussian smoothing
// sigma = block_size / 2. Background blocks get angle 0, coherence 0.
OrientationField estimate_orientation(const RawImage& img, const SegMask& mask,
                                      int block_size);

// Orientation-guided even-symmetric Gabor enhancement at a fixed frequency.
// Background pixels are 0; foreground responses are min-max rescaled to
// [0, 255].
RawImage gabor_enhance(const RawImage& img, const OrientationField& field,
                       double frequency, const SegMask& mask);

// Mean/variance normalization over foreground pixels (whole image when no
// mask), clipped to [0, 255]. Zero input variance yields a constant
// target_mean image.
RawImage normalize(const RawImage& img, double target_mean, double target_var,
                   const SegMask* mask = nullptr);

// Local-mean adaptive threshold: pixel < (window mean - offset) -> 0 else 255.
RawImage adaptive_threshold(const RawImage& img, int window, double offset);

// Bilinear resize to size x size, scale to [0,1], normalize with mean 0.5 /
// std 0.5, replicate to 3 channels.
ModelInput to_model_input(const RawImage& img, int size = 224);

// Zero out pixels outside the mask.
RawImage apply_mask(const RawImage& img, const SegMask& mask);

// Full pipeline: segment -> largest_component -> mask-apply -> gabor_enhance
// -> normalize -> adaptive_threshold -> to_model_input.
ModelInput preprocess(const RawImage& img,
                      const std::optional<SegMask>& external_mask,
                      const PreprocessConfig& cfg);

// Same pipeline, stopping before to_model_input (for writing processed PNGs).
RawImage preprocess_image(const RawImage& img,
                          const std::optional<SegMask>& external_mask,
                          const PreprocessConfig& cfg);

// File I/O (PNG / 8-bit grayscale TIFF / BMP).
RawImage load_image(const std::string& path);
void save_image(const RawImage& img, const std::string& path);
SegMask load_mask(const std::string& path);  // nonzero = foreground

}  // namespace lpf::imaging
