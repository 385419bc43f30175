#include "lpf/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include <opencv2/imgcodecs.hpp>

#include "lpf/errors.hpp"

namespace lpf::imaging {

void RawImage::validate() const {
  if (height < 32 || width < 32)
    throw ConfigError("RawImage: minimum size is 32x32, got " +
                      std::to_string(height) + "x" + std::to_string(width));
  if (pixels.size() != static_cast<size_t>(height) * width)
    throw ShapeError("RawImage: pixel buffer does not match dimensions");
}

size_t SegMask::count() const {
  size_t n = 0;
  for (uint8_t b : bits) n += (b != 0);
  return n;
}

PreprocessConfig PreprocessConfig::from_config(const KeyValueConfig& kv) {
  PreprocessConfig cfg;
  cfg.block_size = kv.get_int("block_size", cfg.block_size);
  cfg.gabor_frequency = kv.get_double("gabor_frequency", cfg.gabor_frequency);
  cfg.threshold_window = kv.get_int("threshold_window", cfg.threshold_window);
  cfg.threshold_offset = kv.get_double("threshold_offset", cfg.threshold_offset);
  cfg.variance_threshold =
      kv.get_double("variance_threshold", cfg.variance_threshold);
  cfg.model_input_size = kv.get_int("model_input_size", cfg.model_input_size);
  return cfg;
}

SegMask segment(const RawImage& img, const std::optional<SegMask>& external_mask,
                const PreprocessConfig& cfg) {
  img.validate();
  if (external_mask) {
    if (external_mask->height != img.height || external_mask->width != img.width)
      throw ConfigError("segment: external mask shape " +
                        std::to_string(external_mask->height) + "x" +
                        std::to_string(external_mask->width) +
                        " does not match image " + std::to_string(img.height) +
                        "x" + std::to_string(img.width));
    return *external_mask;
  }

  // Global variance sets the foreground threshold.
  double sum = 0.0, sum2 = 0.0;
  for (uint8_t p : img.pixels) {
    sum += p;
    sum2 += static_cast<double>(p) * p;
  }
  double n = static_cast<double>(img.pixels.size());
  double mean = sum / n;
  double global_var = sum2 / n - mean * mean;
  double threshold = cfg.variance_threshold * global_var;

  SegMask mask(img.height, img.width, 0);
  int bs = cfg.block_size;
  for (int br = 0; br < img.height; br += bs) {
    for (int bc = 0; bc < img.width; bc += bs) {
      int r1 = std::min(br + bs, img.height);
      int c1 = std::min(bc + bs, img.width);
      double s = 0.0, s2 = 0.0;
      int cnt = (r1 - br) * (c1 - bc);
      for (int r = br; r < r1; ++r)
        for (int c = bc; c < c1; ++c) {
          double v = img.at(r, c);
          s += v;
          s2 += v * v;
        }
      double m = s / cnt;
      double var = s2 / cnt - m * m;
      if (var > threshold) {
        for (int r = br; r < r1; ++r)
          for (int c = bc; c < c1; ++c) mask.at(r, c) = 1;
      }
    }
  }
  return mask;
}

SegMask largest_component(const SegMask& mask) {
  if (mask.count() == 0)
    throw EmptySegmentationError("largest_component: mask has no foreground");

  std::vector<int32_t> label(mask.bits.size(), -1);
  int32_t next = 0;
  size_t best_size = 0;
  int32_t best_label = -1;  // row-major scan order resolves ties

  std::deque<std::pair<int, int>> queue;
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      size_t idx = static_cast<size_t>(r) * mask.width + c;
      if (!mask.bits[idx] || label[idx] >= 0) continue;
      int32_t cur = next++;
      size_t size = 0;
      label[idx] = cur;
      queue.push_back({r, c});
      while (!queue.empty()) {
        auto [cr, cc] = queue.front();
        queue.pop_front();
        ++size;
        const int dr[4] = {-1, 1, 0, 0};
        const int dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          int nr = cr + dr[k], nc = cc + dc[k];
          if (nr < 0 || nr >= mask.height || nc < 0 || nc >= mask.width) continue;
          size_t nidx = static_cast<size_t>(nr) * mask.width + nc;
          if (mask.bits[nidx] && label[nidx] < 0) {
            label[nidx] = cur;
            queue.push_back({nr, nc});
          }
        }
      }
      if (size > best_size) {
        best_size = size;
        best_label = cur;
      }
    }
  }

  SegMask out(mask.height, mask.width, 0);
  for (size_t i = 0; i < mask.bits.size(); ++i)
    out.bits[i] = (label[i] == best_label) ? 1 : 0;
  return out;
}

namespace {

// Separable Gaussian blur on a float plane.
void gaussian_blur_inplace(std::vector<float>& plane, int h, int w,
                           double sigma) {
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(static_cast<size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[static_cast<size_t>(i + radius)] = static_cast<float>(v);
    ksum += v;
  }
  for (auto& k : kernel) k = static_cast<float>(k / ksum);

  std::vector<float> tmp(plane.size());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      float acc = 0.0f;
      for (int i = -radius; i <= radius; ++i) {
        int cc = std::clamp(c + i, 0, w - 1);
        acc += kernel[static_cast<size_t>(i + radius)] *
               plane[static_cast<size_t>(r) * w + cc];
      }
      tmp[static_cast<size_t>(r) * w + c] = acc;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      float acc = 0.0f;
      for (int i = -radius; i <= radius; ++i) {
        int rr = std::clamp(r + i, 0, h - 1);
        acc += kernel[static_cast<size_t>(i + radius)] *
               tmp[static_cast<size_t>(rr) * w + c];
      }
      plane[static_cast<size_t>(r) * w + c] = acc;
    }
}

}  // namespace

OrientationField estimate_orientation(const RawImage& img, const SegMask& mask,
                                      int block_size) {
  if (block_size < 4)
    throw ConfigError("estimate_orientation: block_size must be >= 4");
  if (mask.height != img.height || mask.width != img.width)
    throw ConfigError("estimate_orientation: mask shape mismatch");

  int h = img.height, w = img.width;
  std::vector<float> gx(static_cast<size_t>(h) * w, 0.0f);
  std::vector<float> gy(gx.size(), 0.0f);

  // Sobel gradients; x = column direction, y = row direction.
  for (int r = 1; r < h - 1; ++r) {
    for (int c = 1; c < w - 1; ++c) {
      auto p = [&](int rr, int cc) {
        return static_cast<float>(img.at(rr, cc));
      };
      size_t idx = static_cast<size_t>(r) * w + c;
      gx[idx] = (p(r - 1, c + 1) + 2 * p(r, c + 1) + p(r + 1, c + 1)) -
                (p(r - 1, c - 1) + 2 * p(r, c - 1) + p(r + 1, c - 1));
      gy[idx] = (p(r + 1, c - 1) + 2 * p(r + 1, c) + p(r + 1, c + 1)) -
                (p(r - 1, c - 1) + 2 * p(r - 1, c) + p(r - 1, c + 1));
    }
  }

  // Structure-tensor components, smoothed at sigma = block_size / 2.
  std::vector<float> jxx(gx.size()), jxy(gx.size()), jyy(gx.size());
  for (size_t i = 0; i < gx.size(); ++i) {
    jxx[i] = gx[i] * gx[i];
    jxy[i] = gx[i] * gy[i];
    jyy[i] = gy[i] * gy[i];
  }
  double sigma = block_size / 2.0;
  gaussian_blur_inplace(jxx, h, w, sigma);
  gaussian_blur_inplace(jxy, h, w, sigma);
  gaussian_blur_inplace(jyy, h, w, sigma);

  OrientationField field;
  field.block_size = block_size;
  field.block_rows = (h + block_size - 1) / block_size;
  field.block_cols = (w + block_size - 1) / block_size;
  field.theta.assign(static_cast<size_t>(field.block_rows) * field.block_cols,
                     0.0f);
  field.coherence.assign(field.theta.size(), 0.0f);

  for (int br = 0; br < field.block_rows; ++br) {
    for (int bc = 0; bc < field.block_cols; ++bc) {
      int r0 = br * block_size, c0 = bc * block_size;
      int r1 = std::min(r0 + block_size, h), c1 = std::min(c0 + block_size, w);
      double sxx = 0.0, sxy = 0.0, syy = 0.0;
      size_t fg = 0;
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) {
          if (!mask.at(r, c)) continue;
          size_t idx = static_cast<size_t>(r) * w + c;
          sxx += jxx[idx];
          sxy += jxy[idx];
          syy += jyy[idx];
          ++fg;
        }
      size_t bidx = static_cast<size_t>(br) * field.block_cols + bc;
      double trace = sxx + syy;
      if (fg == 0 || trace < 1e-9) continue;  // background / degenerate
      // Dominant gradient direction phi; ridges run perpendicular to it.
      double phi = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
      double theta = phi + M_PI / 2.0;
      theta = std::fmod(theta, M_PI);
      if (theta < 0) theta += M_PI;
      if (theta >= M_PI) theta -= M_PI;
      double gap = std::sqrt((sxx - syy) * (sxx - syy) + 4.0 * sxy * sxy);
      field.theta[bidx] = static_cast<float>(theta);
      field.coherence[bidx] =
          static_cast<float>(std::clamp(gap / trace, 0.0, 1.0));
    }
  }
  return field;
}

namespace {

// Even-symmetric Gabor kernel tuned to ridge angle theta: the gaussian
// envelope modulated along the ridge normal, mean-corrected so the DC
// response is zero.
std::vector<float> gabor_kernel(double theta, double frequency, int radius) {
  int k = 2 * radius + 1;
  std::vector<float> kernel(static_cast<size_t>(k) * k);
  double sigma = 0.5 / frequency;
  double nx = -std::sin(theta), ny = std::cos(theta);  // ridge normal
  double sum = 0.0;
  for (int y = -radius; y <= radius; ++y)
    for (int x = -radius; x <= radius; ++x) {
      double u = x * nx + y * ny;
      double g = std::exp(-0.5 * (x * x + y * y) / (sigma * sigma)) *
                 std::cos(2.0 * M_PI * frequency * u);
      kernel[static_cast<size_t>(y + radius) * k + (x + radius)] =
          static_cast<float>(g);
      sum += g;
    }
  float mean = static_cast<float>(sum / (static_cast<double>(k) * k));
  for (auto& v : kernel) v -= mean;
  return kernel;
}

}  // namespace

RawImage gabor_enhance(const RawImage& img, const OrientationField& field,
                       double frequency, const SegMask& mask) {
  if (frequency <= 0.0) throw ConfigError("gabor_enhance: frequency must be > 0");
  if (mask.height != img.height || mask.width != img.width)
    throw ConfigError("gabor_enhance: mask shape mismatch");
  if (field.block_rows * field.block_size < img.height ||
      field.block_cols * field.block_size < img.width)
    throw ConfigError("gabor_enhance: orientation field does not cover image");

  int h = img.height, w = img.width;
  double sigma = 0.5 / frequency;
  int radius = std::max(2, static_cast<int>(std::ceil(2.0 * sigma)));
  int k = 2 * radius + 1;

  // One kernel per distinct block angle, cached.
  std::vector<std::vector<float>> kernels(field.theta.size());

  std::vector<float> response(static_cast<size_t>(h) * w, 0.0f);
  float lo = std::numeric_limits<float>::max();
  float hi = std::numeric_limits<float>::lowest();
  bool any = false;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      int br = std::min(r / field.block_size, field.block_rows - 1);
      int bc = std::min(c / field.block_size, field.block_cols - 1);
      size_t bidx = static_cast<size_t>(br) * field.block_cols + bc;
      if (kernels[bidx].empty())
        kernels[bidx] = gabor_kernel(field.theta[bidx], frequency, radius);
      const auto& kern = kernels[bidx];
      float acc = 0.0f;
      for (int y = -radius; y <= radius; ++y) {
        int rr = std::clamp(r + y, 0, h - 1);
        for (int x = -radius; x <= radius; ++x) {
          int cc = std::clamp(c + x, 0, w - 1);
          acc += kern[static_cast<size_t>(y + radius) * k + (x + radius)] *
                 static_cast<float>(img.at(rr, cc));
        }
      }
      response[static_cast<size_t>(r) * w + c] = acc;
      lo = std::min(lo, acc);
      hi = std::max(hi, acc);
      any = true;
    }
  }

  RawImage out(h, w, 0);
  if (!any || hi - lo < 1e-12f) return out;  // flat response -> all zero
  float scale = 255.0f / (hi - lo);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      float v = (response[static_cast<size_t>(r) * w + c] - lo) * scale;
      out.at(r, c) = static_cast<uint8_t>(std::clamp(v, 0.0f, 255.0f) + 0.5f);
    }
  return out;
}

RawImage normalize(const RawImage& img, double target_mean, double target_var,
                   const SegMask* mask) {
  if (img.pixels.empty()) throw ConfigError("normalize: empty image");
  double sum = 0.0, sum2 = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    if (mask && !mask->bits[i]) continue;
    double v = img.pixels[i];
    sum += v;
    sum2 += v * v;
    ++n;
  }
  if (n == 0) n = 1;
  double mean = sum / static_cast<double>(n);
  double var = sum2 / static_cast<double>(n) - mean * mean;

  RawImage out(img.height, img.width, 0);
  if (var < 1e-12) {
    uint8_t v = static_cast<uint8_t>(std::clamp(target_mean, 0.0, 255.0) + 0.5);
    std::fill(out.pixels.begin(), out.pixels.end(), v);
    return out;
  }
  double gain = std::sqrt(target_var / var);
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    double v = target_mean + gain * (img.pixels[i] - mean);
    out.pixels[i] = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0) + 0.5);
  }
  return out;
}

RawImage adaptive_threshold(const RawImage& img, int window, double offset) {
  if (window < 3 || window % 2 == 0)
    throw ConfigError("adaptive_threshold: window must be odd and >= 3");
  int h = img.height, w = img.width;

  // Integral image for O(1) window means.
  std::vector<double> integral(static_cast<size_t>(h + 1) * (w + 1), 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      integral[static_cast<size_t>(r + 1) * (w + 1) + (c + 1)] =
          img.at(r, c) + integral[static_cast<size_t>(r) * (w + 1) + (c + 1)] +
          integral[static_cast<size_t>(r + 1) * (w + 1) + c] -
          integral[static_cast<size_t>(r) * (w + 1) + c];

  int radius = window / 2;
  RawImage out(h, w, 0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      int r0 = std::max(0, r - radius), r1 = std::min(h - 1, r + radius);
      int c0 = std::max(0, c - radius), c1 = std::min(w - 1, c + radius);
      double area = static_cast<double>(r1 - r0 + 1) * (c1 - c0 + 1);
      double local =
          (integral[static_cast<size_t>(r1 + 1) * (w + 1) + (c1 + 1)] -
           integral[static_cast<size_t>(r0) * (w + 1) + (c1 + 1)] -
           integral[static_cast<size_t>(r1 + 1) * (w + 1) + c0] +
           integral[static_cast<size_t>(r0) * (w + 1) + c0]) /
          area;
      out.at(r, c) = (img.at(r, c) < local - offset) ? 0 : 255;
    }
  return out;
}

ModelInput to_model_input(const RawImage& img, int size) {
  if (img.pixels.empty()) throw ConfigError("to_model_input: empty image");
  ModelInput mi;
  mi.size = size;
  mi.channels = Tensor({3, size, size});

  double sr = static_cast<double>(img.height) / size;
  double sc = static_cast<double>(img.width) / size;
  for (int r = 0; r < size; ++r) {
    double src_r = (r + 0.5) * sr - 0.5;
    int r0 = static_cast<int>(std::floor(src_r));
    double fr = src_r - r0;
    int r0c = std::clamp(r0, 0, img.height - 1);
    int r1c = std::clamp(r0 + 1, 0, img.height - 1);
    for (int c = 0; c < size; ++c) {
      double src_c = (c + 0.5) * sc - 0.5;
      int c0 = static_cast<int>(std::floor(src_c));
      double fc = src_c - c0;
      int c0c = std::clamp(c0, 0, img.width - 1);
      int c1c = std::clamp(c0 + 1, 0, img.width - 1);
      double v = (1 - fr) * (1 - fc) * img.at(r0c, c0c) +
                 (1 - fr) * fc * img.at(r0c, c1c) +
                 fr * (1 - fc) * img.at(r1c, c0c) + fr * fc * img.at(r1c, c1c);
      float norm = static_cast<float>((v / 255.0 - 0.5) / 0.5);
      mi.channels.at({0, r, c}) = norm;
      mi.channels.at({1, r, c}) = norm;
      mi.channels.at({2, r, c}) = norm;
    }
  }
  return mi;
}

RawImage apply_mask(const RawImage& img, const SegMask& mask) {
  if (mask.height != img.height || mask.width != img.width)
    throw ConfigError("apply_mask: mask shape mismatch");
  RawImage out = img;
  for (size_t i = 0; i < out.pixels.size(); ++i)
    if (!mask.bits[i]) out.pixels[i] = 0;
  return out;
}

RawImage preprocess_image(const RawImage& img,
                          const std::optional<SegMask>& external_mask,
                          const PreprocessConfig& cfg) {
  SegMask mask = segment(img, external_mask, cfg);
  mask = largest_component(mask);
  RawImage roi = apply_mask(img, mask);
  OrientationField field = estimate_orientation(roi, mask, cfg.block_size);
  RawImage enhanced = gabor_enhance(roi, field, cfg.gabor_frequency, mask);
  RawImage normed = normalize(enhanced, 128.0, 4000.0, &mask);
  return adaptive_threshold(normed, cfg.threshold_window, cfg.threshold_offset);
}

ModelInput preprocess(const RawImage& img,
                      const std::optional<SegMask>& external_mask,
                      const PreprocessConfig& cfg) {
  return to_model_input(preprocess_image(img, external_mask, cfg),
                        cfg.model_input_size);
}

RawImage load_image(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw ParseError("load_image: cannot read " + path);
  RawImage img(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) img.at(r, c) = m.at<uint8_t>(r, c);
  return img;
}

void save_image(const RawImage& img, const std::string& path) {
  cv::Mat m(img.height, img.width, CV_8UC1);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) m.at<uint8_t>(r, c) = img.at(r, c);
  if (!cv::imwrite(path, m))
    throw ParseError("save_image: cannot write " + path);
}

SegMask load_mask(const std::string& path) {
  RawImage img = load_image(path);
  SegMask mask(img.height, img.width, 0);
  for (size_t i = 0; i < img.pixels.size(); ++i)
    mask.bits[i] = img.pixels[i] != 0 ? 1 : 0;
  return mask;
}

}  // namespace lpf::imaging
