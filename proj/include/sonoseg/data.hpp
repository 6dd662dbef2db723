#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sonoseg/common.hpp"
#include "sonoseg/decoder.hpp"
#include "sonoseg/metrics.hpp"
#include "sonoseg/rng.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

struct MaskPair {
  Tensor image;  // [1,H,W], values in [0,1]
  BinaryMask mask;
  BoxPrompt box;
  std::string id;
};

// ---------------------------------------------------------------------------
// PNG I/O (8-bit grayscale; reads convert whatever they find)

inline void write_png_gray(const std::string& path, int64_t h, int64_t w,
                           const std::vector<uint8_t>& pix) {
  if (static_cast<int64_t>(pix.size()) != h * w)
    throw DataError("write_png_gray: pixel buffer does not match " + std::to_string(h) + "x" +
                    std::to_string(w));
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("write_png_gray: cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw DataError("write_png_gray: libpng failure on " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(pix.data() + y * w));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// Returns false with a diagnostic instead of throwing so directory loads can
// skip bad files and keep going.
inline bool read_png_gray(const std::string& path, int64_t& h, int64_t& w,
                          std::vector<uint8_t>& pix, std::string& err) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) {
    err = "cannot open";
    return false;
  }
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8)) {
    std::fclose(fp);
    err = "not a PNG";
    return false;
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    err = "corrupt PNG";
    return false;
  }
  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  h = png_get_image_height(png, info);
  w = png_get_image_width(png, info);
  if (png_get_rowbytes(png, info) != static_cast<size_t>(w)) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    err = "unexpected row layout after gray conversion";
    return false;
  }
  pix.assign(static_cast<size_t>(h * w), 0);
  for (int64_t y = 0; y < h; ++y) png_read_row(png, pix.data() + y * w, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return true;
}

// ---------------------------------------------------------------------------
// Resizing (plain buffers; no autodiff involved)

inline std::vector<uint8_t> resize_nearest(const std::vector<uint8_t>& src, int64_t sh, int64_t sw,
                                           int64_t dh, int64_t dw) {
  std::vector<uint8_t> out(static_cast<size_t>(dh * dw));
  for (int64_t y = 0; y < dh; ++y) {
    int64_t sy = std::min<int64_t>(sh - 1, static_cast<int64_t>((y + 0.5) * sh / dh));
    for (int64_t x = 0; x < dw; ++x) {
      int64_t sx = std::min<int64_t>(sw - 1, static_cast<int64_t>((x + 0.5) * sw / dw));
      out[static_cast<size_t>(y * dw + x)] = src[static_cast<size_t>(sy * sw + sx)];
    }
  }
  return out;
}

inline std::vector<double> resize_bilinear(const std::vector<double>& src, int64_t sh, int64_t sw,
                                           int64_t dh, int64_t dw) {
  std::vector<double> out(static_cast<size_t>(dh * dw));
  auto tap = [&](int64_t y, int64_t x) {
    y = std::clamp<int64_t>(y, 0, sh - 1);
    x = std::clamp<int64_t>(x, 0, sw - 1);
    return src[static_cast<size_t>(y * sw + x)];
  };
  for (int64_t y = 0; y < dh; ++y) {
    double fy = (y + 0.5) * static_cast<double>(sh) / dh - 0.5;
    int64_t y0 = static_cast<int64_t>(std::floor(fy));
    double wy = fy - y0;
    for (int64_t x = 0; x < dw; ++x) {
      double fx = (x + 0.5) * static_cast<double>(sw) / dw - 0.5;
      int64_t x0 = static_cast<int64_t>(std::floor(fx));
      double wx = fx - x0;
      double top = (1.0 - wx) * tap(y0, x0) + wx * tap(y0, x0 + 1);
      double bot = (1.0 - wx) * tap(y0 + 1, x0) + wx * tap(y0 + 1, x0 + 1);
      out[static_cast<size_t>(y * dw + x)] = (1.0 - wy) * top + wy * bot;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Box prompts

inline BoxPrompt tight_box(const BinaryMask& mask) {
  if (mask.empty_mask()) throw DataError("box_from_mask: mask is empty");
  int64_t x0 = mask.w, y0 = mask.h, x1 = -1, y1 = -1;
  for (int64_t y = 0; y < mask.h; ++y)
    for (int64_t x = 0; x < mask.w; ++x)
      if (mask.at(y, x)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  return BoxPrompt{x0, y0, x1, y1};
}

// Minimum enclosing rectangle, each side pushed outward by an independent
// uniform draw in [0, jitter_max] and clamped, so the prompt is sloppy but
// never cuts into the object.
inline BoxPrompt box_from_mask(const BinaryMask& mask, int jitter_max, Rng& rng) {
  if (jitter_max < 0) throw ConfigError("box_from_mask: jitter_max must be >= 0");
  BoxPrompt b = tight_box(mask);
  b.x0 = std::max<int64_t>(0, b.x0 - rng.uniform_int(0, jitter_max));
  b.y0 = std::max<int64_t>(0, b.y0 - rng.uniform_int(0, jitter_max));
  b.x1 = std::min<int64_t>(mask.w - 1, b.x1 + rng.uniform_int(0, jitter_max));
  b.y1 = std::min<int64_t>(mask.h - 1, b.y1 + rng.uniform_int(0, jitter_max));
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace detail {

inline void gaussian_blur_inplace(std::vector<double>& img, int64_t h, int64_t w, double sigma) {
  constexpr int kRad = 2;
  double k[2 * kRad + 1];
  double norm = 0.0;
  for (int d = -kRad; d <= kRad; ++d) {
    k[d + kRad] = std::exp(-0.5 * d * d / (sigma * sigma));
    norm += k[d + kRad];
  }
  for (double& v : k) v /= norm;
  std::vector<double> tmp(img.size());
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int d = -kRad; d <= kRad; ++d)
        acc += k[d + kRad] * img[static_cast<size_t>(y * w + std::clamp<int64_t>(x + d, 0, w - 1))];
      tmp[static_cast<size_t>(y * w + x)] = acc;
    }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int d = -kRad; d <= kRad; ++d)
        acc += k[d + kRad] * tmp[static_cast<size_t>(std::clamp<int64_t>(y + d, 0, h - 1) * w + x)];
      img[static_cast<size_t>(y * w + x)] = acc;
    }
}

}  // namespace detail

// Generator knobs. Kept as named constants so the empirical contrast test can
// reference the same offset the generator used.
inline constexpr double kForegroundOffset = 0.35;
inline constexpr double kSpeckleBlend = 0.75;  // 0 = no speckle, 1 = full Rayleigh

// One lesion-like sample: 1-2 soft-edged elliptical blobs over a dim
// background, multiplied by mean-one-Rayleigh speckle, blurred, contrast
// jittered. The mask is the blob support before any of the noise stages.
// Depends only on (seed, index), never on n, so datasets extend stably.
inline MaskPair gen_one(uint64_t seed, int64_t index, int64_t size, int jitter_max) {
  Rng rng(seed, "data", static_cast<uint64_t>(index));
  const double s = static_cast<double>(size);

  int nblobs = static_cast<int>(rng.uniform_int(1, 2));
  double bg = rng.uniform(0.18, 0.28);

  struct Blob {
    double cx, cy, a, b, ct, st;
  };
  std::vector<Blob> blobs;
  for (int i = 0; i < nblobs; ++i) {
    double cx = rng.uniform(0.25 * s, 0.75 * s);
    double cy = rng.uniform(0.25 * s, 0.75 * s);
    double a = rng.uniform(0.10 * s, 0.24 * s);
    double b = rng.uniform(0.10 * s, 0.24 * s);
    double th = rng.uniform(0.0, 3.14159265358979323846);
    blobs.push_back({cx, cy, a, b, std::cos(th), std::sin(th)});
  }

  std::vector<double> img(static_cast<size_t>(size * size), bg);
  BinaryMask mask(size, size);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      double px = x + 0.5, py = y + 0.5;
      double soft = 0.0;
      bool inside = false;
      for (const Blob& bl : blobs) {
        double dx = px - bl.cx, dy = py - bl.cy;
        double u = (dx * bl.ct + dy * bl.st) / bl.a;
        double v = (-dx * bl.st + dy * bl.ct) / bl.b;
        double r = std::sqrt(u * u + v * v);
        if (r <= 1.0) inside = true;
        double t = std::clamp((1.0 - r) / 0.35, 0.0, 1.0);
        soft = std::max(soft, t * t * (3.0 - 2.0 * t));
      }
      img[static_cast<size_t>(y * size + x)] += kForegroundOffset * soft;
      mask.set(y, x, inside);
    }

  // multiplicative speckle, mean-normalised so intensity levels survive
  const double rayleigh_mean = std::sqrt(3.14159265358979323846 / 2.0);
  for (double& v : img) {
    double r = rng.rayleigh(1.0) / rayleigh_mean;
    v *= (1.0 - kSpeckleBlend) + kSpeckleBlend * r;
  }

  detail::gaussian_blur_inplace(img, size, size, rng.uniform(0.6, 1.1));

  double contrast = rng.uniform(0.85, 1.15);
  for (double& v : img) v = std::clamp(0.5 + contrast * (v - 0.5), 0.0, 1.0);

  Rng jitter_rng(seed, "jitter", static_cast<uint64_t>(index));
  BoxPrompt box = box_from_mask(mask, jitter_max, jitter_rng);

  char idbuf[32];
  std::snprintf(idbuf, sizeof(idbuf), "synth-%05lld", static_cast<long long>(index));
  return MaskPair{Tensor::from_data({1, size, size}, std::move(img)), std::move(mask), box,
                  idbuf};
}

inline std::vector<MaskPair> gen_synthetic(int64_t n, uint64_t seed, int64_t size,
                                           int jitter_max = 4) {
  if (n < 1) throw ConfigError("gen_synthetic: n must be >= 1");
  if (size < 16) throw ConfigError("gen_synthetic: size must be >= 16");
  std::vector<MaskPair> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out.push_back(gen_one(seed, i, size, jitter_max));
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  uint64_t seed = 0;
};

struct Split {
  std::vector<std::string> train, val, test;
};

// Shuffle by seed, peel off floor(n/10) for val and test each, remainder
// trains. 10 ids -> 8/1/1.
inline Split split_ids(std::vector<std::string> ids, const SplitSpec& spec) {
  if (ids.size() < 10)
    throw DataError("split: need at least 10 ids, got " + std::to_string(ids.size()));
  Rng rng(spec.seed, "split");
  rng.shuffle(ids);
  size_t n = ids.size(), hold = n / 10;
  Split sp;
  sp.train.assign(ids.begin(), ids.begin() + static_cast<int64_t>(n - 2 * hold));
  sp.val.assign(ids.begin() + static_cast<int64_t>(n - 2 * hold),
                ids.begin() + static_cast<int64_t>(n - hold));
  sp.test.assign(ids.begin() + static_cast<int64_t>(n - hold), ids.end());
  return sp;
}

// ---------------------------------------------------------------------------
// On-disk round trip

inline std::vector<uint8_t> quantize_image(const Tensor& image) {
  std::vector<uint8_t> pix(static_cast<size_t>(image.numel()));
  const std::vector<double>& d = image.data();
  for (size_t i = 0; i < pix.size(); ++i)
    pix[i] = static_cast<uint8_t>(std::lround(std::clamp(d[i], 0.0, 1.0) * 255.0));
  return pix;
}

inline void save_dataset(const std::string& dir, const std::vector<MaskPair>& pairs,
                         const Split* split = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  auto split_of = [&](const std::string& id) -> std::string {
    if (!split) return "";
    auto in = [&](const std::vector<std::string>& v) {
      return std::find(v.begin(), v.end(), id) != v.end();
    };
    if (in(split->train)) return "train";
    if (in(split->val)) return "val";
    if (in(split->test)) return "test";
    return "";
  };
  nlohmann::json samples = nlohmann::json::array();
  for (const MaskPair& p : pairs) {
    int64_t h = p.image.dim(1), w = p.image.dim(2);
    std::string img_rel = "images/" + p.id + ".png";
    std::string mask_rel = "masks/" + p.id + ".png";
    write_png_gray((fs::path(dir) / img_rel).string(), h, w, quantize_image(p.image));
    std::vector<uint8_t> mpix(p.mask.v.size());
    for (size_t i = 0; i < mpix.size(); ++i) mpix[i] = p.mask.v[i] ? 255 : 0;
    write_png_gray((fs::path(dir) / mask_rel).string(), p.mask.h, p.mask.w, mpix);
    nlohmann::json rec = {{"id", p.id}, {"image", img_rel}, {"mask", mask_rel}};
    std::string sp = split_of(p.id);
    if (!sp.empty()) rec["split"] = sp;
    samples.push_back(rec);
  }
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw DataError("save_dataset: cannot write manifest in " + dir);
  mf << nlohmann::json({{"samples", samples}}).dump(2) << "\n";
}

// Reads images/ + masks/ pairs by matching stem. target_size <= 0 keeps the
// native resolution. Bad files are reported and skipped; boxes are tight
// (jitter belongs to generation, not ingestion).
inline std::vector<MaskPair> load_dir(const std::string& dir, int64_t target_size = 0,
                                      std::ostream& diag = std::cerr) {
  namespace fs = std::filesystem;
  fs::path images = fs::path(dir) / "images";
  fs::path masks = fs::path(dir) / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks))
    throw DataError("load_dir: " + dir + " must contain images/ and masks/ subdirectories");

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());

  std::vector<MaskPair> out;
  for (const fs::path& img_path : files) {
    std::string id = img_path.stem().string();
    fs::path mask_path = masks / (id + ".png");
    if (!fs::exists(mask_path)) {
      diag << "load_dir: skipping " << id << ": no mask counterpart\n";
      continue;
    }
    int64_t ih = 0, iw = 0, mh = 0, mw = 0;
    std::vector<uint8_t> ipix, mpix;
    std::string err;
    if (!read_png_gray(img_path.string(), ih, iw, ipix, err)) {
      diag << "load_dir: skipping " << id << ": image: " << err << "\n";
      continue;
    }
    if (!read_png_gray(mask_path.string(), mh, mw, mpix, err)) {
      diag << "load_dir: skipping " << id << ": mask: " << err << "\n";
      continue;
    }

    int64_t oh = target_size > 0 ? target_size : ih;
    int64_t ow = target_size > 0 ? target_size : iw;
    std::vector<double> img(ipix.size());
    for (size_t i = 0; i < ipix.size(); ++i) img[i] = ipix[i] / 255.0;
    if (ih != oh || iw != ow) img = resize_bilinear(img, ih, iw, oh, ow);
    if (mh != oh || mw != ow) mpix = resize_nearest(mpix, mh, mw, oh, ow);

    BinaryMask mask(oh, ow);
    for (size_t i = 0; i < mpix.size(); ++i) mask.v[i] = mpix[i] > 127 ? 1 : 0;
    if (mask.empty_mask()) {
      diag << "load_dir: skipping " << id << ": mask has no foreground\n";
      continue;
    }
    BoxPrompt box = tight_box(mask);
    out.push_back(
        MaskPair{Tensor::from_data({1, oh, ow}, std::move(img)), std::move(mask), box, id});
  }
  return out;
}

}  // namespace sonoseg
