#pragma once

// PNG / JPEG codecs and image helpers. Images are [3, H, W] float tensors in
// [0, 1]; 8-bit samples map through division by 255.

#include <jpeglib.h>
#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "psg/error.hpp"
#include "psg/tensor.hpp"

namespace psg {
namespace img {

inline void validate_image(const Tensor& t, const char* what = "image") {
  if (t.ndim() != 3 || t.dim(0) != 3)
    throw Error(ErrorCode::BadShape, std::string(what) + ": expected [3,H,W], got " + t.shape_str());
  const float* p = t.data();
  for (int64_t i = 0; i < t.size(); ++i) {
    const float v = p[i];
    if (!(v >= 0.0f && v <= 1.0f))
      throw Error(ErrorCode::BadShape, std::string(what) + ": values must be finite in [0,1]");
  }
}

// interleaved RGB8 -> [3, H, W] in [0,1]
inline Tensor from_rgb8(const unsigned char* rgb, int h, int w) {
  Tensor t({3, h, w});
  const int64_t hw = static_cast<int64_t>(h) * w;
  for (int64_t i = 0; i < hw; ++i) {
    t.data()[i] = rgb[i * 3 + 0] / 255.0f;
    t.data()[hw + i] = rgb[i * 3 + 1] / 255.0f;
    t.data()[2 * hw + i] = rgb[i * 3 + 2] / 255.0f;
  }
  return t;
}

inline std::vector<unsigned char> to_rgb8(const Tensor& t) {
  const int h = t.dim(1), w = t.dim(2);
  const int64_t hw = static_cast<int64_t>(h) * w;
  std::vector<unsigned char> rgb(hw * 3);
  for (int c = 0; c < 3; ++c) {
    const float* plane = t.data() + c * hw;
    for (int64_t i = 0; i < hw; ++i) {
      float v = plane[i];
      v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
      rgb[i * 3 + c] = static_cast<unsigned char>(v * 255.0f + 0.5f);
    }
  }
  return rgb;
}

namespace detail {

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(mgr->jump, 1);
}

inline Tensor decode_jpeg(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw Error(ErrorCode::MissingFile, path);
  jpeg_decompress_struct cinfo;
  JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  std::vector<unsigned char> rgb;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(fp);
    throw Error(ErrorCode::DecodeError, "corrupt JPEG: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width);
  const int h = static_cast<int>(cinfo.output_height);
  rgb.resize(static_cast<size_t>(w) * h * 3);
  std::vector<unsigned char> row(static_cast<size_t>(w) * cinfo.output_components);
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* rp = row.data();
    jpeg_read_scanlines(&cinfo, &rp, 1);
    const int y = static_cast<int>(cinfo.output_scanline) - 1;
    std::memcpy(rgb.data() + static_cast<size_t>(y) * w * 3, row.data(),
                static_cast<size_t>(w) * 3);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(fp);
  return from_rgb8(rgb.data(), h, w);
}

inline Tensor decode_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw Error(ErrorCode::DecodeError, "corrupt PNG: " + path);
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> rgb(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error(ErrorCode::DecodeError, "corrupt PNG: " + path);
  }
  return from_rgb8(rgb.data(), static_cast<int>(image.height), static_cast<int>(image.width));
}

}  // namespace detail

inline Tensor decode_image(const std::string& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, path);
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw Error(ErrorCode::MissingFile, path);
  unsigned char magic[4] = {0, 0, 0, 0};
  const size_t got = std::fread(magic, 1, 4, fp);
  std::fclose(fp);
  if (got >= 4 && magic[0] == 0x89 && magic[1] == 'P') return detail::decode_png(path);
  if (got >= 3 && magic[0] == 0xFF && magic[1] == 0xD8) return detail::decode_jpeg(path);
  throw Error(ErrorCode::DecodeError, "unsupported image format: " + path);
}

inline void write_png(const std::string& path, const Tensor& t) {
  if (t.ndim() != 3 || t.dim(0) != 3)
    throw Error(ErrorCode::BadShape, "write_png expects [3,H,W]");
  const auto rgb = to_rgb8(t);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.format = PNG_FORMAT_RGB;
  image.width = static_cast<png_uint_32>(t.dim(2));
  image.height = static_cast<png_uint_32>(t.dim(1));
  if (!png_image_write_to_file(&image, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw Error(ErrorCode::IOError, "failed to write PNG: " + path);
}

inline void write_jpeg(const std::string& path, const Tensor& t, int quality = 92) {
  if (t.ndim() != 3 || t.dim(0) != 3)
    throw Error(ErrorCode::BadShape, "write_jpeg expects [3,H,W]");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw Error(ErrorCode::IOError, "cannot open for write: " + path);
  auto rgb = to_rgb8(t);
  jpeg_compress_struct cinfo;
  jpeg_error_mgr jerr;
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, fp);
  cinfo.image_width = static_cast<JDIMENSION>(t.dim(2));
  cinfo.image_height = static_cast<JDIMENSION>(t.dim(1));
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const int w = t.dim(2);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW rp = rgb.data() + static_cast<size_t>(cinfo.next_scanline) * w * 3;
    jpeg_write_scanlines(&cinfo, &rp, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::fclose(fp);
}

// bilinear resize (no gradient); used by the data path
inline Tensor resize_bilinear(const Tensor& t, int oh, int ow) {
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  if (h == oh && w == ow) return t.clone();
  Tensor out({c, oh, ow});
  const double sy = static_cast<double>(h) / oh;
  const double sx = static_cast<double>(w) / ow;
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = t.data() + static_cast<int64_t>(ch) * h * w;
    float* o = out.data() + static_cast<int64_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      double fy = (oy + 0.5) * sy - 0.5;
      fy = fy < 0 ? 0 : (fy > h - 1 ? h - 1 : fy);
      const int y0 = static_cast<int>(fy);
      const int y1 = y0 + 1 < h ? y0 + 1 : h - 1;
      const float wy = static_cast<float>(fy - y0);
      for (int ox = 0; ox < ow; ++ox) {
        double fx = (ox + 0.5) * sx - 0.5;
        fx = fx < 0 ? 0 : (fx > w - 1 ? w - 1 : fx);
        const int x0 = static_cast<int>(fx);
        const int x1 = x0 + 1 < w ? x0 + 1 : w - 1;
        const float wx = static_cast<float>(fx - x0);
        const float v00 = plane[static_cast<int64_t>(y0) * w + x0];
        const float v01 = plane[static_cast<int64_t>(y0) * w + x1];
        const float v10 = plane[static_cast<int64_t>(y1) * w + x0];
        const float v11 = plane[static_cast<int64_t>(y1) * w + x1];
        o[static_cast<int64_t>(oy) * ow + ox] =
            (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  }
  return out;
}

}  // namespace img
}  // namespace psg
