#include "ferlite/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>

namespace ferlite {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Image from_rgb8(const std::vector<std::uint8_t>& rgb, long h, long w) {
  Image img;
  img.height = h;
  img.width = w;
  img.data.resize(static_cast<std::size_t>(3 * h * w));
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (long c = 0; c < 3; ++c)
        img.at(c, y, x) = rgb[static_cast<std::size_t>((y * w + x) * 3 + c)] / 255.0f;
  return img;
}

Image load_png_file(std::FILE* f, const std::string& path) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("png: out of memory reading " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("png: out of memory reading " + path);
  }
  std::vector<std::uint8_t> rgb;
  long w = 0, h = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png: failed to decode " + path);
  }
  png_init_io(png, f);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  rgb.resize(static_cast<std::size_t>(3 * w * h));
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (long y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = rgb.data() + y * w * 3;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return from_rgb8(rgb, h, w);
}

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  longjmp(mgr->jump, 1);
}

Image load_jpeg_file(std::FILE* f, const std::string& path) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("jpeg: failed to decode " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const long w = cinfo.output_width, h = cinfo.output_height;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(3 * w * h));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = rgb.data() + cinfo.output_scanline * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_rgb8(rgb, h, w);
}

}  // namespace

bool looks_like_image(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) return false;
  std::uint8_t magic[8] = {0};
  if (std::fread(magic, 1, 8, f.get()) < 3) return false;
  static const std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (std::memcmp(magic, png_sig, 8) == 0) return true;
  return magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF;
}

Image load_image(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw DataError("cannot open image: " + path);
  std::uint8_t magic[8] = {0};
  if (std::fread(magic, 1, 8, f.get()) < 3) throw DataError("truncated image file: " + path);
  std::rewind(f.get());
  static const std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (std::memcmp(magic, png_sig, 8) == 0) return load_png_file(f.get(), path);
  if (magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF)
    return load_jpeg_file(f.get(), path);
  throw DataError("unsupported image format (want png/jpeg): " + path);
}

void save_png(const std::string& path, const Image& img) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png: out of memory writing " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png: out of memory writing " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: failed to encode " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(3 * img.width));
  for (long y = 0; y < img.height; ++y) {
    for (long x = 0; x < img.width; ++x)
      for (long c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        row[static_cast<std::size_t>(x * 3 + c)] =
            static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Half-pixel-center convention: src = (dst + 0.5) * scale - 0.5, clamped.
// A same-size resize is exactly the identity.
Image resize_bilinear(const Image& src, long out_h, long out_w) {
  Image dst;
  dst.height = out_h;
  dst.width = out_w;
  dst.data.resize(static_cast<std::size_t>(3 * out_h * out_w));
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (long y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(src.height - 1));
    const long y0 = static_cast<long>(fy);
    const long y1 = std::min(y0 + 1, src.height - 1);
    const float wy = static_cast<float>(fy - y0);
    for (long x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(src.width - 1));
      const long x0 = static_cast<long>(fx);
      const long x1 = std::min(x0 + 1, src.width - 1);
      const float wx = static_cast<float>(fx - x0);
      for (long c = 0; c < 3; ++c) {
        const float top = src.at(c, y0, x0) * (1 - wx) + src.at(c, y0, x1) * wx;
        const float bot = src.at(c, y1, x0) * (1 - wx) + src.at(c, y1, x1) * wx;
        dst.at(c, y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

Tensor<float> image_to_tensor(const Image& img) {
  Tensor<float> t = Tensor<float>::zeros({3, img.height, img.width});
  std::copy(img.data.begin(), img.data.end(), t.value().data());
  return t;
}

Image tensor_to_image(const Tensor<float>& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw DimError("tensor_to_image: want (3,H,W)");
  Image img;
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.data.assign(t.value().data(), t.value().data() + t.size());
  return img;
}

}  // namespace ferlite
