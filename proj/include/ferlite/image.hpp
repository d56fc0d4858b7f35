#pragma once

#include "ferlite/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ferlite {

// Planar RGB float image in [0,1], channel-major (3 x H x W).
struct Image {
  long height = 0;
  long width = 0;
  std::vector<float> data;  // 3*H*W

  float& at(long c, long y, long x) { return data[(c * height + y) * width + x]; }
  float at(long c, long y, long x) const { return data[(c * height + y) * width + x]; }
};

// PNG or JPEG by magic bytes. Throws DataError with the offending path.
Image load_image(const std::string& path);
bool looks_like_image(const std::string& path);

void save_png(const std::string& path, const Image& img);

Image resize_bilinear(const Image& src, long out_h, long out_w);

// (3,H,W) tensor view of an image, still in [0,1].
Tensor<float> image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor<float>& t);

}  // namespace ferlite
