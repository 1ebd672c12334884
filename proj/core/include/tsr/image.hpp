#pragma once

#include <string>

#include "tsr/geometry.hpp"
#include "tsr/tensor.hpp"

namespace tsr {

// Images are (1,3,H,W) float tensors with values in [0,1], RGB.
// Two on-disk formats: binary PPM (P6) for lossless fixtures and generated
// data, JPEG for photographic datasets.

Tensor load_image(const std::string& path);
Tensor decode_ppm(const std::string& bytes, const std::string& origin);
void save_ppm(const std::string& path, const Tensor& image);

// Bilinear resampling at half-pixel centers.
Tensor resize_bilinear(const Tensor& image, int out_h, int out_w);

// Clips `box` to the image, then resamples the region to out_h x out_w.
// Degenerate clipped regions (zero area) are an error.
Tensor crop_resize(const Tensor& image, const BBox& box, int out_h, int out_w);

}  // namespace tsr
