/* Copyright 2026 tdq contributors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <cstdint>
#include <vector>

#include "tdq/tensor.hpp"

namespace tdq {

// 8-bit RGB image, row-major, 3 bytes per pixel.
struct ImageU8 {
    int64_t width = 0;
    int64_t height = 0;
    std::vector<uint8_t> rgb;

    int64_t pixel_count() const { return width * height; }
    void validate() const;
};

// [3, H, W] float tensor in [0, 1] <-> 8-bit image. Float -> byte rounds half
// away from zero and clamps to [0, 255].
Tensor image_to_tensor(const ImageU8& img);
ImageU8 tensor_to_image(const Tensor& t);

// BT.601 studio-swing luma of an RGB tensor in [0, 1]:
//   Y = 16 + 65.481 R + 128.553 G + 24.966 B      (Y in [16, 235])
// Input [3, H, W], output [H, W] on the 0..255 scale.
Tensor rgb_to_y(const Tensor& img);

// Drop s pixels from every border of a [H, W] plane.
Tensor shave_border(const Tensor& plane, int64_t s);

// Peak-255 PSNR between two [H, W] planes, capped at 100 dB (identical
// inputs would otherwise be infinite).
double psnr_plane(const Tensor& a, const Tensor& b);

// Mean SSIM between two [H, W] planes on the 0..255 scale: 11x11 Gaussian
// window (sigma 1.5), valid positions only, C1=(0.01*255)^2, C2=(0.03*255)^2.
double ssim_plane(const Tensor& a, const Tensor& b);

// Conventional super-resolution scores: luma-only with a shave-pixel border
// crop (callers pass the upscaling factor).
double psnr_y(const Tensor& a, const Tensor& b, int64_t shave);
double ssim_y(const Tensor& a, const Tensor& b, int64_t shave);

// Separable bicubic resize of a [C, H, W] tensor (Keys kernel, a = -0.5),
// half-pixel center mapping, replicate edge clamping, per-position weight
// normalization, and kernel dilation (antialiasing) when downscaling. This
// reproduces the resampling convention used to synthesize low-resolution
// inputs in the standard super-resolution benchmarks.
Tensor resize_bicubic(const Tensor& img, int64_t out_h, int64_t out_w);

}  // namespace tdq
