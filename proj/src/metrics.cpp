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
#include "tdq/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "tdq/common.hpp"

namespace tdq {

void ImageU8::validate() const {
    if (width < 1 || height < 1)
        throw FormatError(strf("image size ", width, "x", height, " is invalid"));
    if (int64_t(rgb.size()) != 3 * width * height)
        throw FormatError(strf("image buffer ", rgb.size(), " bytes, expected ",
                               3 * width * height));
}

Tensor image_to_tensor(const ImageU8& img) {
    img.validate();
    Tensor t({3, img.height, img.width});
    const int64_t hw = img.pixel_count();
    for (int64_t p = 0; p < hw; ++p)
        for (int64_t c = 0; c < 3; ++c)
            t.data()[c * hw + p] = float(img.rgb[size_t(3 * p + c)]) / 255.f;
    return t;
}

ImageU8 tensor_to_image(const Tensor& t) {
    if (t.ndim() != 3 || t.dim(0) != 3)
        throw ShapeError(strf("expected a [3,H,W] tensor, got ", shape_str(t.shape())));
    ImageU8 img;
    img.height = t.dim(1);
    img.width = t.dim(2);
    img.rgb.assign(size_t(3 * img.pixel_count()), 0);
    const int64_t hw = img.pixel_count();
    for (int64_t p = 0; p < hw; ++p)
        for (int64_t c = 0; c < 3; ++c) {
            const double v = std::round(double(t.data()[c * hw + p]) * 255.0);
            img.rgb[size_t(3 * p + c)] = uint8_t(std::min(255.0, std::max(0.0, v)));
        }
    return img;
}

Tensor rgb_to_y(const Tensor& img) {
    if (img.ndim() != 3 || img.dim(0) != 3)
        throw ShapeError(strf("expected a [3,H,W] tensor, got ", shape_str(img.shape())));
    const int64_t hw = img.dim(1) * img.dim(2);
    Tensor y({img.dim(1), img.dim(2)});
    const float* r = img.data();
    const float* g = img.data() + hw;
    const float* b = img.data() + 2 * hw;
    for (int64_t p = 0; p < hw; ++p)
        y.data()[p] = float(16.0 + 65.481 * double(r[p]) + 128.553 * double(g[p]) +
                            24.966 * double(b[p]));
    return y;
}

Tensor shave_border(const Tensor& plane, int64_t s) {
    if (plane.ndim() != 2)
        throw ShapeError(strf("expected a [H,W] plane, got ", shape_str(plane.shape())));
    if (s < 0) throw UsageError("negative border shave");
    const int64_t H = plane.dim(0), W = plane.dim(1);
    if (H - 2 * s < 1 || W - 2 * s < 1)
        throw UsageError(strf("shaving ", s, " pixels from a ", H, "x", W, " plane leaves nothing"));
    Tensor out({H - 2 * s, W - 2 * s});
    for (int64_t i = 0; i < H - 2 * s; ++i)
        for (int64_t j = 0; j < W - 2 * s; ++j) out.at({i, j}) = plane.at({i + s, j + s});
    return out;
}

namespace {

void check_planes(const Tensor& a, const Tensor& b, const char* who) {
    if (a.ndim() != 2 || !a.same_shape(b))
        throw ShapeError(strf(who, ": planes ", shape_str(a.shape()), " vs ",
                              shape_str(b.shape())));
}

}  // namespace

double psnr_plane(const Tensor& a, const Tensor& b) {
    check_planes(a, b, "psnr");
    double mse = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = double(a.data()[i]) - double(b.data()[i]);
        mse += d * d;
    }
    mse /= double(a.numel());
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(255.0 * 255.0 / mse));
}

double ssim_plane(const Tensor& a, const Tensor& b) {
    check_planes(a, b, "ssim");
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5;
    const int64_t H = a.dim(0), W = a.dim(1);
    if (H < kWin || W < kWin)
        throw UsageError(strf("ssim needs at least ", kWin, "x", kWin, " pixels, got ", H, "x", W));

    static const std::vector<double> win = [] {
        std::vector<double> w(kWin * kWin);
        double sum = 0.0;
        for (int i = 0; i < kWin; ++i)
            for (int j = 0; j < kWin; ++j) {
                const double di = i - (kWin - 1) / 2.0, dj = j - (kWin - 1) / 2.0;
                w[size_t(i * kWin + j)] = std::exp(-(di * di + dj * dj) / (2.0 * kSigma * kSigma));
                sum += w[size_t(i * kWin + j)];
            }
        for (auto& v : w) v /= sum;
        return w;
    }();

    const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
    double total = 0.0;
    int64_t count = 0;
    for (int64_t y = 0; y + kWin <= H; ++y)
        for (int64_t x = 0; x + kWin <= W; ++x) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int i = 0; i < kWin; ++i)
                for (int j = 0; j < kWin; ++j) {
                    const double w = win[size_t(i * kWin + j)];
                    const double va = a.data()[(y + i) * W + (x + j)];
                    const double vb = b.data()[(y + i) * W + (x + j)];
                    mx += w * va;
                    my += w * vb;
                    xx += w * va * va;
                    yy += w * vb * vb;
                    xy += w * va * vb;
                }
            const double sx = xx - mx * mx;
            const double sy = yy - my * my;
            const double sxy = xy - mx * my;
            total += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                     ((mx * mx + my * my + c1) * (sx + sy + c2));
            ++count;
        }
    return total / double(count);
}

double psnr_y(const Tensor& a, const Tensor& b, int64_t shave) {
    return psnr_plane(shave_border(rgb_to_y(a), shave), shave_border(rgb_to_y(b), shave));
}

double ssim_y(const Tensor& a, const Tensor& b, int64_t shave) {
    return ssim_plane(shave_border(rgb_to_y(a), shave), shave_border(rgb_to_y(b), shave));
}

namespace {

// Keys cubic, a = -0.5
double cubic(double x) {
    x = std::abs(x);
    if (x <= 1.0) return (1.5 * x - 2.5) * x * x + 1.0;
    if (x < 2.0) return ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0;
    return 0.0;
}

struct ResampleTaps {
    int taps = 0;
    std::vector<int64_t> idx;  // out * taps source indices (edge clamped)
    std::vector<double> wts;   // matching normalized weights
};

ResampleTaps plan_axis(int64_t in, int64_t out) {
    if (in < 1 || out < 1) throw UsageError("resize to or from an empty axis");
    const double scale = double(out) / double(in);
    const double kscale = scale < 1.0 ? scale : 1.0;  // kernel dilation when shrinking
    const double width = 4.0 / kscale;
    ResampleTaps rt;
    rt.taps = int(std::ceil(width)) + 2;
    rt.idx.resize(size_t(out * rt.taps));
    rt.wts.resize(size_t(out * rt.taps));
    for (int64_t o = 0; o < out; ++o) {
        const double u = (double(o) + 0.5) / scale - 0.5;  // half-pixel center mapping
        const int64_t left = int64_t(std::floor(u - width / 2.0));
        double sum = 0.0;
        for (int p = 0; p < rt.taps; ++p) {
            const int64_t i = left + p;
            const double w = kscale * cubic(kscale * (u - double(i)));
            rt.idx[size_t(o * rt.taps + p)] = std::min(std::max(i, int64_t(0)), in - 1);
            rt.wts[size_t(o * rt.taps + p)] = w;
            sum += w;
        }
        for (int p = 0; p < rt.taps; ++p) rt.wts[size_t(o * rt.taps + p)] /= sum;
    }
    return rt;
}

}  // namespace

Tensor resize_bicubic(const Tensor& img, int64_t out_h, int64_t out_w) {
    if (img.ndim() != 3)
        throw ShapeError(strf("expected a [C,H,W] tensor, got ", shape_str(img.shape())));
    const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const ResampleTaps ph = plan_axis(H, out_h);
    const ResampleTaps pw = plan_axis(W, out_w);

    // horizontal pass, then vertical
    Tensor mid({C, H, out_w});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y) {
            const float* src = img.data() + (c * H + y) * W;
            float* dst = mid.data() + (c * H + y) * out_w;
            for (int64_t x = 0; x < out_w; ++x) {
                double acc = 0.0;
                for (int p = 0; p < pw.taps; ++p)
                    acc += pw.wts[size_t(x * pw.taps + p)] *
                           double(src[pw.idx[size_t(x * pw.taps + p)]]);
                dst[x] = float(acc);
            }
        }
    Tensor out({C, out_h, out_w});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < out_h; ++y) {
            float* dst = out.data() + (c * out_h + y) * out_w;
            for (int64_t x = 0; x < out_w; ++x) {
                double acc = 0.0;
                for (int p = 0; p < ph.taps; ++p)
                    acc += ph.wts[size_t(y * ph.taps + p)] *
                           double(mid.data()[(c * H + ph.idx[size_t(y * ph.taps + p)]) * out_w + x]);
                dst[x] = float(acc);
            }
        }
    return out;
}

}  // namespace tdq
