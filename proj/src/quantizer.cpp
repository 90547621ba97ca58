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
#include "tdq/quantizer.hpp"

#include <algorithm>
#include <cmath>

namespace tdq {

const char* quant_mode_name(QuantMode m) {
    switch (m) {
        case QuantMode::symmetric_search: return "symmetric";
        case QuantMode::fixed_lower: return "fixed-lower";
        case QuantMode::identity: return "identity";
    }
    return "?";
}

bool valid_bit_width(int bits) { return bits == 2 || bits == 3 || bits == 4 || bits == 8; }

void QuantizerState::validate() const {
    if (!valid_bit_width(bits))
        throw UsageError(strf("quantizer '", id, "': unsupported bit width ", bits,
                              " (allowed: 2, 3, 4, 8)"));
    if (active() && !(u > l))
        throw NumericError(strf("quantizer '", id, "': degenerate bounds l=", l, " u=", u));
}

namespace {
inline void check_args(float v, float l, float u, int bits) {
    if (bits < 1 || bits > 8) throw UsageError(strf("bit width ", bits, " out of range [1,8]"));
    if (!(double(u) > double(l)))
        throw NumericError(strf("degenerate bounds l=", l, " u=", u));
    if (!std::isfinite(v)) throw NumericError("non-finite input to fake quantizer");
}
}  // namespace

float fake_quantize_value(float v, float l, float u, int bits) {
    check_args(v, l, u, bits);
    const double L = l, U = u;
    const double levels = double((1 << bits) - 1);
    const double step = (U - L) / levels;
    const double vc = std::min(std::max(double(v), L), U);
    const double vr = std::round((vc - L) / step);
    const double vq = std::min(std::max(L + vr * step, L), U);
    return float(vq);
}

uint32_t quantize_code(float v, float l, float u, int bits) {
    check_args(v, l, u, bits);
    const double L = l, U = u;
    const double levels = double((1 << bits) - 1);
    const double vc = std::min(std::max(double(v), L), U);
    const double vr = std::round((vc - L) * levels / (U - L));
    return uint32_t(std::min(std::max(vr, 0.0), levels));
}

float dequantize_code(uint32_t code, float l, float u, int bits) {
    const double L = l, U = u;
    const double levels = double((1 << bits) - 1);
    const double vq = L + double(code) * ((U - L) / levels);
    return float(std::min(std::max(vq, L), U));
}

FqGrad fake_quantize_grad_value(float v, float l, float u, int bits) {
    check_args(v, l, u, bits);
    const double L = l, U = u, V = v;
    const double levels = double((1 << bits) - 1);
    const double step = (U - L) / levels;
    const double vc = std::min(std::max(V, L), U);
    const double vr = std::round((vc - L) / step);
    const double frac = (vc - L) / (U - L);  // (v_c - l)/(u - l)
    const double clip_dv = (V >= L && V <= U) ? 1.0 : 0.0;
    const double clip_dl = (V < L) ? 1.0 : 0.0;
    const double clip_du = (V > U) ? 1.0 : 0.0;
    FqGrad g;
    g.dv = float(clip_dv);
    g.dl = float(clip_dl - vr / levels + frac);
    g.du = float(clip_du + vr / levels - frac);
    return g;
}

void fake_quantize(const Tensor& v, const QuantizerState& q, Tensor& out) {
    q.validate();
    if (!v.same_shape(out)) out = Tensor(v.shape());
    const float* src = v.data();
    float* dst = out.data();
    const int64_t n = v.numel();
    if (!q.active()) {
        std::copy(src, src + n, dst);
        return;
    }
    const double L = q.l, U = q.u;
    const double levels = double((1 << q.bits) - 1);
    const double step = (U - L) / levels;
    for (int64_t i = 0; i < n; ++i) {
        const float x = src[i];
        if (!std::isfinite(x))
            throw NumericError(strf("non-finite value at index ", i, " in quantizer '", q.id, "'"));
        const double vc = std::min(std::max(double(x), L), U);
        const double vr = std::round((vc - L) / step);
        dst[i] = float(std::min(std::max(L + vr * step, L), U));
    }
}

Tensor fake_quantize(const Tensor& v, const QuantizerState& q) {
    Tensor out(v.shape());
    fake_quantize(v, q, out);
    return out;
}

Tensor quantize_residual(const Tensor& v, const QuantizerState& q) {
    q.validate();
    if (!q.active()) return Tensor(v.shape());
    Tensor r(v.shape());
    const double L = q.l, U = q.u;
    const double levels = double((1 << q.bits) - 1);
    const float* x = v.data();
    float* out = r.data();
    for (int64_t i = 0; i < v.numel(); ++i) {
        const double vc = std::min(std::max(double(x[i]), L), U);
        const double vr = std::round((vc - L) * levels / (U - L));
        // (v_q - v_c)/(u - l) = (v_r - t)/levels with t the unrounded position
        out[i] = float(vr / levels - (vc - L) / (U - L));
    }
    return r;
}

Tensor linearized_quantize(const Tensor& v, const QuantizerState& q, const Tensor& residual) {
    q.validate();
    if (!q.active()) return v;
    if (!v.same_shape(residual))
        throw ShapeError(strf("linearized_quantize: value ", shape_str(v.shape()),
                              " vs residual ", shape_str(residual.shape())));
    Tensor out(v.shape());
    const double L = q.l, U = q.u;
    const float* x = v.data();
    const float* e = residual.data();
    float* o = out.data();
    for (int64_t i = 0; i < v.numel(); ++i) {
        const double vc = std::min(std::max(double(x[i]), L), U);
        o[i] = float(vc + (U - L) * double(e[i]));
    }
    return out;
}

void fake_quantize_backward(const Tensor& v, const QuantizerState& q, const Tensor& gout,
                            Tensor* gv, double* gl, double* gu) {
    q.validate();
    if (!v.same_shape(gout))
        throw ShapeError(strf("fake_quantize_backward: value ", shape_str(v.shape()),
                              " vs upstream ", shape_str(gout.shape())));
    const int64_t n = v.numel();
    const float* x = v.data();
    const float* g = gout.data();
    if (!q.active()) {
        if (gv) {
            if (!gv->same_shape(v)) *gv = Tensor(v.shape());
            float* dst = gv->data();
            for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
        }
        return;
    }
    const double L = q.l, U = q.u;
    const double levels = double((1 << q.bits) - 1);
    const double step = (U - L) / levels;
    float* dst = nullptr;
    if (gv) {
        if (!gv->same_shape(v)) *gv = Tensor(v.shape());
        dst = gv->data();
    }
    double al = 0.0, au = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double V = x[i];
        const double vc = std::min(std::max(V, L), U);
        const double vr = std::round((vc - L) / step);
        const double frac = (vc - L) / (U - L);
        const bool inside = (V >= L && V <= U);
        if (dst && inside) dst[i] += g[i];
        const double clip_dl = (V < L) ? 1.0 : 0.0;
        const double clip_du = (V > U) ? 1.0 : 0.0;
        al += double(g[i]) * (clip_dl - vr / levels + frac);
        au += double(g[i]) * (clip_du + vr / levels - frac);
    }
    if (gl) *gl += al;
    if (gu) *gu += au;
}

}  // namespace tdq
