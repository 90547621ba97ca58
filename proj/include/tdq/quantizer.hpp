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
#include <string>

#include "tdq/tensor.hpp"

namespace tdq {

// Uniform asymmetric fake quantization with learnable clipping bounds.
//
//   v_c = Clip(v, l, u)
//   v_r = Round((2^N - 1)/(u - l) * (v_c - l))      round half away from zero
//   v_q = (u - l)/(2^N - 1) * v_r + l
//
// The map is idempotent, monotone, range-limited to [l, u] and fixes the
// reconstruction grid pointwise (the elementwise math runs in double so these
// hold exactly in float32 for sane bound magnitudes).

struct Bounds {
    float l = 0.f;
    float u = 0.f;
    bool operator==(const Bounds& o) const { return l == o.l && u == o.u; }
};

enum class QuantMode : uint8_t {
    symmetric_search = 0,  // clipping search moves both bounds inward
    fixed_lower = 1,       // lower bound pinned at min(v); only u searched
    identity = 2,          // bypass (degenerate tensors); never trainable
};

const char* quant_mode_name(QuantMode m);

// Per-site quantizer: static per-tensor bounds shared by every element.
struct QuantizerState {
    std::string id;
    QuantMode mode = QuantMode::symmetric_search;
    int bits = 4;
    float l = 0.f;
    float u = 0.f;
    bool is_weight = false;

    bool active() const { return mode != QuantMode::identity; }
    bool trainable() const { return active(); }
    void validate() const;  // bits in {2,3,4,8}; u > l when active
};

bool valid_bit_width(int bits);

// ---- elementwise math core (accepts any bits >= 1; callers that go through
// QuantizerState are restricted to {2,3,4,8}) ----

float fake_quantize_value(float v, float l, float u, int bits);
// rounded integer code in [0, 2^bits - 1]
uint32_t quantize_code(float v, float l, float u, int bits);
float dequantize_code(uint32_t code, float l, float u, int bits);

struct FqGrad {
    float dv;  // straight-through: d v_q / d v = [l <= v <= u]
    float dl;  // dClip/dl - v_r/(2^N-1) + (v_c-l)/(u-l)
    float du;  // dClip/du + v_r/(2^N-1) - (v_c-l)/(u-l)
};
// Clip subgradients: dClip/dv = 1 iff l <= v <= u, dClip/dl = 1 iff v < l,
// dClip/du = 1 iff v > u.
FqGrad fake_quantize_grad_value(float v, float l, float u, int bits);

// ---- tensor level ----

// out gets the quantized copy; identity mode passes through untouched.
void fake_quantize(const Tensor& v, const QuantizerState& q, Tensor& out);
Tensor fake_quantize(const Tensor& v, const QuantizerState& q);

// Accumulates d loss/d l and d loss/d u (if non-null) and writes the
// straight-through input gradient into gv (if non-null).
void fake_quantize_backward(const Tensor& v, const QuantizerState& q, const Tensor& gout,
                            Tensor* gv, double* gl, double* gu);

// ---- straight-through relaxation ----
// The rounding staircase makes raw finite differences of the exact forward
// disagree with the straight-through gradients by construction. The relaxed
// form freezes each element's normalized rounding residual
//   e0 = (v_q - v_c) / (u - l)
// at an operating point and computes
//   clip(v, l, u) + (u - l) * e0,
// which (a) equals v_q exactly at the operating point and (b) is locally C^1
// with gradient identical to the straight-through formulas. Difference
// quotients of this form are the oracle for gradient-fidelity checks.
Tensor quantize_residual(const Tensor& v, const QuantizerState& q);
Tensor linearized_quantize(const Tensor& v, const QuantizerState& q, const Tensor& residual);

}  // namespace tdq
