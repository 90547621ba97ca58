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

#include "tdq/quantizer.hpp"
#include "tdq/tensor.hpp"

namespace tdq {

// Bit-packed integer codes. Bits are laid out little-endian within each byte
// (element 0 occupies the least significant bits of byte 0); codes may
// straddle byte boundaries for 3-bit widths. Unused padding bits in the final
// byte are always zero, so payloads are byte-deterministic.
struct PackedIntTensor {
    Shape shape;
    int bits = 4;
    Bounds bounds;
    std::vector<uint8_t> payload;

    int64_t numel() const { return shape_numel(shape); }
    size_t expected_payload_size() const {
        return size_t((numel() * bits + 7) / 8);
    }
    void validate() const;
};

PackedIntTensor pack_codes(const std::vector<uint8_t>& codes, Shape shape, int bits,
                           Bounds bounds);
std::vector<uint8_t> unpack_codes(const PackedIntTensor& p);

// Quantize a float tensor with the given per-tensor quantizer and pack the
// resulting codes. Identity-mode quantizers cannot be packed.
PackedIntTensor pack_tensor(const Tensor& v, const QuantizerState& q);
// Dequantized float reconstruction (equals fake_quantize of the original).
Tensor unpack_to_float(const PackedIntTensor& p);

// Integer linear layer on packed operands.
//   x: [M, K] activations, w: [N, K] weights, bias: [N] or null.
//   y[m,n] = sum_k deq(x[m,k]) * deq(w[n,k]) + bias[n]
// computed with int32 code accumulation plus affine corrections:
//   deq(c) = s*c + l, so
//   y = s_x*s_w*acc + s_x*l_w*rowsum_x + s_w*l_x*colsum_w + K*l_x*l_w + bias.
// x_bounds/w_bounds must match the bounds stored with the codes (mismatched
// calibration data is an error, not a silent reinterpretation).
Tensor int_linear(const PackedIntTensor& x, const PackedIntTensor& w, Bounds x_bounds,
                  Bounds w_bounds, const Tensor* bias);

}  // namespace tdq
