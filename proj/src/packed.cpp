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
#include "tdq/packed.hpp"

#include <cmath>

namespace tdq {

void PackedIntTensor::validate() const {
    if (bits < 1 || bits > 8)
        throw FormatError(strf("packed tensor: bit width ", bits, " out of range"));
    if (payload.size() != expected_payload_size())
        throw FormatError(strf("packed tensor: payload ", payload.size(), " bytes, expected ",
                               expected_payload_size(), " for ", shape_str(shape), " at ", bits,
                               " bits"));
    if (!(bounds.u > bounds.l))
        throw FormatError(strf("packed tensor: degenerate bounds l=", bounds.l, " u=", bounds.u));
    // padding bits of the final byte must be zero
    const int64_t used_bits = numel() * bits;
    if (used_bits % 8 != 0 && !payload.empty()) {
        const uint8_t mask = uint8_t(0xFFu << (used_bits % 8));
        if (payload.back() & mask)
            throw FormatError("packed tensor: nonzero padding bits in final byte");
    }
}

PackedIntTensor pack_codes(const std::vector<uint8_t>& codes, Shape shape, int bits,
                           Bounds bounds) {
    if (int64_t(codes.size()) != shape_numel(shape))
        throw ShapeError(strf("pack_codes: ", codes.size(), " codes for shape ",
                              shape_str(shape)));
    PackedIntTensor p;
    p.shape = std::move(shape);
    p.bits = bits;
    p.bounds = bounds;
    p.payload.assign(p.expected_payload_size(), 0);
    const uint32_t maxc = (1u << bits) - 1u;
    for (size_t i = 0; i < codes.size(); ++i) {
        const uint32_t c = codes[i];
        if (c > maxc)
            throw NumericError(strf("pack_codes: code ", c, " exceeds ", bits, "-bit range"));
        const size_t bitpos = i * size_t(bits);
        size_t byte = bitpos >> 3;
        int off = int(bitpos & 7);
        uint32_t v = c << off;
        p.payload[byte] |= uint8_t(v & 0xFF);
        if (off + bits > 8) p.payload[byte + 1] |= uint8_t((v >> 8) & 0xFF);
    }
    p.validate();
    return p;
}

std::vector<uint8_t> unpack_codes(const PackedIntTensor& p) {
    p.validate();
    const size_t n = size_t(p.numel());
    std::vector<uint8_t> codes(n);
    const uint32_t mask = (1u << p.bits) - 1u;
    for (size_t i = 0; i < n; ++i) {
        const size_t bitpos = i * size_t(p.bits);
        const size_t byte = bitpos >> 3;
        const int off = int(bitpos & 7);
        uint32_t v = p.payload[byte];
        if (off + p.bits > 8) v |= uint32_t(p.payload[byte + 1]) << 8;
        codes[i] = uint8_t((v >> off) & mask);
    }
    return codes;
}

PackedIntTensor pack_tensor(const Tensor& v, const QuantizerState& q) {
    q.validate();
    if (!q.active())
        throw UsageError(strf("cannot pack through identity quantizer '", q.id, "'"));
    std::vector<uint8_t> codes(size_t(v.numel()));
    const float* x = v.data();
    for (int64_t i = 0; i < v.numel(); ++i)
        codes[size_t(i)] = uint8_t(quantize_code(x[i], q.l, q.u, q.bits));
    return pack_codes(codes, v.shape(), q.bits, Bounds{q.l, q.u});
}

Tensor unpack_to_float(const PackedIntTensor& p) {
    const auto codes = unpack_codes(p);
    Tensor t(p.shape);
    float* d = t.data();
    for (size_t i = 0; i < codes.size(); ++i)
        d[i] = dequantize_code(codes[i], p.bounds.l, p.bounds.u, p.bits);
    return t;
}

Tensor int_linear(const PackedIntTensor& x, const PackedIntTensor& w, Bounds x_bounds,
                  Bounds w_bounds, const Tensor* bias) {
    x.validate();
    w.validate();
    if (!(x.bounds == x_bounds) || !(w.bounds == w_bounds))
        throw NumericError("int_linear: bounds do not match the bounds the codes were packed with");
    if (x.bits != w.bits)
        throw UsageError(strf("int_linear: mixed bit widths ", x.bits, " vs ", w.bits));
    if (x.shape.size() != 2 || w.shape.size() != 2)
        throw ShapeError(strf("int_linear expects 2-d operands, got ", shape_str(x.shape), " and ",
                              shape_str(w.shape)));
    const int64_t M = x.shape[0], K = x.shape[1];
    const int64_t N = w.shape[0];
    if (w.shape[1] != K)
        throw ShapeError(strf("int_linear: inner extents differ: ", shape_str(x.shape), " vs ",
                              shape_str(w.shape)));
    if (bias && bias->numel() != N)
        throw ShapeError(strf("int_linear: bias ", shape_str(bias->shape()), " vs N=", N));

    const auto xc = unpack_codes(x);
    const auto wc = unpack_codes(w);
    const double levels = double((1 << x.bits) - 1);
    const double sx = (double(x.bounds.u) - double(x.bounds.l)) / levels;
    const double sw = (double(w.bounds.u) - double(w.bounds.l)) / levels;
    const double lx = x.bounds.l, lw = w.bounds.l;

    std::vector<int64_t> rowsum(size_t(M), 0);
    for (int64_t m = 0; m < M; ++m) {
        int64_t s = 0;
        const uint8_t* row = xc.data() + m * K;
        for (int64_t k = 0; k < K; ++k) s += row[k];
        rowsum[size_t(m)] = s;
    }
    std::vector<int64_t> colsum(size_t(N), 0);
    for (int64_t n = 0; n < N; ++n) {
        int64_t s = 0;
        const uint8_t* row = wc.data() + n * K;
        for (int64_t k = 0; k < K; ++k) s += row[k];
        colsum[size_t(n)] = s;
    }

    Tensor y({M, N});
    float* out = y.data();
    const double kll = double(K) * lx * lw;
    for (int64_t m = 0; m < M; ++m) {
        const uint8_t* xr = xc.data() + m * K;
        for (int64_t n = 0; n < N; ++n) {
            const uint8_t* wr = wc.data() + n * K;
            int32_t acc = 0;
            for (int64_t k = 0; k < K; ++k) acc += int32_t(xr[k]) * int32_t(wr[k]);
            double v = sx * sw * double(acc) + sx * lw * double(rowsum[size_t(m)]) +
                       sw * lx * double(colsum[size_t(n)]) + kll;
            if (bias) v += double(bias->data()[n]);
            out[m * N + n] = float(v);
        }
    }
    return y;
}

}  // namespace tdq
