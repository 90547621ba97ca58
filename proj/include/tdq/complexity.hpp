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

#include "tdq/model.hpp"

namespace tdq {

// Operation counts for one forward pass at a given low-resolution input size.
// Matmul and convolution work is counted in multiply-accumulates; `other`
// (norms, activation functions, residual adds, the mean shift) in single
// elementwise operations. The mixed total is the unit used for shares and
// speedups; flops() doubles the multiply-accumulate terms for display.
struct OpCounts {
    double linear_bmm = 0.0;  // MACs in quantizable linears and attention BMMs
    double conv = 0.0;        // MACs in the three convolution stages
    double other = 0.0;       // elementwise work, counted once

    double mixed_total() const { return linear_bmm + conv + other; }
    double linear_share() const { return linear_bmm / mixed_total(); }
    double flops() const { return 2.0 * (linear_bmm + conv) + other; }
    double linear_flops() const { return 2.0 * linear_bmm; }
};

// Counts for an h x w low-resolution input (the token grid; padding ignored).
OpCounts count_ops(const ModelConfig& cfg, int64_t h, int64_t w);

int64_t model_size_bytes(const ModelConfig& cfg);  // float32 storage
double model_size_mb(const ModelConfig& cfg);      // bytes / 2^20

// Fraction of parameters held by the quantizable linear weights.
double quantizable_fraction(const ModelConfig& cfg);

// Storage shrink when quantizable weights drop to `bits` while the rest stays
// in float32: 1 / ((1 - q) + q * bits / 32).
double compression_ratio(const ModelConfig& cfg, int bits);

// Ideal-arithmetic speedup when quantized matmuls run at `bits`-bit cost
// (bits/32 of their float work) and everything else is unchanged.
double speedup_ratio(const ModelConfig& cfg, int bits, int64_t h, int64_t w);

// Human-readable summary of the above for one configuration.
std::string complexity_report_text(const ModelConfig& cfg, int bits, int64_t h, int64_t w);

// The same data serialized as a JSON object (one line, trailing newline).
std::string complexity_report_json(const ModelConfig& cfg, int bits, int64_t h, int64_t w);

// Default evaluation resolution for reports: a 72 x 112 low-resolution input.
constexpr int64_t kReportH = 72;
constexpr int64_t kReportW = 112;

}  // namespace tdq
