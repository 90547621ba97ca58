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

#include "tdq/quantizer.hpp"
#include "tdq/stats.hpp"
#include "tdq/tensor.hpp"

namespace tdq {

// Coarse bound search: walk a K-candidate grid of clipping bounds inward from
// (min, max) and keep the candidate minimizing the squared reconstruction
// error of fake quantization.
//
//   delta = (max - min) / (2K)
//   symmetric:   (l_i, u_i) = (min + i*delta, max - i*delta)
//   fixed-lower: (l_i, u_i) = (min,           max - i*delta)       i in [0, K)
//
// Ties resolve to the largest i (narrowest bounds). Cost is O(M*K) for M
// elements; memory O(K).

struct DobiResult {
    float l = 0.f;
    float u = 0.f;
    int index = 0;       // winning grid index
    double mse = 0.0;    // mean squared reconstruction error at the winner
};

// Streaming form: feed element batches in a fixed order; candidate errors
// accumulate per candidate in that same order, so a split stream matches a
// single-tensor search exactly.
class DobiAccumulator {
public:
    DobiAccumulator(double vmin, double vmax, int bits, QuantMode mode, int K);
    void add(const float* v, int64_t n);
    void add(const Tensor& t) { add(t.data(), t.numel()); }
    DobiResult finalize() const;

private:
    double vmin_, vmax_;
    int bits_;
    QuantMode mode_;
    int K_;
    uint64_t count_ = 0;
    std::vector<double> err_;  // per-candidate sum of squared errors
};

// One-shot search over a whole tensor (weights; test oracles).
DobiResult dobi_search(const Tensor& v, int bits, QuantMode mode, int K);

// Activations whose distribution is roughly symmetric about zero get the
// two-sided search; one-sided distributions pin the lower bound at min.
QuantMode detect_symmetry(const TensorStats& s, double skew_threshold = 0.5);

}  // namespace tdq
