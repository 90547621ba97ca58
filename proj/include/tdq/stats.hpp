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

struct TensorStats {
    double min = 0, max = 0, mean = 0, sd = 0, skew = 0;
    uint64_t count = 0;
    bool degenerate() const { return count == 0 || min == max; }
};

// Streaming accumulator: running min/max plus raw power sums in double.
// Feeding the same values in any batch split yields identical statistics.
class StatsAccumulator {
public:
    void add(const float* v, int64_t n);
    void add(const Tensor& t) { add(t.data(), t.numel()); }
    TensorStats finalize() const;

private:
    double min_ = 0, max_ = 0;
    double s1_ = 0, s2_ = 0, s3_ = 0;
    uint64_t n_ = 0;
};

// Fixed-range histogram used for percentile reporting. Values outside
// [lo, hi] clamp into the edge bins.
class Histogram {
public:
    Histogram() = default;
    Histogram(double lo, double hi, int bins);
    void add(const float* v, int64_t n);
    void add(const Tensor& t) { add(t.data(), t.numel()); }
    // Fraction of observed mass strictly below x, linearly interpolated
    // within the containing bin. Returns a value in [0, 1].
    double percentile_of(double x) const;

    double lo() const { return lo_; }
    double hi() const { return hi_; }
    uint64_t total() const { return total_; }
    const std::vector<uint64_t>& bins() const { return bins_; }
    void restore(double lo, double hi, std::vector<uint64_t> bins);

private:
    double lo_ = 0, hi_ = 0;
    std::vector<uint64_t> bins_;
    uint64_t total_ = 0;
};

constexpr int kHistogramBins = 1024;

}  // namespace tdq
