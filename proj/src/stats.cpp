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
#include "tdq/stats.hpp"

#include <algorithm>
#include <cmath>

namespace tdq {

void StatsAccumulator::add(const float* v, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        const double x = v[i];
        if (!std::isfinite(x)) throw NumericError("non-finite value in statistics stream");
        if (n_ == 0 && i == 0) {
            min_ = max_ = x;
        } else {
            min_ = std::min(min_, x);
            max_ = std::max(max_, x);
        }
        s1_ += x;
        s2_ += x * x;
        s3_ += x * x * x;
    }
    n_ += uint64_t(n);
}

TensorStats StatsAccumulator::finalize() const {
    TensorStats s;
    s.count = n_;
    if (n_ == 0) return s;
    const double n = double(n_);
    s.min = min_;
    s.max = max_;
    s.mean = s1_ / n;
    const double var = std::max(0.0, s2_ / n - s.mean * s.mean);
    s.sd = std::sqrt(var);
    if (s.sd > 0) {
        // third central moment from raw power sums
        const double m3 = s3_ / n - 3.0 * s.mean * s2_ / n + 2.0 * s.mean * s.mean * s.mean;
        s.skew = m3 / (s.sd * s.sd * s.sd);
    }
    return s;
}

Histogram::Histogram(double lo, double hi, int bins) : lo_(lo), hi_(hi) {
    if (bins < 1) throw UsageError("histogram needs at least one bin");
    if (!(hi > lo)) throw UsageError(strf("histogram range [", lo, ",", hi, "] is degenerate"));
    bins_.assign(size_t(bins), 0);
}

void Histogram::add(const float* v, int64_t n) {
    if (bins_.empty()) throw UsageError("histogram not initialized");
    const double w = (hi_ - lo_) / double(bins_.size());
    const int64_t last = int64_t(bins_.size()) - 1;
    for (int64_t i = 0; i < n; ++i) {
        int64_t b = int64_t(std::floor((double(v[i]) - lo_) / w));
        b = std::min(std::max(b, int64_t(0)), last);
        bins_[size_t(b)]++;
    }
    total_ += uint64_t(n);
}

double Histogram::percentile_of(double x) const {
    if (total_ == 0 || bins_.empty()) return 0.0;
    if (x <= lo_) return 0.0;
    if (x >= hi_) return 1.0;
    const double w = (hi_ - lo_) / double(bins_.size());
    const double pos = (x - lo_) / w;
    const int64_t b = std::min(int64_t(pos), int64_t(bins_.size()) - 1);
    uint64_t below = 0;
    for (int64_t i = 0; i < b; ++i) below += bins_[size_t(i)];
    const double frac_in_bin = pos - double(b);
    return (double(below) + frac_in_bin * double(bins_[size_t(b)])) / double(total_);
}

void Histogram::restore(double lo, double hi, std::vector<uint64_t> bins) {
    lo_ = lo;
    hi_ = hi;
    bins_ = std::move(bins);
    total_ = 0;
    for (uint64_t c : bins_) total_ += c;
}

}  // namespace tdq
