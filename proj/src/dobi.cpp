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
#include "tdq/dobi.hpp"

#include <algorithm>
#include <cmath>

namespace tdq {

DobiAccumulator::DobiAccumulator(double vmin, double vmax, int bits, QuantMode mode, int K)
    : vmin_(vmin), vmax_(vmax), bits_(bits), mode_(mode), K_(K) {
    if (!(vmax > vmin))
        throw NumericError(strf("bound search on degenerate range [", vmin, ",", vmax, "]"));
    if (!valid_bit_width(bits))
        throw UsageError(strf("bound search: unsupported bit width ", bits));
    if (K < 1) throw UsageError("bound search needs at least one candidate");
    if (mode == QuantMode::identity) throw UsageError("bound search on identity quantizer");
    err_.assign(size_t(K), 0.0);
}

void DobiAccumulator::add(const float* v, int64_t n) {
    const double levels = double((1 << bits_) - 1);
    const double delta = (vmax_ - vmin_) / (2.0 * double(K_));
    const bool sym = (mode_ == QuantMode::symmetric_search);
    for (int i = 0; i < K_; ++i) {
        const double li = sym ? vmin_ + double(i) * delta : vmin_;
        const double ui = vmax_ - double(i) * delta;
        const double step = (ui - li) / levels;
        double acc = err_[size_t(i)];
        for (int64_t e = 0; e < n; ++e) {
            const double x = v[e];
            const double vc = std::min(std::max(x, li), ui);
            const double vq = li + std::round((vc - li) / step) * step;
            const double d = x - vq;
            acc += d * d;
        }
        err_[size_t(i)] = acc;
    }
    count_ += uint64_t(n);
}

DobiResult DobiAccumulator::finalize() const {
    if (count_ == 0) throw UsageError("bound search saw no data");
    int best = 0;
    for (int i = 0; i < K_; ++i)
        if (err_[size_t(i)] <= err_[size_t(best)]) best = i;  // ties -> narrowest bounds
    const double delta = (vmax_ - vmin_) / (2.0 * double(K_));
    const bool sym = (mode_ == QuantMode::symmetric_search);
    DobiResult r;
    r.index = best;
    r.l = float(sym ? vmin_ + double(best) * delta : vmin_);
    r.u = float(vmax_ - double(best) * delta);
    r.mse = err_[size_t(best)] / double(count_);
    return r;
}

DobiResult dobi_search(const Tensor& v, int bits, QuantMode mode, int K) {
    if (v.numel() == 0) throw UsageError("bound search on empty tensor");
    const float* d = v.data();
    float vmin = d[0], vmax = d[0];
    for (int64_t i = 1; i < v.numel(); ++i) {
        vmin = std::min(vmin, d[i]);
        vmax = std::max(vmax, d[i]);
    }
    DobiAccumulator acc(double(vmin), double(vmax), bits, mode, K);
    acc.add(v);
    return acc.finalize();
}

QuantMode detect_symmetry(const TensorStats& s, double skew_threshold) {
    if (std::abs(s.skew) < skew_threshold && s.min < 0.0 && s.max > 0.0)
        return QuantMode::symmetric_search;
    return QuantMode::fixed_lower;
}

}  // namespace tdq
