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
#include "tdq/tensor.hpp"

#include <cmath>

namespace tdq {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw ShapeError("negative extent in " + shape_str(s));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(size_t(shape_numel(shape_)), 0.f);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != int64_t(data_.size()))
        throw ShapeError(strf("data size ", data_.size(), " does not match shape ",
                              shape_str(shape_)));
}

Tensor Tensor::full(Shape shape, float v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

int64_t Tensor::dim(int i) const {
    int n = ndim();
    if (i < 0) i += n;
    if (i < 0 || i >= n) throw ShapeError(strf("axis ", i, " out of range for ", shape_str(shape_)));
    return shape_[size_t(i)];
}

int64_t Tensor::offset(std::initializer_list<int64_t> idx) const {
    if (int(idx.size()) != ndim())
        throw ShapeError(strf("index rank ", idx.size(), " vs tensor ", shape_str(shape_)));
    int64_t off = 0;
    int i = 0;
    for (int64_t v : idx) {
        if (v < 0 || v >= shape_[size_t(i)])
            throw ShapeError(strf("index ", v, " out of bounds for axis ", i, " of ",
                                  shape_str(shape_)));
        off = off * shape_[size_t(i)] + v;
        ++i;
    }
    return off;
}

float& Tensor::at(std::initializer_list<int64_t> idx) { return data_[size_t(offset(idx))]; }
float Tensor::at(std::initializer_list<int64_t> idx) const { return data_[size_t(offset(idx))]; }

bool Tensor::has_nonfinite() const {
    for (float v : data_)
        if (!std::isfinite(v)) return true;
    return false;
}

Tensor Tensor::reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw ShapeError(strf("cannot reshape ", shape_str(shape_), " to ", shape_str(new_shape)));
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
}

}  // namespace tdq
