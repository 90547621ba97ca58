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
#include <initializer_list>
#include <vector>

#include "tdq/common.hpp"

namespace tdq {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

// Dense float32 tensor, row-major. Plain value type: copies copy data.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<float> data);
    static Tensor full(Shape shape, float v);
    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int ndim() const { return int(shape_.size()); }
    int64_t numel() const { return int64_t(data_.size()); }
    // dim(-1) is the last axis
    int64_t dim(int i) const;

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& at(std::initializer_list<int64_t> idx);
    float at(std::initializer_list<int64_t> idx) const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool has_nonfinite() const;

    // Reinterpret with a new shape of identical element count.
    Tensor reshaped(Shape new_shape) const;

private:
    int64_t offset(std::initializer_list<int64_t> idx) const;
    Shape shape_;
    std::vector<float> data_;
};

int64_t shape_numel(const Shape& s);

}  // namespace tdq
