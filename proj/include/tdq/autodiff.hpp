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

#include <functional>
#include <vector>

#include "tdq/quantizer.hpp"
#include "tdq/tensor.hpp"

namespace tdq {

// ---------------------------------------------------------------------------
// Plain forward kernels. The tape wraps these; gradient-free code paths (the
// frozen teacher, deployment inference) call them directly.
// ---------------------------------------------------------------------------
namespace ops {

// out = a @ b            a: [..., m, k], b: [k, n] or [..., k, n]
Tensor matmul_nn(const Tensor& a, const Tensor& b);
// out = a @ b^T          a: [..., m, k], b: [n, k] or [..., n, k]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
// b broadcast against a (same rank, extents equal or 1 in b)
Tensor add_broadcast(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// x: [Cin, H, W], w: [Cout, Cin, ks, ks] (odd ks), zero padding ks/2
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);
// last-axis layernorm, biased variance, eps 1e-5
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor gelu(const Tensor& x);  // exact: 0.5 x (1 + erf(x/sqrt(2)))
Tensor softmax(const Tensor& x, int axis);
// x: [T, C] -> out: [rows, C] with out[i] = x[map[i]]
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& map);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor slice0(const Tensor& x, int64_t start, int64_t len);
// x: [C*r*r, H, W] -> [C, r*H, r*W]; out[c, y*r+i, x*r+j] = in[c*r*r + i*r + j, y, x]
Tensor pixel_shuffle(const Tensor& x, int r);

}  // namespace ops

// Gradient accumulator for one quantizer's (l, u) pair.
struct BoundGrad {
    double l = 0.0;
    double u = 0.0;
    void reset() { l = u = 0.0; }
};

// Reverse-mode tape. Nodes are created in topological order by construction;
// backward() walks them in reverse, accumulating gradients. Leaf gradients
// (and BoundGrad sinks) accumulate across repeated backward() calls until
// zero_grad(); interior node gradients are scratch for one sweep.
class Tape {
public:
    using Id = int32_t;

    Id leaf(Tensor v, bool requires_grad = false);

    Id add(Id a, Id b);
    // out = a + alpha * b
    Id add_scaled(Id a, Id b, double alpha);
    // broadcast constant add (mask / relative-position bias / frozen bias)
    Id add_const(Id a, Tensor c);
    Id scale(Id a, double c);
    Id matmul_nn(Id a, Id b);
    Id matmul_nt(Id a, Id b);
    // frozen conv / norm parameters are captured as constants: only the
    // activation gradient path exists (convs and norms are never quantized)
    Id conv2d(Id x, Tensor w, Tensor b);
    Id layernorm(Id x, Tensor gamma, Tensor beta, float eps = 1e-5f);
    Id gelu(Id x);
    Id softmax(Id x, int axis);
    Id gather_rows(Id x, std::vector<int64_t> map);
    Id permute(Id x, std::vector<int> perm);
    Id reshape(Id x, Shape shape);
    Id slice0(Id x, int64_t start, int64_t len);
    Id pixel_shuffle(Id x, int r);
    // Fake-quantize through q. Straight-through estimator for the input;
    // bound gradients from the clipped-reconstruction derivative accumulate
    // into *bg when provided.
    Id fake_quant(Id x, const QuantizerState* q, BoundGrad* bg);
    // scalar mean absolute difference against a constant target
    Id mean_abs_diff(Id x, Tensor target);
    // scalar (1/numel) * || x/||x|| - t/||t|| ||_2 against a constant target
    Id feature_distance(Id x, Tensor target);

    void backward(Id loss);
    void zero_grad();

    const Tensor& value(Id id) const { return nodes_[size_t(id)].value; }
    const Tensor& grad(Id id);  // lazily allocates zeros
    bool requires_grad(Id id) const { return nodes_[size_t(id)].requires_grad; }
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // empty until first accumulation
        bool requires_grad = false;
        std::function<void(Tape&)> backward;
    };

    Id push(Tensor value, bool requires_grad, std::function<void(Tape&)> bw);
    Tensor& grad_buf(Id id);  // allocates zeros on first use
    void accum(Id id, const Tensor& g);

    std::vector<Node> nodes_;
};

}  // namespace tdq
