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
#include "tdq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

namespace tdq {
namespace {

constexpr double kSqrt1_2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = int(s.size()) - 1; i >= 0; --i) {
        st[size_t(i)] = acc;
        acc *= s[size_t(i)];
    }
    return st;
}

// C[m,n] += A[m,k] @ B[k,n]
void mm_nn(const float* A, const float* B, float* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        float* c = C + i * n;
        const float* arow = A + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const float a = arow[p];
            const float* brow = B + p * n;
            for (int64_t j = 0; j < n; ++j) c[j] += a * brow[j];
        }
    }
}

// C[m,n] += A[m,k] @ B[n,k]^T
void mm_nt(const float* A, const float* B, float* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = A + i * k;
        float* c = C + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const float* brow = B + j * k;
            float acc = 0.f;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[j] += acc;
        }
    }
}

// C[m,n] += A[r,m]^T @ B[r,n]
void mm_tn(const float* A, const float* B, float* C, int64_t r, int64_t m, int64_t n) {
    for (int64_t p = 0; p < r; ++p) {
        const float* arow = A + p * m;
        const float* brow = B + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const float a = arow[i];
            float* c = C + i * n;
            for (int64_t j = 0; j < n; ++j) c[j] += a * brow[j];
        }
    }
}

struct MatmulDims {
    int64_t batch, m, k, n;
    bool b_shared;  // b is 2-d, shared across batch
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool transposed_b, const char* op) {
    if (a.ndim() < 2 || b.ndim() < 2)
        throw ShapeError(strf(op, ": operands must be at least 2-d, got ", shape_str(a.shape()),
                              " and ", shape_str(b.shape())));
    MatmulDims d;
    d.m = a.dim(-2);
    d.k = a.dim(-1);
    d.batch = a.numel() / (d.m * d.k);
    const int64_t bk = transposed_b ? b.dim(-1) : b.dim(-2);
    d.n = transposed_b ? b.dim(-2) : b.dim(-1);
    d.b_shared = (b.ndim() == 2);
    if (!d.b_shared) {
        const int64_t bbatch = b.numel() / (bk * d.n);
        Shape alead(a.shape().begin(), a.shape().end() - 2);
        Shape blead(b.shape().begin(), b.shape().end() - 2);
        if (bbatch != d.batch || alead != blead)
            throw ShapeError(strf(op, ": batch extents differ: ", shape_str(a.shape()), " vs ",
                                  shape_str(b.shape())));
    }
    if (bk != d.k)
        throw ShapeError(strf(op, ": inner extents differ: ", shape_str(a.shape()), " vs ",
                              shape_str(b.shape())));
    return d;
}

Shape matmul_out_shape(const Tensor& a, int64_t n) {
    Shape s = a.shape();
    s.back() = n;
    return s;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(strf(op, ": shapes differ: ", shape_str(a.shape()), " vs ",
                              shape_str(b.shape())));
}

}  // namespace

namespace ops {

Tensor matmul_nn(const Tensor& a, const Tensor& b) {
    const auto d = matmul_dims(a, b, false, "matmul");
    Tensor out(matmul_out_shape(a, d.n));
    for (int64_t bi = 0; bi < d.batch; ++bi) {
        const float* B = d.b_shared ? b.data() : b.data() + bi * d.k * d.n;
        mm_nn(a.data() + bi * d.m * d.k, B, out.data() + bi * d.m * d.n, d.m, d.k, d.n);
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const auto d = matmul_dims(a, b, true, "matmul_nt");
    Tensor out(matmul_out_shape(a, d.n));
    for (int64_t bi = 0; bi < d.batch; ++bi) {
        const float* B = d.b_shared ? b.data() : b.data() + bi * d.n * d.k;
        mm_nt(a.data() + bi * d.m * d.k, B, out.data() + bi * d.m * d.n, d.m, d.k, d.n);
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = a;
    float* o = out.data();
    const float* x = b.data();
    for (int64_t i = 0; i < out.numel(); ++i) o[i] += x[i];
    return out;
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
    if (a.ndim() != b.ndim())
        throw ShapeError(strf("add_broadcast: rank mismatch ", shape_str(a.shape()), " vs ",
                              shape_str(b.shape())));
    const int nd = a.ndim();
    for (int i = 0; i < nd; ++i)
        if (b.dim(i) != a.dim(i) && b.dim(i) != 1)
            throw ShapeError(strf("add_broadcast: ", shape_str(b.shape()),
                                  " does not broadcast to ", shape_str(a.shape())));
    Tensor out = a;
    const auto bst_full = strides_of(b.shape());
    std::vector<int64_t> bst(size_t(nd), 0);
    for (int i = 0; i < nd; ++i) bst[size_t(i)] = (b.dim(i) == 1) ? 0 : bst_full[size_t(i)];
    std::vector<int64_t> idx(size_t(nd), 0);
    float* o = out.data();
    const float* src = b.data();
    int64_t boff = 0;
    for (int64_t lin = 0; lin < a.numel(); ++lin) {
        o[lin] += src[boff];
        for (int i = nd - 1; i >= 0; --i) {
            boff += bst[size_t(i)];
            if (++idx[size_t(i)] < a.dim(i)) break;
            idx[size_t(i)] = 0;
            boff -= bst[size_t(i)] * a.dim(i);
        }
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = a;
    for (auto& v : out.vec()) v = float(double(v) * c);
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 3 || w.ndim() != 4)
        throw ShapeError(strf("conv2d: x ", shape_str(x.shape()), " w ", shape_str(w.shape())));
    const int64_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int64_t Cout = w.dim(0), ks = w.dim(2);
    if (w.dim(1) != Cin || w.dim(3) != ks || ks % 2 == 0)
        throw ShapeError(strf("conv2d: weight ", shape_str(w.shape()), " incompatible with input ",
                              shape_str(x.shape())));
    if (b.numel() != Cout) throw ShapeError("conv2d: bias size mismatch");
    const int64_t pad = ks / 2;
    Tensor out({Cout, H, W});
    const float* xd = x.data();
    const float* wd = w.data();
    float* od = out.data();
    for (int64_t co = 0; co < Cout; ++co) {
        const float bias = b.data()[co];
        for (int64_t y = 0; y < H; ++y) {
            for (int64_t xx = 0; xx < W; ++xx) {
                float acc = bias;
                for (int64_t ci = 0; ci < Cin; ++ci) {
                    const float* plane = xd + ci * H * W;
                    const float* wk = wd + ((co * Cin + ci) * ks) * ks;
                    for (int64_t ky = 0; ky < ks; ++ky) {
                        const int64_t iy = y + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t kx = 0; kx < ks; ++kx) {
                            const int64_t ix = xx + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            acc += plane[iy * W + ix] * wk[ky * ks + kx];
                        }
                    }
                }
                od[(co * H + y) * W + xx] = acc;
            }
        }
    }
    return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    const int64_t C = x.dim(-1);
    if (gamma.numel() != C || beta.numel() != C)
        throw ShapeError(strf("layernorm: last axis ", C, " vs gamma ", gamma.numel(), " beta ",
                              beta.numel()));
    const int64_t rows = x.numel() / C;
    Tensor out(x.shape());
    const float* xd = x.data();
    float* od = out.data();
    const float* g = gamma.data();
    const float* bt = beta.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* row = xd + r * C;
        float* orow = od + r * C;
        double mean = 0;
        for (int64_t i = 0; i < C; ++i) mean += row[i];
        mean /= double(C);
        double var = 0;
        for (int64_t i = 0; i < C; ++i) {
            const double d = row[i] - mean;
            var += d * d;
        }
        var /= double(C);
        const double rstd = 1.0 / std::sqrt(var + double(eps));
        for (int64_t i = 0; i < C; ++i)
            orow[i] = float((double(row[i]) - mean) * rstd * double(g[i]) + double(bt[i]));
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    const float* xd = x.data();
    float* od = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double v = xd[i];
        od[i] = float(0.5 * v * (1.0 + std::erf(v * kSqrt1_2)));
    }
    return out;
}

Tensor softmax(const Tensor& x, int axis) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd)
        throw ShapeError(strf("softmax: axis out of range for ", shape_str(x.shape())));
    const int64_t extent = x.dim(axis);
    int64_t inner = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
    const int64_t outer = x.numel() / (extent * inner);
    Tensor out(x.shape());
    const float* xd = x.data();
    float* od = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const float* base = xd + o * extent * inner + in;
            float* obase = od + o * extent * inner + in;
            double mx = -1e300;
            for (int64_t k = 0; k < extent; ++k) mx = std::max(mx, double(base[k * inner]));
            double sum = 0;
            for (int64_t k = 0; k < extent; ++k) sum += std::exp(double(base[k * inner]) - mx);
            for (int64_t k = 0; k < extent; ++k)
                obase[k * inner] = float(std::exp(double(base[k * inner]) - mx) / sum);
        }
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& map) {
    if (x.ndim() != 2) throw ShapeError(strf("gather_rows expects 2-d, got ", shape_str(x.shape())));
    const int64_t T = x.dim(0), C = x.dim(1);
    Tensor out({int64_t(map.size()), C});
    for (size_t i = 0; i < map.size(); ++i) {
        const int64_t src = map[i];
        if (src < 0 || src >= T) throw ShapeError(strf("gather_rows: index ", src, " out of ", T));
        std::memcpy(out.data() + int64_t(i) * C, x.data() + src * C, size_t(C) * sizeof(float));
    }
    return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int nd = x.ndim();
    if (int(perm.size()) != nd) throw ShapeError("permute: rank mismatch");
    std::vector<bool> seen(size_t(nd), false);
    Shape oshape(size_t(nd), 0);
    for (int i = 0; i < nd; ++i) {
        const int p = perm[size_t(i)];
        if (p < 0 || p >= nd || seen[size_t(p)]) throw ShapeError("permute: invalid permutation");
        seen[size_t(p)] = true;
        oshape[size_t(i)] = x.dim(p);
    }
    const auto xst = strides_of(x.shape());
    std::vector<int64_t> src_stride(size_t(nd), 0);
    for (int i = 0; i < nd; ++i) src_stride[size_t(i)] = xst[size_t(perm[size_t(i)])];
    Tensor out(oshape);
    std::vector<int64_t> idx(size_t(nd), 0);
    const float* xd = x.data();
    float* od = out.data();
    int64_t soff = 0;
    for (int64_t lin = 0; lin < out.numel(); ++lin) {
        od[lin] = xd[soff];
        for (int i = nd - 1; i >= 0; --i) {
            soff += src_stride[size_t(i)];
            if (++idx[size_t(i)] < oshape[size_t(i)]) break;
            idx[size_t(i)] = 0;
            soff -= src_stride[size_t(i)] * oshape[size_t(i)];
        }
    }
    return out;
}

Tensor slice0(const Tensor& x, int64_t start, int64_t len) {
    if (x.ndim() < 1 || start < 0 || len < 0 || start + len > x.dim(0))
        throw ShapeError(strf("slice0: [", start, ",", start + len, ") out of ",
                              shape_str(x.shape())));
    Shape oshape = x.shape();
    oshape[0] = len;
    const int64_t row = x.numel() / x.dim(0);
    Tensor out(oshape);
    std::memcpy(out.data(), x.data() + start * row, size_t(len * row) * sizeof(float));
    return out;
}

Tensor pixel_shuffle(const Tensor& x, int r) {
    if (x.ndim() != 3 || r < 1 || x.dim(0) % (int64_t(r) * r) != 0)
        throw ShapeError(strf("pixel_shuffle: input ", shape_str(x.shape()), " with r=", r));
    const int64_t C = x.dim(0) / (int64_t(r) * r), H = x.dim(1), W = x.dim(2);
    Tensor out({C, H * r, W * r});
    const float* xd = x.data();
    float* od = out.data();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < r; ++j) {
                const float* plane = xd + ((c * r + i) * r + j) * H * W;
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t xx = 0; xx < W; ++xx)
                        od[(c * H * r + (y * r + i)) * W * r + (xx * r + j)] =
                            plane[y * W + xx];
            }
    return out;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Id Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> bw) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Id(nodes_.size() - 1);
}

Tensor& Tape::grad_buf(Id id) {
    Node& n = nodes_[size_t(id)];
    if (!n.grad.same_shape(n.value)) n.grad = Tensor(n.value.shape());
    return n.grad;
}

const Tensor& Tape::grad(Id id) { return grad_buf(id); }

void Tape::accum(Id id, const Tensor& g) {
    if (!nodes_[size_t(id)].requires_grad) return;
    Tensor& dst = grad_buf(id);
    check_same_shape(dst, g, "grad accumulate");
    float* d = dst.data();
    const float* s = g.data();
    for (int64_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

void Tape::zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor();
}

void Tape::backward(Id loss) {
    if (loss < 0 || size_t(loss) >= nodes_.size()) throw UsageError("backward: bad node id");
    if (nodes_[size_t(loss)].value.numel() != 1)
        throw UsageError(strf("backward requires a scalar loss, got ",
                              shape_str(nodes_[size_t(loss)].value.shape())));
    // Interior nodes are scratch space for a single sweep; only leaves (and
    // external bound sinks) accumulate across backward() calls. Clearing the
    // scratch here keeps a second sweep from re-propagating stale gradients.
    for (auto& n : nodes_)
        if (n.backward) n.grad = Tensor();
    grad_buf(loss).data()[0] = 1.f;
    for (Id id = loss; id >= 0; --id) {
        Node& n = nodes_[size_t(id)];
        if (!n.requires_grad || !n.backward) continue;
        if (!n.grad.same_shape(n.value)) continue;  // not reached from loss
        n.backward(*this);
    }
}

Tape::Id Tape::leaf(Tensor v, bool requires_grad) {
    return push(std::move(v), requires_grad, nullptr);
}

Tape::Id Tape::add(Id a, Id b) {
    Tensor out = ops::add(value(a), value(b));
    const bool rg = requires_grad(a) || requires_grad(b);
    Id id = push(std::move(out), rg, nullptr);
    nodes_[size_t(id)].backward = [id, a, b](Tape& t) {
        t.accum(a, t.grad(id));
        t.accum(b, t.grad(id));
    };
    return id;
}

Tape::Id Tape::add_scaled(Id a, Id b, double alpha) {
    Tensor out = ops::add(value(a), ops::scale(value(b), alpha));
    const bool rg = requires_grad(a) || requires_grad(b);
    Id id = push(std::move(out), rg, nullptr);
    nodes_[size_t(id)].backward = [id, a, b, alpha](Tape& t) {
        t.accum(a, t.grad(id));
        t.accum(b, ops::scale(t.grad(id), alpha));
    };
    return id;
}

Tape::Id Tape::add_const(Id a, Tensor c) {
    Tensor out = ops::add_broadcast(value(a), c);
    Id id = push(std::move(out), requires_grad(a), nullptr);
    nodes_[size_t(id)].backward = [id, a](Tape& t) { t.accum(a, t.grad(id)); };
    return id;
}

Tape::Id Tape::scale(Id a, double c) {
    Id id = push(ops::scale(value(a), c), requires_grad(a), nullptr);
    nodes_[size_t(id)].backward = [id, a, c](Tape& t) { t.accum(a, ops::scale(t.grad(id), c)); };
    return id;
}

Tape::Id Tape::matmul_nn(Id a, Id b) {
    const auto d = matmul_dims(value(a), value(b), false, "matmul");
    Tensor out = ops::matmul_nn(value(a), value(b));
    Id id = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
    nodes_[size_t(id)].backward = [id, a, b, d](Tape& t) {
        const Tensor& g = t.grad(id);
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        if (t.requires_grad(a)) {
            Tensor ga(av.shape());
            for (int64_t bi = 0; bi < d.batch; ++bi) {
                const float* B = d.b_shared ? bv.data() : bv.data() + bi * d.k * d.n;
                // ga = g @ b^T
                mm_nt(g.data() + bi * d.m * d.n, B, ga.data() + bi * d.m * d.k, d.m, d.n, d.k);
            }
            t.accum(a, ga);
        }
        if (t.requires_grad(b)) {
            Tensor gb(bv.shape());
            for (int64_t bi = 0; bi < d.batch; ++bi) {
                float* dst = d.b_shared ? gb.data() : gb.data() + bi * d.k * d.n;
                // gb = a^T @ g (accumulated over batch when shared)
                mm_tn(av.data() + bi * d.m * d.k, g.data() + bi * d.m * d.n, dst, d.m, d.k, d.n);
            }
            t.accum(b, gb);
        }
    };
    return id;
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
    const auto d = matmul_dims(value(a), value(b), true, "matmul_nt");
    Tensor out = ops::matmul_nt(value(a), value(b));
    Id id = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
    nodes_[size_t(id)].backward = [id, a, b, d](Tape& t) {
        const Tensor& g = t.grad(id);
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        if (t.requires_grad(a)) {
            Tensor ga(av.shape());
            for (int64_t bi = 0; bi < d.batch; ++bi) {
                const float* B = d.b_shared ? bv.data() : bv.data() + bi * d.n * d.k;
                // ga = g @ b
                mm_nn(g.data() + bi * d.m * d.n, B, ga.data() + bi * d.m * d.k, d.m, d.n, d.k);
            }
            t.accum(a, ga);
        }
        if (t.requires_grad(b)) {
            Tensor gb(bv.shape());
            for (int64_t bi = 0; bi < d.batch; ++bi) {
                float* dst = d.b_shared ? gb.data() : gb.data() + bi * d.n * d.k;
                // gb = g^T @ a
                mm_tn(g.data() + bi * d.m * d.n, av.data() + bi * d.m * d.k, dst, d.m, d.n, d.k);
            }
            t.accum(b, gb);
        }
    };
    return id;
}

Tape::Id Tape::conv2d(Id x, Tensor w, Tensor b) {
    Tensor out = ops::conv2d(value(x), w, b);
    Id id = push(std::move(out), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x, w = std::move(w)](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grad(id);
        const Tensor& xv = t.value(x);
        const int64_t Cin = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        const int64_t Cout = w.dim(0), ks = w.dim(2), pad = ks / 2;
        Tensor gx(xv.shape());
        const float* gd = g.data();
        const float* wd = w.data();
        float* gxd = gx.data();
        for (int64_t ci = 0; ci < Cin; ++ci)
            for (int64_t iy = 0; iy < H; ++iy)
                for (int64_t ix = 0; ix < W; ++ix) {
                    float acc = 0.f;
                    for (int64_t co = 0; co < Cout; ++co) {
                        const float* gplane = gd + co * H * W;
                        const float* wk = wd + ((co * Cin + ci) * ks) * ks;
                        for (int64_t ky = 0; ky < ks; ++ky) {
                            const int64_t oy = iy - ky + pad;
                            if (oy < 0 || oy >= H) continue;
                            for (int64_t kx = 0; kx < ks; ++kx) {
                                const int64_t ox = ix - kx + pad;
                                if (ox < 0 || ox >= W) continue;
                                acc += gplane[oy * W + ox] * wk[ky * ks + kx];
                            }
                        }
                    }
                    gxd[(ci * H + iy) * W + ix] = acc;
                }
        t.accum(x, gx);
    };
    return id;
}

Tape::Id Tape::layernorm(Id x, Tensor gamma, Tensor beta, float eps) {
    const Tensor& xv = value(x);
    Tensor out = ops::layernorm(xv, gamma, beta, eps);
    // cache row statistics for the backward pass
    const int64_t C = xv.dim(-1);
    const int64_t rows = xv.numel() / C;
    auto stats = std::make_shared<std::vector<double>>(size_t(rows) * 2);
    {
        const float* xd = xv.data();
        for (int64_t r = 0; r < rows; ++r) {
            const float* row = xd + r * C;
            double mean = 0;
            for (int64_t i = 0; i < C; ++i) mean += row[i];
            mean /= double(C);
            double var = 0;
            for (int64_t i = 0; i < C; ++i) {
                const double d = row[i] - mean;
                var += d * d;
            }
            var /= double(C);
            (*stats)[size_t(r) * 2] = mean;
            (*stats)[size_t(r) * 2 + 1] = 1.0 / std::sqrt(var + double(eps));
        }
    }
    Id id = push(std::move(out), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x, gamma = std::move(gamma), stats](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grad(id);
        const Tensor& xv2 = t.value(x);
        const int64_t C2 = xv2.dim(-1);
        const int64_t rows2 = xv2.numel() / C2;
        Tensor gx(xv2.shape());
        const float* xd = xv2.data();
        const float* gd = g.data();
        const float* gm = gamma.data();
        float* gxd = gx.data();
        for (int64_t r = 0; r < rows2; ++r) {
            const double mean = (*stats)[size_t(r) * 2];
            const double rstd = (*stats)[size_t(r) * 2 + 1];
            const float* xrow = xd + r * C2;
            const float* grow = gd + r * C2;
            double s1 = 0, s2 = 0;
            for (int64_t i = 0; i < C2; ++i) {
                const double gh = double(grow[i]) * double(gm[i]);
                const double xh = (double(xrow[i]) - mean) * rstd;
                s1 += gh;
                s2 += gh * xh;
            }
            s1 /= double(C2);
            s2 /= double(C2);
            float* gxrow = gxd + r * C2;
            for (int64_t i = 0; i < C2; ++i) {
                const double gh = double(grow[i]) * double(gm[i]);
                const double xh = (double(xrow[i]) - mean) * rstd;
                gxrow[i] = float(rstd * (gh - s1 - xh * s2));
            }
        }
        t.accum(x, gx);
    };
    return id;
}

Tape::Id Tape::gelu(Id x) {
    Id id = push(ops::gelu(value(x)), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grad(id);
        const Tensor& xv = t.value(x);
        Tensor gx(xv.shape());
        const float* xd = xv.data();
        const float* gd = g.data();
        float* gxd = gx.data();
        for (int64_t i = 0; i < xv.numel(); ++i) {
            const double v = xd[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kSqrt1_2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            gxd[i] = float(double(gd[i]) * (cdf + v * pdf));
        }
        t.accum(x, gx);
    };
    return id;
}

Tape::Id Tape::softmax(Id x, int axis) {
    Tensor out = ops::softmax(value(x), axis);
    const int nd = out.ndim();
    if (axis < 0) axis += nd;
    Id id = push(std::move(out), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x, axis](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& y = t.value(id);
        const Tensor& g = t.grad(id);
        const int64_t extent = y.dim(axis);
        int64_t inner = 1;
        for (int i = axis + 1; i < y.ndim(); ++i) inner *= y.dim(i);
        const int64_t outer = y.numel() / (extent * inner);
        Tensor gx(y.shape());
        const float* yd = y.data();
        const float* gd = g.data();
        float* gxd = gx.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * extent * inner + in;
                double dot = 0;
                for (int64_t k = 0; k < extent; ++k)
                    dot += double(gd[base + k * inner]) * double(yd[base + k * inner]);
                for (int64_t k = 0; k < extent; ++k) {
                    const int64_t p = base + k * inner;
                    gxd[p] = float(double(yd[p]) * (double(gd[p]) - dot));
                }
            }
        t.accum(x, gx);
    };
    return id;
}

Tape::Id Tape::gather_rows(Id x, std::vector<int64_t> map) {
    Tensor out = ops::gather_rows(value(x), map);
    Id id = push(std::move(out), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x, map = std::move(map)](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grad(id);
        const Tensor& xv = t.value(x);
        const int64_t C = xv.dim(1);
        Tensor gx(xv.shape());
        float* gxd = gx.data();
        const float* gd = g.data();
        for (size_t i = 0; i < map.size(); ++i) {
            float* dst = gxd + map[i] * C;
            const float* src = gd + int64_t(i) * C;
            for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
        }
        t.accum(x, gx);
    };
    return id;
}

Tape::Id Tape::permute(Id x, std::vector<int> perm) {
    Tensor out = ops::permute(value(x), perm);
    Id id = push(std::move(out), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x, perm = std::move(perm)](Tape& t) {
        if (!t.requires_grad(x)) return;
        std::vector<int> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[size_t(perm[i])] = int(i);
        t.accum(x, ops::permute(t.grad(id), inv));
    };
    return id;
}

Tape::Id Tape::reshape(Id x, Shape shape) {
    Tensor out = value(x).reshaped(std::move(shape));
    Id id = push(std::move(out), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x](Tape& t) {
        if (!t.requires_grad(x)) return;
        t.accum(x, t.grad(id).reshaped(t.value(x).shape()));
    };
    return id;
}

Tape::Id Tape::slice0(Id x, int64_t start, int64_t len) {
    Tensor out = ops::slice0(value(x), start, len);
    Id id = push(std::move(out), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x, start, len](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grad(id);
        const Tensor& xv = t.value(x);
        Tensor gx(xv.shape());
        const int64_t row = xv.numel() / xv.dim(0);
        float* dst = gx.data() + start * row;
        const float* src = g.data();
        for (int64_t i = 0; i < len * row; ++i) dst[i] += src[i];
        t.accum(x, gx);
    };
    return id;
}

Tape::Id Tape::pixel_shuffle(Id x, int r) {
    Tensor out = ops::pixel_shuffle(value(x), r);
    Id id = push(std::move(out), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x, r](Tape& t) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grad(id);
        const Tensor& xv = t.value(x);
        const int64_t C = g.dim(0), Hr = g.dim(1), Wr = g.dim(2);
        const int64_t H = Hr / r, W = Wr / r;
        Tensor gx(xv.shape());
        const float* gd = g.data();
        float* gxd = gx.data();
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < r; ++j) {
                    float* plane = gxd + ((c * r + i) * r + j) * H * W;
                    for (int64_t y = 0; y < H; ++y)
                        for (int64_t xx = 0; xx < W; ++xx)
                            plane[y * W + xx] +=
                                gd[(c * Hr + (y * r + i)) * Wr + (xx * r + j)];
                }
        t.accum(x, gx);
    };
    return id;
}

Tape::Id Tape::fake_quant(Id x, const QuantizerState* q, BoundGrad* bg) {
    Tensor out = fake_quantize(value(x), *q);
    const bool rg = requires_grad(x) || (bg != nullptr && q->trainable());
    Id id = push(std::move(out), rg, nullptr);
    nodes_[size_t(id)].backward = [id, x, q, bg](Tape& t) {
        const Tensor& g = t.grad(id);
        const Tensor& xv = t.value(x);
        Tensor gx;
        const bool want_gx = t.requires_grad(x);
        double* gl = (bg && q->trainable()) ? &bg->l : nullptr;
        double* gu = (bg && q->trainable()) ? &bg->u : nullptr;
        fake_quantize_backward(xv, *q, g, want_gx ? &gx : nullptr, gl, gu);
        if (want_gx) t.accum(x, gx);
    };
    return id;
}

Tape::Id Tape::mean_abs_diff(Id x, Tensor target) {
    const Tensor& xv = value(x);
    check_same_shape(xv, target, "mean_abs_diff");
    double sum = 0;
    const float* a = xv.data();
    const float* b = target.data();
    const int64_t n = xv.numel();
    for (int64_t i = 0; i < n; ++i) sum += std::abs(double(a[i]) - double(b[i]));
    Id id = push(Tensor::scalar(float(sum / double(n))), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x, target = std::move(target)](Tape& t) {
        if (!t.requires_grad(x)) return;
        const float gscale = t.grad(id).data()[0];
        const Tensor& xv2 = t.value(x);
        const int64_t n2 = xv2.numel();
        Tensor gx(xv2.shape());
        const float* a2 = xv2.data();
        const float* b2 = target.data();
        float* gd = gx.data();
        const float inv = gscale / float(n2);
        for (int64_t i = 0; i < n2; ++i) {
            const float d = a2[i] - b2[i];
            gd[i] = d > 0 ? inv : (d < 0 ? -inv : 0.f);
        }
        t.accum(x, gx);
    };
    return id;
}

Tape::Id Tape::feature_distance(Id x, Tensor target) {
    const Tensor& xv = value(x);
    check_same_shape(xv, target, "feature_distance");
    const int64_t n = xv.numel();
    double rx = 0, rt = 0;
    const float* a = xv.data();
    const float* b = target.data();
    for (int64_t i = 0; i < n; ++i) {
        rx += double(a[i]) * double(a[i]);
        rt += double(b[i]) * double(b[i]);
    }
    rx = std::sqrt(rx);
    rt = std::sqrt(rt);
    if (rx == 0.0 || rt == 0.0)
        throw NumericError("feature_distance: zero-norm feature map");
    double j2 = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = double(a[i]) / rx - double(b[i]) / rt;
        j2 += d * d;
    }
    const double J = std::sqrt(j2);
    Id id = push(Tensor::scalar(float(J / double(n))), requires_grad(x), nullptr);
    nodes_[size_t(id)].backward = [id, x, target = std::move(target), rx, rt, J](Tape& t) {
        if (!t.requires_grad(x) || J == 0.0) return;
        const double gscale = t.grad(id).data()[0];
        const Tensor& xv2 = t.value(x);
        const int64_t n2 = xv2.numel();
        const float* a2 = xv2.data();
        const float* b2 = target.data();
        // d = xhat - that;  dL/dx = (1/(n J rx)) (d - xhat (xhat . d))
        double xdotd = 0;
        for (int64_t i = 0; i < n2; ++i) {
            const double xh = double(a2[i]) / rx;
            xdotd += xh * (xh - double(b2[i]) / rt);
        }
        Tensor gx(xv2.shape());
        float* gd = gx.data();
        const double c = gscale / (double(n2) * J * rx);
        for (int64_t i = 0; i < n2; ++i) {
            const double xh = double(a2[i]) / rx;
            const double d = xh - double(b2[i]) / rt;
            gd[i] = float(c * (d - xh * xdotd));
        }
        t.accum(x, gx);
    };
    return id;
}

}  // namespace tdq
