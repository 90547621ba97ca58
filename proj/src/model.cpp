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
#include "tdq/model.hpp"

#include <algorithm>
#include <cmath>

#include "tdq/common.hpp"

namespace tdq {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

ModelConfig ModelConfig::light(int scale) {
    ModelConfig c;
    c.scale = scale;
    c.validate();
    return c;
}

ModelConfig ModelConfig::toy(int scale) {
    ModelConfig c;
    c.embed_dim = 12;
    c.num_heads = 2;
    c.window = 4;
    c.mlp_ratio = 2.0;
    c.num_blocks = 1;
    c.depth = 2;
    c.scale = scale;
    c.validate();
    return c;
}

void ModelConfig::validate() const {
    if (embed_dim < 1 || num_heads < 1 || window < 2 || num_blocks < 1 || depth < 1)
        throw UsageError("model config: dimensions must be positive");
    if (embed_dim % num_heads != 0)
        throw UsageError(strf("model config: embed dim ", embed_dim, " not divisible by ",
                              num_heads, " heads"));
    if (scale < 2 || scale > 4)
        throw UsageError(strf("model config: unsupported upscaling factor ", scale));
    if (!(mlp_ratio > 0.0) || mlp_dim() < 1)
        throw UsageError("model config: bad mlp ratio");
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.embed_dim == b.embed_dim && a.num_heads == b.num_heads && a.window == b.window &&
           a.mlp_ratio == b.mlp_ratio && a.num_blocks == b.num_blocks && a.depth == b.depth &&
           a.scale == b.scale;
}

// ---------------------------------------------------------------------------
// Parameter table and quantizer sites
// ---------------------------------------------------------------------------

std::vector<ParamSpec> enumerate_params(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t C = cfg.embed_dim;
    const int64_t Hm = cfg.mlp_dim();
    const int64_t tbl = int64_t(2 * cfg.window - 1) * int64_t(2 * cfg.window - 1);
    const int64_t up = 3 * int64_t(cfg.scale) * int64_t(cfg.scale);

    std::vector<ParamSpec> out;
    out.push_back({"conv_first.weight", {C, 3, 3, 3}});
    out.push_back({"conv_first.bias", {C}});
    out.push_back({"patch_embed.norm.weight", {C}});
    out.push_back({"patch_embed.norm.bias", {C}});
    for (int g = 0; g < cfg.num_blocks; ++g) {
        for (int b = 0; b < cfg.depth; ++b) {
            const std::string p = strf("layers.", g, ".blocks.", b, ".");
            out.push_back({p + "norm1.weight", {C}});
            out.push_back({p + "norm1.bias", {C}});
            out.push_back({p + "attn.qkv.weight", {3 * C, C}});
            out.push_back({p + "attn.qkv.bias", {3 * C}});
            out.push_back({p + "attn.relative_position_bias_table", {tbl, cfg.num_heads}});
            out.push_back({p + "attn.proj.weight", {C, C}});
            out.push_back({p + "attn.proj.bias", {C}});
            out.push_back({p + "norm2.weight", {C}});
            out.push_back({p + "norm2.bias", {C}});
            out.push_back({p + "mlp.fc1.weight", {Hm, C}});
            out.push_back({p + "mlp.fc1.bias", {Hm}});
            out.push_back({p + "mlp.fc2.weight", {C, Hm}});
            out.push_back({p + "mlp.fc2.bias", {C}});
        }
        const std::string p = strf("layers.", g, ".");
        out.push_back({p + "conv.weight", {C, C, 3, 3}});
        out.push_back({p + "conv.bias", {C}});
    }
    out.push_back({"norm.weight", {C}});
    out.push_back({"norm.bias", {C}});
    out.push_back({"upsample.conv.weight", {up, C, 3, 3}});
    out.push_back({"upsample.conv.bias", {up}});
    return out;
}

int64_t count_params(const ModelConfig& cfg) {
    int64_t n = 0;
    for (const auto& p : enumerate_params(cfg)) n += shape_numel(p.shape);
    return n;
}

int64_t count_quantizable_params(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t C = cfg.embed_dim;
    const int64_t Hm = cfg.mlp_dim();
    // per attention block: qkv [3C,C] + proj [C,C] + fc1 [Hm,C] + fc2 [C,Hm]
    return int64_t(cfg.total_depth()) * (4 * C * C + 2 * C * Hm);
}

std::vector<QuantizerSite> quantizer_sites(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<QuantizerSite> out;
    for (int g = 0; g < cfg.num_blocks; ++g)
        for (int b = 0; b < cfg.depth; ++b) {
            // catalog order == the order the forward pass visits the sites
            const std::string p = strf("layers.", g, ".blocks.", b, ".");
            out.push_back({p + "attn.qkv.input", false, false});
            out.push_back({p + "attn.qkv.weight", true, false});
            out.push_back({p + "attn.q", false, false});
            out.push_back({p + "attn.k", false, false});
            out.push_back({p + "attn.v", false, false});
            out.push_back({p + "attn.softmax", false, true});
            out.push_back({p + "attn.proj.input", false, false});
            out.push_back({p + "attn.proj.weight", true, false});
            out.push_back({p + "mlp.fc1.input", false, false});
            out.push_back({p + "mlp.fc1.weight", true, false});
            out.push_back({p + "mlp.fc2.input", false, false});
            out.push_back({p + "mlp.fc2.weight", true, false});
        }
    return out;
}

Tensor FakeQuantHooks::site(const std::string& id, const Tensor& v) {
    auto it = qs_.find(id);
    if (it == qs_.end() || !it->second.active()) return v;
    return fake_quantize(v, it->second);
}

// ---------------------------------------------------------------------------
// Window bookkeeping
// ---------------------------------------------------------------------------

WindowMaps window_maps(int64_t h, int64_t w, int m, int shift) {
    if (m < 1 || h < m || w < m || h % m != 0 || w % m != 0)
        throw UsageError(strf("window partition of ", h, "x", w, " into ", m, "x", m, " windows"));
    if (shift < 0 || shift >= m) throw UsageError(strf("window shift ", shift, " out of [0,", m, ")"));
    const int64_t T = h * w;
    WindowMaps maps;
    maps.fwd.resize(size_t(T));
    maps.inv.resize(size_t(T));
    const int64_t wy = h / m, wx = w / m;
    int64_t p = 0;
    for (int64_t a = 0; a < wy; ++a)
        for (int64_t b = 0; b < wx; ++b)
            for (int64_t cy = 0; cy < m; ++cy)
                for (int64_t cx = 0; cx < m; ++cx, ++p) {
                    // window cell in the cyclically shifted image; the source
                    // token sits `shift` further down/right, wrapping around
                    const int64_t sy = (a * m + cy + shift) % h;
                    const int64_t sx = (b * m + cx + shift) % w;
                    maps.fwd[size_t(p)] = sy * w + sx;
                    maps.inv[size_t(sy * w + sx)] = p;
                }
    return maps;
}

Tensor attention_mask(int64_t h, int64_t w, int m, int shift) {
    if (shift < 1 || shift >= m) throw UsageError("attention mask needs a shift in [1, window)");
    if (h % m != 0 || w % m != 0)
        throw UsageError(strf("attention mask for unaligned image ", h, "x", w));
    // label every window cell by the wrap band of its shifted coordinate:
    // [0, dim-m) is bulk, [dim-m, dim-shift) the tail that stays contiguous,
    // [dim-shift, dim) the part wrapped in from the opposite edge
    auto band = [](int64_t v, int64_t dim, int64_t s, int64_t mm) {
        if (v < dim - mm) return 0;
        return v < dim - s ? 1 : 2;
    };
    const int64_t wy = h / m, wx = w / m, nw = wy * wx;
    const int64_t M2 = int64_t(m) * m;
    std::vector<int> label(size_t(M2), 0);
    Tensor mask({nw, M2, M2});
    for (int64_t a = 0; a < wy; ++a)
        for (int64_t b = 0; b < wx; ++b) {
            for (int64_t cy = 0; cy < m; ++cy)
                for (int64_t cx = 0; cx < m; ++cx)
                    label[size_t(cy * m + cx)] =
                        3 * band(a * m + cy, h, shift, m) + band(b * m + cx, w, shift, m);
            float* dst = mask.data() + (a * wx + b) * M2 * M2;
            for (int64_t i = 0; i < M2; ++i)
                for (int64_t j = 0; j < M2; ++j)
                    dst[i * M2 + j] = (label[size_t(i)] == label[size_t(j)]) ? 0.f : -100.f;
        }
    return mask;
}

Tensor reflect_pad_to_multiple(const Tensor& img, int m) {
    if (img.ndim() != 3) throw ShapeError(strf("expected [C,H,W], got ", shape_str(img.shape())));
    if (m < 1) throw UsageError("pad multiple must be positive");
    const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const int64_t Hp = (H + m - 1) / m * m, Wp = (W + m - 1) / m * m;
    if (Hp == H && Wp == W) return img;
    auto mirror = [](int64_t v, int64_t n) {
        if (n == 1) return int64_t(0);
        const int64_t period = 2 * (n - 1);
        v %= period;
        return v < n ? v : period - v;
    };
    Tensor out({C, Hp, Wp});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < Hp; ++y) {
            const int64_t sy = mirror(y, H);
            for (int64_t x = 0; x < Wp; ++x)
                out.data()[(c * Hp + y) * Wp + x] =
                    img.data()[(c * H + sy) * W + mirror(x, W)];
        }
    return out;
}

// ---------------------------------------------------------------------------
// Shared forward helpers
// ---------------------------------------------------------------------------

namespace {

std::vector<int64_t> relative_index_table(int m) {
    const int M2 = m * m;
    std::vector<int64_t> idx(size_t(M2) * size_t(M2));
    for (int i = 0; i < M2; ++i)
        for (int j = 0; j < M2; ++j) {
            const int yi = i / m, xi = i % m, yj = j / m, xj = j % m;
            idx[size_t(i) * size_t(M2) + size_t(j)] =
                int64_t(yi - yj + m - 1) * (2 * m - 1) + int64_t(xi - xj + m - 1);
        }
    return idx;
}

// table [(2m-1)^2, heads] -> per-head pairwise bias [heads, m^2, m^2]
Tensor relative_bias(const Tensor& table, int m, int heads) {
    const int64_t M2 = int64_t(m) * m;
    const auto idx = relative_index_table(m);
    Tensor out({heads, M2, M2});
    for (int64_t a = 0; a < heads; ++a)
        for (int64_t i = 0; i < M2; ++i)
            for (int64_t j = 0; j < M2; ++j)
                out.data()[(a * M2 + i) * M2 + j] =
                    table.data()[idx[size_t(i * M2 + j)] * heads + a];
    return out;
}

Tensor crop_hw(const Tensor& img, int64_t th, int64_t tw) {
    const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    if (th == H && tw == W) return img;
    Tensor out({C, th, tw});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < th; ++y)
            for (int64_t x = 0; x < tw; ++x)
                out.data()[(c * th + y) * tw + x] = img.data()[(c * H + y) * W + x];
    return out;
}

Tensor mean_image() { return Tensor({3, 1, 1}, {kMeanR, kMeanG, kMeanB}); }

// copy batch slice b of a [B, M, N] tensor into [M, N]
Tensor batch_slice(const Tensor& t, int64_t b) {
    const int64_t M = t.dim(1), N = t.dim(2);
    Tensor out({M, N});
    std::copy_n(t.data() + b * M * N, M * N, out.data());
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg) : cfg_(cfg) {
    for (const auto& spec : enumerate_params(cfg_)) params_.emplace(spec.name, Tensor(spec.shape));
}

Model Model::random_init(ModelConfig cfg, Rng& rng) {
    Model m(cfg);
    for (auto& [name, t] : m.params_) {
        const bool is_table = name.find("relative_position_bias_table") != std::string::npos;
        if (is_table) {
            for (auto& v : t.vec()) v = float(rng.normal(0.0, 0.1));
        } else if (t.ndim() >= 2) {
            // linear [out, in] or conv [out, in, k, k]
            int64_t fan_in = t.dim(1);
            for (int i = 2; i < t.ndim(); ++i) fan_in *= t.dim(i);
            const double sd = 1.0 / std::sqrt(double(fan_in));
            for (auto& v : t.vec()) v = float(rng.normal(0.0, sd));
        } else if (name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0) {
            // layernorm scales hover around one
            for (auto& v : t.vec()) v = float(rng.uniform(0.9, 1.1));
        } else {
            for (auto& v : t.vec()) v = float(rng.uniform(-0.02, 0.02));
        }
    }
    return m;
}

const Tensor& Model::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw UsageError(strf("no parameter named '", name, "'"));
    return it->second;
}

void Model::set_param(const std::string& name, Tensor t) {
    auto it = params_.find(name);
    if (it == params_.end()) throw UsageError(strf("no parameter named '", name, "'"));
    if (!it->second.same_shape(t))
        throw ShapeError(strf("parameter '", name, "' expects ", shape_str(it->second.shape()),
                              ", got ", shape_str(t.shape())));
    it->second = std::move(t);
}

void Model::validate_params() const {
    for (const auto& spec : enumerate_params(cfg_)) {
        auto it = params_.find(spec.name);
        if (it == params_.end()) throw FormatError(strf("missing parameter '", spec.name, "'"));
        if (it->second.shape() != spec.shape)
            throw FormatError(strf("parameter '", spec.name, "' has shape ",
                                   shape_str(it->second.shape()), ", expected ",
                                   shape_str(spec.shape)));
    }
}

// ---------------------------------------------------------------------------
// Float forward (plain / hooked)
// ---------------------------------------------------------------------------

Model::ForwardResult Model::forward(const Tensor& lr, QuantHooks* hooks,
                                    bool want_features) const {
    if (lr.ndim() != 3 || lr.dim(0) != 3)
        throw ShapeError(strf("expected a [3,H,W] input, got ", shape_str(lr.shape())));
    if (lr.has_nonfinite()) throw NumericError("non-finite values in model input");
    const int m = cfg_.window;
    const int heads = cfg_.num_heads;
    const int64_t C = cfg_.embed_dim;
    const int64_t d = cfg_.head_dim();
    const int64_t M2 = int64_t(m) * m;
    const int64_t H0 = lr.dim(1), W0 = lr.dim(2);

    Tensor x = reflect_pad_to_multiple(lr, m);
    const int64_t H = x.dim(1), W = x.dim(2);
    const int64_t T = H * W;
    const int64_t nw = (H / m) * (W / m);

    auto hq = [&](const std::string& id, Tensor v) {
        return hooks ? hooks->site(id, v) : std::move(v);
    };

    const Tensor mean = mean_image();
    x = ops::add_broadcast(x, ops::scale(mean, -1.0));
    const Tensor f0 = ops::conv2d(x, param("conv_first.weight"), param("conv_first.bias"));
    Tensor tokens = ops::permute(f0.reshaped({C, T}), {1, 0});
    tokens = ops::layernorm(tokens, param("patch_embed.norm.weight"), param("patch_embed.norm.bias"));

    const int shift = m / 2;
    const bool do_shift = (H > m || W > m) && shift > 0;
    const WindowMaps maps0 = window_maps(H, W, m, 0);
    const WindowMaps maps1 = do_shift ? window_maps(H, W, m, shift) : maps0;
    const Tensor mask = do_shift ? attention_mask(H, W, m, shift) : Tensor();

    auto partition = [&](const Tensor& v, const WindowMaps& maps) {
        Tensor g = ops::gather_rows(v, maps.fwd);
        g = g.reshaped({nw, M2, heads, d});
        g = ops::permute(g, {0, 2, 1, 3});
        return g.reshaped({nw * heads, M2, d});
    };

    std::vector<Tensor> feats;
    for (int g = 0; g < cfg_.num_blocks; ++g) {
        const Tensor group_in = tokens;
        for (int b = 0; b < cfg_.depth; ++b) {
            const std::string pre = strf("layers.", g, ".blocks.", b, ".");
            const bool shifted = do_shift && (b % 2 == 1);
            const WindowMaps& maps = shifted ? maps1 : maps0;

            // ---- window attention ----
            Tensor t = ops::layernorm(tokens, param(pre + "norm1.weight"), param(pre + "norm1.bias"));
            t = hq(pre + "attn.qkv.input", std::move(t));
            Tensor wq = hq(pre + "attn.qkv.weight", param(pre + "attn.qkv.weight"));
            Tensor qkv = ops::matmul_nt(t, wq);
            qkv = ops::add_broadcast(qkv, param(pre + "attn.qkv.bias").reshaped({1, 3 * C}));
            Tensor split = ops::permute(qkv.reshaped({T, 3, C}), {1, 0, 2});
            Tensor q = hq(pre + "attn.q", partition(ops::slice0(split, 0, 1).reshaped({T, C}), maps));
            Tensor k = hq(pre + "attn.k", partition(ops::slice0(split, 1, 1).reshaped({T, C}), maps));
            Tensor v = hq(pre + "attn.v", partition(ops::slice0(split, 2, 1).reshaped({T, C}), maps));

            Tensor attn = ops::scale(ops::matmul_nt(q, k), 1.0 / std::sqrt(double(d)));
            attn = attn.reshaped({nw, heads, M2, M2});
            const Tensor bias =
                relative_bias(param(pre + "attn.relative_position_bias_table"), m, heads);
            attn = ops::add_broadcast(attn, bias.reshaped({1, heads, M2, M2}));
            if (shifted) attn = ops::add_broadcast(attn, mask.reshaped({nw, 1, M2, M2}));
            attn = ops::softmax(attn.reshaped({nw * heads, M2, M2}), 2);
            attn = hq(pre + "attn.softmax", std::move(attn));

            Tensor o = ops::matmul_nn(attn, v);
            o = ops::permute(o.reshaped({nw, heads, M2, d}), {0, 2, 1, 3}).reshaped({nw * M2, C});
            o = ops::gather_rows(o, maps.inv);
            o = hq(pre + "attn.proj.input", std::move(o));
            Tensor wp = hq(pre + "attn.proj.weight", param(pre + "attn.proj.weight"));
            o = ops::matmul_nt(o, wp);
            o = ops::add_broadcast(o, param(pre + "attn.proj.bias").reshaped({1, C}));
            tokens = ops::add(tokens, o);

            // ---- mlp ----
            t = ops::layernorm(tokens, param(pre + "norm2.weight"), param(pre + "norm2.bias"));
            t = hq(pre + "mlp.fc1.input", std::move(t));
            Tensor w1 = hq(pre + "mlp.fc1.weight", param(pre + "mlp.fc1.weight"));
            t = ops::matmul_nt(t, w1);
            t = ops::add_broadcast(t, param(pre + "mlp.fc1.bias").reshaped({1, cfg_.mlp_dim()}));
            t = ops::gelu(t);
            t = hq(pre + "mlp.fc2.input", std::move(t));
            Tensor w2 = hq(pre + "mlp.fc2.weight", param(pre + "mlp.fc2.weight"));
            t = ops::matmul_nt(t, w2);
            t = ops::add_broadcast(t, param(pre + "mlp.fc2.bias").reshaped({1, C}));
            tokens = ops::add(tokens, t);
        }
        Tensor img = ops::permute(tokens, {1, 0}).reshaped({C, H, W});
        img = ops::conv2d(img, param(strf("layers.", g, ".conv.weight")),
                          param(strf("layers.", g, ".conv.bias")));
        tokens = ops::add(group_in, ops::permute(img.reshaped({C, T}), {1, 0}));
        if (want_features) feats.push_back(tokens);
    }

    tokens = ops::layernorm(tokens, param("norm.weight"), param("norm.bias"));
    Tensor body = ops::permute(tokens, {1, 0}).reshaped({C, H, W});
    body = ops::add(body, f0);
    Tensor up = ops::conv2d(body, param("upsample.conv.weight"), param("upsample.conv.bias"));
    Tensor hr = ops::pixel_shuffle(up, cfg_.scale);
    hr = ops::add_broadcast(hr, mean);
    hr = crop_hw(hr, cfg_.scale * H0, cfg_.scale * W0);
    if (hr.has_nonfinite()) throw NumericError("non-finite values in model output");
    return {std::move(hr), std::move(feats)};
}

// ---------------------------------------------------------------------------
// Differentiable forward (bound calibration)
// ---------------------------------------------------------------------------

Model::TapeResult Model::forward_tape(Tape& tp, const Tensor& lr, const QuantizerSet& qs,
                                      std::map<std::string, BoundGrad>* sinks) const {
    if (lr.ndim() != 3 || lr.dim(0) != 3)
        throw ShapeError(strf("expected a [3,H,W] input, got ", shape_str(lr.shape())));
    const int m = cfg_.window;
    const int heads = cfg_.num_heads;
    const int64_t C = cfg_.embed_dim;
    const int64_t d = cfg_.head_dim();
    const int64_t M2 = int64_t(m) * m;
    const int64_t H = lr.dim(1), W = lr.dim(2);
    if (H % m != 0 || W % m != 0)
        throw UsageError(strf("calibration patches must align to the ", m, "-pixel window, got ",
                              H, "x", W));
    const int64_t T = H * W;
    const int64_t nw = (H / m) * (W / m);

    auto site = [&](Tape::Id v, const std::string& id) {
        auto it = qs.find(id);
        if (it == qs.end() || !it->second.active()) return v;
        BoundGrad* bg = sinks ? &(*sinks)[id] : nullptr;
        return tp.fake_quant(v, &it->second, bg);
    };

    // everything upstream of the first quantizer is constant: run it outside
    // the tape
    const Tensor mean = mean_image();
    Tensor x = ops::add_broadcast(lr, ops::scale(mean, -1.0));
    const Tensor f0 = ops::conv2d(x, param("conv_first.weight"), param("conv_first.bias"));
    Tensor tok0 = ops::permute(f0.reshaped({C, T}), {1, 0});
    tok0 = ops::layernorm(tok0, param("patch_embed.norm.weight"), param("patch_embed.norm.bias"));

    const int shift = m / 2;
    const bool do_shift = (H > m || W > m) && shift > 0;
    const WindowMaps maps0 = window_maps(H, W, m, 0);
    const WindowMaps maps1 = do_shift ? window_maps(H, W, m, shift) : maps0;
    const Tensor mask = do_shift ? attention_mask(H, W, m, shift) : Tensor();

    auto partition = [&](Tape::Id v, const WindowMaps& maps) {
        Tape::Id g = tp.gather_rows(v, maps.fwd);
        g = tp.reshape(g, {nw, M2, heads, d});
        g = tp.permute(g, {0, 2, 1, 3});
        return tp.reshape(g, {nw * heads, M2, d});
    };

    Tape::Id tokens = tp.leaf(tok0, false);
    TapeResult result;
    for (int g = 0; g < cfg_.num_blocks; ++g) {
        const Tape::Id group_in = tokens;
        for (int b = 0; b < cfg_.depth; ++b) {
            const std::string pre = strf("layers.", g, ".blocks.", b, ".");
            const bool shifted = do_shift && (b % 2 == 1);
            const WindowMaps& maps = shifted ? maps1 : maps0;

            Tape::Id t = tp.layernorm(tokens, param(pre + "norm1.weight"), param(pre + "norm1.bias"));
            t = site(t, pre + "attn.qkv.input");
            Tape::Id wq = site(tp.leaf(param(pre + "attn.qkv.weight")), pre + "attn.qkv.weight");
            Tape::Id qkv = tp.matmul_nt(t, wq);
            qkv = tp.add_const(qkv, param(pre + "attn.qkv.bias").reshaped({1, 3 * C}));
            Tape::Id split = tp.permute(tp.reshape(qkv, {T, 3, C}), {1, 0, 2});
            Tape::Id q = site(partition(tp.reshape(tp.slice0(split, 0, 1), {T, C}), maps),
                              pre + "attn.q");
            Tape::Id k = site(partition(tp.reshape(tp.slice0(split, 1, 1), {T, C}), maps),
                              pre + "attn.k");
            Tape::Id v = site(partition(tp.reshape(tp.slice0(split, 2, 1), {T, C}), maps),
                              pre + "attn.v");

            Tape::Id attn = tp.scale(tp.matmul_nt(q, k), 1.0 / std::sqrt(double(d)));
            attn = tp.reshape(attn, {nw, heads, M2, M2});
            const Tensor bias =
                relative_bias(param(pre + "attn.relative_position_bias_table"), m, heads);
            attn = tp.add_const(attn, bias.reshaped({1, heads, M2, M2}));
            if (shifted) attn = tp.add_const(attn, mask.reshaped({nw, 1, M2, M2}));
            attn = tp.softmax(tp.reshape(attn, {nw * heads, M2, M2}), 2);
            attn = site(attn, pre + "attn.softmax");

            Tape::Id o = tp.matmul_nn(attn, v);
            o = tp.reshape(tp.permute(tp.reshape(o, {nw, heads, M2, d}), {0, 2, 1, 3}),
                           {nw * M2, C});
            o = tp.gather_rows(o, maps.inv);
            o = site(o, pre + "attn.proj.input");
            Tape::Id wp = site(tp.leaf(param(pre + "attn.proj.weight")), pre + "attn.proj.weight");
            o = tp.matmul_nt(o, wp);
            o = tp.add_const(o, param(pre + "attn.proj.bias").reshaped({1, C}));
            tokens = tp.add(tokens, o);

            t = tp.layernorm(tokens, param(pre + "norm2.weight"), param(pre + "norm2.bias"));
            t = site(t, pre + "mlp.fc1.input");
            Tape::Id w1 = site(tp.leaf(param(pre + "mlp.fc1.weight")), pre + "mlp.fc1.weight");
            t = tp.matmul_nt(t, w1);
            t = tp.add_const(t, param(pre + "mlp.fc1.bias").reshaped({1, cfg_.mlp_dim()}));
            t = tp.gelu(t);
            t = site(t, pre + "mlp.fc2.input");
            Tape::Id w2 = site(tp.leaf(param(pre + "mlp.fc2.weight")), pre + "mlp.fc2.weight");
            t = tp.matmul_nt(t, w2);
            t = tp.add_const(t, param(pre + "mlp.fc2.bias").reshaped({1, C}));
            tokens = tp.add(tokens, t);
        }
        Tape::Id img = tp.reshape(tp.permute(tokens, {1, 0}), {C, H, W});
        img = tp.conv2d(img, param(strf("layers.", g, ".conv.weight")),
                        param(strf("layers.", g, ".conv.bias")));
        tokens = tp.add(group_in, tp.permute(tp.reshape(img, {C, T}), {1, 0}));
        result.features.push_back(tokens);
    }

    tokens = tp.layernorm(tokens, param("norm.weight"), param("norm.bias"));
    Tape::Id body = tp.reshape(tp.permute(tokens, {1, 0}), {C, H, W});
    body = tp.add_const(body, f0);
    Tape::Id up = tp.conv2d(body, param("upsample.conv.weight"), param("upsample.conv.bias"));
    Tape::Id hr = tp.pixel_shuffle(up, cfg_.scale);
    result.output = tp.add_const(hr, mean);
    return result;
}

// ---------------------------------------------------------------------------
// Packed integer forward (deployment)
// ---------------------------------------------------------------------------

Tensor Model::forward_packed(const Tensor& lr, const QuantizerSet& qs,
                             const std::map<std::string, PackedIntTensor>& packed_weights) const {
    if (lr.ndim() != 3 || lr.dim(0) != 3)
        throw ShapeError(strf("expected a [3,H,W] input, got ", shape_str(lr.shape())));
    const int m = cfg_.window;
    const int heads = cfg_.num_heads;
    const int64_t C = cfg_.embed_dim;
    const int64_t d = cfg_.head_dim();
    const int64_t M2 = int64_t(m) * m;
    const int64_t H0 = lr.dim(1), W0 = lr.dim(2);

    Tensor x = reflect_pad_to_multiple(lr, m);
    const int64_t H = x.dim(1), W = x.dim(2);
    const int64_t T = H * W;
    const int64_t nw = (H / m) * (W / m);

    auto q_of = [&](const std::string& id) -> const QuantizerState* {
        auto it = qs.find(id);
        return (it != qs.end() && it->second.active()) ? &it->second : nullptr;
    };
    auto maybe_fake = [&](const Tensor& v, const std::string& id) {
        const QuantizerState* q = q_of(id);
        return q ? fake_quantize(v, *q) : v;
    };
    // x2d [T, K] @ weight[site]^T + bias, on integer codes when both sides
    // carry active quantizers; float fallback otherwise
    auto linear = [&](const Tensor& x2d, const std::string& in_id, const std::string& w_id,
                      const Tensor& bias) {
        const QuantizerState* qx = q_of(in_id);
        const QuantizerState* qw = q_of(w_id);
        if (qx && qw) {
            auto it = packed_weights.find(w_id);
            if (it == packed_weights.end())
                throw UsageError(strf("no packed codes for weight site '", w_id, "'"));
            PackedIntTensor px = pack_tensor(x2d, *qx);
            Tensor y = int_linear(px, it->second, px.bounds, it->second.bounds, &bias);
            return y;
        }
        Tensor y = ops::matmul_nt(maybe_fake(x2d, in_id), maybe_fake(param(w_id), w_id));
        return ops::add_broadcast(y, bias.reshaped({1, bias.numel()}));
    };
    // batched a [B, M, K] @ b [B, N, K]^T with per-slice integer products when
    // both operands carry active quantizers; callers pre-quantize the active
    // side before falling back to float
    auto bmm_nt = [&](const Tensor& a, const Tensor& b, const QuantizerState* qa,
                      const QuantizerState* qb) {
        if (!(qa && qb)) return ops::matmul_nt(a, b);
        const int64_t B = a.dim(0), M = a.dim(1), N = b.dim(1);
        Tensor out({B, M, N});
        for (int64_t i = 0; i < B; ++i) {
            PackedIntTensor pa = pack_tensor(batch_slice(a, i), *qa);
            PackedIntTensor pb = pack_tensor(batch_slice(b, i), *qb);
            Tensor y = int_linear(pa, pb, pa.bounds, pb.bounds, nullptr);
            std::copy_n(y.data(), M * N, out.data() + i * M * N);
        }
        return out;
    };

    const Tensor mean = mean_image();
    x = ops::add_broadcast(x, ops::scale(mean, -1.0));
    const Tensor f0 = ops::conv2d(x, param("conv_first.weight"), param("conv_first.bias"));
    Tensor tokens = ops::permute(f0.reshaped({C, T}), {1, 0});
    tokens = ops::layernorm(tokens, param("patch_embed.norm.weight"), param("patch_embed.norm.bias"));

    const int shift = m / 2;
    const bool do_shift = (H > m || W > m) && shift > 0;
    const WindowMaps maps0 = window_maps(H, W, m, 0);
    const WindowMaps maps1 = do_shift ? window_maps(H, W, m, shift) : maps0;
    const Tensor mask = do_shift ? attention_mask(H, W, m, shift) : Tensor();

    auto partition = [&](const Tensor& v, const WindowMaps& maps) {
        Tensor g = ops::gather_rows(v, maps.fwd);
        g = g.reshaped({nw, M2, heads, d});
        g = ops::permute(g, {0, 2, 1, 3});
        return g.reshaped({nw * heads, M2, d});
    };

    for (int g = 0; g < cfg_.num_blocks; ++g) {
        const Tensor group_in = tokens;
        for (int b = 0; b < cfg_.depth; ++b) {
            const std::string pre = strf("layers.", g, ".blocks.", b, ".");
            const bool shifted = do_shift && (b % 2 == 1);
            const WindowMaps& maps = shifted ? maps1 : maps0;

            Tensor t = ops::layernorm(tokens, param(pre + "norm1.weight"), param(pre + "norm1.bias"));
            Tensor qkv = linear(t, pre + "attn.qkv.input", pre + "attn.qkv.weight",
                                param(pre + "attn.qkv.bias"));
            Tensor split = ops::permute(qkv.reshaped({T, 3, C}), {1, 0, 2});
            Tensor q = partition(ops::slice0(split, 0, 1).reshaped({T, C}), maps);
            Tensor k = partition(ops::slice0(split, 1, 1).reshaped({T, C}), maps);
            Tensor v = partition(ops::slice0(split, 2, 1).reshaped({T, C}), maps);
            const QuantizerState* qq = q_of(pre + "attn.q");
            const QuantizerState* qk = q_of(pre + "attn.k");
            const QuantizerState* qv = q_of(pre + "attn.v");
            if (!(qq && qk)) {
                if (qq) q = fake_quantize(q, *qq);
                if (qk) k = fake_quantize(k, *qk);
            }
            Tensor attn = ops::scale(bmm_nt(q, k, qq, qk), 1.0 / std::sqrt(double(d)));
            attn = attn.reshaped({nw, heads, M2, M2});
            const Tensor bias =
                relative_bias(param(pre + "attn.relative_position_bias_table"), m, heads);
            attn = ops::add_broadcast(attn, bias.reshaped({1, heads, M2, M2}));
            if (shifted) attn = ops::add_broadcast(attn, mask.reshaped({nw, 1, M2, M2}));
            attn = ops::softmax(attn.reshaped({nw * heads, M2, M2}), 2);
            const QuantizerState* qs_attn = q_of(pre + "attn.softmax");
            if (!(qs_attn && qv)) {
                if (qs_attn) attn = fake_quantize(attn, *qs_attn);
                if (qv) v = fake_quantize(v, *qv);
            }
            // attn [B, M2, M2] @ v [B, M2, d]: transpose v per slice so the
            // kernel sees its [N, K] operand layout (a @ b^T)
            Tensor vt = ops::permute(v, {0, 2, 1});  // [B, d, M2]
            Tensor o3 = bmm_nt(attn, vt, qs_attn, qv);
            Tensor o = ops::permute(o3.reshaped({nw, heads, M2, d}), {0, 2, 1, 3})
                           .reshaped({nw * M2, C});
            o = ops::gather_rows(o, maps.inv);
            o = linear(o, pre + "attn.proj.input", pre + "attn.proj.weight",
                       param(pre + "attn.proj.bias"));
            tokens = ops::add(tokens, o);

            t = ops::layernorm(tokens, param(pre + "norm2.weight"), param(pre + "norm2.bias"));
            t = linear(t, pre + "mlp.fc1.input", pre + "mlp.fc1.weight",
                       param(pre + "mlp.fc1.bias"));
            t = ops::gelu(t);
            t = linear(t, pre + "mlp.fc2.input", pre + "mlp.fc2.weight",
                       param(pre + "mlp.fc2.bias"));
            tokens = ops::add(tokens, t);
        }
        Tensor img = ops::permute(tokens, {1, 0}).reshaped({C, H, W});
        img = ops::conv2d(img, param(strf("layers.", g, ".conv.weight")),
                          param(strf("layers.", g, ".conv.bias")));
        tokens = ops::add(group_in, ops::permute(img.reshaped({C, T}), {1, 0}));
    }

    tokens = ops::layernorm(tokens, param("norm.weight"), param("norm.bias"));
    Tensor body = ops::permute(tokens, {1, 0}).reshaped({C, H, W});
    body = ops::add(body, f0);
    Tensor up = ops::conv2d(body, param("upsample.conv.weight"), param("upsample.conv.bias"));
    Tensor hr = ops::pixel_shuffle(up, cfg_.scale);
    hr = ops::add_broadcast(hr, mean);
    return crop_hw(hr, cfg_.scale * H0, cfg_.scale * W0);
}

}  // namespace tdq
