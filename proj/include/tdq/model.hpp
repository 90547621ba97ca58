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

#include <map>
#include <string>
#include <vector>

#include "tdq/autodiff.hpp"
#include "tdq/packed.hpp"
#include "tdq/quantizer.hpp"
#include "tdq/tensor.hpp"

namespace tdq {

// Windowed-attention super-resolution backbone: a first 3x3 conv lifts RGB
// into embed_dim channels, num_blocks residual groups of depth attention
// blocks (shifted-window MSA + 2-layer MLP, each with pre-LayerNorm and a
// residual) refine tokens, a trailing LayerNorm plus the long skip from the
// first conv close the body, and a 3x3 conv + pixel shuffle upsamples back
// to RGB around a subtracted/re-added dataset mean.
struct ModelConfig {
    int embed_dim = 60;
    int num_heads = 6;
    int window = 8;
    double mlp_ratio = 2.0;
    int num_blocks = 4;  // residual groups
    int depth = 6;       // attention blocks per group
    int scale = 4;       // upsampling factor: 2, 3, or 4

    static ModelConfig light(int scale);  // 60-dim, 6 heads, 4x6 blocks, window 8
    static ModelConfig toy(int scale);    // 12-dim, 2 heads, 1x2 blocks, window 4
    void validate() const;

    int head_dim() const { return embed_dim / num_heads; }
    int mlp_dim() const { return int(double(embed_dim) * mlp_ratio); }
    int total_depth() const { return num_blocks * depth; }
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

// ---- canonical parameter table --------------------------------------------
// Enumeration order is the serialization order of checkpoints. Names follow
// the layers.{i}.blocks.{j}.<leaf> convention of the reference trainer so
// converted weights map one to one.
struct ParamSpec {
    std::string name;
    Shape shape;
};

std::vector<ParamSpec> enumerate_params(const ModelConfig& cfg);
int64_t count_params(const ModelConfig& cfg);
// Elements of the four linear weights per attention block (the tensors that
// are stored at low bit width). Biases, norms, convs and the position table
// stay in float.
int64_t count_quantizable_params(const ModelConfig& cfg);

// ---- quantizer sites -------------------------------------------------------
// Twelve per attention block: the four linear weights, their input
// activations, and the q / k / attention-map / v tensors inside attention.
// The attention map lives in [0, 1], so its lower bound stays pinned.
struct QuantizerSite {
    std::string id;       // weight sites reuse the parameter name
    bool is_weight = false;
    bool fixed_lower_hint = false;  // softmax output: one-sided by construction
};

std::vector<QuantizerSite> quantizer_sites(const ModelConfig& cfg);

// Per-site quantizer states keyed by site id (ordered map: deterministic).
using QuantizerSet = std::map<std::string, QuantizerState>;

// Per-site interception of the forward pass. Called once per site per
// forward, weights included, in signal-flow order; returns the tensor the
// computation continues with.
class QuantHooks {
public:
    virtual ~QuantHooks() = default;
    virtual Tensor site(const std::string& id, const Tensor& v) = 0;
};

// Applies fake quantization at every active site in the set.
class FakeQuantHooks : public QuantHooks {
public:
    explicit FakeQuantHooks(const QuantizerSet& qs) : qs_(qs) {}
    Tensor site(const std::string& id, const Tensor& v) override;

private:
    const QuantizerSet& qs_;
};

// ---- window bookkeeping (exposed for tests) --------------------------------
// Token gather maps for (optionally cyclically shifted) MxM window
// partitioning of an H x W token image, plus the inverse map.
struct WindowMaps {
    std::vector<int64_t> fwd;  // window-major order <- token index
    std::vector<int64_t> inv;
};
WindowMaps window_maps(int64_t h, int64_t w, int m, int shift);
// Pairwise mask for shifted windows: 0 within a contiguous region, -100
// across the wrap-around seams. Shape [num_windows, M*M, M*M].
Tensor attention_mask(int64_t h, int64_t w, int m, int shift);

// Mirror-pad the bottom/right of a [C, H, W] image so H and W become
// multiples of m.
Tensor reflect_pad_to_multiple(const Tensor& img, int m);

// ---- the model -------------------------------------------------------------
class Model {
public:
    explicit Model(ModelConfig cfg);  // zero-filled parameters
    static Model random_init(ModelConfig cfg, Rng& rng);

    const ModelConfig& config() const { return cfg_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    const Tensor& param(const std::string& name) const;
    void set_param(const std::string& name, Tensor t);
    void validate_params() const;

    struct ForwardResult {
        Tensor output;                  // [3, scale*H, scale*W] in [0, 1] range
        std::vector<Tensor> features;   // one [T, C] token tensor per group
    };
    // Float path. hooks == nullptr runs the plain model; want_features
    // collects the per-group taps used by distillation.
    ForwardResult forward(const Tensor& lr, QuantHooks* hooks, bool want_features) const;
    Tensor run(const Tensor& lr) const { return forward(lr, nullptr, false).output; }

    struct TapeResult {
        Tape::Id output = -1;
        std::vector<Tape::Id> features;
    };
    // Differentiable path for bound calibration: fake-quantizes every active
    // site in qs, routing bound gradients into sinks[id]. Requires H and W
    // to be multiples of the window size (training patches are).
    TapeResult forward_tape(Tape& tp, const Tensor& lr, const QuantizerSet& qs,
                            std::map<std::string, BoundGrad>* sinks) const;

    // Deployment path: every quantized matmul runs on packed integer codes
    // (weights from packed_weights, activations packed on the fly with the
    // bounds in qs). Remaining ops run in float.
    Tensor forward_packed(const Tensor& lr, const QuantizerSet& qs,
                          const std::map<std::string, PackedIntTensor>& packed_weights) const;

private:
    ModelConfig cfg_;
    std::map<std::string, Tensor> params_;
};

// Dataset mean of the DIV2K training images, RGB in [0, 1].
constexpr float kMeanR = 0.4488f;
constexpr float kMeanG = 0.4371f;
constexpr float kMeanB = 0.4040f;

}  // namespace tdq
