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
#include <string>
#include <vector>

#include "tdq/model.hpp"

namespace tdq {

// Adam over a flat double vector (the learnable clipping bounds).
class Adam {
public:
    explicit Adam(size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(std::vector<double>& params, const std::vector<double>& grads, double lr);
    int64_t steps() const { return t_; }

private:
    std::vector<double> m_, v_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

// Half-cosine decay from `base` at iter 0 toward 0 at iter `total`.
double cosine_lr(double base, int iter, int total);

// One of eight dihedral variants (0..7): `variant % 4` quarter-turns
// clockwise, then a horizontal flip if `variant >= 4`. Square [C, N, N] only.
Tensor augment_patch(const Tensor& patch, int variant);

// Bounds from a single min/max sweep over the given low-resolution patches.
// Softmax sites keep their lower bound pinned at the observed minimum;
// degenerate (constant) tensors fall back to bypass.
QuantizerSet minmax_calibrate(const Model& model, const std::vector<Tensor>& patches, int bits);

struct DqcConfig {
    int iters = 3000;
    int batch = 32;      // augmented patches per iteration
    int val_every = 100;
    double lr = 1e-2;    // Adam base step, cosine-decayed to 0
    double lambda = 1.0; // weight of the feature-matching loss
    uint64_t seed = 0;
    std::string log_path;  // JSONL training log; empty disables logging
};

struct DqcResult {
    QuantizerSet quantizers;        // bounds of the best validation round
    double initial_val_psnr = 0.0;  // the unmodified starting bounds
    double best_val_psnr = 0.0;
    int best_iter = 0;
    std::vector<double> val_history;   // one entry per validation round
    std::vector<double> loss_history;  // combined loss per iteration
};

// PSNR (dB, 255-peak, capped at 100) between two same-shape float tensors
// holding [0, 1]-range images. The distillation validation metric.
double psnr_tensor(const Tensor& a, const Tensor& b);

// Distillation-based calibration: starting from `init`, train every active
// site's clipping bounds so the quantized model tracks its own float output
// (mean absolute difference) and per-group features (normalized feature
// distance, weighted by lambda). Validation against the float teacher runs
// at iteration 0, every val_every iterations, and after the last step; the
// best-scoring bounds win, so the result never validates below `init`.
DqcResult dqc_train(const Model& model, const QuantizerSet& init,
                    const std::vector<Tensor>& train_patches,
                    const std::vector<Tensor>& val_patches, const DqcConfig& cfg);

}  // namespace tdq
