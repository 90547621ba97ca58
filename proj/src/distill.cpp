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
#include "tdq/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"
#include "tdq/common.hpp"

namespace tdq {

// ---------------------------------------------------------------------------
// Optimizer pieces
// ---------------------------------------------------------------------------

Adam::Adam(size_t n, double beta1, double beta2, double eps)
    : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size())
        throw UsageError("optimizer state size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
        params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
}

double cosine_lr(double base, int iter, int total) {
    if (total < 1) throw UsageError("schedule length must be positive");
    const double x = std::min(std::max(double(iter) / double(total), 0.0), 1.0);
    return base * 0.5 * (1.0 + std::cos(x * 3.14159265358979323846));
}

Tensor augment_patch(const Tensor& patch, int variant) {
    if (patch.ndim() != 3 || patch.dim(1) != patch.dim(2))
        throw ShapeError(strf("augmentation expects a square [C,N,N] patch, got ",
                              shape_str(patch.shape())));
    if (variant < 0 || variant > 7) throw UsageError(strf("augmentation variant ", variant));
    const int64_t C = patch.dim(0), N = patch.dim(1);
    Tensor cur = patch;
    for (int r = 0; r < variant % 4; ++r) {
        Tensor next({C, N, N});
        // quarter-turn clockwise: out[y, x] = in[N-1-x, y]
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < N; ++y)
                for (int64_t x = 0; x < N; ++x)
                    next.data()[(c * N + y) * N + x] = cur.data()[(c * N + (N - 1 - x)) * N + y];
        cur = std::move(next);
    }
    if (variant >= 4) {
        Tensor next({C, N, N});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < N; ++y)
                for (int64_t x = 0; x < N; ++x)
                    next.data()[(c * N + y) * N + x] = cur.data()[(c * N + y) * N + (N - 1 - x)];
        cur = std::move(next);
    }
    return cur;
}

// ---------------------------------------------------------------------------
// Min/max calibration
// ---------------------------------------------------------------------------

namespace {

struct MinMaxHooks final : QuantHooks {
    std::map<std::string, std::pair<float, float>> mm;
    Tensor site(const std::string& id, const Tensor& v) override {
        float lo = v.data()[0], hi = lo;
        for (float x : v.vec()) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        auto it = mm.find(id);
        if (it == mm.end()) {
            mm[id] = {lo, hi};
        } else {
            it->second.first = std::min(it->second.first, lo);
            it->second.second = std::max(it->second.second, hi);
        }
        return v;
    }
};

}  // namespace

QuantizerSet minmax_calibrate(const Model& model, const std::vector<Tensor>& patches, int bits) {
    if (patches.empty()) throw UsageError("calibration needs at least one patch");
    if (!valid_bit_width(bits)) throw UsageError(strf("unsupported bit width ", bits));
    MinMaxHooks probe;
    for (const auto& p : patches) model.forward(p, &probe, false);
    QuantizerSet qs;
    for (const auto& site : quantizer_sites(model.config())) {
        QuantizerState st;
        st.id = site.id;
        st.bits = bits;
        st.is_weight = site.is_weight;
        const auto [lo, hi] = probe.mm.at(site.id);
        if (!(hi > lo)) {
            st.mode = QuantMode::identity;
        } else {
            st.mode = site.fixed_lower_hint ? QuantMode::fixed_lower : QuantMode::symmetric_search;
            st.l = lo;
            st.u = hi;
        }
        qs.emplace(site.id, st);
    }
    return qs;
}

// ---------------------------------------------------------------------------
// Distillation calibration
// ---------------------------------------------------------------------------

double psnr_tensor(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("psnr over differently shaped tensors");
    double se = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = 255.0 * (double(a.data()[i]) - b.data()[i]);
        se += d * d;
    }
    const double mse = se / double(a.numel());
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(255.0 * 255.0 / mse));
}

namespace {

// One trainable scalar: a bound of one site's quantizer.
struct BoundRef {
    std::string id;
    bool upper = false;
};

double mean_val_psnr(const Model& model, const QuantizerSet& qs,
                     const std::vector<Tensor>& val_patches) {
    FakeQuantHooks hooks(qs);
    double sum = 0.0;
    for (const auto& p : val_patches) {
        const Tensor teacher = model.run(p);
        const Tensor student = model.forward(p, &hooks, false).output;
        sum += psnr_tensor(student, teacher);
    }
    return sum / double(val_patches.size());
}

}  // namespace

DqcResult dqc_train(const Model& model, const QuantizerSet& init,
                    const std::vector<Tensor>& train_patches,
                    const std::vector<Tensor>& val_patches, const DqcConfig& cfg) {
    if (cfg.iters < 1 || cfg.batch < 1 || cfg.val_every < 1)
        throw UsageError("distillation needs positive iteration, batch and validation counts");
    if (!(cfg.lr > 0.0) || cfg.lambda < 0.0)
        throw UsageError("distillation needs a positive learning rate and non-negative lambda");
    if (train_patches.empty() || val_patches.empty())
        throw UsageError("distillation needs training and validation patches");
    const int m = model.config().window;
    for (const auto* set : {&train_patches, &val_patches})
        for (const auto& p : *set) {
            if (p.ndim() != 3 || p.dim(0) != 3 || p.dim(1) != p.dim(2))
                throw ShapeError(strf("patches must be square [3,N,N], got ",
                                      shape_str(p.shape())));
            if (p.dim(1) % m != 0)
                throw UsageError(strf("patch side ", p.dim(1), " not a multiple of the ", m,
                                      "-pixel window"));
        }

    // working quantizer set and the trainable bound vector over it
    QuantizerSet qs = init;
    std::vector<BoundRef> refs;
    std::vector<double> bounds;
    std::map<std::string, double> init_range;
    for (const auto& site : quantizer_sites(model.config())) {
        auto it = qs.find(site.id);
        if (it == qs.end() || !it->second.trainable()) continue;
        const QuantizerState& st = it->second;
        st.validate();
        init_range[site.id] = double(st.u) - double(st.l);
        if (st.mode != QuantMode::fixed_lower) {
            refs.push_back({site.id, false});
            bounds.push_back(double(st.l));
        }
        refs.push_back({site.id, true});
        bounds.push_back(double(st.u));
    }
    if (refs.empty()) throw UsageError("no trainable quantizers in the starting set");

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path, std::ios::trunc);
        if (!log) throw FormatError(strf("cannot open training log '", cfg.log_path, "'"));
    }
    auto log_line = [&](const nlohmann::json& j) {
        if (log.is_open()) log << j.dump() << "\n";
    };

    // keep u - l above a sliver of the starting range so the grid stays sane
    auto clamp_bounds = [&](int iter) {
        for (auto& [id, st] : qs) {
            if (!st.trainable()) continue;
            const double gap = 1e-6 * std::max(init_range[id], 1e-12);
            if (double(st.u) - double(st.l) >= gap) continue;
            if (st.mode == QuantMode::fixed_lower) {
                st.u = float(double(st.l) + gap);
            } else {
                const double mid = 0.5 * (double(st.l) + double(st.u));
                st.l = float(mid - 0.5 * gap);
                st.u = float(mid + 0.5 * gap);
            }
            log_line({{"iter", iter}, {"event", "bound_collapse"}, {"site", id}});
        }
    };
    auto write_back = [&]() {
        for (size_t i = 0; i < refs.size(); ++i) {
            QuantizerState& st = qs.at(refs[i].id);
            if (refs[i].upper)
                st.u = float(bounds[i]);
            else
                st.l = float(bounds[i]);
        }
    };
    auto read_bounds = [&]() {
        for (size_t i = 0; i < refs.size(); ++i) {
            const QuantizerState& st = qs.at(refs[i].id);
            bounds[i] = refs[i].upper ? double(st.u) : double(st.l);
        }
    };

    DqcResult result;
    result.initial_val_psnr = mean_val_psnr(model, qs, val_patches);
    result.best_val_psnr = result.initial_val_psnr;
    result.best_iter = 0;
    result.quantizers = qs;
    result.val_history.push_back(result.initial_val_psnr);

    Adam opt(refs.size());
    Rng rng(cfg.seed != 0 ? cfg.seed : 0x2d9ec4f1u);

    for (int iter = 0; iter < cfg.iters; ++iter) {
        const double lr = cosine_lr(cfg.lr, iter, cfg.iters);
        std::map<std::string, BoundGrad> sinks;
        double loss_o = 0.0, loss_f = 0.0;
        for (int s = 0; s < cfg.batch; ++s) {
            const Tensor& base = train_patches[size_t(rng.below(uint64_t(train_patches.size())))];
            const Tensor patch = augment_patch(base, int(rng.below(8)));
            const auto teacher = model.forward(patch, nullptr, true);

            Tape tp;
            const auto student = model.forward_tape(tp, patch, qs, &sinks);
            Tape::Id loss = tp.mean_abs_diff(student.output, teacher.output);
            loss_o += double(tp.value(loss).data()[0]);
            for (size_t i = 0; i < student.features.size(); ++i) {
                const Tape::Id fd = tp.feature_distance(student.features[i], teacher.features[i]);
                loss_f += double(tp.value(fd).data()[0]);
                loss = tp.add_scaled(loss, fd, cfg.lambda);
            }
            tp.backward(loss);
        }
        loss_o /= cfg.batch;
        loss_f /= cfg.batch;
        const double combined = loss_o + cfg.lambda * loss_f;
        if (!std::isfinite(combined))
            throw NumericError(strf("non-finite distillation loss at iteration ", iter));
        result.loss_history.push_back(combined);

        std::vector<double> grads(refs.size());
        for (size_t i = 0; i < refs.size(); ++i) {
            const BoundGrad& g = sinks[refs[i].id];
            grads[i] = (refs[i].upper ? g.u : g.l) / double(cfg.batch);
            if (!std::isfinite(grads[i]))
                throw NumericError(strf("non-finite bound gradient at iteration ", iter));
        }
        opt.step(bounds, grads, lr);
        write_back();
        clamp_bounds(iter);
        read_bounds();

        nlohmann::json line = {{"iter", iter},
                               {"loss_o", loss_o},
                               {"loss_f", loss_f},
                               {"lr", lr}};
        const bool validate = ((iter + 1) % cfg.val_every == 0) || (iter + 1 == cfg.iters);
        if (validate) {
            const double psnr = mean_val_psnr(model, qs, val_patches);
            result.val_history.push_back(psnr);
            if (psnr > result.best_val_psnr) {
                result.best_val_psnr = psnr;
                result.best_iter = iter + 1;
                result.quantizers = qs;
            }
            line["val_psnr"] = psnr;
        }
        log_line(line);
    }
    return result;
}

}  // namespace tdq
