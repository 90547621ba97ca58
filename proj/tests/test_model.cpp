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
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "tdq/model.hpp"
#include "test_support.hpp"

using namespace tdq;
using namespace tdq::test;

namespace {

// Records per-site min/max (and the visit order) without changing values.
struct MinMaxHooks final : QuantHooks {
    std::map<std::string, std::pair<float, float>> mm;
    std::vector<std::string> order;
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
        order.push_back(id);
        return v;
    }
};

// Quantizer set with bounds pulled `shrink` of the range inside the observed
// min/max (a margin keeps test elements off the clip kinks).
QuantizerSet make_minmax_set(const ModelConfig& cfg,
                             const std::map<std::string, std::pair<float, float>>& mm, int bits,
                             float shrink) {
    QuantizerSet qs;
    for (const auto& site : quantizer_sites(cfg)) {
        QuantizerState st;
        st.id = site.id;
        st.bits = bits;
        st.is_weight = site.is_weight;
        const auto [lo, hi] = mm.at(site.id);
        const float range = hi - lo;
        if (!(range > 0.f)) {
            st.mode = QuantMode::identity;
        } else if (site.fixed_lower_hint) {
            st.mode = QuantMode::fixed_lower;
            st.l = lo;
            st.u = hi - shrink * range;
        } else {
            st.mode = QuantMode::symmetric_search;
            st.l = lo + shrink * range;
            st.u = hi - shrink * range;
        }
        qs.emplace(site.id, st);
    }
    return qs;
}

QuantizerSet calibrate_minmax(const Model& model, const Tensor& lr, int bits, float shrink) {
    MinMaxHooks probe;
    model.forward(lr, &probe, false);
    return make_minmax_set(model.config(), probe.mm, bits, shrink);
}

// Freezes per-site rounding residuals at the operating point, quantizing as
// it goes so downstream sites see the same tensors the real pass produces.
struct ResidualHooks final : QuantHooks {
    const QuantizerSet* qs;
    std::map<std::string, Tensor> res;
    Tensor site(const std::string& id, const Tensor& v) override {
        auto it = qs->find(id);
        if (it == qs->end() || !it->second.active()) return v;
        res[id] = quantize_residual(v, it->second);
        return fake_quantize(v, it->second);
    }
};

// Smooth surrogate of the quantized forward: every site applies the clipped
// reconstruction with its frozen residual, so bound perturbations move the
// output without rounding jumps.
struct LinearizedHooks final : QuantHooks {
    const QuantizerSet* qs;
    const std::map<std::string, Tensor>* res;
    Tensor site(const std::string& id, const Tensor& v) override {
        auto it = qs->find(id);
        if (it == qs->end() || !it->second.active()) return v;
        return linearized_quantize(v, it->second, res->at(id));
    }
};

double mean_abs_diff_d(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += std::fabs(double(a.data()[i]) - b.data()[i]);
    return s / double(a.numel());
}

}  // namespace

TEST_CASE("config validation") {
    CHECK_NOTHROW(ModelConfig::light(4).validate());
    CHECK_NOTHROW(ModelConfig::toy(2).validate());
    CHECK(ModelConfig::light(4).head_dim() == 10);
    CHECK(ModelConfig::light(4).mlp_dim() == 120);
    CHECK(ModelConfig::light(4).total_depth() == 24);
    CHECK(ModelConfig::toy(2).total_depth() == 2);
    ModelConfig bad = ModelConfig::light(4);
    bad.num_heads = 7;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad = ModelConfig::light(4);
    bad.scale = 5;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad = ModelConfig::light(4);
    bad.depth = 0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    CHECK(ModelConfig::light(4) == ModelConfig::light(4));
    CHECK(!(ModelConfig::light(4) == ModelConfig::light(2)));
}

TEST_CASE("parameter table") {
    const ModelConfig cfg = ModelConfig::toy(2);
    const auto specs = enumerate_params(cfg);
    // 4 head tensors + 2 blocks * 13 + group conv 2 + final norm 2 + upsample 2
    CHECK(specs.size() == 4 + 2 * 13 + 2 + 2 + 2);
    CHECK(specs.front().name == "conv_first.weight");
    CHECK(specs.front().shape == Shape{12, 3, 3, 3});
    CHECK(specs.back().name == "upsample.conv.bias");
    CHECK(specs.back().shape == Shape{12});

    std::set<std::string> names;
    for (const auto& s : specs) CHECK(names.insert(s.name).second);  // unique
    CHECK(names.count("layers.0.blocks.1.attn.relative_position_bias_table") == 1);
    CHECK(names.count("layers.0.blocks.0.norm2.bias") == 1);
    CHECK(names.count("layers.0.conv.weight") == 1);
    CHECK(names.count("patch_embed.norm.weight") == 1);
    CHECK(names.count("norm.bias") == 1);

    for (const auto& s : specs)
        if (s.name == "layers.0.blocks.1.attn.relative_position_bias_table")
            CHECK(s.shape == Shape{49, 2});

    // the model holds exactly these tensors
    Model m(cfg);
    CHECK(m.params().size() == specs.size());
    for (const auto& s : specs) CHECK(m.param(s.name).shape() == s.shape);
    CHECK_NOTHROW(m.validate_params());
    CHECK_THROWS_AS(m.param("layers.9.conv.weight"), UsageError);
    CHECK_THROWS_AS(m.set_param("norm.weight", Tensor({13})), ShapeError);
}

TEST_CASE("quantizer site catalog") {
    const ModelConfig cfg = ModelConfig::toy(2);
    const auto sites = quantizer_sites(cfg);
    CHECK(sites.size() == 12 * 2);
    int weights = 0, fixed = 0;
    const auto specs = enumerate_params(cfg);
    std::set<std::string> pnames;
    for (const auto& s : specs) pnames.insert(s.name);
    for (const auto& s : sites) {
        if (s.is_weight) {
            ++weights;
            CHECK(pnames.count(s.id) == 1);  // weight sites reuse parameter names
        }
        if (s.fixed_lower_hint) {
            ++fixed;
            CHECK(s.id.find("softmax") != std::string::npos);
        }
    }
    CHECK(weights == 4 * 2);
    CHECK(fixed == 2);
    CHECK(sites[0].id == "layers.0.blocks.0.attn.qkv.input");
    CHECK(sites[1].id == "layers.0.blocks.0.attn.qkv.weight");
    CHECK(sites[11].id == "layers.0.blocks.0.mlp.fc2.weight");
    CHECK(sites[12].id == "layers.0.blocks.1.attn.qkv.input");
}

TEST_CASE("window maps partition and invert") {
    // 4x4 tokens, 2x2 windows, no shift: window-major gather order
    const WindowMaps maps = window_maps(4, 4, 2, 0);
    const std::vector<int64_t> want = {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
    CHECK(maps.fwd == want);
    for (size_t p = 0; p < maps.fwd.size(); ++p)
        CHECK(maps.inv[size_t(maps.fwd[p])] == int64_t(p));

    // shift 1: window cell (0,0) of window (0,0) reads the token one step
    // down-right
    const WindowMaps sh = window_maps(4, 4, 2, 1);
    CHECK(sh.fwd[0] == 5);   // (0,0) -> (1,1)
    CHECK(sh.fwd[1] == 6);   // (0,1) -> (1,2)
    CHECK(sh.fwd[2] == 9);   // cell (1,0) -> (2,1)
    CHECK(sh.fwd[15] == 0);  // last window cell (1,1) -> wraps to (0,0)
    std::set<int64_t> seen(sh.fwd.begin(), sh.fwd.end());
    CHECK(seen.size() == 16);  // a permutation
    for (size_t p = 0; p < sh.fwd.size(); ++p)
        CHECK(sh.inv[size_t(sh.fwd[p])] == int64_t(p));

    CHECK_THROWS_AS(window_maps(6, 8, 4, 0), UsageError);   // 6 % 4 != 0
    CHECK_THROWS_AS(window_maps(8, 8, 4, 4), UsageError);   // shift >= window
    CHECK_THROWS_AS(window_maps(8, 8, 4, -1), UsageError);
}

TEST_CASE("shifted-window attention mask separates wrapped regions") {
    // 8x8 tokens, 4x4 windows, shift 2: four windows with distinct zone maps
    const Tensor mask = attention_mask(8, 8, 4, 2);
    CHECK(mask.shape() == Shape{4, 16, 16});
    for (float v : mask.vec()) CHECK((v == 0.f || v == -100.f));

    auto count_blocked = [&](int64_t w) {
        int n = 0;
        for (int64_t i = 0; i < 16; ++i)
            for (int64_t j = 0; j < 16; ++j)
                if (mask.at({w, i, j}) == -100.f) ++n;
        return n;
    };
    // top-left window: one contiguous region, nothing masked
    CHECK(count_blocked(0) == 0);
    // top-right: columns split 2+2 -> two 8-cell regions -> 2*8*8 blocked
    CHECK(count_blocked(1) == 128);
    // bottom-left: rows split the same way
    CHECK(count_blocked(2) == 128);
    // bottom-right: 2x2 zones of 4 cells; each cell talks to its own zone only
    CHECK(count_blocked(3) == 16 * 12);

    // diagonal is always visible, mask is symmetric
    for (int64_t w = 0; w < 4; ++w)
        for (int64_t i = 0; i < 16; ++i) {
            CHECK(mask.at({w, i, i}) == 0.f);
            for (int64_t j = 0; j < i; ++j) CHECK(mask.at({w, i, j}) == mask.at({w, j, i}));
        }

    CHECK_THROWS_AS(attention_mask(8, 8, 4, 0), UsageError);
}

TEST_CASE("reflect padding mirrors the bottom/right edge") {
    // rows 0..2, cols 0..4 -> pads to 4x8 with mirror indices (1) and (3,2,1)
    Tensor img({1, 3, 5});
    for (int64_t i = 0; i < 15; ++i) img.data()[i] = float(i);
    const Tensor out = reflect_pad_to_multiple(img, 4);
    CHECK(out.shape() == Shape{1, 4, 8});
    CHECK(out.at({0, 0, 0}) == 0.f);
    CHECK(out.at({0, 0, 4}) == 4.f);
    CHECK(out.at({0, 0, 5}) == 3.f);  // col 5 mirrors col 3
    CHECK(out.at({0, 0, 6}) == 2.f);
    CHECK(out.at({0, 0, 7}) == 1.f);
    CHECK(out.at({0, 3, 0}) == 5.f);  // row 3 mirrors row 1
    CHECK(out.at({0, 3, 7}) == 6.f);  // both axes mirrored
    // aligned input passes through untouched
    const Tensor same = reflect_pad_to_multiple(out, 4);
    CHECK(max_abs_diff(same, out) == 0.0);
    // degenerate 1-wide input replicates
    Tensor thin({1, 1, 1}, {7.f});
    const Tensor grown = reflect_pad_to_multiple(thin, 2);
    CHECK(grown.shape() == Shape{1, 2, 2});
    for (float v : grown.vec()) CHECK(v == 7.f);
}

TEST_CASE("random init is deterministic and non-degenerate") {
    Rng a(7), b(7), c(8);
    const Model ma = Model::random_init(ModelConfig::toy(2), a);
    const Model mb = Model::random_init(ModelConfig::toy(2), b);
    const Model mc = Model::random_init(ModelConfig::toy(2), c);
    double diff_ab = 0, diff_ac = 0;
    for (const auto& [name, t] : ma.params()) {
        diff_ab = std::max(diff_ab, max_abs_diff(t, mb.param(name)));
        diff_ac = std::max(diff_ac, max_abs_diff(t, mc.param(name)));
    }
    CHECK(diff_ab == 0.0);
    CHECK(diff_ac > 0.0);
    // layernorm scales hover around one so activations keep flowing
    for (float v : ma.param("norm.weight").vec()) CHECK((v > 0.5f && v < 1.5f));
}

TEST_CASE("forward pass shapes, padding and features") {
    Rng rng(11);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    // 10x14 input: pads to 12x16 internally, output crops back to 20x28
    const Tensor lr = rand_uniform(rng, {3, 10, 14}, 0.f, 1.f);
    const auto r = m.forward(lr, nullptr, true);
    CHECK(r.output.shape() == Shape{3, 20, 28});
    CHECK(!r.output.has_nonfinite());
    CHECK(r.features.size() == 1);
    CHECK(r.features[0].shape() == Shape{12 * 16, 12});

    // aligned input: no padding, same machinery
    const Tensor lr2 = rand_uniform(rng, {3, 8, 8}, 0.f, 1.f);
    CHECK(m.run(lr2).shape() == Shape{3, 16, 16});

    // single-window input exercises the no-shift path
    const Tensor lr3 = rand_uniform(rng, {3, 4, 4}, 0.f, 1.f);
    CHECK(m.run(lr3).shape() == Shape{3, 8, 8});

    CHECK_THROWS_AS(m.forward(Tensor({1, 8, 8}), nullptr, false), ShapeError);

    // forward is deterministic
    CHECK(max_abs_diff(m.run(lr), r.output) == 0.0);
}

TEST_CASE("hooks visit every site in signal-flow order") {
    Rng rng(12);
    const ModelConfig cfg = ModelConfig::toy(2);
    const Model m = Model::random_init(cfg, rng);
    MinMaxHooks probe;
    m.forward(rand_uniform(rng, {3, 8, 8}, 0.f, 1.f), &probe, false);

    std::vector<std::string> want;
    for (const auto& s : quantizer_sites(cfg)) want.push_back(s.id);
    CHECK(probe.order == want);

    // softmax site observes a [0, 1] tensor
    const auto sm = probe.mm.at("layers.0.blocks.0.attn.softmax");
    CHECK(sm.first >= 0.f);
    CHECK(sm.second <= 1.f);
    CHECK(sm.second > 0.1f);  // rows sum to one over 16 cells
}

TEST_CASE("bypassed quantizers leave the forward pass untouched") {
    Rng rng(13);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const Tensor lr = rand_uniform(rng, {3, 8, 8}, 0.f, 1.f);
    QuantizerSet qs;
    for (const auto& s : quantizer_sites(m.config())) {
        QuantizerState st;
        st.id = s.id;
        st.mode = QuantMode::identity;
        qs.emplace(s.id, st);
    }
    FakeQuantHooks hooks(qs);
    CHECK(max_abs_diff(m.forward(lr, &hooks, false).output, m.run(lr)) == 0.0);
}

TEST_CASE("quantized forward tracks the float model at high bit width") {
    Rng rng(14);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const Tensor lr = rand_uniform(rng, {3, 8, 8}, 0.f, 1.f);
    const Tensor fp = m.run(lr);

    const QuantizerSet q8 = calibrate_minmax(m, lr, 8, 0.f);
    const QuantizerSet q2 = calibrate_minmax(m, lr, 2, 0.f);
    FakeQuantHooks h8(q8), h2(q2);
    const double d8 = mean_abs_diff_d(m.forward(lr, &h8, false).output, fp);
    const double d2 = mean_abs_diff_d(m.forward(lr, &h2, false).output, fp);
    CHECK(d8 > 0.0);
    CHECK(d8 < 0.01);  // 8-bit stays close
    CHECK(d2 > d8);    // 2-bit hurts more
}

TEST_CASE("tape forward reproduces the hooked float forward exactly") {
    Rng rng(15);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const Tensor lr = rand_uniform(rng, {3, 8, 8}, 0.f, 1.f);
    const QuantizerSet qs = calibrate_minmax(m, lr, 4, 0.02f);

    FakeQuantHooks hooks(qs);
    const auto want = m.forward(lr, &hooks, true);

    Tape tp;
    std::map<std::string, BoundGrad> sinks;
    const auto got = m.forward_tape(tp, lr, qs, &sinks);
    CHECK(max_abs_diff(tp.value(got.output), want.output) == 0.0);
    REQUIRE(got.features.size() == want.features.size());
    for (size_t i = 0; i < got.features.size(); ++i)
        CHECK(max_abs_diff(tp.value(got.features[i]), want.features[i]) == 0.0);

    // unaligned patches are rejected on the training path
    Tape tp2;
    CHECK_THROWS_AS(m.forward_tape(tp2, Tensor({3, 6, 6}), qs, nullptr), UsageError);
}

TEST_CASE("bound gradients flow to every active site") {
    Rng rng(16);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const Tensor lr = rand_uniform(rng, {3, 8, 8}, 0.f, 1.f);
    const QuantizerSet qs = calibrate_minmax(m, lr, 2, 0.02f);

    Tape tp;
    std::map<std::string, BoundGrad> sinks;
    const auto res = m.forward_tape(tp, lr, qs, &sinks);
    Rng trng(99);
    Tensor target = tp.value(res.output);
    for (auto& v : target.vec()) v += (trng.uniform(0.0, 1.0) < 0.5 ? -1.f : 1.f);
    const Tape::Id loss = tp.mean_abs_diff(res.output, target);
    tp.backward(loss);

    CHECK(sinks.size() == qs.size());
    int moved = 0;
    for (const auto& [id, g] : sinks) {
        CHECK(std::isfinite(g.l));
        CHECK(std::isfinite(g.u));
        if (g.l != 0.0 || g.u != 0.0) ++moved;
    }
    // at 2 bits nearly everything rounds, so bounds matter everywhere
    CHECK(moved >= int(sinks.size()) - 2);

    // a second identical run accumulates to exactly twice the gradient
    Tape tp2;
    std::map<std::string, BoundGrad> sinks2;
    const auto res2 = m.forward_tape(tp2, lr, qs, &sinks2);
    const Tape::Id loss2 = tp2.mean_abs_diff(res2.output, target);
    tp2.backward(loss2);
    tp2.backward(loss2);
    for (const auto& [id, g] : sinks) {
        CHECK(sinks2.at(id).l == doctest::Approx(2.0 * g.l).epsilon(1e-9));
        CHECK(sinks2.at(id).u == doctest::Approx(2.0 * g.u).epsilon(1e-9));
    }
}

TEST_CASE("model-level bound gradients match finite differences of the"
          " linearized forward") {
    Rng rng(17);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const Tensor lr = rand_uniform(rng, {3, 8, 8}, 0.f, 1.f);
    const QuantizerSet qs = calibrate_minmax(m, lr, 3, 0.03f);

    // reference gradients from the tape
    Tape tp;
    std::map<std::string, BoundGrad> sinks;
    const auto res = m.forward_tape(tp, lr, qs, &sinks);
    Rng trng(5);
    Tensor target = tp.value(res.output);
    for (auto& v : target.vec()) v += (trng.uniform(0.0, 1.0) < 0.5 ? -1.f : 1.f);
    tp.backward(tp.mean_abs_diff(res.output, target));

    // frozen residuals at the operating point
    ResidualHooks rh;
    rh.qs = &qs;
    m.forward(lr, &rh, false);

    auto loss_at = [&](const QuantizerSet& variant) {
        LinearizedHooks lh;
        lh.qs = &variant;
        lh.res = &rh.res;
        return mean_abs_diff_d(m.forward(lr, &lh, false).output, target);
    };

    const double h = 1e-2;
    for (const std::string id :
         {std::string("layers.0.blocks.0.attn.qkv.input"),
          std::string("layers.0.blocks.1.mlp.fc1.weight")}) {
        QuantizerSet vl = qs, vu = qs;
        vl.at(id).l += float(h);
        double fl_p = loss_at(vl);
        vl.at(id).l -= 2 * float(h);
        double fl_m = loss_at(vl);
        const double fd_l = (fl_p - fl_m) / (2 * h);

        vu.at(id).u += float(h);
        double fu_p = loss_at(vu);
        vu.at(id).u -= 2 * float(h);
        double fu_m = loss_at(vu);
        const double fd_u = (fu_p - fu_m) / (2 * h);

        const BoundGrad& g = sinks.at(id);
        CHECK(std::fabs(fd_l - g.l) <= std::max(0.05 * std::fabs(g.l), 2e-3));
        CHECK(std::fabs(fd_u - g.u) <= std::max(0.05 * std::fabs(g.u), 2e-3));
    }
}

TEST_CASE("packed integer forward matches the fake-quantized forward") {
    Rng rng(18);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const Tensor lr = rand_uniform(rng, {3, 8, 8}, 0.f, 1.f);

    for (int bits : {8, 4, 2}) {
        CAPTURE(bits);
        const QuantizerSet qs = calibrate_minmax(m, lr, bits, 0.f);
        std::map<std::string, PackedIntTensor> pw;
        for (const auto& s : quantizer_sites(m.config()))
            if (s.is_weight && qs.at(s.id).active())
                pw.emplace(s.id, pack_tensor(m.param(s.id), qs.at(s.id)));

        FakeQuantHooks hooks(qs);
        const Tensor fake = m.forward(lr, &hooks, false).output;
        const Tensor packed = m.forward_packed(lr, qs, pw);
        CHECK(packed.shape() == fake.shape());
        CHECK(max_abs_diff(packed, fake) < 1e-3);
    }

    // missing packed weights are reported
    const QuantizerSet qs = calibrate_minmax(m, lr, 4, 0.f);
    CHECK_THROWS_AS(m.forward_packed(lr, qs, {}), UsageError);
}

TEST_CASE("packed forward with an empty quantizer set is the float model") {
    Rng rng(19);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const Tensor lr = rand_uniform(rng, {3, 10, 6}, 0.f, 1.f);
    const Tensor out = m.forward_packed(lr, {}, {});
    CHECK(max_abs_diff(out, m.run(lr)) == 0.0);
}
