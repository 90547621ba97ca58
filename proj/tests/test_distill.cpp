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
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "tdq/distill.hpp"
#include "test_support.hpp"

using namespace tdq;
using namespace tdq::test;

namespace {

std::vector<Tensor> random_patches(Rng& rng, int n, int side) {
    std::vector<Tensor> out;
    for (int i = 0; i < n; ++i) out.push_back(rand_uniform(rng, {3, side, side}, 0.f, 1.f));
    return out;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(cosine_lr(0.01, 0, 3000) == doctest::Approx(0.01));
    CHECK(cosine_lr(0.01, 1500, 3000) == doctest::Approx(0.005));
    CHECK(cosine_lr(0.01, 3000, 3000) == doctest::Approx(0.0).epsilon(1e-12));
    for (int i = 1; i <= 100; ++i)
        CHECK(cosine_lr(1.0, i, 100) < cosine_lr(1.0, i - 1, 100));
    CHECK_THROWS_AS(cosine_lr(1.0, 0, 0), UsageError);
}

TEST_CASE("adam takes unit-scaled first steps under a constant gradient") {
    // with bias correction, a constant gradient gives mhat = 1, vhat = 1, so
    // every step moves by roughly -lr
    std::vector<double> p = {0.0};
    Adam opt(1);
    opt.step(p, {1.0}, 0.1);
    CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-6));
    opt.step(p, {1.0}, 0.1);
    CHECK(p[0] == doctest::Approx(-0.2).epsilon(1e-6));
    CHECK(opt.steps() == 2);

    // direction flips track the gradient sign
    std::vector<double> q = {0.0};
    Adam opt2(1);
    opt2.step(q, {-2.5}, 0.1);
    CHECK(q[0] == doctest::Approx(0.1).epsilon(1e-6));

    std::vector<double> wrong = {0.0, 0.0};
    CHECK_THROWS_AS(opt.step(wrong, {1.0, 1.0}, 0.1), UsageError);
}

TEST_CASE("dihedral augmentation variants") {
    // single channel 2x2 marker: [[1,2],[3,4]]
    Tensor t({1, 2, 2}, {1, 2, 3, 4});
    CHECK(max_abs_diff(augment_patch(t, 0), t) == 0.0);
    const Tensor r1 = augment_patch(t, 1);  // clockwise: [[3,1],[4,2]]
    CHECK(r1.vec() == std::vector<float>{3, 1, 4, 2});
    const Tensor r2 = augment_patch(t, 2);  // 180: [[4,3],[2,1]]
    CHECK(r2.vec() == std::vector<float>{4, 3, 2, 1});
    const Tensor r3 = augment_patch(t, 3);  // 270: [[2,4],[1,3]]
    CHECK(r3.vec() == std::vector<float>{2, 4, 1, 3});
    const Tensor f = augment_patch(t, 4);  // hflip: [[2,1],[4,3]]
    CHECK(f.vec() == std::vector<float>{2, 1, 4, 3});
    const Tensor rf = augment_patch(t, 5);  // rot90 then hflip: [[1,3],[2,4]]
    CHECK(rf.vec() == std::vector<float>{1, 3, 2, 4});

    // the eight variants are distinct for an asymmetric patch
    std::set<std::vector<float>> seen;
    for (int v = 0; v < 8; ++v) seen.insert(augment_patch(t, v).vec());
    CHECK(seen.size() == 8);

    // channels move together
    Tensor two({2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    const Tensor tr = augment_patch(two, 1);
    CHECK(tr.vec() == std::vector<float>{3, 1, 4, 2, 30, 10, 40, 20});

    CHECK_THROWS_AS(augment_patch(Tensor({1, 2, 3}), 0), ShapeError);
    CHECK_THROWS_AS(augment_patch(t, 8), UsageError);
}

TEST_CASE("min/max calibration covers every site with sane modes") {
    Rng rng(31);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const auto patches = random_patches(rng, 3, 8);
    const QuantizerSet qs = minmax_calibrate(m, patches, 4);

    const auto sites = quantizer_sites(m.config());
    CHECK(qs.size() == sites.size());
    for (const auto& site : sites) {
        const QuantizerState& st = qs.at(site.id);
        CHECK(st.id == site.id);
        CHECK(st.bits == 4);
        CHECK(st.is_weight == site.is_weight);
        REQUIRE(st.active());
        CHECK(st.u > st.l);
        if (site.fixed_lower_hint) {
            CHECK(st.mode == QuantMode::fixed_lower);
            CHECK(st.l >= 0.f);  // attention rows live in [0, 1]
        } else {
            CHECK(st.mode == QuantMode::symmetric_search);
        }
    }

    // bounds genuinely cover the observed weight range
    const Tensor& w = m.param("layers.0.blocks.0.attn.qkv.weight");
    float lo = w.data()[0], hi = lo;
    for (float v : w.vec()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    CHECK(qs.at("layers.0.blocks.0.attn.qkv.weight").l == lo);
    CHECK(qs.at("layers.0.blocks.0.attn.qkv.weight").u == hi);

    CHECK_THROWS_AS(minmax_calibrate(m, {}, 4), UsageError);
    CHECK_THROWS_AS(minmax_calibrate(m, patches, 5), UsageError);
}

TEST_CASE("tensor psnr basics") {
    Tensor a({2, 3}, {0, 0.25f, 0.5f, 0.75f, 1, 0.1f});
    CHECK(psnr_tensor(a, a) == 100.0);
    Tensor b = a;
    for (auto& v : b.vec()) v += 1.f / 255.f;
    CHECK(psnr_tensor(a, b) == doctest::Approx(48.1308).epsilon(1e-4));
    CHECK_THROWS_AS(psnr_tensor(a, Tensor({3, 2})), ShapeError);
}

TEST_CASE("distillation improves or preserves validation quality") {
    Rng rng(32);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const auto train = random_patches(rng, 6, 8);
    const auto val = random_patches(rng, 2, 8);
    const QuantizerSet init = minmax_calibrate(m, train, 2);

    const std::string log_path = "dqc_test_log.jsonl";
    DqcConfig cfg;
    cfg.iters = 30;
    cfg.batch = 4;
    cfg.val_every = 10;
    cfg.lr = 1e-2;
    cfg.seed = 7;
    cfg.log_path = log_path;
    const DqcResult r = dqc_train(m, init, train, val, cfg);

    // best-so-far tracking can only match or beat the starting bounds
    CHECK(r.best_val_psnr >= r.initial_val_psnr);
    CHECK(r.val_history.size() == 1 + 3);  // iter 0 + iters 10/20/30
    CHECK(r.val_history.front() == r.initial_val_psnr);
    CHECK(r.loss_history.size() == 30);
    for (double v : r.loss_history) CHECK(std::isfinite(v));

    // the returned set still validates at the reported score
    double check = 0.0;
    {
        FakeQuantHooks hooks(r.quantizers);
        for (const auto& p : val)
            check += psnr_tensor(m.forward(p, &hooks, false).output, m.run(p)) / double(val.size());
    }
    CHECK(check == doctest::Approx(r.best_val_psnr).epsilon(1e-9));

    // every quantizer stays usable
    for (const auto& [id, st] : r.quantizers)
        if (st.active()) CHECK(st.u > st.l);

    // training genuinely moved the bounds
    double moved = 0.0;
    for (const auto& [id, st] : r.quantizers) {
        moved = std::max(moved, std::fabs(double(st.l) - init.at(id).l));
        moved = std::max(moved, std::fabs(double(st.u) - init.at(id).u));
    }
    if (r.best_iter > 0) CHECK(moved > 0.0);

    // log: one JSON object per iteration with the expected fields
    std::ifstream in(log_path);
    REQUIRE(in.good());
    std::string line;
    int lines = 0, vals = 0;
    double last_lr = 1.0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        if (j.contains("event")) continue;  // collapse notices
        CHECK(j.contains("iter"));
        CHECK(j.contains("loss_o"));
        CHECK(j.contains("loss_f"));
        REQUIRE(j.contains("lr"));
        CHECK(double(j["lr"]) <= last_lr);
        last_lr = double(j["lr"]);
        if (j.contains("val_psnr")) ++vals;
        ++lines;
    }
    CHECK(lines == 30);
    CHECK(vals == 3);
    std::remove(log_path.c_str());
}

TEST_CASE("distillation is deterministic in the seed") {
    Rng rng(33);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const auto train = random_patches(rng, 4, 8);
    const auto val = random_patches(rng, 1, 8);
    const QuantizerSet init = minmax_calibrate(m, train, 3);

    DqcConfig cfg;
    cfg.iters = 8;
    cfg.batch = 2;
    cfg.val_every = 4;
    cfg.seed = 11;
    const DqcResult a = dqc_train(m, init, train, val, cfg);
    const DqcResult b = dqc_train(m, init, train, val, cfg);
    cfg.seed = 12;
    const DqcResult c = dqc_train(m, init, train, val, cfg);

    for (const auto& [id, st] : a.quantizers) {
        CHECK(b.quantizers.at(id).l == st.l);
        CHECK(b.quantizers.at(id).u == st.u);
    }
    CHECK(a.best_val_psnr == b.best_val_psnr);
    bool differs = false;
    for (const auto& [id, st] : a.quantizers)
        if (c.quantizers.at(id).l != st.l || c.quantizers.at(id).u != st.u) differs = true;
    CHECK((differs || a.loss_history != c.loss_history));
}

TEST_CASE("bound collapse is caught and repaired") {
    Rng rng(34);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const auto train = random_patches(rng, 2, 4);
    const auto val = random_patches(rng, 1, 4);
    const QuantizerSet init = minmax_calibrate(m, train, 2);

    DqcConfig cfg;
    cfg.iters = 6;
    cfg.batch = 2;
    cfg.val_every = 3;
    cfg.lr = 50.0;  // absurd step size drives bounds across each other
    cfg.seed = 3;
    const DqcResult r = dqc_train(m, init, train, val, cfg);
    for (const auto& [id, st] : r.quantizers)
        if (st.active()) CHECK(st.u > st.l);
}

TEST_CASE("bad distillation inputs are rejected") {
    Rng rng(35);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    const auto train = random_patches(rng, 2, 8);
    const auto val = random_patches(rng, 1, 8);
    const QuantizerSet init = minmax_calibrate(m, train, 4);
    DqcConfig cfg;
    cfg.iters = 2;
    cfg.batch = 1;

    CHECK_THROWS_AS(dqc_train(m, init, {}, val, cfg), UsageError);
    CHECK_THROWS_AS(dqc_train(m, init, train, {}, cfg), UsageError);
    const auto odd = random_patches(rng, 1, 6);  // 6 % 4 != 0
    CHECK_THROWS_AS(dqc_train(m, init, odd, val, cfg), UsageError);
    DqcConfig bad = cfg;
    bad.iters = 0;
    CHECK_THROWS_AS(dqc_train(m, init, train, val, bad), UsageError);
    bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(dqc_train(m, init, train, val, bad), UsageError);

    // an all-bypass set has nothing to train
    QuantizerSet idle;
    for (const auto& s : quantizer_sites(m.config())) {
        QuantizerState st;
        st.id = s.id;
        st.mode = QuantMode::identity;
        idle.emplace(s.id, st);
    }
    CHECK_THROWS_AS(dqc_train(m, idle, train, val, cfg), UsageError);
}
