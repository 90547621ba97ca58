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

#include "doctest.h"
#include "tdq/quantizer.hpp"
#include "test_support.hpp"

using namespace tdq;

TEST_CASE("fake quantize: frozen scalar values") {
    // 3 bits over [-1, 1]: position of 0.3 is 4.55 -> rounds to code 5 -> 3/7
    CHECK(fake_quantize_value(0.3f, -1.f, 1.f, 3) == doctest::Approx(3.0 / 7.0).epsilon(1e-6));
    // half positions round away from zero: 0.5 on the 2-bit [0,1] grid -> 2/3
    CHECK(fake_quantize_value(0.5f, 0.f, 1.f, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
    // clipped values reconstruct the bound itself
    CHECK(fake_quantize_value(7.f, -1.f, 1.f, 4) == 1.f);
    CHECK(fake_quantize_value(-7.f, -1.f, 1.f, 4) == -1.f);
}

TEST_CASE("fake quantize: bound gradients, hand-computed cases") {
    {  // clipped above, 1-bit conceptual check on the raw math
        FqGrad g = fake_quantize_grad_value(2.f, 0.f, 1.f, 1);
        CHECK(g.du == doctest::Approx(1.0));
        CHECK(g.dl == doctest::Approx(0.0));
        CHECK(g.dv == 0.f);
    }
    {  // clipped below
        FqGrad g = fake_quantize_grad_value(-3.f, -1.f, 1.f, 2);
        CHECK(g.dl == doctest::Approx(1.0));
        CHECK(g.du == doctest::Approx(0.0));
        CHECK(g.dv == 0.f);
    }
    {  // interior: v_r = round(3*0.4) = 1
        FqGrad g = fake_quantize_grad_value(0.4f, 0.f, 1.f, 2);
        CHECK(g.du == doctest::Approx(1.0 / 3.0 - 0.4).epsilon(1e-6));
        CHECK(g.dl == doctest::Approx(0.4 - 1.0 / 3.0).epsilon(1e-6));
        CHECK(g.dv == 1.f);
    }
}

TEST_CASE("fake quantize: validation and numeric errors") {
    QuantizerState q{"t", QuantMode::symmetric_search, 4, 0.f, 1.f, false};
    CHECK_NOTHROW(q.validate());
    q.bits = 1;
    CHECK_THROWS_AS(q.validate(), UsageError);
    q.bits = 5;
    CHECK_THROWS_AS(q.validate(), UsageError);
    q.bits = 4;
    q.u = q.l;
    CHECK_THROWS_AS(q.validate(), NumericError);
    CHECK_THROWS_AS(fake_quantize_value(0.f, 1.f, 1.f, 4), NumericError);
    CHECK_THROWS_AS(fake_quantize_value(std::nanf(""), 0.f, 1.f, 4), NumericError);
}

TEST_CASE("fake quantize: exact invariants on random instances") {
    Rng rng(41);
    const int bit_choices[4] = {2, 3, 4, 8};
    for (int trial = 0; trial < 4000; ++trial) {
        const int bits = bit_choices[trial % 4];
        const float l = float(rng.uniform(-8.0, 4.0));
        const float u = l + float(rng.uniform(0.05, 12.0));
        const int levels = (1 << bits) - 1;

        // range and idempotence (bit-exact)
        const float v = float(rng.uniform(double(l) - 4.0, double(u) + 4.0));
        const float q1 = fake_quantize_value(v, l, u, bits);
        CHECK(q1 >= l);
        CHECK(q1 <= u);
        CHECK(fake_quantize_value(q1, l, u, bits) == q1);

        // grid fixed points: l + k*(u-l)/levels maps to itself
        const int k = int(rng.below(uint64_t(levels + 1)));
        const float gp = float(double(l) + double(k) * (double(u) - double(l)) / double(levels));
        CHECK(fake_quantize_value(gp, l, u, bits) == gp);

        // monotonicity
        const float v2 = float(rng.uniform(double(l) - 4.0, double(u) + 4.0));
        const float a = std::min(v, v2), b = std::max(v, v2);
        CHECK(fake_quantize_value(a, l, u, bits) <= fake_quantize_value(b, l, u, bits));
    }
}

TEST_CASE("fake quantize: tensor form matches scalar form, identity passes through") {
    Rng rng(7);
    Tensor v = test::rand_uniform(rng, {5, 7}, -2.f, 2.f);
    QuantizerState q{"x", QuantMode::symmetric_search, 3, -1.f, 1.5f, false};
    Tensor out = fake_quantize(v, q);
    for (int64_t i = 0; i < v.numel(); ++i)
        CHECK(out.data()[i] == fake_quantize_value(v.data()[i], q.l, q.u, q.bits));

    QuantizerState id_q{"id", QuantMode::identity, 4, 0.f, 0.f, false};
    Tensor same = fake_quantize(v, id_q);
    for (int64_t i = 0; i < v.numel(); ++i) CHECK(same.data()[i] == v.data()[i]);
}

// The relaxed (straight-through) form: equal to the quantized value at the
// operating point, and exactly the function whose local derivatives the
// analytic backward implements.
TEST_CASE("fake quantize: linearized form agrees at the operating point") {
    Rng rng(11);
    QuantizerState q{"x", QuantMode::symmetric_search, 2, -0.8f, 1.1f, false};
    Tensor v = test::rand_uniform(rng, {64}, -1.5f, 1.8f);
    Tensor e0 = quantize_residual(v, q);
    Tensor lin = linearized_quantize(v, q, e0);
    Tensor fq = fake_quantize(v, q);
    CHECK(test::max_abs_diff(lin, fq) < 1e-6);
}

TEST_CASE("fake quantize: gradients match difference quotients of the relaxed form") {
    Rng rng(1234);
    const int bit_choices[4] = {2, 3, 4, 8};
    const double h = 1e-3;
    int checked = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        const int bits = bit_choices[trial % 4];
        const double levels = double((1 << bits) - 1);
        const float l = float(rng.uniform(-4.0, 1.0));
        const float u = l + float(rng.uniform(0.5, 6.0));
        const float v = float(rng.uniform(double(l) - 1.0, double(u) + 1.0));

        // discontinuity safety: stay off clip kinks and half-integer positions
        const double range = double(u) - double(l);
        if (std::abs(double(v) - double(l)) < 0.05 * range) continue;
        if (std::abs(double(v) - double(u)) < 0.05 * range) continue;
        if (v > l && v < u) {
            const double pos = (double(v) - double(l)) * levels / range;
            if (std::abs(pos - std::round(pos)) > 0.45) continue;  // near half-integer
        }

        QuantizerState q{"x", QuantMode::symmetric_search, bits, l, u, false};
        Tensor vt({1}, {v});
        Tensor e0 = quantize_residual(vt, q);
        FqGrad an = fake_quantize_grad_value(v, l, u, bits);

        auto eval = [&](float ll, float uu) {
            QuantizerState qq = q;
            qq.l = ll;
            qq.u = uu;
            return double(linearized_quantize(vt, qq, e0).data()[0]);
        };
        const double fd_u = (eval(l, float(u + h)) - eval(l, float(u - h))) / (2 * h);
        const double fd_l = (eval(float(l + h), u) - eval(float(l - h), u)) / (2 * h);
        const double fd_v = [&] {
            Tensor vp({1}, {float(v + h)});
            Tensor vm({1}, {float(v - h)});
            return (double(linearized_quantize(vp, q, e0).data()[0]) -
                    double(linearized_quantize(vm, q, e0).data()[0])) /
                   (2 * h);
        }();
        const double scale_ref = std::max({1.0, std::abs(double(an.du)), std::abs(double(an.dl))});
        CHECK(std::abs(fd_u - double(an.du)) < 1e-2 * scale_ref);
        CHECK(std::abs(fd_l - double(an.dl)) < 1e-2 * scale_ref);
        CHECK(std::abs(fd_v - double(an.dv)) < 1e-2);
        ++checked;
    }
    CHECK(checked > 1000);
}

TEST_CASE("fake quantize: tensor backward reduces bound gradients correctly") {
    Rng rng(5);
    QuantizerState q{"x", QuantMode::symmetric_search, 3, -1.f, 1.f, false};
    Tensor v = test::rand_uniform(rng, {40}, -1.7f, 1.7f);
    Tensor g = test::rand_uniform(rng, {40}, -1.f, 1.f);
    Tensor gv;
    double gl = 0, gu = 0;
    fake_quantize_backward(v, q, g, &gv, &gl, &gu);
    double el = 0, eu = 0;
    Tensor ev({40});
    for (int64_t i = 0; i < 40; ++i) {
        FqGrad gr = fake_quantize_grad_value(v.data()[i], q.l, q.u, q.bits);
        el += double(g.data()[i]) * double(gr.dl);
        eu += double(g.data()[i]) * double(gr.du);
        ev.data()[i] = g.data()[i] * gr.dv;
    }
    CHECK(gl == doctest::Approx(el).epsilon(1e-9));
    CHECK(gu == doctest::Approx(eu).epsilon(1e-9));
    CHECK(test::max_abs_diff(gv, ev) < 1e-7);
}
