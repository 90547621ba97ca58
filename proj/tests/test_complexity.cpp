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
#include "json.hpp"
#include "tdq/complexity.hpp"

using namespace tdq;

TEST_CASE("parameter count matches a by-hand tally of the toy model") {
    // conv_first 12*3*9+12, patch-embed norm 24, two attention blocks at
    // 1382 each (norms 48, qkv 432+36, position table 49*2, proj 144+12,
    // fc1 288+24, fc2 288+12), group conv 12*12*9+12, final norm 24,
    // upsample conv 12*12*9+12 at x2
    CHECK(count_params(ModelConfig::toy(2)) == 5764);

    // every enumerated tensor accounted for exactly once
    int64_t total = 0;
    for (const auto& spec : enumerate_params(ModelConfig::toy(2))) total += shape_numel(spec.shape);
    CHECK(total == 5764);
}

TEST_CASE("parameter and size figures of the full-size model") {
    const ModelConfig cfg = ModelConfig::light(4);
    CHECK(count_params(cfg) == 897168);
    CHECK(count_quantizable_params(cfg) == 691200);
    CHECK(model_size_bytes(cfg) == 4 * 897168);
    CHECK(model_size_mb(cfg) == doctest::Approx(3.42243).epsilon(1e-4));
    CHECK(quantizable_fraction(cfg) == doctest::Approx(0.770424).epsilon(1e-5));

    // smaller upsampling head at x2
    CHECK(count_params(ModelConfig::light(2)) == 877692);
}

TEST_CASE("compression ratios at 4/3/2 bits") {
    const ModelConfig cfg = ModelConfig::light(4);
    CHECK(compression_ratio(cfg, 4) == doctest::Approx(3.068617).epsilon(1e-5));
    CHECK(compression_ratio(cfg, 3) == doctest::Approx(3.313414).epsilon(1e-5));
    CHECK(compression_ratio(cfg, 2) == doctest::Approx(3.600648).epsilon(1e-5));
    // fewer bits always compress harder
    CHECK(compression_ratio(cfg, 2) > compression_ratio(cfg, 3));
    CHECK(compression_ratio(cfg, 3) > compression_ratio(cfg, 4));
    CHECK(compression_ratio(cfg, 4) > compression_ratio(cfg, 8));
    CHECK(compression_ratio(cfg, 8) > 1.0);
    CHECK_THROWS_AS(compression_ratio(cfg, 5), UsageError);
}

TEST_CASE("per-pixel op counts match hand-derived figures") {
    // x2 model: per-pixel 875520 matmul MACs, 137700 conv MACs, 9075 other
    const OpCounts c2 = count_ops(ModelConfig::light(2), 1, 1);
    CHECK(c2.linear_bmm == doctest::Approx(875520.0));
    CHECK(c2.conv == doctest::Approx(137700.0));
    CHECK(c2.other == doctest::Approx(9075.0));

    // x4 differs only in the upsampling conv and the mean re-add
    const OpCounts c4 = count_ops(ModelConfig::light(4), 1, 1);
    CHECK(c4.linear_bmm == doctest::Approx(875520.0));
    CHECK(c4.conv == doctest::Approx(157140.0));
    CHECK(c4.other == doctest::Approx(9111.0));
    CHECK(c4.linear_share() == doctest::Approx(0.840415).epsilon(1e-5));

    // counts scale linearly with pixels
    const OpCounts big = count_ops(ModelConfig::light(4), 72, 112);
    CHECK(big.linear_bmm == doctest::Approx(875520.0 * 8064));
    CHECK(big.flops() == doctest::Approx(2074431.0 * 8064));
    CHECK(big.flops() / 1e9 == doctest::Approx(16.728).epsilon(1e-3));
    CHECK(big.linear_flops() / 1e9 == doctest::Approx(14.120).epsilon(1e-3));
}

TEST_CASE("ideal speedups at 4/3/2 bits") {
    const ModelConfig cfg = ModelConfig::light(2);
    CHECK(speedup_ratio(cfg, 4, 72, 112) == doctest::Approx(3.990027).epsilon(1e-5));
    CHECK(speedup_ratio(cfg, 3, 72, 112) == doctest::Approx(4.466999).epsilon(1e-5));
    CHECK(speedup_ratio(cfg, 2, 72, 112) == doctest::Approx(5.073550).epsilon(1e-5));
    CHECK(speedup_ratio(cfg, 2, 72, 112) > speedup_ratio(cfg, 3, 72, 112));
    CHECK(speedup_ratio(cfg, 3, 72, 112) > speedup_ratio(cfg, 4, 72, 112));
    // resolution cancels out of the ratio
    CHECK(speedup_ratio(cfg, 4, 7, 13) == doctest::Approx(speedup_ratio(cfg, 4, 72, 112)));
}

TEST_CASE("matmul work grows quadratically with the embedding width") {
    ModelConfig small = ModelConfig::toy(2);
    ModelConfig wide = small;
    wide.embed_dim *= 2;
    wide.num_heads *= 2;  // keep head_dim fixed
    const OpCounts a = count_ops(small, 8, 8);
    const OpCounts b = count_ops(wide, 8, 8);
    // qkv/proj/fc terms are quadratic in C, the BMM term linear: ratio in (2, 4)
    CHECK(b.linear_bmm / a.linear_bmm > 2.0);
    CHECK(b.linear_bmm / a.linear_bmm < 4.0);
    // conv term: 9*(3C + C^2 + 12C) per pixel, also superlinear
    CHECK(b.conv / a.conv > 2.0);
}

TEST_CASE("reports carry the headline figures") {
    const std::string text = complexity_report_text(ModelConfig::light(4), 4, 72, 112);
    CHECK(text.find("897168") != std::string::npos);
    CHECK(text.find("691200") != std::string::npos);
    CHECK(text.find("3.42") != std::string::npos);

    const auto j = nlohmann::json::parse(complexity_report_json(ModelConfig::light(4), 2, 72, 112));
    CHECK(j["params"]["total"] == 897168);
    CHECK(j["params"]["quantizable"] == 691200);
    CHECK(j["bits"] == 2);
    CHECK(double(j["size"]["compression_ratio"]) == doctest::Approx(3.600648).epsilon(1e-5));
    CHECK(double(j["ops"]["linear_share"]) == doctest::Approx(0.840415).epsilon(1e-5));
    CHECK(j["config"]["scale"] == 4);
}

TEST_CASE("bad inputs are rejected") {
    CHECK_THROWS_AS(count_ops(ModelConfig::light(4), 0, 10), UsageError);
    CHECK_THROWS_AS(speedup_ratio(ModelConfig::light(4), 7, 8, 8), UsageError);
    ModelConfig bad = ModelConfig::light(4);
    bad.num_heads = 7;  // 60 not divisible
    CHECK_THROWS_AS(count_ops(bad, 8, 8), UsageError);
}
