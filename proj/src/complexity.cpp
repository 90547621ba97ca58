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
#include "tdq/complexity.hpp"

#include <cmath>
#include <sstream>

#include "json.hpp"
#include "tdq/common.hpp"

namespace tdq {

OpCounts count_ops(const ModelConfig& cfg, int64_t h, int64_t w) {
    cfg.validate();
    if (h < 1 || w < 1) throw UsageError("op counting needs a positive input size");
    const double C = cfg.embed_dim;
    const double Hm = cfg.mlp_dim();
    const double M2 = double(cfg.window) * cfg.window;
    const double depth = cfg.total_depth();
    const double r2 = double(cfg.scale) * cfg.scale;
    const double px = double(h) * double(w);

    OpCounts c;
    // per token, per attention block: qkv [C->3C], two window BMMs (q@k^T and
    // attn@v, each M^2*C across the window), proj [C->C], fc1/fc2 [C<->Hm]
    c.linear_bmm = px * depth * (4.0 * C * C + 2.0 * M2 * C + 2.0 * C * Hm);
    // 3x3 convs: RGB lift, one conv closing each residual group, upsampling
    c.conv = px * 9.0 * (3.0 * C + cfg.num_blocks * C * C + C * 3.0 * r2);
    // one op per element: layernorms (patch embed + 2 per block + final),
    // GELU, residual adds (2 per block + per-group + long skip), mean shift
    c.other = px * ((2.0 + 2.0 * depth) * C + depth * Hm +
                    C * (2.0 * depth + cfg.num_blocks + 1.0) + 3.0 + 3.0 * r2);
    return c;
}

int64_t model_size_bytes(const ModelConfig& cfg) { return 4 * count_params(cfg); }

double model_size_mb(const ModelConfig& cfg) {
    return double(model_size_bytes(cfg)) / (1024.0 * 1024.0);
}

double quantizable_fraction(const ModelConfig& cfg) {
    return double(count_quantizable_params(cfg)) / double(count_params(cfg));
}

double compression_ratio(const ModelConfig& cfg, int bits) {
    if (!valid_bit_width(bits)) throw UsageError(strf("unsupported bit width ", bits));
    const double q = quantizable_fraction(cfg);
    return 1.0 / ((1.0 - q) + q * double(bits) / 32.0);
}

double speedup_ratio(const ModelConfig& cfg, int bits, int64_t h, int64_t w) {
    if (!valid_bit_width(bits)) throw UsageError(strf("unsupported bit width ", bits));
    const OpCounts c = count_ops(cfg, h, w);
    const double quantized = c.linear_bmm * double(bits) / 32.0 + c.conv + c.other;
    return c.mixed_total() / quantized;
}

std::string complexity_report_text(const ModelConfig& cfg, int bits, int64_t h, int64_t w) {
    const OpCounts c = count_ops(cfg, h, w);
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << "model: embed " << cfg.embed_dim << ", heads " << cfg.num_heads << ", window "
       << cfg.window << ", groups " << cfg.num_blocks << "x" << cfg.depth << ", x" << cfg.scale
       << " upscaling\n";
    os << "input: " << h << "x" << w << " -> " << cfg.scale * h << "x" << cfg.scale * w << "\n";
    os << "parameters: " << count_params(cfg) << " (" << count_quantizable_params(cfg)
       << " quantizable, " << 100.0 * quantizable_fraction(cfg) << "% of weights)\n";
    os << "model size: " << model_size_mb(cfg) << " MB float32, "
       << model_size_mb(cfg) / compression_ratio(cfg, bits) << " MB at " << bits
       << " bits (x" << compression_ratio(cfg, bits) << " smaller)\n";
    os << "forward pass: " << c.flops() / 1e9 << " GFLOPs total, " << c.linear_flops() / 1e9
       << " GFLOPs in quantizable matmuls (" << 100.0 * c.linear_share()
       << "% of mixed op count)\n";
    os << "ideal speedup at " << bits << " bits: x" << speedup_ratio(cfg, bits, h, w) << "\n";
    return os.str();
}

std::string complexity_report_json(const ModelConfig& cfg, int bits, int64_t h, int64_t w) {
    const OpCounts c = count_ops(cfg, h, w);
    nlohmann::json j;
    j["config"] = {{"embed_dim", cfg.embed_dim}, {"num_heads", cfg.num_heads},
                   {"window", cfg.window},       {"mlp_ratio", cfg.mlp_ratio},
                   {"num_blocks", cfg.num_blocks}, {"depth", cfg.depth},
                   {"scale", cfg.scale}};
    j["input"] = {{"height", h}, {"width", w}};
    j["bits"] = bits;
    j["params"] = {{"total", count_params(cfg)},
                   {"quantizable", count_quantizable_params(cfg)},
                   {"quantizable_fraction", quantizable_fraction(cfg)}};
    j["size"] = {{"float32_bytes", model_size_bytes(cfg)},
                 {"float32_mb", model_size_mb(cfg)},
                 {"compression_ratio", compression_ratio(cfg, bits)}};
    j["ops"] = {{"linear_bmm_macs", c.linear_bmm},
                {"conv_macs", c.conv},
                {"other", c.other},
                {"flops", c.flops()},
                {"linear_flops", c.linear_flops()},
                {"linear_share", c.linear_share()}};
    j["speedup_ratio"] = speedup_ratio(cfg, bits, h, w);
    return j.dump() + "\n";
}

}  // namespace tdq
