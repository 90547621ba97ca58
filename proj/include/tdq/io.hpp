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
#include <map>
#include <string>

#include "tdq/metrics.hpp"
#include "tdq/model.hpp"
#include "tdq/packed.hpp"
#include "tdq/stats.hpp"

namespace tdq {

// Binary container formats. Both are little-endian with explicit byte
// layout, written atomically (temp file + rename), and round-trip
// byte-identically: saving what load returned reproduces the input file.
//
// Checkpoint ("2DQF"): magic, format version, model config, then every
// parameter tensor in canonical enumeration order as (name, shape, float32
// data).
//
// Artifact ("2DQQ"): magic, version, config, bit width, per-site quantizers
// (mode, bits, bounds), packed low-bit payloads for the quantized weights,
// the full float parameter table (originals included, so an artifact is
// self-contained), and an optional per-site calibration statistics section.

void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

// Distribution summary captured during calibration, serialized with the
// artifact so reports need no second data pass.
struct SiteStats {
    TensorStats summary;
    Histogram histogram;
};

struct Artifact {
    ModelConfig config;
    int bits = 4;
    QuantizerSet quantizers;
    std::map<std::string, PackedIntTensor> packed;  // low-bit weight payloads
    std::map<std::string, Tensor> params;           // full float parameter table
    std::map<std::string, SiteStats> stats;         // empty when not collected

    void validate() const;  // cross-field consistency (throws FormatError)
};

void save_artifact(const std::string& path, const Artifact& a);
Artifact load_artifact(const std::string& path);

// ---- images ----------------------------------------------------------------
// Binary PPM (P6, 8-bit) always works; PNG needs the optional libpng build.
ImageU8 read_ppm(const std::string& path);
void write_ppm(const std::string& path, const ImageU8& img);

bool png_supported();

// Dispatch on the (case-insensitive) file extension: .ppm or .png.
ImageU8 read_image(const std::string& path);
void write_image(const std::string& path, const ImageU8& img);

}  // namespace tdq
