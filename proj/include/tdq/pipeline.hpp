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

#include "tdq/distill.hpp"
#include "tdq/io.hpp"

namespace tdq {

struct CalibrateConfig {
    int bits = 4;
    int search_steps = 100;       // candidate bound pairs per site
    double skew_threshold = 0.5;  // |skew| below this counts as symmetric
    int histogram_bins = 1024;
    bool collect_stats = true;
};

// Coarse bound search over the calibration patches, two streaming passes:
// one for per-site distribution statistics (choosing each site's search
// mode), one accumulating every candidate bound pair's reconstruction error.
// Softmax sites always keep the pinned lower bound; weight tensors are
// searched directly. Constant tensors fall back to bypass quantizers.
QuantizerSet dobi_calibrate(const Model& model, const std::vector<Tensor>& patches,
                            const CalibrateConfig& cfg,
                            std::map<std::string, SiteStats>* stats_out);

// Deployable artifact: packs every active weight site at its bounds and
// copies the full float parameter table.
Artifact make_artifact(const Model& model, const QuantizerSet& qs, int bits,
                       std::map<std::string, SiteStats> stats);

// Float model reconstructed from an artifact's parameter table.
Model artifact_model(const Artifact& a);

// Packed-integer inference straight from an artifact.
Tensor infer_artifact(const Artifact& a, const Tensor& lr);

// Per-site summary of an artifact. The JSON form carries the quantizers,
// clipped-tail fractions from the stored histograms, and the size/speedup
// headline; the text form is the human-readable digest of the same.
std::string artifact_report_text(const Artifact& a);
std::string artifact_report_json(const Artifact& a);

}  // namespace tdq
