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
#include "tdq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tdq/common.hpp"
#include "tdq/complexity.hpp"
#include "tdq/dobi.hpp"
#include "tdq/stats.hpp"

namespace tdq {

namespace {

// Pass one: stream per-site statistics (activations only; weights are
// static and handled once outside the forward loop).
struct StatsHooks final : QuantHooks {
    std::map<std::string, StatsAccumulator>* acc;
    const std::set<std::string>* weight_ids;
    Tensor site(const std::string& id, const Tensor& v) override {
        if (!weight_ids->count(id)) (*acc)[id].add(v);
        return v;
    }
};

// Pass two: stream activations into the candidate search and the histogram.
struct SearchHooks final : QuantHooks {
    std::map<std::string, DobiAccumulator>* search;
    std::map<std::string, Histogram>* hist;
    const std::set<std::string>* weight_ids;
    Tensor site(const std::string& id, const Tensor& v) override {
        if (weight_ids->count(id)) return v;
        auto it = search->find(id);
        if (it != search->end()) it->second.add(v);
        auto ht = hist->find(id);
        if (ht != hist->end()) ht->second.add(v);
        return v;
    }
};

Histogram make_histogram(const TensorStats& s, int bins) {
    // widen constant tensors so the histogram stays constructible
    const double lo = s.min, hi = s.max;
    if (hi > lo) return Histogram(lo, hi, bins);
    return Histogram(lo - 0.5, hi + 0.5, bins);
}

}  // namespace

QuantizerSet dobi_calibrate(const Model& model, const std::vector<Tensor>& patches,
                            const CalibrateConfig& cfg,
                            std::map<std::string, SiteStats>* stats_out) {
    if (patches.empty()) throw UsageError("calibration needs at least one patch");
    if (!valid_bit_width(cfg.bits)) throw UsageError(strf("unsupported bit width ", cfg.bits));
    if (cfg.search_steps < 1) throw UsageError("bound search needs at least one step");
    if (cfg.histogram_bins < 2) throw UsageError("histogram needs at least two bins");

    const auto sites = quantizer_sites(model.config());
    std::set<std::string> weight_ids;
    for (const auto& s : sites)
        if (s.is_weight) weight_ids.insert(s.id);

    // pass one: distribution statistics
    std::map<std::string, StatsAccumulator> acc;
    {
        StatsHooks hooks;
        hooks.acc = &acc;
        hooks.weight_ids = &weight_ids;
        for (const auto& p : patches) model.forward(p, &hooks, false);
    }
    std::map<std::string, TensorStats> stats;
    for (const auto& s : sites) {
        if (s.is_weight) {
            StatsAccumulator wa;
            wa.add(model.param(s.id));
            stats[s.id] = wa.finalize();
        } else {
            auto it = acc.find(s.id);
            if (it == acc.end())
                throw NumericError(strf("site '", s.id, "' never fired during calibration"));
            stats[s.id] = it->second.finalize();
        }
    }

    // choose modes, then pass two: accumulate candidate errors and histograms
    std::map<std::string, DobiAccumulator> search;
    std::map<std::string, Histogram> hist;
    QuantizerSet qs;
    for (const auto& s : sites) {
        const TensorStats& st = stats[s.id];
        QuantizerState q;
        q.id = s.id;
        q.bits = cfg.bits;
        q.is_weight = s.is_weight;
        if (st.degenerate()) {
            q.mode = QuantMode::identity;
            qs.emplace(s.id, q);
            continue;
        }
        q.mode = s.is_weight          ? QuantMode::symmetric_search
                 : s.fixed_lower_hint ? QuantMode::fixed_lower
                                      : detect_symmetry(st, cfg.skew_threshold);
        if (s.is_weight) {
            const DobiResult r = dobi_search(model.param(s.id), cfg.bits, q.mode,
                                             cfg.search_steps);
            q.l = r.l;
            q.u = r.u;
        } else {
            search.emplace(s.id, DobiAccumulator(st.min, st.max, cfg.bits, q.mode,
                                                 cfg.search_steps));
        }
        qs.emplace(s.id, q);
    }
    if (cfg.collect_stats && stats_out)
        for (const auto& s : sites) hist.emplace(s.id, make_histogram(stats[s.id], cfg.histogram_bins));

    if (!search.empty() || !hist.empty()) {
        SearchHooks hooks;
        hooks.search = &search;
        hooks.hist = &hist;
        hooks.weight_ids = &weight_ids;
        for (const auto& p : patches) model.forward(p, &hooks, false);
    }
    for (auto& [id, sa] : search) {
        const DobiResult r = sa.finalize();
        qs.at(id).l = r.l;
        qs.at(id).u = r.u;
    }

    if (cfg.collect_stats && stats_out) {
        for (const auto& s : sites) {
            auto ht = hist.find(s.id);
            if (s.is_weight) ht->second.add(model.param(s.id));
            (*stats_out)[s.id] = SiteStats{stats[s.id], ht->second};
        }
    }
    return qs;
}

Artifact make_artifact(const Model& model, const QuantizerSet& qs, int bits,
                       std::map<std::string, SiteStats> stats) {
    if (!valid_bit_width(bits)) throw UsageError(strf("unsupported bit width ", bits));
    Artifact a;
    a.config = model.config();
    a.bits = bits;
    a.quantizers = qs;
    a.params = model.params();
    a.stats = std::move(stats);
    for (const auto& site : quantizer_sites(model.config())) {
        auto it = qs.find(site.id);
        if (it == qs.end())
            throw UsageError(strf("quantizer set is missing site '", site.id, "'"));
        if (site.is_weight && it->second.active())
            a.packed.emplace(site.id, pack_tensor(model.param(site.id), it->second));
    }
    a.validate();
    return a;
}

Model artifact_model(const Artifact& a) {
    Model m(a.config);
    for (const auto& [name, t] : a.params) m.set_param(name, t);
    m.validate_params();
    return m;
}

Tensor infer_artifact(const Artifact& a, const Tensor& lr) {
    return artifact_model(a).forward_packed(lr, a.quantizers, a.packed);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

double clipped_below(const SiteStats& s, float l) { return s.histogram.percentile_of(l); }
double clipped_above(const SiteStats& s, float u) { return 1.0 - s.histogram.percentile_of(u); }

}  // namespace

std::string artifact_report_json(const Artifact& a) {
    a.validate();
    nlohmann::json j;
    j["config"] = {{"embed_dim", a.config.embed_dim}, {"num_heads", a.config.num_heads},
                   {"window", a.config.window},       {"mlp_ratio", a.config.mlp_ratio},
                   {"num_blocks", a.config.num_blocks}, {"depth", a.config.depth},
                   {"scale", a.config.scale}};
    j["bits"] = a.bits;
    j["size"] = {{"float32_mb", model_size_mb(a.config)},
                 {"compression_ratio", compression_ratio(a.config, a.bits)},
                 {"speedup_ratio", speedup_ratio(a.config, a.bits, kReportH, kReportW)}};
    auto& sites = j["sites"] = nlohmann::json::array();
    for (const auto& [id, st] : a.quantizers) {
        nlohmann::json s = {{"id", id},
                            {"mode", quant_mode_name(st.mode)},
                            {"bits", st.bits},
                            {"is_weight", st.is_weight}};
        if (st.active()) {
            s["l"] = st.l;
            s["u"] = st.u;
        }
        auto sit = a.stats.find(id);
        if (sit != a.stats.end()) {
            const TensorStats& t = sit->second.summary;
            s["stats"] = {{"count", t.count}, {"min", t.min},   {"max", t.max},
                          {"mean", t.mean},   {"sd", t.sd},     {"skew", t.skew}};
            if (st.active()) {
                s["clipped_below"] = clipped_below(sit->second, st.l);
                s["clipped_above"] = clipped_above(sit->second, st.u);
            }
        }
        sites.push_back(std::move(s));
    }
    return j.dump(2) + "\n";
}

std::string artifact_report_text(const Artifact& a) {
    a.validate();
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os << "quantization artifact: " << a.bits << "-bit, " << a.quantizers.size() << " sites, "
       << a.packed.size() << " packed weight payloads\n";
    os.precision(3);
    os << "model: embed " << a.config.embed_dim << ", " << a.config.num_blocks << "x"
       << a.config.depth << " blocks, x" << a.config.scale << " upscaling, "
       << model_size_mb(a.config) << " MB float32\n";
    os << "compression x" << compression_ratio(a.config, a.bits) << ", ideal speedup x"
       << speedup_ratio(a.config, a.bits, kReportH, kReportW) << "\n\n";
    os << "site                                            mode        bounds            clip%\n";
    for (const auto& [id, st] : a.quantizers) {
        os.width(48);
        os.setf(std::ios::left, std::ios::adjustfield);
        os << id;
        os.width(12);
        os << quant_mode_name(st.mode);
        os.unsetf(std::ios::adjustfield);
        if (st.active()) {
            std::ostringstream b;
            b.setf(std::ios::fixed);
            b.precision(4);
            b << "[" << st.l << ", " << st.u << "]";
            os.width(18);
            os.setf(std::ios::left, std::ios::adjustfield);
            os << b.str();
            os.unsetf(std::ios::adjustfield);
            auto sit = a.stats.find(id);
            if (sit != a.stats.end()) {
                os.precision(2);
                os << " " << 100.0 * clipped_below(sit->second, st.l) << " / "
                   << 100.0 * clipped_above(sit->second, st.u);
                os.precision(3);
            }
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace tdq
