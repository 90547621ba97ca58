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
//
// Command-line driver for the quantization pipeline:
//
//   tdq init       write a randomly initialized float checkpoint
//   tdq calibrate  coarse bound search over calibration images -> artifact
//   tdq distill    distillation refinement of an artifact's bounds
//   tdq infer      upscale an image with a quantized artifact
//   tdq report     size/speed accounting and per-site bound summary
//   tdq selftest   quick built-in sanity checks
//
// Exit codes: 0 success, 2 input/format error, 3 numeric failure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tdq/autodiff.hpp"
#include "tdq/common.hpp"
#include "tdq/complexity.hpp"
#include "tdq/distill.hpp"
#include "tdq/dobi.hpp"
#include "tdq/io.hpp"
#include "tdq/metrics.hpp"
#include "tdq/model.hpp"
#include "tdq/packed.hpp"
#include "tdq/pipeline.hpp"
#include "tdq/quantizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tdq;

namespace {

// ---------------------------------------------------------------------------
// Small shared helpers
// ---------------------------------------------------------------------------

void write_text_file(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw FormatError(strf("cannot open '", tmp, "' for writing"));
        f.write(text.data(), std::streamsize(text.size()));
        f.flush();
        if (!f) {
            std::remove(tmp.c_str());
            throw FormatError(strf("error writing '", tmp, "'"));
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw FormatError(strf("cannot move '", tmp, "' into place"));
    }
}

json load_config_json(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream f(path);
    if (!f) throw FormatError(strf("cannot open config '", path, "'"));
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw FormatError(strf("config '", path, "': ", e.what()));
    }
    if (!j.is_object()) throw FormatError(strf("config '", path, "' is not a JSON object"));
    return j;
}

// Effective knob value: an explicitly passed CLI flag wins, then a config
// file field of the same name, then the built-in default already in `value`.
template <typename T>
T pick(const CLI::Option* opt, T value, const json& cfg, const char* key) {
    if (opt != nullptr && opt->count() > 0) return value;
    if (cfg.contains(key)) {
        try {
            return cfg.at(key).get<T>();
        } catch (const json::exception& e) {
            throw FormatError(strf("config field '", key, "': ", e.what()));
        }
    }
    return value;
}

std::vector<std::string> list_images(const std::string& dir) {
    if (!fs::is_directory(dir)) throw UsageError(strf("'", dir, "' is not a directory"));
    std::vector<std::string> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char c) { return char(std::tolower(c)); });
        if (ext == ".ppm" || (ext == ".png" && png_supported())) out.push_back(entry.path().string());
    }
    std::sort(out.begin(), out.end());
    if (out.empty())
        throw UsageError(strf("no calibration images (.ppm", png_supported() ? "/.png" : "",
                              ") found in '", dir, "'"));
    return out;
}

// Uniform random crops, cycling through the image list in sorted order.
std::vector<Tensor> crop_patches(const std::vector<std::string>& files, int count, int size,
                                 Rng& rng) {
    if (count < 1) throw UsageError("patch count must be positive");
    if (size < 1) throw UsageError("patch size must be positive");
    std::map<std::string, Tensor> cache;
    std::vector<Tensor> out;
    out.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
        const std::string& path = files[size_t(i) % files.size()];
        auto it = cache.find(path);
        if (it == cache.end()) it = cache.emplace(path, image_to_tensor(read_image(path))).first;
        const Tensor& img = it->second;
        const int64_t h = img.dim(1), w = img.dim(2);
        if (h < size || w < size)
            throw UsageError(strf("image '", path, "' is ", w, "x", h, ", smaller than the ",
                                  size, "x", size, " patch"));
        const int64_t y0 = int64_t(rng.below(uint64_t(h - size + 1)));
        const int64_t x0 = int64_t(rng.below(uint64_t(w - size + 1)));
        Tensor p({3, size, size});
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < size; ++y)
                for (int64_t x = 0; x < size; ++x) p.at({c, y, x}) = img.at({c, y0 + y, x0 + x});
        out.push_back(std::move(p));
    }
    return out;
}

ModelConfig preset_config(const std::string& preset, int scale) {
    if (preset == "toy") return ModelConfig::toy(scale);
    return ModelConfig::light(scale);
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct GlobalOpts {
    int bits = 4;
    int scale = 4;
    uint64_t seed = 0;
    std::string config_path;
    int threads = 1;
    const CLI::Option* bits_opt = nullptr;
    const CLI::Option* seed_opt = nullptr;
};

struct CalibrateOpts {
    std::string checkpoint, calib_dir, out, report;
    int patches = 32;
    int patch_size = 32;
    int search_steps = 100;
    double skew_threshold = 0.5;
    int histogram_bins = 1024;
    bool no_stats = false;
    const CLI::Option *patches_opt = nullptr, *patch_size_opt = nullptr, *steps_opt = nullptr,
                      *skew_opt = nullptr, *bins_opt = nullptr;
};

int cmd_calibrate(const GlobalOpts& g, const CalibrateOpts& o) {
    const json cfgj = load_config_json(g.config_path);
    const Model model = load_checkpoint(o.checkpoint);
    const auto files = list_images(o.calib_dir);

    CalibrateConfig cc;
    cc.bits = pick(g.bits_opt, g.bits, cfgj, "bits");
    cc.search_steps = pick(o.steps_opt, o.search_steps, cfgj, "search_steps");
    cc.skew_threshold = pick(o.skew_opt, o.skew_threshold, cfgj, "skew_threshold");
    cc.histogram_bins = pick(o.bins_opt, o.histogram_bins, cfgj, "histogram_bins");
    cc.collect_stats = !o.no_stats;
    const int patches = pick(o.patches_opt, o.patches, cfgj, "patches");
    const int patch_size = pick(o.patch_size_opt, o.patch_size, cfgj, "patch_size");

    Rng rng(pick(g.seed_opt, g.seed, cfgj, "seed"));
    const auto pats = crop_patches(files, patches, patch_size, rng);

    std::map<std::string, SiteStats> stats;
    const QuantizerSet qs = dobi_calibrate(model, pats, cc, cc.collect_stats ? &stats : nullptr);
    const Artifact a = make_artifact(model, qs, cc.bits, std::move(stats));
    save_artifact(o.out, a);
    if (!o.report.empty()) write_text_file(o.report, artifact_report_json(a));

    std::cout << "calibrated " << qs.size() << " sites at " << cc.bits << "-bit from " << patches
              << " patches (" << files.size() << " images, " << patch_size << "x" << patch_size
              << ")\n"
              << "artifact written to " << o.out << "\n";
    if (!o.report.empty()) std::cout << "report written to " << o.report << "\n";
    return 0;
}

struct DistillOpts {
    std::string artifact, calib_dir, val_dir, out, log;
    int iters = 3000;
    int batch = 32;
    int val_every = 100;
    double lr = 1e-2;
    double lambda = 1.0;
    int patches = 32;
    int val_patches = 4;
    int patch_size = 32;
    bool from_minmax = false;
    const CLI::Option *iters_opt = nullptr, *batch_opt = nullptr, *val_every_opt = nullptr,
                      *lr_opt = nullptr, *lambda_opt = nullptr, *log_opt = nullptr,
                      *patches_opt = nullptr, *val_patches_opt = nullptr,
                      *patch_size_opt = nullptr;
};

int cmd_distill(const GlobalOpts& g, const DistillOpts& o) {
    const json cfgj = load_config_json(g.config_path);
    const Artifact a = load_artifact(o.artifact);
    const Model model = artifact_model(a);

    const auto train_files = list_images(o.calib_dir);
    const auto val_files = o.val_dir.empty() ? train_files : list_images(o.val_dir);

    DqcConfig dc;
    dc.iters = pick(o.iters_opt, o.iters, cfgj, "iters");
    dc.batch = pick(o.batch_opt, o.batch, cfgj, "batch");
    dc.val_every = pick(o.val_every_opt, o.val_every, cfgj, "val_every");
    dc.lr = pick(o.lr_opt, o.lr, cfgj, "lr");
    dc.lambda = pick(o.lambda_opt, o.lambda, cfgj, "lambda");
    dc.seed = pick(g.seed_opt, g.seed, cfgj, "seed");
    dc.log_path = pick(o.log_opt, o.log, cfgj, "log_path");
    const int patches = pick(o.patches_opt, o.patches, cfgj, "patches");
    const int val_patches = pick(o.val_patches_opt, o.val_patches, cfgj, "val_patches");
    const int patch_size = pick(o.patch_size_opt, o.patch_size, cfgj, "patch_size");
    if (dc.iters < 0) throw UsageError("iteration count cannot be negative");
    if (patch_size % model.config().window != 0)
        throw UsageError(strf("patch size ", patch_size, " must be a multiple of the model window ",
                              model.config().window));

    Rng rng(dc.seed);
    const auto train = crop_patches(train_files, patches, patch_size, rng);
    const auto val = crop_patches(val_files, val_patches, patch_size, rng);

    const QuantizerSet init =
        o.from_minmax ? minmax_calibrate(model, train, a.bits) : a.quantizers;
    if (o.from_minmax) std::cout << "starting from single-sweep min/max bounds\n";

    QuantizerSet refined;
    if (dc.iters == 0) {
        refined = init;
        std::cout << "0 iterations requested; writing input bounds unchanged\n";
    } else {
        const DqcResult r = dqc_train(model, init, train, val, dc);
        refined = r.quantizers;
        std::cout.setf(std::ios::fixed);
        std::cout.precision(3);
        std::cout << "validation PSNR vs float teacher: " << r.initial_val_psnr << " dB -> "
                  << r.best_val_psnr << " dB (best at iteration " << r.best_iter << " of "
                  << dc.iters << ")\n";
    }

    const Artifact out = make_artifact(model, refined, a.bits, a.stats);
    save_artifact(o.out, out);
    std::cout << "artifact written to " << o.out << "\n";
    if (!dc.log_path.empty()) std::cout << "training log written to " << dc.log_path << "\n";
    return 0;
}

struct InferOpts {
    std::string artifact, in, out, ref;
    std::string mode = "packed-int";
    int shave = -1;  // -1: use the model's upscaling factor
};

int cmd_infer(const InferOpts& o) {
    const Artifact a = load_artifact(o.artifact);
    const ImageU8 img = read_image(o.in);
    const Tensor x = image_to_tensor(img);

    Tensor y;
    if (o.mode == "packed-int") {
        y = infer_artifact(a, x);
    } else {
        const Model m = artifact_model(a);
        if (o.mode == "fake-quant") {
            FakeQuantHooks hooks(a.quantizers);
            y = m.forward(x, &hooks, false).output;
        } else {  // float
            y = m.forward(x, nullptr, false).output;
        }
    }
    const ImageU8 out_img = tensor_to_image(y);
    write_image(o.out, out_img);
    std::cout << "upscaled " << img.width << "x" << img.height << " -> " << out_img.width << "x"
              << out_img.height << " (x" << a.config.scale << ", " << o.mode << ") into " << o.out
              << "\n";

    if (!o.ref.empty()) {
        const Tensor ref = image_to_tensor(read_image(o.ref));
        const Tensor yq = image_to_tensor(out_img);  // score the 8-bit result actually written
        if (ref.shape() != yq.shape())
            throw UsageError(strf("reference image is ", shape_str(ref.shape()),
                                  " but the output is ", shape_str(yq.shape())));
        const int64_t shave = o.shave >= 0 ? o.shave : a.config.scale;
        std::cout.setf(std::ios::fixed);
        std::cout.precision(4);
        std::cout << "PSNR-Y: " << psnr_y(yq, ref, shave) << " dB  SSIM-Y: " << ssim_y(yq, ref, shave)
                  << " (border shave " << shave << ")\n";
    }
    return 0;
}

struct ReportOpts {
    std::string artifact, out;
    std::string preset = "light";
    bool as_json = false;
    int64_t height = kReportH;
    int64_t width = kReportW;
};

int cmd_report(const GlobalOpts& g, const ReportOpts& o) {
    std::string text;
    if (!o.artifact.empty()) {
        const Artifact a = load_artifact(o.artifact);
        text = o.as_json ? artifact_report_json(a) : artifact_report_text(a);
        if (!o.as_json && a.stats.empty())
            text += "note: no stored calibration statistics; clipped-tail percentiles omitted\n";
    } else {
        const ModelConfig cfg = preset_config(o.preset, g.scale);
        text = o.as_json ? complexity_report_json(cfg, g.bits, o.height, o.width)
                         : complexity_report_text(cfg, g.bits, o.height, o.width);
    }
    if (o.out.empty()) {
        std::cout << text;
    } else {
        write_text_file(o.out, text);
        std::cout << "report written to " << o.out << "\n";
    }
    return 0;
}

struct InitOpts {
    std::string preset = "light";
    std::string out;
};

int cmd_init(const GlobalOpts& g, const InitOpts& o) {
    const ModelConfig cfg = preset_config(o.preset, g.scale);
    Rng rng(g.seed);
    const Model m = Model::random_init(cfg, rng);
    save_checkpoint(o.out, m);
    std::cout << "initialized " << o.preset << " x" << cfg.scale << " model ("
              << count_params(cfg) << " parameters) -> " << o.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Self test: quick end-to-end sanity checks with no external inputs
// ---------------------------------------------------------------------------

void expect(bool cond, const std::string& what) {
    if (!cond) throw NumericError(what);
}

double max_abs(const Tensor& a, const Tensor& b) {
    expect(a.shape() == b.shape(), "shape mismatch");
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
    return m;
}

void selftest_quantizer() {
    Rng rng(1);
    const int widths[4] = {2, 3, 4, 8};
    for (int i = 0; i < 20000; ++i) {
        const int bits = widths[rng.below(4)];
        const float l = float(rng.uniform(-3.0, 1.0));
        const float u = l + float(rng.uniform(0.05, 4.0));
        const float v = float(rng.uniform(-5.0, 5.0));
        const float q = fake_quantize_value(v, l, u, bits);
        expect(q >= l && q <= u, "quantized value escaped its bounds");
        expect(fake_quantize_value(q, l, u, bits) == q, "quantization is not idempotent");
        const float v2 = float(rng.uniform(-5.0, 5.0));
        const float q2 = fake_quantize_value(v2, l, u, bits);
        expect((v <= v2) ? (q <= q2) : (q2 <= q), "quantization is not monotone");
    }
}

void selftest_bound_search() {
    Rng rng(2);
    for (int t = 0; t < 100; ++t) {
        Tensor v({256});
        for (int64_t i = 0; i < v.numel(); ++i) v.data()[i] = float(rng.normal(0.0, 1.0));
        const int bits = 2 + int(rng.below(3));
        const DobiResult r = dobi_search(v, bits, QuantMode::symmetric_search, 50);
        // a one-candidate search evaluates exactly the raw min/max bounds
        const DobiResult raw = dobi_search(v, bits, QuantMode::symmetric_search, 1);
        expect(r.mse <= raw.mse + 1e-12, "searched bounds lost to the raw min/max bounds");
        expect(r.l >= raw.l && r.u <= raw.u, "searched bounds left the data range");
    }
}

void selftest_packed() {
    Rng rng(3);
    Tensor x({8, 16}), w({12, 16}), bias({12});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = float(rng.uniform(-2.0, 2.0));
    for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = float(rng.normal(0.0, 0.5));
    for (int64_t i = 0; i < bias.numel(); ++i) bias.data()[i] = float(rng.uniform(-1.0, 1.0));
    for (int bits : {2, 3, 4, 8}) {
        QuantizerState sx, sw;
        sx.id = "x";
        sx.bits = bits;
        sx.l = -2.f;
        sx.u = 2.f;
        sw.id = "w";
        sw.bits = bits;
        sw.is_weight = true;
        sw.l = -1.6f;
        sw.u = 1.6f;
        const PackedIntTensor px = pack_tensor(x, sx), pw = pack_tensor(w, sw);
        expect(max_abs(unpack_to_float(px), fake_quantize(x, sx)) == 0.0,
               "pack/unpack round trip is not exact");
        const Tensor yi = int_linear(px, pw, px.bounds, pw.bounds, &bias);
        Tensor yf = ops::matmul_nt(fake_quantize(x, sx), fake_quantize(w, sw));
        for (int64_t r = 0; r < 8; ++r)
            for (int64_t c = 0; c < 12; ++c) yf.at({r, c}) += bias.at({c});
        expect(max_abs(yi, yf) < 1e-4, "integer linear drifted from float quantization");
    }
}

void selftest_model() {
    Rng rng(4);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    Tensor x({3, 8, 8});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = float(rng.uniform(0.0, 1.0));
    const Tensor y1 = m.forward(x, nullptr, false).output;
    const Tensor y2 = m.forward(x, nullptr, false).output;
    expect(max_abs(y1, y2) == 0.0, "forward pass is not deterministic");
    expect(y1.shape() == Shape{3, 16, 16}, "unexpected output shape");

    const QuantizerSet qs = minmax_calibrate(m, {x}, 4);
    FakeQuantHooks hooks(qs);
    const Tensor yh = m.forward(x, &hooks, false).output;
    Tape tp;
    const auto tr = m.forward_tape(tp, x, qs, nullptr);
    expect(max_abs(yh, tp.value(tr.output)) == 0.0,
           "traced forward disagrees with the hooked forward");
}

void selftest_accounting() {
    const ModelConfig cfg = ModelConfig::light(4);
    expect(count_params(cfg) == 897168, "light x4 parameter count drifted");
    expect(std::abs(model_size_mb(cfg) - 3.42243) < 1e-4, "model size drifted");
    expect(std::abs(compression_ratio(cfg, 4) - 3.068617) < 1e-4, "compression ratio drifted");
    // the headline speedup figure is quoted for the x2 model
    expect(std::abs(speedup_ratio(ModelConfig::light(2), 4, kReportH, kReportW) - 3.990027) < 1e-4,
           "speedup ratio drifted");
}

void selftest_roundtrip() {
    const std::string dir = fs::temp_directory_path().string();
    const std::string ckpt = dir + "/tdq_selftest_ckpt.bin";
    const std::string art1 = dir + "/tdq_selftest_art1.bin";
    const std::string art2 = dir + "/tdq_selftest_art2.bin";
    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    Rng rng(5);
    const Model m = Model::random_init(ModelConfig::toy(2), rng);
    save_checkpoint(ckpt, m);
    const Model back = load_checkpoint(ckpt);
    for (const auto& [name, t] : m.params()) expect(max_abs(t, back.param(name)) == 0.0, name);

    Tensor patch({3, 8, 8});
    for (int64_t i = 0; i < patch.numel(); ++i) patch.data()[i] = float(rng.uniform(0.0, 1.0));
    const Artifact a = make_artifact(m, minmax_calibrate(m, {patch}, 4), 4, {});
    save_artifact(art1, a);
    save_artifact(art2, load_artifact(art1));
    expect(!slurp(art1).empty() && slurp(art1) == slurp(art2),
           "artifact round trip is not byte-identical");
    std::remove(ckpt.c_str());
    std::remove(art1.c_str());
    std::remove(art2.c_str());
}

int cmd_selftest() {
    const std::pair<const char*, std::function<void()>> checks[] = {
        {"fake quantizer invariants", selftest_quantizer},
        {"coarse bound search vs min/max", selftest_bound_search},
        {"packed integer linear algebra", selftest_packed},
        {"toy model forward and trace", selftest_model},
        {"size and speed accounting", selftest_accounting},
        {"checkpoint and artifact round trip", selftest_roundtrip},
    };
    int failed = 0;
    for (const auto& [name, fn] : checks) {
        try {
            fn();
            std::cout << "[ok]   " << name << "\n";
        } catch (const std::exception& e) {
            ++failed;
            std::cout << "[FAIL] " << name << ": " << e.what() << "\n";
        }
    }
    if (failed) {
        std::cout << failed << " of " << std::size(checks) << " checks failed\n";
        return 3;
    }
    std::cout << "all " << std::size(checks) << " checks passed\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-bit post-training quantization for window-attention super-resolution models"};
    app.require_subcommand(1);

    GlobalOpts g;
    g.bits_opt = app.add_option("--bits", g.bits, "quantizer bit width")
                     ->check(CLI::IsMember({2, 3, 4, 8}))
                     ->capture_default_str();
    app.add_option("--scale", g.scale, "upscaling factor")
        ->check(CLI::IsMember({2, 3, 4}))
        ->capture_default_str();
    g.seed_opt = app.add_option("--seed", g.seed, "random seed (0 = built-in default)")
                     ->capture_default_str();
    app.add_option("--config", g.config_path, "JSON config file; explicit flags override it")
        ->check(CLI::ExistingFile);
    app.add_option("--threads", g.threads, "worker threads (runs single-threaded today)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();

    auto* init = app.add_subcommand("init", "write a randomly initialized float checkpoint");
    InitOpts io_;
    init->fallthrough();
    init->add_option("--preset", io_.preset, "model preset")
        ->check(CLI::IsMember({"light", "toy"}))
        ->capture_default_str();
    init->add_option("--out,-o", io_.out, "checkpoint path")->required();

    auto* cal = app.add_subcommand("calibrate",
                                   "coarse bound search over calibration images -> artifact");
    CalibrateOpts co;
    cal->fallthrough();
    cal->add_option("--checkpoint,-k", co.checkpoint, "float checkpoint to quantize")
        ->required()
        ->check(CLI::ExistingFile);
    cal->add_option("--calib-dir,-d", co.calib_dir, "directory of calibration images")->required();
    cal->add_option("--out,-o", co.out, "artifact path")->required();
    cal->add_option("--report", co.report, "also write a JSON report here");
    co.patches_opt =
        cal->add_option("--patches", co.patches, "number of crops")->capture_default_str();
    co.patch_size_opt = cal->add_option("--patch-size", co.patch_size, "crop side length")
                            ->capture_default_str();
    co.steps_opt = cal->add_option("--search-steps", co.search_steps,
                                   "candidate bound pairs per site")
                       ->capture_default_str();
    co.skew_opt = cal->add_option("--skew-threshold", co.skew_threshold,
                                  "|skewness| below this counts as symmetric")
                      ->capture_default_str();
    co.bins_opt = cal->add_option("--histogram-bins", co.histogram_bins,
                                  "bins for the stored per-site histograms")
                      ->capture_default_str();
    cal->add_flag("--no-stats", co.no_stats, "skip collecting per-site statistics");

    auto* dis = app.add_subcommand("distill",
                                   "refine an artifact's bounds by distilling the float model");
    DistillOpts dop;
    dis->fallthrough();
    dis->add_option("--artifact,-a", dop.artifact, "input artifact")
        ->required()
        ->check(CLI::ExistingFile);
    dis->add_option("--calib-dir,-d", dop.calib_dir, "directory of calibration images")->required();
    dis->add_option("--out,-o", dop.out, "refined artifact path")->required();
    dis->add_option("--val-dir", dop.val_dir, "validation images (defaults to --calib-dir)");
    dop.iters_opt = dis->add_option("--iters", dop.iters, "training iterations (0 = pass through)")
                        ->capture_default_str();
    dop.batch_opt =
        dis->add_option("--batch", dop.batch, "patches per iteration")->capture_default_str();
    dop.val_every_opt = dis->add_option("--val-every", dop.val_every, "validation period")
                            ->capture_default_str();
    dop.lr_opt = dis->add_option("--lr", dop.lr, "Adam base step size")->capture_default_str();
    dop.lambda_opt = dis->add_option("--lambda", dop.lambda, "feature-matching loss weight")
                         ->capture_default_str();
    dop.log_opt = dis->add_option("--log", dop.log, "line-delimited JSON training log path");
    dop.patches_opt =
        dis->add_option("--patches", dop.patches, "training crops")->capture_default_str();
    dop.val_patches_opt = dis->add_option("--val-patches", dop.val_patches, "validation crops")
                              ->capture_default_str();
    dop.patch_size_opt = dis->add_option("--patch-size", dop.patch_size,
                                         "crop side length (multiple of the model window)")
                             ->capture_default_str();
    dis->add_flag("--from-minmax", dop.from_minmax,
                  "ignore the artifact's bounds and start from a min/max sweep");

    auto* inf = app.add_subcommand("infer", "upscale an image with a quantized artifact");
    InferOpts nop;
    inf->fallthrough();
    inf->add_option("--artifact,-a", nop.artifact, "artifact to run")
        ->required()
        ->check(CLI::ExistingFile);
    inf->add_option("--in,-i", nop.in, "input image (.ppm/.png)")->required();
    inf->add_option("--out,-o", nop.out, "output image path")->required();
    inf->add_option("--mode", nop.mode, "packed-int | fake-quant | float")
        ->check(CLI::IsMember({"packed-int", "fake-quant", "float"}))
        ->capture_default_str();
    inf->add_option("--ref", nop.ref, "reference image; prints luma PSNR/SSIM");
    inf->add_option("--shave", nop.shave, "metric border crop (default: the upscaling factor)");

    auto* rep = app.add_subcommand("report", "size/speed accounting and per-site bound summary");
    ReportOpts ro;
    rep->fallthrough();
    rep->add_option("--artifact,-a", ro.artifact, "summarize this artifact")
        ->check(CLI::ExistingFile);
    rep->add_option("--preset", ro.preset, "model preset when no artifact is given")
        ->check(CLI::IsMember({"light", "toy"}))
        ->capture_default_str();
    rep->add_flag("--json", ro.as_json, "emit JSON instead of text");
    rep->add_option("--height", ro.height, "input height for per-pixel op counts")
        ->capture_default_str();
    rep->add_option("--width", ro.width, "input width for per-pixel op counts")
        ->capture_default_str();
    rep->add_option("--out,-o", ro.out, "write to a file instead of stdout");

    auto* self = app.add_subcommand("selftest", "quick built-in sanity checks");
    self->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (init->parsed()) return cmd_init(g, io_);
        if (cal->parsed()) return cmd_calibrate(g, co);
        if (dis->parsed()) return cmd_distill(g, dop);
        if (inf->parsed()) return cmd_infer(nop);
        if (rep->parsed()) return cmd_report(g, ro);
        if (self->parsed()) return cmd_selftest();
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
