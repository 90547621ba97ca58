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
#include "tdq/io.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "tdq/common.hpp"

#ifdef TDQ_HAS_PNG
#include <png.h>
#endif

namespace tdq {

namespace {

// ---------------------------------------------------------------------------
// Byte-level plumbing (explicit little-endian layout)
// ---------------------------------------------------------------------------

class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(char(v)); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
    }
    void i32(int32_t v) { u32(uint32_t(v)); }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
    }
    void i64(int64_t v) { u64(uint64_t(v)); }
    void f32(float v) {
        uint32_t b;
        std::memcpy(&b, &v, 4);
        u32(b);
    }
    void f64(double v) {
        uint64_t b;
        std::memcpy(&b, &v, 8);
        u64(b);
    }
    void str(const std::string& s) {
        u32(uint32_t(s.size()));
        buf_.append(s);
    }
    void bytes(const uint8_t* p, size_t n) { buf_.append(reinterpret_cast<const char*>(p), n); }
    void magic(const char m[5]) { buf_.append(m, 4); }
    const std::string& buffer() const { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(const std::string& data, std::string what) : data_(data), what_(std::move(what)) {}

    uint8_t u8() {
        need(1);
        return uint8_t(data_[off_++]);
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(data_[off_++])) << (8 * i);
        return v;
    }
    int32_t i32() { return int32_t(u32()); }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(data_[off_++])) << (8 * i);
        return v;
    }
    int64_t i64() { return int64_t(u64()); }
    float f32() {
        const uint32_t b = u32();
        float v;
        std::memcpy(&v, &b, 4);
        return v;
    }
    double f64() {
        const uint64_t b = u64();
        double v;
        std::memcpy(&v, &b, 8);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        if (n > (1u << 20)) throw FormatError(strf(what_, ": unreasonable string length ", n));
        need(n);
        std::string s = data_.substr(off_, n);
        off_ += n;
        return s;
    }
    std::vector<uint8_t> bytes(size_t n) {
        need(n);
        std::vector<uint8_t> out(n);
        std::memcpy(out.data(), data_.data() + off_, n);
        off_ += n;
        return out;
    }
    void expect_magic(const char m[5]) {
        need(4);
        if (data_.compare(off_, 4, m, 4) != 0)
            throw FormatError(strf(what_, ": bad magic, not a ", m, " file"));
        off_ += 4;
    }
    void expect_end() const {
        if (off_ != data_.size())
            throw FormatError(strf(what_, ": ", data_.size() - off_, " trailing bytes"));
    }

private:
    void need(size_t k) const {
        if (off_ + k > data_.size()) throw FormatError(strf(what_, ": truncated file"));
    }
    const std::string& data_;
    std::string what_;
    size_t off_ = 0;
};

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError(strf("cannot open '", path, "'"));
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (!f.good() && !f.eof()) throw FormatError(strf("error reading '", path, "'"));
    return data;
}

void atomic_write(const std::string& path, const std::string& data) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw FormatError(strf("cannot open '", tmp, "' for writing"));
        f.write(data.data(), std::streamsize(data.size()));
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

// ---------------------------------------------------------------------------
// Shared sub-blocks
// ---------------------------------------------------------------------------

void write_config(ByteWriter& w, const ModelConfig& cfg) {
    w.i32(cfg.embed_dim);
    w.i32(cfg.num_heads);
    w.i32(cfg.window);
    w.f64(cfg.mlp_ratio);
    w.i32(cfg.num_blocks);
    w.i32(cfg.depth);
    w.i32(cfg.scale);
}

ModelConfig read_config(ByteReader& r) {
    ModelConfig cfg;
    cfg.embed_dim = r.i32();
    cfg.num_heads = r.i32();
    cfg.window = r.i32();
    cfg.mlp_ratio = r.f64();
    cfg.num_blocks = r.i32();
    cfg.depth = r.i32();
    cfg.scale = r.i32();
    try {
        cfg.validate();
    } catch (const UsageError& e) {
        throw FormatError(strf("stored model config is invalid: ", e.what()));
    }
    return cfg;
}

void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
    w.str(name);
    w.u8(uint8_t(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) w.i64(t.dim(i));
    for (int64_t i = 0; i < t.numel(); ++i) w.f32(t.data()[i]);
}

Tensor read_tensor_body(ByteReader& r, const std::string& what) {
    const int nd = r.u8();
    if (nd < 1 || nd > 8) throw FormatError(strf(what, ": tensor rank ", nd, " out of range"));
    Shape shape(size_t(nd), 0);
    for (auto& d : shape) {
        d = r.i64();
        if (d < 0 || d > (int64_t(1) << 32))
            throw FormatError(strf(what, ": tensor extent ", d, " out of range"));
    }
    const int64_t n = shape_numel(shape);
    Tensor t(shape);
    for (int64_t i = 0; i < n; ++i) t.data()[i] = r.f32();
    return t;
}

// The float parameter table, in canonical enumeration order.
void write_param_table(ByteWriter& w, const ModelConfig& cfg,
                       const std::map<std::string, Tensor>& params) {
    const auto specs = enumerate_params(cfg);
    w.u32(uint32_t(specs.size()));
    for (const auto& spec : specs) {
        auto it = params.find(spec.name);
        if (it == params.end() || it->second.shape() != spec.shape)
            throw FormatError(strf("parameter table is missing '", spec.name, "'"));
        write_tensor(w, spec.name, it->second);
    }
}

std::map<std::string, Tensor> read_param_table(ByteReader& r, const ModelConfig& cfg,
                                               const std::string& what) {
    const auto specs = enumerate_params(cfg);
    const uint32_t n = r.u32();
    if (n != specs.size())
        throw FormatError(strf(what, ": ", n, " parameter tensors, expected ", specs.size()));
    std::map<std::string, Tensor> params;
    for (const auto& spec : specs) {
        const std::string name = r.str();
        if (name != spec.name)
            throw FormatError(strf(what, ": tensor named '", name, "', expected '", spec.name,
                                   "' (canonical order)"));
        Tensor t = read_tensor_body(r, what);
        if (t.shape() != spec.shape)
            throw FormatError(strf(what, ": '", name, "' has shape ", shape_str(t.shape()),
                                   ", expected ", shape_str(spec.shape)));
        params.emplace(name, std::move(t));
    }
    return params;
}

constexpr char kCheckpointMagic[5] = "2DQF";
constexpr char kArtifactMagic[5] = "2DQQ";
constexpr uint32_t kFormatVersion = 1;

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const Model& model) {
    model.validate_params();
    ByteWriter w;
    w.magic(kCheckpointMagic);
    w.u32(kFormatVersion);
    write_config(w, model.config());
    write_param_table(w, model.config(), model.params());
    atomic_write(path, w.buffer());
}

Model load_checkpoint(const std::string& path) {
    const std::string data = read_file(path);
    ByteReader r(data, strf("checkpoint '", path, "'"));
    r.expect_magic(kCheckpointMagic);
    const uint32_t version = r.u32();
    if (version != kFormatVersion)
        throw FormatError(strf("checkpoint '", path, "': unsupported version ", version));
    const ModelConfig cfg = read_config(r);
    auto params = read_param_table(r, cfg, strf("checkpoint '", path, "'"));
    r.expect_end();
    Model m(cfg);
    for (auto& [name, t] : params) m.set_param(name, std::move(t));
    return m;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

void Artifact::validate() const {
    try {
        config.validate();
    } catch (const UsageError& e) {
        throw FormatError(strf("artifact config: ", e.what()));
    }
    if (!valid_bit_width(bits)) throw FormatError(strf("artifact bit width ", bits));
    const auto sites = quantizer_sites(config);
    if (quantizers.size() != sites.size())
        throw FormatError(strf("artifact carries ", quantizers.size(), " quantizers, expected ",
                               sites.size()));
    for (const auto& site : sites) {
        auto it = quantizers.find(site.id);
        if (it == quantizers.end())
            throw FormatError(strf("artifact is missing quantizer '", site.id, "'"));
        const QuantizerState& st = it->second;
        try {
            st.validate();
        } catch (const UsageError& e) {
            throw FormatError(strf("quantizer '", site.id, "': ", e.what()));
        }
        if (st.is_weight != site.is_weight)
            throw FormatError(strf("quantizer '", site.id, "' weight flag mismatch"));
        if (site.is_weight && st.active()) {
            auto pit = packed.find(site.id);
            if (pit == packed.end())
                throw FormatError(strf("no packed payload for weight '", site.id, "'"));
            const PackedIntTensor& p = pit->second;
            if (p.bits != st.bits || !(p.bounds == Bounds{st.l, st.u}))
                throw FormatError(strf("packed payload for '", site.id,
                                       "' disagrees with its quantizer"));
        }
    }
    for (const auto& [id, p] : packed) {
        auto it = quantizers.find(id);
        if (it == quantizers.end() || !it->second.is_weight || !it->second.active())
            throw FormatError(strf("stray packed payload '", id, "'"));
        try {
            p.validate();
        } catch (const std::exception& e) {
            throw FormatError(strf("packed payload '", id, "': ", e.what()));
        }
        auto prm = params.find(id);
        if (prm == params.end() || prm->second.shape() != p.shape)
            throw FormatError(strf("packed payload '", id, "' does not match its float tensor"));
    }
}

void save_artifact(const std::string& path, const Artifact& a) {
    a.validate();
    ByteWriter w;
    w.magic(kArtifactMagic);
    w.u32(kFormatVersion);
    write_config(w, a.config);
    w.i32(a.bits);

    w.u32(uint32_t(a.quantizers.size()));
    for (const auto& [id, st] : a.quantizers) {
        w.str(id);
        w.u8(uint8_t(st.mode));
        w.i32(st.bits);
        w.u8(st.is_weight ? 1 : 0);
        w.f32(st.l);
        w.f32(st.u);
    }

    w.u32(uint32_t(a.packed.size()));
    for (const auto& [id, p] : a.packed) {
        w.str(id);
        w.u8(uint8_t(p.shape.size()));
        for (int64_t d : p.shape) w.i64(d);
        w.i32(p.bits);
        w.f32(p.bounds.l);
        w.f32(p.bounds.u);
        w.u64(p.payload.size());
        w.bytes(p.payload.data(), p.payload.size());
    }

    write_param_table(w, a.config, a.params);

    w.u8(a.stats.empty() ? 0 : 1);
    if (!a.stats.empty()) {
        w.u32(uint32_t(a.stats.size()));
        for (const auto& [id, s] : a.stats) {
            w.str(id);
            w.u64(s.summary.count);
            w.f64(s.summary.min);
            w.f64(s.summary.max);
            w.f64(s.summary.mean);
            w.f64(s.summary.sd);
            w.f64(s.summary.skew);
            w.f64(s.histogram.lo());
            w.f64(s.histogram.hi());
            w.u32(uint32_t(s.histogram.bins().size()));
            for (uint64_t b : s.histogram.bins()) w.u64(b);
        }
    }
    atomic_write(path, w.buffer());
}

Artifact load_artifact(const std::string& path) {
    const std::string data = read_file(path);
    const std::string what = strf("artifact '", path, "'");
    ByteReader r(data, what);
    r.expect_magic(kArtifactMagic);
    const uint32_t version = r.u32();
    if (version != kFormatVersion)
        throw FormatError(strf(what, ": unsupported version ", version));

    Artifact a;
    a.config = read_config(r);
    a.bits = r.i32();
    if (!valid_bit_width(a.bits)) throw FormatError(strf(what, ": bit width ", a.bits));

    const uint32_t nq = r.u32();
    for (uint32_t i = 0; i < nq; ++i) {
        QuantizerState st;
        st.id = r.str();
        const uint8_t mode = r.u8();
        if (mode > 2) throw FormatError(strf(what, ": quantizer '", st.id, "' mode ", int(mode)));
        st.mode = QuantMode(mode);
        st.bits = r.i32();
        st.is_weight = r.u8() != 0;
        st.l = r.f32();
        st.u = r.f32();
        if (!a.quantizers.emplace(st.id, st).second)
            throw FormatError(strf(what, ": duplicate quantizer '", st.id, "'"));
    }

    const uint32_t np = r.u32();
    for (uint32_t i = 0; i < np; ++i) {
        const std::string id = r.str();
        PackedIntTensor p;
        const int nd = r.u8();
        if (nd < 1 || nd > 8) throw FormatError(strf(what, ": payload '", id, "' rank ", nd));
        p.shape.resize(size_t(nd));
        for (auto& d : p.shape) {
            d = r.i64();
            if (d < 0 || d > (int64_t(1) << 32))
                throw FormatError(strf(what, ": payload '", id, "' extent ", d));
        }
        p.bits = r.i32();
        p.bounds.l = r.f32();
        p.bounds.u = r.f32();
        const uint64_t nbytes = r.u64();
        if (!valid_bit_width(p.bits) || nbytes != p.expected_payload_size())
            throw FormatError(strf(what, ": payload '", id, "' has ", nbytes, " bytes, expected ",
                                   p.expected_payload_size()));
        p.payload = r.bytes(size_t(nbytes));
        try {
            p.validate();
        } catch (const std::exception& e) {
            throw FormatError(strf(what, ": payload '", id, "': ", e.what()));
        }
        if (!a.packed.emplace(id, std::move(p)).second)
            throw FormatError(strf(what, ": duplicate payload '", id, "'"));
    }

    a.params = read_param_table(r, a.config, what);

    const uint8_t has_stats = r.u8();
    if (has_stats > 1) throw FormatError(strf(what, ": bad stats flag ", int(has_stats)));
    if (has_stats) {
        const uint32_t ns = r.u32();
        for (uint32_t i = 0; i < ns; ++i) {
            const std::string id = r.str();
            SiteStats s;
            s.summary.count = r.u64();
            s.summary.min = r.f64();
            s.summary.max = r.f64();
            s.summary.mean = r.f64();
            s.summary.sd = r.f64();
            s.summary.skew = r.f64();
            const double lo = r.f64(), hi = r.f64();
            const uint32_t nb = r.u32();
            if (nb < 1 || nb > (1u << 20))
                throw FormatError(strf(what, ": stats '", id, "' bin count ", nb));
            std::vector<uint64_t> bins(nb);
            for (auto& b : bins) b = r.u64();
            try {
                s.histogram.restore(lo, hi, std::move(bins));
            } catch (const std::exception& e) {
                throw FormatError(strf(what, ": stats '", id, "': ", e.what()));
            }
            if (!a.stats.emplace(id, std::move(s)).second)
                throw FormatError(strf(what, ": duplicate stats '", id, "'"));
        }
    }
    r.expect_end();
    a.validate();
    return a;
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

namespace {

// next token after whitespace/comments in a PPM header
std::string ppm_token(const std::string& data, size_t& off, const std::string& what) {
    while (off < data.size()) {
        const char c = data[off];
        if (c == '#') {
            while (off < data.size() && data[off] != '\n') ++off;
        } else if (std::isspace(uint8_t(c))) {
            ++off;
        } else {
            break;
        }
    }
    const size_t start = off;
    while (off < data.size() && !std::isspace(uint8_t(data[off])) && data[off] != '#') ++off;
    if (start == off) throw FormatError(strf(what, ": truncated header"));
    return data.substr(start, off - start);
}

int64_t ppm_int(const std::string& data, size_t& off, const std::string& what) {
    const std::string tok = ppm_token(data, off, what);
    int64_t v = 0;
    for (char c : tok) {
        if (c < '0' || c > '9') throw FormatError(strf(what, ": bad header number '", tok, "'"));
        v = v * 10 + (c - '0');
        if (v > (int64_t(1) << 30)) throw FormatError(strf(what, ": header number too large"));
    }
    return v;
}

}  // namespace

ImageU8 read_ppm(const std::string& path) {
    const std::string data = read_file(path);
    const std::string what = strf("image '", path, "'");
    size_t off = 0;
    if (ppm_token(data, off, what) != "P6")
        throw FormatError(strf(what, ": not a binary PPM (P6) file"));
    ImageU8 img;
    img.width = ppm_int(data, off, what);
    img.height = ppm_int(data, off, what);
    const int64_t maxval = ppm_int(data, off, what);
    if (img.width < 1 || img.height < 1)
        throw FormatError(strf(what, ": bad dimensions ", img.width, "x", img.height));
    if (maxval != 255)
        throw FormatError(strf(what, ": only 8-bit images are supported (maxval ", maxval, ")"));
    if (off >= data.size() || !std::isspace(uint8_t(data[off])))
        throw FormatError(strf(what, ": missing header terminator"));
    ++off;  // exactly one whitespace byte before the raster
    const size_t need = size_t(img.pixel_count()) * 3;
    if (data.size() - off < need) throw FormatError(strf(what, ": truncated pixel data"));
    if (data.size() - off > need) throw FormatError(strf(what, ": trailing bytes after raster"));
    img.rgb.assign(data.begin() + std::ptrdiff_t(off), data.end());
    img.validate();
    return img;
}

void write_ppm(const std::string& path, const ImageU8& img) {
    img.validate();
    std::string out = strf("P6\n", img.width, " ", img.height, "\n255\n");
    out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
    atomic_write(path, out);
}

bool png_supported() {
#ifdef TDQ_HAS_PNG
    return true;
#else
    return false;
#endif
}

#ifdef TDQ_HAS_PNG
namespace {

ImageU8 read_png_file(const std::string& path) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.c_str()))
        throw FormatError(strf("image '", path, "': ", pi.message));
    pi.format = PNG_FORMAT_RGB;
    ImageU8 img;
    img.width = pi.width;
    img.height = pi.height;
    img.rgb.resize(size_t(PNG_IMAGE_SIZE(pi)));
    if (!png_image_finish_read(&pi, nullptr, img.rgb.data(), 0, nullptr)) {
        std::string msg = pi.message;
        png_image_free(&pi);
        throw FormatError(strf("image '", path, "': ", msg));
    }
    img.validate();
    return img;
}

void write_png_file(const std::string& path, const ImageU8& img) {
    img.validate();
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    pi.width = png_uint_32(img.width);
    pi.height = png_uint_32(img.height);
    pi.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&pi, path.c_str(), 0, img.rgb.data(), 0, nullptr))
        throw FormatError(strf("image '", path, "': ", pi.message));
}

}  // namespace
#endif

namespace {

std::string lower_ext(const std::string& path) {
    const size_t dot = path.find_last_of('.');
    if (dot == std::string::npos) return "";
    std::string ext = path.substr(dot);
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    return ext;
}

}  // namespace

ImageU8 read_image(const std::string& path) {
    const std::string ext = lower_ext(path);
    if (ext == ".ppm") return read_ppm(path);
    if (ext == ".png") {
#ifdef TDQ_HAS_PNG
        return read_png_file(path);
#else
        throw FormatError(strf("image '", path, "': built without PNG support"));
#endif
    }
    throw FormatError(strf("image '", path, "': unsupported format '", ext,
                           "' (use .ppm or .png)"));
}

void write_image(const std::string& path, const ImageU8& img) {
    const std::string ext = lower_ext(path);
    if (ext == ".ppm") return write_ppm(path, img);
    if (ext == ".png") {
#ifdef TDQ_HAS_PNG
        return write_png_file(path, img);
#else
        throw FormatError(strf("image '", path, "': built without PNG support"));
#endif
    }
    throw FormatError(strf("image '", path, "': unsupported format '", ext,
                           "' (use .ppm or .png)"));
}

}  // namespace tdq
