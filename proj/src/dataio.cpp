#include "fmnet/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fmnet {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
    if (image_count < 1) throw ValidationError("image_count must be >= 1");
    if (image_size < 16 || image_size % 16 != 0)
        throw ValidationError("image_size must be a positive multiple of 16");
    if (objects_min < 0 || objects_max < objects_min)
        throw ValidationError("object count range invalid");
    if (!(min_side >= 4)) throw ValidationError("min_side must be >= 4");
    if (!(max_side >= min_side) || max_side >= image_size)
        throw ValidationError("max_side must be in [min_side, image_size)");
    if (noise_std < 0) throw ValidationError("noise_std must be >= 0");
}

namespace {

inline uint8_t quantize(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

bool boxes_touch(const Box& a, const Box& b, double margin) {
    return a.x1 - margin < b.x2 && b.x1 - margin < a.x2 && a.y1 - margin < b.y2 &&
           b.y1 - margin < a.y2;
}

} // namespace

AnnotationSet generate_synthetic_dataset(const SynthConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir))
        throw FormatError("cannot create output directory " + out_dir);

    AnnotationSet ann;
    const int sz = cfg.image_size;
    std::ostringstream annfile;

    for (int img = 0; img < cfg.image_count; ++img) {
        Rng rng(hash_key(cfg.seed, "synth-image", static_cast<uint64_t>(img)));

        // noisy gray background; PPM interleaved RGB
        std::vector<uint8_t> rgb(static_cast<size_t>(3) * sz * sz);
        const double base = rng.uniform(0.15, 0.32);
        for (int y = 0; y < sz; ++y)
            for (int x = 0; x < sz; ++x) {
                const double v = base + rng.gaussian(0.0, cfg.noise_std);
                const uint8_t q = quantize(v);
                const size_t at = (static_cast<size_t>(y) * sz + x) * 3;
                rgb[at] = q;
                rgb[at + 1] = q;
                rgb[at + 2] = q;
            }

        const int want = cfg.objects_min +
                         static_cast<int>(rng.next_below(
                             static_cast<uint64_t>(cfg.objects_max - cfg.objects_min) + 1));
        std::vector<Box> placed;
        for (int obj = 0; obj < want; ++obj) {
            bool ok = false;
            Box box;
            for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
                const double side = std::exp(rng.uniform(std::log(cfg.min_side), std::log(cfg.max_side)));
                const double aspect = rng.uniform(0.75, 4.0 / 3.0);
                const double w = std::clamp(side * std::sqrt(aspect), cfg.min_side, cfg.max_side);
                const double h = std::clamp(side / std::sqrt(aspect), cfg.min_side, cfg.max_side);
                const double x = rng.uniform(1.0, sz - w - 1.0);
                const double y = rng.uniform(1.0, sz - h - 1.0);
                box = Box{x, y, x + w, y + h};
                ok = true;
                for (const Box& other : placed)
                    if (boxes_touch(box, other, 2.0)) {
                        ok = false;
                        break;
                    }
            }
            if (!ok) {
                ann.skipped_objects += 1;
                continue;
            }
            placed.push_back(box);

            const bool ellipse = rng.next_below(2) == 1;
            const double col[3] = {rng.uniform(0.62, 1.0), rng.uniform(0.62, 1.0),
                                   rng.uniform(0.62, 1.0)};
            const double cx = box.cx(), cy = box.cy();
            const int y0 = static_cast<int>(std::floor(box.y1)), y1 = static_cast<int>(std::ceil(box.y2));
            const int x0 = static_cast<int>(std::floor(box.x1)), x1 = static_cast<int>(std::ceil(box.x2));
            for (int py = std::max(0, y0); py < std::min(sz, y1); ++py)
                for (int px = std::max(0, x0); px < std::min(sz, x1); ++px) {
                    const double ux = px + 0.5, uy = py + 0.5;
                    bool inside;
                    if (ellipse) {
                        const double dx = (ux - cx) / (box.w() / 2), dy = (uy - cy) / (box.h() / 2);
                        inside = dx * dx + dy * dy <= 1.0;
                    } else {
                        inside = ux >= box.x1 && ux < box.x2 && uy >= box.y1 && uy < box.y2;
                    }
                    if (!inside) continue;
                    const double jitter = rng.uniform(-0.05, 0.05);
                    const size_t at = (static_cast<size_t>(py) * sz + px) * 3;
                    for (int c = 0; c < 3; ++c)
                        rgb[at + static_cast<size_t>(c)] = quantize(col[c] + jitter);
                }
        }

        char name[64];
        std::snprintf(name, sizeof(name), "img_%05d.ppm", img);
        const std::string path = (fs::path(out_dir) / name).string();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw FormatError("cannot write " + path);
        f << "P6\n" << sz << " " << sz << "\n255\n";
        f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<long>(rgb.size()));

        ImageAnnotation rec;
        rec.path = name;
        rec.boxes = placed;
        annfile << name << "\n" << placed.size() << "\n";
        char line[128];
        for (const Box& b : placed) {
            std::snprintf(line, sizeof(line), "%.4f %.4f %.4f %.4f\n", b.x1, b.y1, b.w(), b.h());
            annfile << line;
        }
        ann.records.push_back(std::move(rec));
    }

    std::ofstream af((fs::path(out_dir) / "annotations.txt").string(), std::ios::binary);
    if (!af) throw FormatError("cannot write annotation file in " + out_dir);
    af << annfile.str();
    return ann;
}

namespace {

bool numeric_tokens(const std::string& line, int at_least) {
    std::istringstream is(line);
    std::string tok;
    int n = 0;
    while (is >> tok) {
        char* end = nullptr;
        std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0') return false;
        ++n;
    }
    return n >= at_least;
}

} // namespace

AnnotationSet parse_wider_annotations_text(const std::string& text, const std::string& origin) {
    std::vector<std::string> lines;
    {
        std::istringstream is(text);
        std::string l;
        while (std::getline(is, l)) {
            if (!l.empty() && l.back() == '\r') l.pop_back();
            lines.push_back(l);
        }
    }

    AnnotationSet ann;
    std::set<std::string> seen;
    size_t i = 0;
    auto err = [&](size_t line_no, const std::string& what) {
        throw ParseError(origin + ":" + std::to_string(line_no + 1) + ": " + what);
    };

    while (i < lines.size()) {
        // skip blank separator lines
        while (i < lines.size() && lines[i].find_first_not_of(" \t") == std::string::npos) ++i;
        if (i >= lines.size()) break;

        ImageAnnotation rec;
        rec.path = lines[i];
        if (!seen.insert(rec.path).second) err(i, "duplicate image path '" + rec.path + "'");
        ++i;

        if (i >= lines.size()) err(i - 1, "missing box count after path");
        char* end = nullptr;
        const long count = std::strtol(lines[i].c_str(), &end, 10);
        if (end == lines[i].c_str() || count < 0 ||
            std::string(end).find_first_not_of(" \t") != std::string::npos)
            err(i, "malformed box count '" + lines[i] + "'");
        ++i;

        if (count == 0) {
            // some files carry one placeholder box line after a zero count
            if (i < lines.size() && numeric_tokens(lines[i], 4)) ++i;
        } else {
            for (long b = 0; b < count; ++b, ++i) {
                if (i >= lines.size()) err(i - 1, "unexpected end of file inside box block");
                std::istringstream is(lines[i]);
                double x, y, w, h;
                if (!(is >> x >> y >> w >> h)) err(i, "non-numeric box line '" + lines[i] + "'");
                if (w <= 0 || h <= 0) {
                    ann.dropped_boxes += 1;
                    continue;
                }
                rec.boxes.push_back(Box{x, y, x + w, y + h});
            }
        }
        ann.records.push_back(std::move(rec));
    }
    return ann;
}

AnnotationSet parse_wider_annotations(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open annotation file " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_wider_annotations_text(ss.str(), path);
}

// ---- PPM ----

namespace {

int ppm_token(std::istream& is) {
    // skips whitespace and '#' comments, reads one unsigned integer
    int c = is.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = is.get();
        } else if (std::isspace(c)) {
            c = is.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) throw FormatError("malformed PPM header");
    int v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = is.get();
    }
    if (c != EOF) is.unget();
    return v;
}

} // namespace

Tensor read_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open image " + path);
    char magic[2];
    f.read(magic, 2);
    if (f.gcount() != 2 || magic[0] != 'P' || magic[1] != '6')
        throw FormatError(path + ": not a binary PPM (P6)");
    const int w = ppm_token(f);
    const int h = ppm_token(f);
    const int maxval = ppm_token(f);
    if (maxval != 255) throw FormatError(path + ": PPM maxval must be 255");
    f.get(); // single whitespace after maxval
    std::vector<uint8_t> buf(static_cast<size_t>(3) * w * h);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<long>(buf.size()));
    if (f.gcount() != static_cast<long>(buf.size()))
        throw FormatError(path + ": truncated PPM pixel data");

    Tensor t = zeros(Shape{3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                t.at(c, y, x) =
                    buf[(static_cast<size_t>(y) * w + x) * 3 + static_cast<size_t>(c)] / 255.0;
    return t;
}

void write_image(const Tensor& t, const std::string& path) {
    if (t.shape.rank() != 3 || t.dim(0) != 3)
        throw ShapeError("write_image expects a [3,H,W] tensor");
    const int h = t.dim(1), w = t.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write image " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> buf(static_cast<size_t>(3) * w * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                buf[(static_cast<size_t>(y) * w + x) * 3 + static_cast<size_t>(c)] =
                    quantize(t.at(c, y, x));
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<long>(buf.size()));
}

std::string annotation_dir(const std::string& ann_path) {
    return fs::path(ann_path).parent_path().string();
}

Dataset load_dataset(const AnnotationSet& ann, const std::string& base_dir) {
    Dataset data;
    for (const auto& rec : ann.records) {
        fs::path p(rec.path);
        if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
        TrainSample s;
        s.image = read_image(p.string());
        s.boxes = rec.boxes;
        // clamp annotations into the image
        for (Box& b : s.boxes) b = clip_box(b, s.image.dim(2), s.image.dim(1));
        data.push_back(std::move(s));
    }
    return data;
}

// ---- checkpoint ----

namespace {

void put_u16(std::string& s, uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& s, uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& s;
    size_t at = 0;
    explicit Reader(const std::string& str) : s(str) {}
    void need(size_t n) const {
        if (at + n > s.size()) throw FormatError("checkpoint truncated");
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint8_t>(s[at]) | (static_cast<uint16_t>(static_cast<uint8_t>(s[at + 1])) << 8);
        at += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(s[at + i])) << (8 * i);
        at += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(s[at + i])) << (8 * i);
        at += 8;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string out = s.substr(at, n);
        at += n;
        return out;
    }
};

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string config_blob(const ModelConfig& c, const std::map<std::string, std::string>& extra) {
    std::ostringstream os;
    os << "variant=" << variant_name(c.variant) << "\n";
    os << "input_channels=" << c.input_channels << "\n";
    os << "channels=";
    for (size_t i = 0; i < c.channels.size(); ++i) os << (i ? "," : "") << c.channels[i];
    os << "\n";
    os << "convs_per_block=" << c.convs_per_block << "\n";
    os << "rpn_channels=" << c.rpn_channels << "\n";
    os << "magnifier_channels=" << c.magnifier_channels << "\n";
    os << "skip_reduce_channels=" << c.skip_reduce_channels << "\n";
    os << "fc_dim=" << c.fc_dim << "\n";
    os << "roi_out=" << c.roi_out << "\n";
    os << "context_factor=" << fmt_double(c.context_factor) << "\n";
    os << "context_merge_1x1=" << (c.context_merge_1x1 ? 1 : 0) << "\n";
    os << "use_context=" << (c.use_context ? 1 : 0) << "\n";
    os << "size_split_threshold=" << fmt_double(c.size_split_threshold) << "\n";
    os << "branch_scales=";
    for (size_t b = 0; b < c.branch_scales.size(); ++b) {
        if (b) os << ";";
        for (size_t i = 0; i < c.branch_scales[b].size(); ++i)
            os << (i ? "," : "") << fmt_double(c.branch_scales[b][i]);
    }
    os << "\n";
    os << "loss_alpha=" << fmt_double(c.loss_weights.alpha) << "\n";
    os << "loss_beta=" << fmt_double(c.loss_weights.beta) << "\n";
    os << "loss_gamma=" << fmt_double(c.loss_weights.gamma) << "\n";
    for (const auto& [k, v] : extra) os << k << "=" << v << "\n";
    return os.str();
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (tok.empty()) continue;
        out.push_back(std::strtod(tok.c_str(), nullptr));
    }
    return out;
}

ModelConfig config_from_blob(const std::string& blob,
                             std::map<std::string, std::string>& extra) {
    std::map<std::string, std::string> kv;
    std::istringstream is(blob);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("malformed checkpoint config line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    ModelConfig c;
    auto take = [&kv](const std::string& k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw FormatError("checkpoint config missing key " + k);
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    c.variant = variant_from_name(take("variant"));
    c.input_channels = std::stoi(take("input_channels"));
    c.channels.clear();
    for (double v : parse_double_list(take("channels"))) c.channels.push_back(static_cast<int>(v));
    c.convs_per_block = std::stoi(take("convs_per_block"));
    c.rpn_channels = std::stoi(take("rpn_channels"));
    c.magnifier_channels = std::stoi(take("magnifier_channels"));
    c.skip_reduce_channels = std::stoi(take("skip_reduce_channels"));
    c.fc_dim = std::stoi(take("fc_dim"));
    c.roi_out = std::stoi(take("roi_out"));
    c.context_factor = std::strtod(take("context_factor").c_str(), nullptr);
    c.context_merge_1x1 = take("context_merge_1x1") == "1";
    c.use_context = take("use_context") == "1";
    c.size_split_threshold = std::strtod(take("size_split_threshold").c_str(), nullptr);
    {
        c.branch_scales.clear();
        std::istringstream bs(take("branch_scales"));
        std::string part;
        while (std::getline(bs, part, ';'))
            if (!part.empty()) c.branch_scales.push_back(parse_double_list(part));
    }
    c.loss_weights.alpha = std::strtod(take("loss_alpha").c_str(), nullptr);
    c.loss_weights.beta = std::strtod(take("loss_beta").c_str(), nullptr);
    c.loss_weights.gamma = std::strtod(take("loss_gamma").c_str(), nullptr);
    extra = kv;
    return c;
}

void put_tensor(std::string& out, const std::string& name, const Tensor& t, bool f32) {
    if (name.size() > 0xffff) throw ParamError("tensor name too long");
    put_u16(out, static_cast<uint16_t>(name.size()));
    out += name;
    out.push_back(f32 ? 0 : 1);
    out.push_back(static_cast<char>(t.shape.rank()));
    for (int d : t.shape.dims) put_u32(out, static_cast<uint32_t>(d));
    if (f32) {
        for (double v : t.data) {
            const float fv = static_cast<float>(v);
            uint32_t bits;
            std::memcpy(&bits, &fv, 4);
            put_u32(out, bits);
        }
    } else {
        for (double v : t.data) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_u64(out, bits);
        }
    }
}

} // namespace

void save_checkpoint(const Model& m, const std::string& path,
                     const std::map<std::string, Tensor>& extra_tensors,
                     const std::map<std::string, std::string>& extra_config, bool store_f32) {
    std::string out = "FMNT";
    put_u32(out, 1); // version
    const std::string blob = config_blob(m.config, extra_config);
    put_u32(out, static_cast<uint32_t>(blob.size()));
    out += blob;

    uint32_t count = 0;
    for (const auto& [name, p] : m.params) count += p.has_bias ? 2 : 1;
    count += static_cast<uint32_t>(extra_tensors.size());
    put_u32(out, count);

    for (const auto& [name, p] : m.params) {
        put_tensor(out, name + ".weight", p.weights, store_f32);
        if (p.has_bias) put_tensor(out, name + ".bias", p.bias, store_f32);
    }
    for (const auto& [name, t] : extra_tensors) put_tensor(out, name, t, store_f32);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write checkpoint " + path);
    f.write(out.data(), static_cast<long>(out.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string bytes = ss.str();
    Reader r(bytes);

    if (r.bytes(4) != "FMNT") throw FormatError(path + ": bad checkpoint magic");
    const uint32_t version = r.u32();
    if (version != 1) throw FormatError(path + ": unsupported checkpoint version");

    Checkpoint ck;
    const uint32_t blob_len = r.u32();
    const std::string blob = r.bytes(blob_len);
    ModelConfig cfg = config_from_blob(blob, ck.extra_config);

    // architecture skeleton for shape validation
    Model skeleton = build_model(cfg, 0);
    ck.model.config = skeleton.config;

    const uint32_t count = r.u32();
    std::map<std::string, Tensor> tensors;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t nlen = r.u16();
        const std::string name = r.bytes(nlen);
        const uint8_t dtype = static_cast<uint8_t>(r.bytes(1)[0]);
        const uint8_t rank = static_cast<uint8_t>(r.bytes(1)[0]);
        if (dtype > 1 || rank < 1 || rank > 4)
            throw FormatError(path + ": bad tensor record for " + name);
        Shape shape;
        for (int d = 0; d < rank; ++d) shape.dims.push_back(static_cast<int>(r.u32()));
        shape.validate();
        Tensor t = zeros(shape);
        if (dtype == 0) {
            for (auto& v : t.data) {
                const uint32_t bits = r.u32();
                float fv;
                std::memcpy(&fv, &bits, 4);
                v = static_cast<double>(fv);
            }
        } else {
            for (auto& v : t.data) {
                const uint64_t bits = r.u64();
                double dv;
                std::memcpy(&dv, &bits, 8);
                v = dv;
            }
        }
        if (!tensors.emplace(name, std::move(t)).second)
            throw FormatError(path + ": duplicate tensor " + name);
    }

    for (auto& [name, skel] : skeleton.params) {
        LayerParams p;
        auto wi = tensors.find(name + ".weight");
        if (wi == tensors.end())
            throw ValidationError(path + ": checkpoint missing parameter " + name + ".weight");
        if (wi->second.shape != skel.weights.shape)
            throw ValidationError(path + ": shape mismatch for " + name + ".weight (got " +
                                  wi->second.shape.str() + ", want " + skel.weights.shape.str() + ")");
        p.weights = std::move(wi->second);
        tensors.erase(wi);
        p.has_bias = skel.has_bias;
        if (skel.has_bias) {
            auto bi = tensors.find(name + ".bias");
            if (bi == tensors.end())
                throw ValidationError(path + ": checkpoint missing parameter " + name + ".bias");
            if (bi->second.shape != skel.bias.shape)
                throw ValidationError(path + ": shape mismatch for " + name + ".bias");
            p.bias = std::move(bi->second);
            tensors.erase(bi);
        }
        ck.model.params[name] = std::move(p);
    }
    for (auto& [name, t] : tensors) ck.extras[name] = std::move(t);
    return ck;
}

} // namespace fmnet
