#include "risclip/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "risclip/errors.hpp"
#include "risclip/png_io.hpp"

namespace risclip {

using nlohmann::json;
using nlohmann::ordered_json;

// --- RLE --------------------------------------------------------------------------

std::string rle_encode(const Tensor<std::uint8_t>& mask) {
    if (mask.rank() != 2) throw ValidationError("rle_encode: want (H,W) mask");
    for (auto v : mask.data)
        if (v != 0 && v != 1) throw ValidationError("rle_encode: mask must be binary");
    std::ostringstream os;
    std::uint8_t current = 0;  // runs start with zeros
    std::int64_t run = 0;
    bool first = true;
    auto emit = [&](std::int64_t n) {
        if (!first) os << ' ';
        os << n;
        first = false;
    };
    for (std::int64_t i = 0; i < mask.numel(); ++i) {
        if (mask[i] == current) {
            ++run;
        } else {
            emit(run);
            current = mask[i];
            run = 1;
        }
    }
    emit(run);
    return os.str();
}

Tensor<std::uint8_t> rle_decode(const std::string& rle, int h, int w) {
    if (h < 1 || w < 1) throw ValidationError("rle_decode: bad dimensions");
    Tensor<std::uint8_t> mask({h, w});
    std::istringstream is(rle);
    std::int64_t pos = 0;
    std::uint8_t current = 0;
    std::string tok;
    while (is >> tok) {
        std::int64_t run = 0;
        try {
            size_t consumed = 0;
            run = std::stoll(tok, &consumed);
            if (consumed != tok.size() || run < 0) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw ValidationError("rle_decode: bad run count '" + tok + "'");
        }
        if (pos + run > mask.numel())
            throw ValidationError("rle_decode: runs exceed mask size " + std::to_string(h) + "x" +
                                  std::to_string(w));
        for (std::int64_t i = 0; i < run; ++i) mask[pos++] = current;
        current = current ? 0 : 1;
    }
    if (pos != mask.numel())
        throw ValidationError("rle_decode: runs sum to " + std::to_string(pos) + ", expected " +
                              std::to_string(mask.numel()));
    return mask;
}

// --- manifest ----------------------------------------------------------------------

static SampleRecord parse_record(const json& j, int line) {
    const std::string where = "manifest line " + std::to_string(line);
    if (!j.is_object()) throw ValidationError(where + ": not a JSON object");
    static const std::set<std::string> allowed = {"image_path", "expression", "mask_rle",
                                                  "image_size", "sample_id"};
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key)) throw ValidationError(where + ": unknown field '" + key + "'");
    for (const auto& key : allowed)
        if (!j.contains(key)) throw ValidationError(where + ": missing field '" + key + "'");

    SampleRecord r;
    try {
        r.image_path = j.at("image_path").get<std::string>();
        r.expression = j.at("expression").get<std::string>();
        r.mask_rle = j.at("mask_rle").get<std::string>();
        r.sample_id = j.at("sample_id").get<std::string>();
        const auto& sz = j.at("image_size");
        if (!sz.is_array() || sz.size() != 2) throw ValidationError("image_size must be [H,W]");
        r.height = sz[0].get<int>();
        r.width = sz[1].get<int>();
    } catch (const json::exception& e) {
        throw ValidationError(where + ": " + e.what());
    }
    if (r.expression.empty()) throw ValidationError(where + ": empty expression");
    if (r.height < 1 || r.width < 1) throw ValidationError(where + ": bad image_size");
    if (r.image_path.empty()) throw ValidationError(where + ": empty image_path");
    return r;
}

std::vector<SampleRecord> load_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw ValidationError("cannot open manifest: " + manifest_path.string());
    const std::filesystem::path dir = manifest_path.parent_path();
    std::vector<SampleRecord> records;
    std::string text_line;
    int line = 0;
    while (std::getline(in, text_line)) {
        ++line;
        if (text_line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(text_line);
        } catch (const json::exception& e) {
            throw ValidationError("manifest line " + std::to_string(line) + ": " + e.what());
        }
        SampleRecord r = parse_record(j, line);
        const std::filesystem::path img = dir / r.image_path;
        if (!std::filesystem::exists(img))
            throw ValidationError("manifest line " + std::to_string(line) +
                                  ": image file missing: " + img.string());
        try {
            rle_decode(r.mask_rle, r.height, r.width);
        } catch (const ValidationError& e) {
            throw ValidationError("manifest line " + std::to_string(line) + ": " + e.what());
        }
        records.push_back(std::move(r));
    }
    if (records.empty())
        std::cerr << "warning: manifest " << manifest_path.string() << " contains no records\n";
    return records;
}

void write_manifest(const std::filesystem::path& manifest_path,
                    const std::vector<SampleRecord>& records) {
    std::ofstream out(manifest_path);
    if (!out) throw ValidationError("cannot write manifest: " + manifest_path.string());
    for (const auto& r : records) {
        ordered_json j;
        j["image_path"] = r.image_path;
        j["expression"] = r.expression;
        j["mask_rle"] = r.mask_rle;
        j["image_size"] = {r.height, r.width};
        j["sample_id"] = r.sample_id;
        out << j.dump() << '\n';
    }
}

std::vector<std::string> read_vocab_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open vocabulary: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("vocabulary " + path.string() + ": " + e.what());
    }
    if (!j.is_array()) throw ValidationError("vocabulary must be a JSON array of words");
    std::vector<std::string> words;
    for (const auto& w : j) words.push_back(w.get<std::string>());
    return words;
}

void write_vocab_file(const std::filesystem::path& path, const std::vector<std::string>& words) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write vocabulary: " + path.string());
    out << json(words).dump(2) << '\n';
}

// --- scenes ----------------------------------------------------------------------

const std::vector<PaletteColor>& color_palette() {
    static const std::vector<PaletteColor> palette = {
        {"red", {0.85f, 0.10f, 0.10f}},    {"green", {0.10f, 0.70f, 0.15f}},
        {"blue", {0.15f, 0.25f, 0.85f}},   {"yellow", {0.90f, 0.85f, 0.10f}},
        {"purple", {0.60f, 0.15f, 0.70f}}, {"cyan", {0.10f, 0.75f, 0.80f}},
    };
    return palette;
}

int palette_index(const std::string& name) {
    const auto& p = color_palette();
    for (size_t i = 0; i < p.size(); ++i)
        if (p[i].name == name) return static_cast<int>(i);
    throw ValidationError("unknown color '" + name + "'");
}

ShapeKind shape_kind_from_string(const std::string& name) {
    if (name == "circle") return ShapeKind::circle;
    if (name == "square") return ShapeKind::square;
    if (name == "triangle") return ShapeKind::triangle;
    throw ValidationError("unknown shape '" + name + "'");
}

const char* shape_kind_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

bool shape_contains(const SceneShape& s, double px, double py) {
    const double dx = px - s.cx, dy = py - s.cy;
    switch (s.kind) {
        case ShapeKind::circle:
            return dx * dx + dy * dy <= s.r * s.r;
        case ShapeKind::square:
            return std::abs(dx) <= s.r && std::abs(dy) <= s.r;
        case ShapeKind::triangle: {
            // upward triangle: apex (cx, cy-r), base corners (cx +- 0.866r, cy + 0.5r)
            const double ax = 0.0, ay = -s.r;
            const double bx = -0.8660254037844386 * s.r, by = 0.5 * s.r;
            const double cx2 = 0.8660254037844386 * s.r, cy2 = 0.5 * s.r;
            auto side = [&](double x1, double y1, double x2, double y2) {
                return (x2 - x1) * (dy - y1) - (y2 - y1) * (dx - x1);
            };
            const double s1 = side(ax, ay, bx, by);
            const double s2 = side(bx, by, cx2, cy2);
            const double s3 = side(cx2, cy2, ax, ay);
            return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
        }
    }
    return false;
}

Tensor<std::uint8_t> rasterize_shape(const SceneShape& s, int image_size) {
    Tensor<std::uint8_t> mask({image_size, image_size});
    for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x)
            mask.at(y, x) = shape_contains(s, x + 0.5, y + 0.5) ? 1 : 0;
    return mask;
}

// --- expression matcher --------------------------------------------------------------

namespace {

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream is(text);
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

std::optional<ShapeKind> try_shape(const std::string& w) {
    if (w == "circle" || w == "square" || w == "triangle") return shape_kind_from_string(w);
    return std::nullopt;
}

std::optional<int> try_color(const std::string& w) {
    for (size_t i = 0; i < color_palette().size(); ++i)
        if (color_palette()[i].name == w) return static_cast<int>(i);
    return std::nullopt;
}

std::vector<int> match_attribute(const Scene& scene, int color, ShapeKind kind) {
    std::vector<int> out;
    for (size_t i = 0; i < scene.shapes.size(); ++i)
        if (scene.shapes[i].kind == kind && scene.shapes[i].color == color)
            out.push_back(static_cast<int>(i));
    return out;
}

std::vector<int> match_relation(const Scene& scene, ShapeKind target_kind,
                                const std::string& rel, int ref_color, ShapeKind ref_kind) {
    const std::vector<int> refs = match_attribute(scene, ref_color, ref_kind);
    if (refs.size() != 1) return {};  // reference description must be unambiguous
    const SceneShape& ref = scene.shapes[static_cast<size_t>(refs[0])];
    std::vector<int> out;
    for (size_t i = 0; i < scene.shapes.size(); ++i) {
        if (static_cast<int>(i) == refs[0]) continue;
        const SceneShape& s = scene.shapes[i];
        if (s.kind != target_kind) continue;
        bool held = false;
        if (rel == "left") held = s.cx < ref.cx;
        else if (rel == "right") held = s.cx > ref.cx;
        else if (rel == "above") held = s.cy < ref.cy;
        else if (rel == "below") held = s.cy > ref.cy;
        if (held) out.push_back(static_cast<int>(i));
    }
    return out;
}

std::vector<int> match_superlative(const Scene& scene, bool largest, ShapeKind kind) {
    std::vector<int> cands;
    for (size_t i = 0; i < scene.shapes.size(); ++i)
        if (scene.shapes[i].kind == kind) cands.push_back(static_cast<int>(i));
    if (cands.empty()) return {};
    int best = cands[0];
    bool unique = true;
    for (size_t i = 1; i < cands.size(); ++i) {
        const double r = scene.shapes[static_cast<size_t>(cands[i])].r;
        const double br = scene.shapes[static_cast<size_t>(best)].r;
        if ((largest && r > br) || (!largest && r < br)) {
            best = cands[i];
            unique = true;
        } else if (r == br) {
            unique = false;
        }
    }
    return unique ? std::vector<int>{best} : std::vector<int>{};
}

}  // namespace

std::vector<int> match_expression(const Scene& scene, const std::string& expression) {
    const std::vector<std::string> w = split_words(expression);
    if (w.size() < 3 || w[0] != "the") return {};
    if (w.size() == 3 && (w[1] == "largest" || w[1] == "smallest")) {
        auto kind = try_shape(w[2]);
        if (!kind) return {};
        return match_superlative(scene, w[1] == "largest", *kind);
    }
    if (w.size() == 3) {
        auto color = try_color(w[1]);
        auto kind = try_shape(w[2]);
        if (!color || !kind) return {};
        return match_attribute(scene, *color, *kind);
    }
    if (w.size() == 7 && (w[2] == "left" || w[2] == "right") && w[3] == "of" && w[4] == "the") {
        auto tk = try_shape(w[1]);
        auto rc = try_color(w[5]);
        auto rk = try_shape(w[6]);
        if (!tk || !rc || !rk) return {};
        return match_relation(scene, *tk, w[2], *rc, *rk);
    }
    if (w.size() == 6 && (w[2] == "above" || w[2] == "below") && w[3] == "the") {
        auto tk = try_shape(w[1]);
        auto rc = try_color(w[4]);
        auto rk = try_shape(w[5]);
        if (!tk || !rc || !rk) return {};
        return match_relation(scene, *tk, w[2], *rc, *rk);
    }
    return {};
}

// --- generator ----------------------------------------------------------------------

void SyntheticSpec::validate() const {
    if (n_samples < 1) throw ValidationError("synthetic: n_samples must be >= 1");
    if (image_size < 8) throw ValidationError("synthetic: image_size too small");
    if (shapes.empty()) throw ValidationError("synthetic: need at least one shape kind");
    if (colors.empty()) throw ValidationError("synthetic: need at least one color");
    for (const auto& s : shapes) shape_kind_from_string(s);
    for (const auto& c : colors) palette_index(c);
    for (const auto& r : relations)
        if (r != "left_of" && r != "right_of" && r != "above" && r != "below" &&
            r != "largest" && r != "smallest")
            throw ValidationError("synthetic: unknown relation '" + r + "'");
    if (distractors_min < 0 || distractors_max < distractors_min)
        throw ValidationError("synthetic: bad distractor range");
    if (relational_fraction < 0 || relational_fraction > 1)
        throw ValidationError("synthetic: relational_fraction must lie in [0,1]");
    if (!(min_size_frac > 0) || max_size_frac < min_size_frac || max_size_frac > 0.45)
        throw ValidationError("synthetic: bad size range");
}

std::vector<std::string> synthetic_vocabulary(const SyntheticSpec& spec) {
    std::set<std::string> words = {"the"};
    for (const auto& s : spec.shapes) words.insert(s);
    for (const auto& c : spec.colors) words.insert(c);
    for (const auto& r : spec.relations) {
        if (r == "left_of") words.insert("left"), words.insert("of");
        else if (r == "right_of") words.insert("right"), words.insert("of");
        else if (r == "above") words.insert("above");
        else if (r == "below") words.insert("below");
        else words.insert(r);  // largest / smallest
    }
    return {words.begin(), words.end()};
}

namespace {

// thin wrappers over mt19937_64 that avoid std::distribution implementation drift
std::uint64_t rng_raw(std::mt19937_64& rng) { return rng(); }
int rng_int(std::mt19937_64& rng, int lo, int hi) {  // inclusive
    return lo + static_cast<int>(rng_raw(rng) % static_cast<std::uint64_t>(hi - lo + 1));
}
double rng_real(std::mt19937_64& rng, double lo, double hi) {
    const double u = static_cast<double>(rng_raw(rng) >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
}

bool bboxes_clear(const SceneShape& a, const SceneShape& b, double gap) {
    return std::abs(a.cx - b.cx) > a.r + b.r + gap || std::abs(a.cy - b.cy) > a.r + b.r + gap;
}

struct Candidate {
    int target;
    std::string expression;
    bool relational;
};

std::string attr_expr(const SceneShape& s) {
    return "the " + color_palette()[static_cast<size_t>(s.color)].name + " " +
           shape_kind_name(s.kind);
}

std::vector<Candidate> enumerate_candidates(const Scene& scene, const SyntheticSpec& spec) {
    std::vector<Candidate> out;
    const auto enabled = [&](const char* rel) {
        return std::find(spec.relations.begin(), spec.relations.end(), rel) !=
               spec.relations.end();
    };
    for (size_t t = 0; t < scene.shapes.size(); ++t) {
        const SceneShape& s = scene.shapes[t];
        {
            std::string e = attr_expr(s);
            if (match_expression(scene, e) == std::vector<int>{static_cast<int>(t)})
                out.push_back({static_cast<int>(t), e, false});
        }
        for (size_t o = 0; o < scene.shapes.size(); ++o) {
            if (o == t) continue;
            const std::string ref = color_palette()[static_cast<size_t>(scene.shapes[o].color)].name +
                                    std::string(" ") + shape_kind_name(scene.shapes[o].kind);
            const std::string ts = shape_kind_name(s.kind);
            struct Rel { const char* key; std::string words; };
            const Rel rels[] = {{"left_of", "left of"},
                                {"right_of", "right of"},
                                {"above", "above"},
                                {"below", "below"}};
            for (const auto& rel : rels) {
                if (!enabled(rel.key)) continue;
                const std::string e = "the " + ts + " " + rel.words + " the " + ref;
                if (match_expression(scene, e) == std::vector<int>{static_cast<int>(t)})
                    out.push_back({static_cast<int>(t), e, true});
            }
        }
        for (const char* sup : {"largest", "smallest"}) {
            if (!enabled(sup)) continue;
            int same_kind = 0;
            for (const auto& other : scene.shapes) same_kind += other.kind == s.kind ? 1 : 0;
            if (same_kind < 2) continue;  // trivial superlatives carry no signal
            const std::string e = "the " + std::string(sup) + " " + shape_kind_name(s.kind);
            if (match_expression(scene, e) == std::vector<int>{static_cast<int>(t)})
                out.push_back({static_cast<int>(t), e, true});
        }
    }
    return out;
}

std::optional<Scene> sample_scene(std::mt19937_64& rng, const SyntheticSpec& spec) {
    Scene scene;
    const int n = 1 + rng_int(rng, spec.distractors_min, spec.distractors_max);
    const double size = spec.image_size;
    for (int i = 0; i < n; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            SceneShape s;
            s.kind = shape_kind_from_string(
                spec.shapes[static_cast<size_t>(rng_int(rng, 0, static_cast<int>(spec.shapes.size()) - 1))]);
            s.color = palette_index(
                spec.colors[static_cast<size_t>(rng_int(rng, 0, static_cast<int>(spec.colors.size()) - 1))]);
            s.r = rng_real(rng, spec.min_size_frac, spec.max_size_frac) * size;
            s.cx = rng_real(rng, s.r + 1.5, size - s.r - 1.5);
            s.cy = rng_real(rng, s.r + 1.5, size - s.r - 1.5);
            bool clear = true;
            for (const auto& other : scene.shapes)
                clear = clear && bboxes_clear(s, other, 2.0);
            if (clear) {
                scene.shapes.push_back(s);
                placed = true;
            }
        }
        if (!placed) return std::nullopt;
    }
    return scene;
}

Tensor<float> render_scene(const Scene& scene, int image_size) {
    Tensor<float> img({image_size, image_size, 3});
    for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
            float rgb[3] = {0.12f, 0.12f, 0.13f};  // background
            for (const auto& s : scene.shapes)
                if (shape_contains(s, x + 0.5, y + 0.5)) {
                    const auto& c = color_palette()[static_cast<size_t>(s.color)];
                    rgb[0] = c.rgb[0];
                    rgb[1] = c.rgb[1];
                    rgb[2] = c.rgb[2];
                    break;
                }
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
        }
    return img;
}

}  // namespace

GenerateResult generate_synthetic(const SyntheticSpec& spec,
                                  const std::filesystem::path& out_dir) {
    spec.validate();
    std::filesystem::create_directories(out_dir / "images");
    std::mt19937_64 rng(spec.seed);
    GenerateResult result;
    result.vocabulary = synthetic_vocabulary(spec);

    const bool any_relation = !spec.relations.empty();
    for (int idx = 0; idx < spec.n_samples; ++idx) {
        const bool want_relational =
            any_relation && rng_real(rng, 0.0, 1.0) < spec.relational_fraction;
        bool produced = false;
        for (int attempt = 0; attempt < 64 && !produced; ++attempt) {
            std::optional<Scene> scene = sample_scene(rng, spec);
            if (!scene) continue;
            std::vector<Candidate> cands = enumerate_candidates(*scene, spec);
            std::erase_if(cands, [&](const Candidate& c) { return c.relational != want_relational; });
            if (cands.empty()) continue;
            const Candidate& pick =
                cands[static_cast<size_t>(rng_int(rng, 0, static_cast<int>(cands.size()) - 1))];

            char id[32];
            std::snprintf(id, sizeof id, "sample_%04d", idx);
            const std::string image_rel = std::string("images/") + id + ".png";
            const Tensor<float> image = render_scene(*scene, spec.image_size);
            write_png_rgb(out_dir / image_rel, image);

            GeneratedSample gs;
            gs.scene = *scene;
            gs.target_index = pick.target;
            gs.record.image_path = image_rel;
            gs.record.expression = pick.expression;
            gs.record.mask_rle = rle_encode(rasterize_shape(
                scene->shapes[static_cast<size_t>(pick.target)], spec.image_size));
            gs.record.height = spec.image_size;
            gs.record.width = spec.image_size;
            gs.record.sample_id = id;
            result.samples.push_back(std::move(gs));
            produced = true;
        }
        if (!produced) {
            ++result.skipped;
            std::cerr << "warning: skipped sample " << idx
                      << " (no unique expression after bounded retries)\n";
        }
    }

    std::vector<SampleRecord> records;
    for (const auto& s : result.samples) records.push_back(s.record);
    write_manifest(out_dir / "manifest.jsonl", records);
    write_vocab_file(out_dir / "vocab.json", result.vocabulary);

    std::ofstream scenes(out_dir / "scenes.jsonl");
    for (const auto& s : result.samples) {
        ordered_json j;
        j["sample_id"] = s.record.sample_id;
        j["target"] = s.target_index;
        ordered_json arr = ordered_json::array();
        for (const auto& sh : s.scene.shapes) {
            ordered_json o;
            o["kind"] = shape_kind_name(sh.kind);
            o["color"] = color_palette()[static_cast<size_t>(sh.color)].name;
            o["cx"] = sh.cx;
            o["cy"] = sh.cy;
            o["r"] = sh.r;
            arr.push_back(o);
        }
        j["shapes"] = arr;
        scenes << j.dump() << '\n';
    }
    return result;
}

// --- augmentation ----------------------------------------------------------------------

void augment(Tensor<float>& image, Tensor<std::uint8_t>& mask, const AugmentConfig& cfg,
             std::uint64_t seed) {
    if (!cfg.enabled) return;
    if (image.rank() != 3 || mask.rank() != 2 || image.dim(0) != mask.dim(0) ||
        image.dim(1) != mask.dim(1))
        throw ValidationError("augment: image/mask shape mismatch");
    const int h = image.dim(0), w = image.dim(1);

    const double theta =
        (2.0 * unit_uniform(seed, 0) - 1.0) * cfg.rotate_deg * std::numbers::pi / 180.0;
    const double tx = (2.0 * unit_uniform(seed, 1) - 1.0) * cfg.translate_frac * w;
    const double ty = (2.0 * unit_uniform(seed, 2) - 1.0) * cfg.translate_frac * h;
    const double sc = cfg.scale_min + unit_uniform(seed, 3) * (cfg.scale_max - cfg.scale_min);
    const double gain = 1.0 + (2.0 * unit_uniform(seed, 4) - 1.0) * cfg.intensity;

    const double cx = w / 2.0, cy = h / 2.0;
    const double cos_t = std::cos(-theta), sin_t = std::sin(-theta);
    auto source_of = [&](double px, double py, double& sx, double& sy) {
        const double dx = (px - cx - tx), dy = (py - cy - ty);
        sx = (cos_t * dx - sin_t * dy) / sc + cx;
        sy = (sin_t * dx + cos_t * dy) / sc + cy;
    };

    Tensor<float> new_img(image.shape);
    Tensor<std::uint8_t> new_mask(mask.shape);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double sx, sy;
            source_of(x + 0.5, y + 0.5, sx, sy);
            // bilinear with clamp-to-edge for the image
            const double fx = std::min(std::max(sx - 0.5, 0.0), static_cast<double>(w - 1));
            const double fy = std::min(std::max(sy - 0.5, 0.0), static_cast<double>(h - 1));
            const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
            const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
            const double wx = fx - x0, wy = fy - y0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * image.at(y0, x0, c) + wx * image.at(y0, x1, c)) +
                                 wy * ((1 - wx) * image.at(y1, x0, c) + wx * image.at(y1, x1, c));
                new_img.at(y, x, c) = static_cast<float>(std::min(1.0, std::max(0.0, v * gain)));
            }
            // nearest for the mask, re-binarized by construction
            const int mx = std::min(std::max(static_cast<int>(std::floor(sx)), 0), w - 1);
            const int my = std::min(std::max(static_cast<int>(std::floor(sy)), 0), h - 1);
            new_mask.at(y, x) = mask.at(my, mx) ? 1 : 0;
        }
    image = std::move(new_img);
    mask = std::move(new_mask);
}

// --- dataset loading ----------------------------------------------------------------

std::vector<LoadedSample> load_dataset(const std::filesystem::path& manifest_path,
                                       const Vocabulary& vocab, const BackboneConfig& cfg) {
    const std::vector<SampleRecord> records = load_manifest(manifest_path);
    const std::filesystem::path dir = manifest_path.parent_path();
    std::vector<LoadedSample> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        LoadedSample s;
        s.sample_id = r.sample_id;
        s.expression = r.expression;
        s.image = read_png_rgb(dir / r.image_path);
        if (s.image.dim(0) != r.height || s.image.dim(1) != r.width)
            throw ValidationError("sample " + r.sample_id + ": PNG size " +
                                  shape_str(s.image.shape) + " disagrees with manifest [" +
                                  std::to_string(r.height) + "," + std::to_string(r.width) + "]");
        s.mask = rle_decode(r.mask_rle, r.height, r.width);
        s.tokens = tokenize(r.expression, vocab, cfg);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace risclip
