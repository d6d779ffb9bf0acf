#include "pseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "pseg/io.hpp"

namespace pseg {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(ShapeFamily f) {
    switch (f) {
        case ShapeFamily::sphere: return "sphere";
        case ShapeFamily::cuboid: return "cuboid";
        case ShapeFamily::disk: return "disk";
        case ShapeFamily::annulus: return "annulus";
    }
    throw ArgumentError("bad shape family");
}

ShapeFamily shape_family_from_string(const std::string& s) {
    if (s == "sphere") return ShapeFamily::sphere;
    if (s == "cuboid") return ShapeFamily::cuboid;
    if (s == "disk") return ShapeFamily::disk;
    if (s == "annulus") return ShapeFamily::annulus;
    throw ConfigError("unknown shape family '" + s + "'");
}

void rasterize_ellipsoid(Tensor<uint8_t>& label, std::array<double, 3> c, std::array<double, 3> r,
                         uint8_t value) {
    const int64_t D = label.dim(0), H = label.dim(1), W = label.dim(2);
    for (int64_t d = 0; d < D; ++d) {
        const double zd = r[0] > 0 ? (d - c[0]) / r[0] : (d == std::llround(c[0]) ? 0.0 : 2.0);
        for (int64_t h = 0; h < H; ++h) {
            const double zh = (h - c[1]) / r[1];
            for (int64_t w = 0; w < W; ++w) {
                const double zw = (w - c[2]) / r[2];
                if (zd * zd + zh * zh + zw * zw <= 1.0)
                    label[(d * H + h) * W + w] = value;
            }
        }
    }
}

void rasterize_box(Tensor<uint8_t>& label, std::array<double, 3> lo, std::array<double, 3> hi,
                   uint8_t value) {
    const int64_t D = label.dim(0), H = label.dim(1), W = label.dim(2);
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w)
                if (d >= lo[0] && d <= hi[0] && h >= lo[1] && h <= hi[1] && w >= lo[2] && w <= hi[2])
                    label[(d * H + h) * W + w] = value;
}

void rasterize_shell(Tensor<uint8_t>& label, std::array<double, 3> c, std::array<double, 3> outer,
                     std::array<double, 3> inner, uint8_t value) {
    const int64_t D = label.dim(0), H = label.dim(1), W = label.dim(2);
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                auto q = [&](const std::array<double, 3>& r) {
                    const double zd = r[0] > 0 ? (d - c[0]) / r[0] : (d == std::llround(c[0]) ? 0.0 : 2.0);
                    const double zh = (h - c[1]) / r[1];
                    const double zw = (w - c[2]) / r[2];
                    return zd * zd + zh * zh + zw * zw;
                };
                if (q(outer) <= 1.0 && q(inner) > 1.0) label[(d * H + h) * W + w] = value;
            }
}

namespace {

struct Geometry {
    Tensor<uint8_t> label;
    bool ok = false;
};

// One geometry draw for the requested family. Values that land outside the
// volume simply rasterize clipped; the caller checks per-class presence.
Geometry draw_geometry(const PhantomSpec& spec, Rng& rng, int active_classes) {
    const auto [D, H, W] = spec.dims;
    Geometry g;
    g.label = Tensor<uint8_t>(Shape{D, H, W});
    const bool flat = D == 1;
    const double plane = static_cast<double>(std::min(H, W));

    auto center_in = [&](double rd, double rp) -> std::array<double, 3> {
        auto pick = [&](int64_t n, double r) {
            const double lo = r + 1.0, hi = static_cast<double>(n - 1) - r - 1.0;
            return hi > lo ? rng.uniform(lo, hi) : (n - 1) / 2.0;
        };
        return {flat ? 0.0 : pick(D, rd), pick(H, rp), pick(W, rp)};
    };

    switch (spec.family) {
        case ShapeFamily::sphere: {
            const double rp = rng.uniform(0.14, 0.24) * plane;
            const double rd = flat ? 0.0 : rng.uniform(0.28, 0.42) * static_cast<double>(D);
            const auto c = center_in(rd, rp);
            rasterize_ellipsoid(g.label, c, {rd, rp, rp}, 1);
            if (active_classes >= 3) {
                const double f = rng.uniform(0.38, 0.55);
                std::array<double, 3> tc = c;
                tc[1] += rng.uniform(-0.25, 0.25) * rp;
                tc[2] += rng.uniform(-0.25, 0.25) * rp;
                rasterize_ellipsoid(g.label, tc, {rd * f, rp * f, rp * f}, 2);
            }
            break;
        }
        case ShapeFamily::cuboid: {
            const double eh = rng.uniform(0.12, 0.22) * static_cast<double>(H);
            const double ew = rng.uniform(0.12, 0.22) * static_cast<double>(W);
            const double ed = flat ? 0.0 : rng.uniform(0.22, 0.40) * static_cast<double>(D);
            const auto c = center_in(ed, std::max(eh, ew));
            rasterize_box(g.label, {c[0] - ed, c[1] - eh, c[2] - ew}, {c[0] + ed, c[1] + eh, c[2] + ew},
                          1);
            if (active_classes >= 3) {
                const double f = rng.uniform(0.35, 0.5);
                rasterize_box(g.label, {c[0] - ed * f, c[1] - eh * f, c[2] - ew * f},
                              {c[0] + ed * f, c[1] + eh * f, c[2] + ew * f}, 2);
            }
            break;
        }
        case ShapeFamily::disk: {
            // Disjoint disks, one per foreground class.
            std::vector<std::array<double, 3>> centers;
            std::vector<double> radii;
            for (int cls = 1; cls < active_classes; ++cls) {
                bool placed = false;
                for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
                    const double r = rng.uniform(0.10, 0.18) * plane;
                    const auto c = center_in(0.0, r);
                    bool clash = false;
                    for (size_t i = 0; i < centers.size(); ++i) {
                        const double dh = c[1] - centers[i][1], dw = c[2] - centers[i][2];
                        if (std::sqrt(dh * dh + dw * dw) < r + radii[i] + 2.0) clash = true;
                    }
                    if (clash) continue;
                    rasterize_ellipsoid(g.label, c, {0.0, r, r}, static_cast<uint8_t>(cls));
                    centers.push_back(c);
                    radii.push_back(r);
                    placed = true;
                }
                if (!placed) return g;  // ok stays false
            }
            break;
        }
        case ShapeFamily::annulus: {
            const double ro = rng.uniform(0.18, 0.28) * plane;
            const double ri = ro * rng.uniform(0.5, 0.65);
            const double rd = flat ? 0.0 : rng.uniform(0.28, 0.42) * static_cast<double>(D);
            const auto c = center_in(rd, ro);
            rasterize_shell(g.label, c, {rd, ro, ro}, {rd * 0.75, ri, ri}, 1);
            if (active_classes >= 3)
                rasterize_ellipsoid(g.label, c, {rd * 0.4, ri * 0.55, ri * 0.55}, 2);
            break;
        }
    }
    g.ok = true;
    return g;
}

}  // namespace

PhantomSample generate_sample(const PhantomSpec& spec, Rng rng, bool lesion_present) {
    const auto [D, H, W] = spec.dims;
    if (D < 1 || H < 4 || W < 4) throw DataError("phantom dims too small: " + shape_str({D, H, W}));
    if (spec.class_count < 2 || spec.class_count > 4)
        throw ConfigError("phantom class_count must be in [2,4]");
    const int C = static_cast<int>(spec.channel_means.size());
    if (C < 1 || C > 4) throw ConfigError("phantom needs 1..4 channel means");
    if (spec.class_offsets.size() + 1 != static_cast<size_t>(spec.class_count))
        throw ConfigError("phantom class_offsets must have class_count-1 entries");

    const int active = lesion_present ? spec.class_count : spec.class_count - 1;

    PhantomSample out;
    Rng geo = rng.substream("geometry");
    bool done = false;
    for (int attempt = 0; attempt < 50 && !done; ++attempt) {
        Geometry g = draw_geometry(spec, geo, active);
        if (!g.ok) continue;
        std::vector<int64_t> counts(static_cast<size_t>(spec.class_count), 0);
        for (int64_t i = 0; i < g.label.size(); ++i) ++counts[g.label[i]];
        bool all_present = true;
        for (int cls = 1; cls < active; ++cls)
            if (counts[static_cast<size_t>(cls)] == 0) all_present = false;
        if (!all_present) continue;
        out.label = std::move(g.label);
        done = true;
    }
    if (!done)
        throw DataError("phantom geometry does not fit dims " + shape_str({D, H, W}) +
                        " for family " + to_string(spec.family));
    out.lesion = lesion_present;

    Rng noise = rng.substream("noise");
    Rng base_rng = rng.substream("base");
    out.image = Tensor<float>(Shape{C, D, H, W});
    const int64_t V = D * H * W;
    for (int c = 0; c < C; ++c) {
        const double base =
            base_rng.normal(spec.channel_means[static_cast<size_t>(c)],
                            c < static_cast<int>(spec.channel_stds.size())
                                ? spec.channel_stds[static_cast<size_t>(c)]
                                : 0.0);
        float* img = out.image.data() + c * V;
        for (int64_t i = 0; i < V; ++i) {
            const uint8_t lab = out.label[i];
            double v = base + (lab > 0 ? spec.class_offsets[static_cast<size_t>(lab - 1)] : 0.0);
            v += spec.noise_std * noise.normal();
            img[i] = static_cast<float>(v);
        }
    }
    return out;
}

Dataset generate_dataset(const PhantomSpec& spec, const TaskDescriptor& task,
                         const ModalityDescriptor& modality, int n_train, int n_test,
                         const std::string& name) {
    if (n_train < 1 || n_test < 1) throw ArgumentError("generate_dataset: n_train and n_test must be >= 1");
    if (spec.class_count != task.class_count)
        throw ConfigError("phantom class_count does not match task '" + task.name + "'");
    if (static_cast<int>(spec.channel_means.size()) != modality.channel_count)
        throw ConfigError("phantom channel means do not match modality '" + modality.name + "'");
    const bool flat = spec.dims[0] == 1;
    if (flat != (modality.dimensionality == Dimensionality::k2d))
        throw ConfigError("phantom depth/dimensionality mismatch for modality '" + modality.name + "'");

    Dataset ds;
    ds.name = name;
    ds.task_id = task.task_id;
    ds.modal_id = modality.modal_id;
    ds.channels = modality.channel_count;
    ds.class_count = task.class_count;
    ds.dim = modality.dimensionality;
    ds.dims = spec.dims;
    ds.spec = spec;

    Rng root(spec.seed);
    auto make = [&](int index) {
        Rng srng = root.substream("sample", static_cast<uint64_t>(index));
        bool lesion = true;
        if (spec.lesion_absent_fraction > 0.0 && spec.class_count >= 2)
            lesion = !srng.substream("tag").bernoulli(spec.lesion_absent_fraction);
        return generate_sample(spec, srng, lesion);
    };
    for (int i = 0; i < n_train; ++i) ds.train.push_back(make(i));
    for (int i = 0; i < n_test; ++i) ds.test.push_back(make(n_train + i));
    return ds;
}

SampleBatch sample_batch(const Dataset& ds, int batch_size, Rng& rng,
                         std::optional<std::array<int64_t, 3>> patch, const AugmentConfig* aug) {
    if (batch_size < 1) throw ArgumentError("sample_batch: batch_size must be >= 1");
    if (ds.train.empty()) throw DataError("sample_batch: dataset '" + ds.name + "' has no train split");

    std::array<int64_t, 3> out_dims = ds.dims;
    if (patch) {
        for (int a = 0; a < 3; ++a) {
            if ((*patch)[a] > ds.dims[a])
                throw ShapeError("sample_batch: patch exceeds volume dims for '" + ds.name + "'");
        }
        out_dims = *patch;
    }
    const auto [D, H, W] = out_dims;
    const int64_t C = ds.channels;
    SampleBatch batch;
    batch.task_id = ds.task_id;
    batch.modal_id = ds.modal_id;
    batch.images = Tensor<float>(Shape{batch_size, C, D, H, W});
    batch.labels = Tensor<uint8_t>(Shape{batch_size, D, H, W});

    const int64_t vol = D * H * W;
    for (int b = 0; b < batch_size; ++b) {
        const auto idx = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(ds.train.size()) - 1));
        const PhantomSample& s = ds.train[idx];
        std::array<int64_t, 3> off{0, 0, 0};
        for (int a = 0; a < 3; ++a)
            if (ds.dims[a] > out_dims[a]) off[a] = rng.uniform_int(0, ds.dims[a] - out_dims[a]);
        bool fd = false, fh = false, fw = false;
        double shift = 0.0;
        if (aug && aug->flips) {
            fd = ds.dims[0] > 1 && rng.bernoulli(0.5);
            fh = rng.bernoulli(0.5);
            fw = rng.bernoulli(0.5);
        }
        if (aug && aug->intensity_jitter > 0.0) shift = rng.normal(0.0, aug->intensity_jitter);

        const int64_t SD = ds.dims[0], SH = ds.dims[1], SW = ds.dims[2];
        for (int64_t d = 0; d < D; ++d) {
            const int64_t sd = off[0] + (fd ? D - 1 - d : d);
            for (int64_t h = 0; h < H; ++h) {
                const int64_t sh = off[1] + (fh ? H - 1 - h : h);
                for (int64_t w = 0; w < W; ++w) {
                    const int64_t sw = off[2] + (fw ? W - 1 - w : w);
                    const int64_t src = (sd * SH + sh) * SW + sw;
                    const int64_t dst = (d * H + h) * W + w;
                    batch.labels[b * vol + dst] = s.label[src];
                    for (int64_t c = 0; c < C; ++c)
                        batch.images[(b * C + c) * vol + dst] =
                            s.image[c * SD * SH * SW + src] + static_cast<float>(shift);
                }
            }
        }
    }
    return batch;
}

std::vector<double> class_fractions(const Dataset& ds) {
    std::vector<int64_t> counts(static_cast<size_t>(ds.class_count), 0);
    int64_t total = 0;
    for (const auto& s : ds.train) {
        for (int64_t i = 0; i < s.label.size(); ++i) ++counts[s.label[i]];
        total += s.label.size();
    }
    std::vector<double> out;
    for (int64_t c : counts) out.push_back(static_cast<double>(c) / static_cast<double>(total));
    return out;
}

namespace {

json spec_to_json(const PhantomSpec& s) {
    return json{{"family", to_string(s.family)},
                {"dims", {s.dims[0], s.dims[1], s.dims[2]}},
                {"class_count", s.class_count},
                {"channel_means", s.channel_means},
                {"channel_stds", s.channel_stds},
                {"class_offsets", s.class_offsets},
                {"noise_std", s.noise_std},
                {"lesion_absent_fraction", s.lesion_absent_fraction},
                {"seed", s.seed}};
}

PhantomSpec spec_from_json(const json& j) {
    PhantomSpec s;
    s.family = shape_family_from_string(j.at("family").get<std::string>());
    auto d = j.at("dims");
    s.dims = {d[0].get<int64_t>(), d[1].get<int64_t>(), d[2].get<int64_t>()};
    s.class_count = j.at("class_count").get<int>();
    s.channel_means = j.at("channel_means").get<std::vector<double>>();
    s.channel_stds = j.at("channel_stds").get<std::vector<double>>();
    s.class_offsets = j.at("class_offsets").get<std::vector<double>>();
    s.noise_std = j.at("noise_std").get<double>();
    s.lesion_absent_fraction = j.at("lesion_absent_fraction").get<double>();
    s.seed = j.at("seed").get<uint64_t>();
    return s;
}

std::string index_name(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04d.raw", prefix, i);
    return buf;
}

}  // namespace

void save_dataset(const fs::path& dir, const Dataset& ds) {
    fs::create_directories(dir / "train");
    fs::create_directories(dir / "test");
    json tags_train = json::array(), tags_test = json::array();
    auto dump_split = [&](const std::vector<PhantomSample>& split, const char* sub, json& tags) {
        for (size_t i = 0; i < split.size(); ++i) {
            const auto& s = split[i];
            write_raw_f32(dir / sub / index_name("img", static_cast<int>(i)), s.image.data(),
                          s.image.size());
            write_raw_u8(dir / sub / index_name("lab", static_cast<int>(i)), s.label.data(),
                         s.label.size());
            tags.push_back(s.lesion ? "lesion" : "normal");
        }
    };
    dump_split(ds.train, "train", tags_train);
    dump_split(ds.test, "test", tags_test);

    json j{{"format", {{"image", "f32le"}, {"label", "u8"}}},
           {"name", ds.name},
           {"task_id", ds.task_id},
           {"modal_id", ds.modal_id},
           {"channels", ds.channels},
           {"class_count", ds.class_count},
           {"dim", to_string(ds.dim)},
           {"dims", {ds.dims[0], ds.dims[1], ds.dims[2]}},
           {"n_train", ds.train.size()},
           {"n_test", ds.test.size()},
           {"tags_train", tags_train},
           {"tags_test", tags_test},
           {"spec", spec_to_json(ds.spec)}};
    write_text_file(dir / "manifest.json", j.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
    const json j = json::parse(read_text_file(dir / "manifest.json"));
    Dataset ds;
    ds.name = j.at("name").get<std::string>();
    ds.task_id = j.at("task_id").get<int>();
    ds.modal_id = j.at("modal_id").get<int>();
    ds.channels = j.at("channels").get<int>();
    ds.class_count = j.at("class_count").get<int>();
    ds.dim = dimensionality_from_string(j.at("dim").get<std::string>());
    auto d = j.at("dims");
    ds.dims = {d[0].get<int64_t>(), d[1].get<int64_t>(), d[2].get<int64_t>()};
    ds.spec = spec_from_json(j.at("spec"));
    const auto n_train = j.at("n_train").get<int>();
    const auto n_test = j.at("n_test").get<int>();
    const auto& tags_train = j.at("tags_train");
    const auto& tags_test = j.at("tags_test");
    auto load_split = [&](int n, const char* sub, const json& tags, std::vector<PhantomSample>& out) {
        for (int i = 0; i < n; ++i) {
            PhantomSample s;
            s.image = read_raw_f32(dir / sub / index_name("img", i),
                                   Shape{ds.channels, ds.dims[0], ds.dims[1], ds.dims[2]});
            s.label = read_raw_u8(dir / sub / index_name("lab", i),
                                  Shape{ds.dims[0], ds.dims[1], ds.dims[2]});
            s.lesion = tags[static_cast<size_t>(i)].get<std::string>() == "lesion";
            out.push_back(std::move(s));
        }
    };
    load_split(n_train, "train", tags_train, ds.train);
    load_split(n_test, "test", tags_test, ds.test);
    return ds;
}

}  // namespace pseg
