#include "pseg/inference.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "pseg/io.hpp"

namespace pseg {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<int64_t> window_starts(int64_t dim, int64_t patch) {
    const int64_t stride = std::max<int64_t>(1, patch / 2);
    std::vector<int64_t> out;
    for (int64_t s = 0;; s += stride) {
        if (s + patch >= dim) {
            out.push_back(dim - patch);
            break;
        }
        out.push_back(s);
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<uint8_t> predict_volume(Model<T>& model, const Tensor<float>& image, int task_id,
                               int modal_id, int select_task_id) {
    if (image.rank() != 4) throw ShapeError("predict_volume: image must be [C,D,H,W]");
    const auto& mc = model.config();
    const ModalityDescriptor& mod = model.registry().modality(modal_id);
    const bool flat = mod.dimensionality == Dimensionality::k2d;
    const std::array<int64_t, 3> patch =
        flat ? std::array<int64_t, 3>{1, mc.patch2d[0], mc.patch2d[1]} : mc.patch3d;
    const int K = model.registry().task(task_id).class_count;

    const int64_t C = image.dim(0);
    const std::array<int64_t, 3> vol{image.dim(1), image.dim(2), image.dim(3)};
    std::array<int64_t, 3> padded = vol;
    for (int a = 0; a < 3; ++a) padded[a] = std::max(padded[a], patch[a]);

    Tensor<float> src = image;
    if (padded != vol) {
        Tensor<float> grown(Shape{C, padded[0], padded[1], padded[2]});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < vol[0]; ++d)
                for (int64_t h = 0; h < vol[1]; ++h)
                    for (int64_t w = 0; w < vol[2]; ++w)
                        grown[((c * padded[0] + d) * padded[1] + h) * padded[2] + w] =
                            src[((c * vol[0] + d) * vol[1] + h) * vol[2] + w];
        src = std::move(grown);
    }

    const int64_t PV = padded[0] * padded[1] * padded[2];
    std::vector<double> prob(static_cast<size_t>(K * PV), 0.0);
    std::vector<int32_t> count(static_cast<size_t>(PV), 0);

    const auto ds0 = window_starts(padded[0], patch[0]);
    const auto hs0 = window_starts(padded[1], patch[1]);
    const auto ws0 = window_starts(padded[2], patch[2]);
    const int64_t wvol = patch[0] * patch[1] * patch[2];

    Tape<T> tape;
    NoGradGuard<T> guard(tape);
    Tensor<T> win(Shape{1, C, patch[0], patch[1], patch[2]});
    std::vector<double> logits(static_cast<size_t>(K));
    for (int64_t d0 : ds0)
        for (int64_t h0 : hs0)
            for (int64_t w0 : ws0) {
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t d = 0; d < patch[0]; ++d)
                        for (int64_t h = 0; h < patch[1]; ++h)
                            for (int64_t w = 0; w < patch[2]; ++w)
                                win[((c * patch[0] + d) * patch[1] + h) * patch[2] + w] =
                                    static_cast<T>(src[((c * padded[0] + d0 + d) * padded[1] + h0 + h) *
                                                           padded[2] +
                                                       w0 + w]);
                ForwardResult<T> out = model.forward(tape, win, task_id, modal_id, select_task_id);
                const Var<T>& finest = out.logits[0];
                for (int64_t v = 0; v < wvol; ++v) {
                    const int64_t d = v / (patch[1] * patch[2]);
                    const int64_t rem = v % (patch[1] * patch[2]);
                    const int64_t h = rem / patch[2];
                    const int64_t w = rem % patch[2];
                    const int64_t gv = ((d0 + d) * padded[1] + h0 + h) * padded[2] + w0 + w;
                    double m = -1e300;
                    for (int c = 0; c < K; ++c) {
                        logits[static_cast<size_t>(c)] = static_cast<double>(finest->value[c * wvol + v]);
                        m = std::max(m, logits[static_cast<size_t>(c)]);
                    }
                    double Z = 0;
                    for (int c = 0; c < K; ++c) Z += std::exp(logits[static_cast<size_t>(c)] - m);
                    for (int c = 0; c < K; ++c)
                        prob[static_cast<size_t>(c * PV + gv)] +=
                            std::exp(logits[static_cast<size_t>(c)] - m) / Z;
                    ++count[static_cast<size_t>(gv)];
                }
            }

    Tensor<uint8_t> pred(Shape{vol[0], vol[1], vol[2]});
    for (int64_t d = 0; d < vol[0]; ++d)
        for (int64_t h = 0; h < vol[1]; ++h)
            for (int64_t w = 0; w < vol[2]; ++w) {
                const int64_t gv = (d * padded[1] + h) * padded[2] + w;
                int best = 0;
                double bestp = -1;
                for (int c = 0; c < K; ++c) {
                    const double p = prob[static_cast<size_t>(c * PV + gv)] / count[static_cast<size_t>(gv)];
                    if (p > bestp) {
                        bestp = p;
                        best = c;
                    }
                }
                pred[(d * vol[1] + h) * vol[2] + w] = static_cast<uint8_t>(best);
            }
    return pred;
}

template <typename T>
DatasetMetric evaluate_dataset(Model<T>& model, const Dataset& ds, EvalOptions opts) {
    if (ds.test.empty()) throw DataError("evaluate: dataset '" + ds.name + "' has no test split");
    const int N = model.registry().task_count();
    const int select = opts.wrong_task_id ? (ds.task_id + 1) % N : -1;

    const int fg = ds.class_count - 1;
    std::vector<double> class_sums(static_cast<size_t>(fg), 0.0);
    std::vector<double> normal_means, lesion_means;
    for (const auto& s : ds.test) {
        Tensor<uint8_t> pred = predict_volume(model, s.image, ds.task_id, ds.modal_id, select);
        const std::vector<double> dc = dice_score_per_class(pred, s.label, ds.class_count);
        double img_mean = 0;
        for (int c = 0; c < fg; ++c) {
            class_sums[static_cast<size_t>(c)] += dc[static_cast<size_t>(c)];
            img_mean += dc[static_cast<size_t>(c)];
        }
        img_mean /= fg;
        (s.lesion ? lesion_means : normal_means).push_back(img_mean);
    }

    DatasetMetric m;
    m.name = ds.name;
    m.dim = ds.dim;
    double sum = 0;
    for (int c = 0; c < fg; ++c) {
        const double v = class_sums[static_cast<size_t>(c)] / static_cast<double>(ds.test.size());
        m.per_class_dice.push_back(v);
        sum += v;
    }
    m.mean_dice = sum / fg;
    if (!normal_means.empty() && !lesion_means.empty())
        m.wdice = weighted_dice(normal_means, lesion_means);
    return m;
}

template <typename T>
MetricReport evaluate_datasets(Model<T>& model, const std::vector<const Dataset*>& datasets,
                               EvalOptions opts) {
    std::vector<DatasetMetric> rows;
    for (const Dataset* ds : datasets) rows.push_back(evaluate_dataset(model, *ds, opts));
    return aggregate(std::move(rows));
}

namespace {

template <typename T>
Tensor<T> center_window(const Tensor<float>& image, std::array<int64_t, 3> patch) {
    const int64_t C = image.dim(0);
    const std::array<int64_t, 3> vol{image.dim(1), image.dim(2), image.dim(3)};
    Tensor<T> out(Shape{1, C, patch[0], patch[1], patch[2]});
    std::array<int64_t, 3> off{0, 0, 0};
    for (int a = 0; a < 3; ++a) {
        if (vol[a] < patch[a])
            throw ShapeError("export_priors: volume smaller than patch");
        off[a] = (vol[a] - patch[a]) / 2;
    }
    for (int64_t c = 0; c < C; ++c)
        for (int64_t d = 0; d < patch[0]; ++d)
            for (int64_t h = 0; h < patch[1]; ++h)
                for (int64_t w = 0; w < patch[2]; ++w)
                    out[((c * patch[0] + d) * patch[1] + h) * patch[2] + w] = static_cast<T>(
                        image[((c * vol[0] + off[0] + d) * vol[1] + off[1] + h) * vol[2] + off[2] + w]);
    return out;
}

}  // namespace

template <typename T>
void export_priors(Model<T>& model, const std::vector<const Dataset*>& datasets, int n_per_task,
                   const fs::path& out_dir, Rng rng) {
    if (n_per_task < 1) throw ArgumentError("export_priors: n_per_task must be >= 1");
    fs::create_directories(out_dir);
    const auto& mc = model.config();
    const auto uni = mc.bottleneck3d();
    const int64_t row_len = uni[0] * uni[1] * uni[2];

    json manifest;
    manifest["n_per_task"] = n_per_task;
    manifest["prior_dims"] = {1, uni[0], uni[1], uni[2]};
    json per_task = json::object();
    std::string rows_csv = "task_id,row,split,sample_index\n";

    for (const Dataset* dsp : datasets) {
        const Dataset& ds = *dsp;
        const bool flat = ds.dim == Dimensionality::k2d;
        const std::array<int64_t, 3> patch =
            flat ? std::array<int64_t, 3>{1, mc.patch2d[0], mc.patch2d[1]} : mc.patch3d;
        const int64_t pool = static_cast<int64_t>(ds.train.size() + ds.test.size());
        Rng draw = rng.substream("task", static_cast<uint64_t>(ds.task_id));
        std::vector<int64_t> picks;
        if (pool >= n_per_task) {
            std::vector<int64_t> idx(static_cast<size_t>(pool));
            for (int64_t i = 0; i < pool; ++i) idx[static_cast<size_t>(i)] = i;
            for (int i = 0; i < n_per_task; ++i) {
                const auto j = static_cast<size_t>(draw.uniform_int(i, pool - 1));
                std::swap(idx[static_cast<size_t>(i)], idx[j]);
                picks.push_back(idx[static_cast<size_t>(i)]);
            }
        } else {
            for (int i = 0; i < n_per_task; ++i) picks.push_back(draw.uniform_int(0, pool - 1));
        }

        Tensor<float> rows(Shape{n_per_task, row_len});
        Tape<T> tape;
        NoGradGuard<T> guard(tape);
        for (int r = 0; r < n_per_task; ++r) {
            const int64_t pick = picks[static_cast<size_t>(r)];
            const bool from_train = pick < static_cast<int64_t>(ds.train.size());
            const PhantomSample& s =
                from_train ? ds.train[static_cast<size_t>(pick)]
                           : ds.test[static_cast<size_t>(pick - static_cast<int64_t>(ds.train.size()))];
            Tensor<T> win = center_window<T>(s.image, patch);
            ForwardResult<T> out = model.forward(tape, win, ds.task_id, ds.modal_id);
            const Var<T>& prior = out.task_prior_uni;
            for (int64_t i = 0; i < row_len; ++i)
                rows[r * row_len + i] = static_cast<float>(prior->value[i]);
            rows_csv += std::to_string(ds.task_id) + "," + std::to_string(r) + "," +
                        (from_train ? "train," : "test,") +
                        std::to_string(from_train ? pick : pick - static_cast<int64_t>(ds.train.size())) +
                        "\n";
        }
        const std::string fname = "priors_task" + std::to_string(ds.task_id) + ".f32";
        write_raw_f32(out_dir / fname, rows.data(), rows.size());
        per_task[std::to_string(ds.task_id)] =
            json{{"file", fname}, {"rows", n_per_task}, {"row_len", row_len}, {"dataset", ds.name}};
    }
    manifest["tasks"] = per_task;
    write_text_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
    write_text_file(out_dir / "rows.csv", rows_csv);
}

template Tensor<uint8_t> predict_volume<float>(Model<float>&, const Tensor<float>&, int, int, int);
template Tensor<uint8_t> predict_volume<double>(Model<double>&, const Tensor<float>&, int, int, int);
template DatasetMetric evaluate_dataset<float>(Model<float>&, const Dataset&, EvalOptions);
template DatasetMetric evaluate_dataset<double>(Model<double>&, const Dataset&, EvalOptions);
template MetricReport evaluate_datasets<float>(Model<float>&, const std::vector<const Dataset*>&,
                                               EvalOptions);
template MetricReport evaluate_datasets<double>(Model<double>&, const std::vector<const Dataset*>&,
                                                EvalOptions);
template void export_priors<float>(Model<float>&, const std::vector<const Dataset*>&, int,
                                   const fs::path&, Rng);
template void export_priors<double>(Model<double>&, const std::vector<const Dataset*>&, int,
                                    const fs::path&, Rng);

}  // namespace pseg
