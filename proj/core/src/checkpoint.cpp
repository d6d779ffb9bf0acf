#include "pseg/checkpoint.hpp"

#include "pseg/io.hpp"
#include "pseg/manifest.hpp"

namespace pseg {

using json = nlohmann::json;
namespace fs = std::filesystem;

json model_config_to_json(const ModelConfig& c) {
    json strides = json::array();
    for (const auto& s : c.stage_strides) strides.push_back({s[0], s[1], s[2]});
    return json{{"stage_widths", c.stage_widths},
                {"stage_strides", strides},
                {"kernel", c.kernel},
                {"patch3d", c.patch3d},
                {"patch2d", c.patch2d},
                {"variant", to_string(c.variant)},
                {"prompt",
                 {{"modal_prompt_length", c.prompt.modal_prompt_length},
                  {"task_prompt_channels", c.prompt.task_prompt_channels},
                  {"fuse_blocks", c.prompt.fuse_blocks},
                  {"fuse_reduction", c.prompt.fuse_reduction}}}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    for (size_t i = 0; i < 6; ++i) c.stage_widths[i] = j.at("stage_widths")[i].get<int64_t>();
    for (size_t i = 0; i < 6; ++i)
        for (size_t a = 0; a < 3; ++a) c.stage_strides[i][a] = j.at("stage_strides")[i][a].get<int>();
    c.kernel = j.at("kernel").get<int>();
    for (size_t i = 0; i < 3; ++i) c.patch3d[i] = j.at("patch3d")[i].get<int64_t>();
    for (size_t i = 0; i < 2; ++i) c.patch2d[i] = j.at("patch2d")[i].get<int64_t>();
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    const auto& p = j.at("prompt");
    c.prompt.modal_prompt_length = p.at("modal_prompt_length").get<int64_t>();
    c.prompt.task_prompt_channels = p.at("task_prompt_channels").get<int64_t>();
    c.prompt.fuse_blocks = p.at("fuse_blocks").get<int>();
    c.prompt.fuse_reduction = p.at("fuse_reduction").get<int>();
    return c;
}

namespace {

template <typename T>
void write_array(const fs::path& file, const Tensor<T>& t) {
    if constexpr (std::is_same_v<T, float>) {
        write_raw_f32(file, t.data(), t.size());
    } else {
        Tensor<float> f = t.template cast<float>();
        write_raw_f32(file, f.data(), f.size());
    }
}

template <typename T>
Tensor<T> read_array(const fs::path& file, Shape shape) {
    Tensor<float> f = read_raw_f32(file, std::move(shape));
    if constexpr (std::is_same_v<T, float>) return f;
    else return f.template cast<T>();
}

Shape shape_from_json(const json& a) {
    Shape s;
    for (const auto& d : a) s.push_back(d.get<int64_t>());
    return s;
}

template <typename T>
void dump_params(const fs::path& dir, const std::map<std::string, Var<T>>& params, json& out) {
    fs::create_directories(dir);
    for (const auto& [name, v] : params) {
        out[name] = v->value.shape();
        write_array(dir / (name + ".f32"), v->value);
    }
}

template <typename T>
void dump_state(const fs::path& dir, const std::map<std::string, Tensor<T>>& state, json& out) {
    if (state.empty()) return;
    fs::create_directories(dir);
    for (const auto& [name, t] : state) {
        out[name] = t.shape();
        write_array(dir / (name + ".f32"), t);
    }
}

}  // namespace

template <typename T>
void save_checkpoint(const fs::path& dir, const Model<T>& model, const Sgd<T>* opt, int epoch,
                     const json& extra, const std::string& loss_history) {
    fs::create_directories(dir);
    json params = json::object(), optstate = json::object();
    dump_params(dir / "params", model.params(), params);
    if (opt) dump_state(dir / "opt", opt->state(), optstate);
    model.registry().save(dir / "registry.txt");
    if (!loss_history.empty()) write_text_file(dir / "loss_history.csv", loss_history);

    json j{{"format_version", 1},
           {"kind", "full"},
           {"epoch", epoch},
           {"model_config", model_config_to_json(model.config())},
           {"params", params},
           {"optimizer", optstate},
           {"extra", extra},
           {"has_loss_history", !loss_history.empty()}};
    write_text_file(dir / "manifest.json", j.dump(2) + "\n");
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json"))
        throw IoError("checkpoint manifest not found: " + (dir / "manifest.json").string());
    const json j = json::parse(read_text_file(dir / "manifest.json"));
    if (j.at("kind").get<std::string>() != "full")
        throw IoError("checkpoint at " + dir.string() + " is not a full checkpoint");
    LoadedCheckpoint<T> out;
    out.config = model_config_from_json(j.at("model_config"));
    out.registry = Registry::load(dir / "registry.txt");
    out.epoch = j.at("epoch").get<int>();
    out.extra = j.at("extra");
    out.model = std::make_unique<Model<T>>(out.config, out.registry, Rng(0));
    for (const auto& [name, shape] : j.at("params").items()) {
        Var<T> p = out.model->param(name);
        Tensor<T> t = read_array<T>(dir / "params" / (name + ".f32"), shape_from_json(shape));
        if (!shape_eq(t.shape(), p->value.shape()))
            throw IoError("checkpoint param " + name + " has shape " + shape_str(t.shape()) +
                          ", model expects " + shape_str(p->value.shape()));
        p->value = std::move(t);
    }
    for (const auto& [name, shape] : j.at("optimizer").items())
        out.opt_state[name] = read_array<T>(dir / "opt" / (name + ".f32"), shape_from_json(shape));
    if (j.at("has_loss_history").get<bool>())
        out.loss_history = read_text_file(dir / "loss_history.csv");
    return out;
}

template <typename T>
void save_extension_checkpoint(const fs::path& dir, const LoraExtension<T>& ext,
                               const fs::path& base_dir, const Sgd<T>* opt, int epoch,
                               const json& extra, const std::string& loss_history) {
    fs::create_directories(dir);
    json params = json::object(), optstate = json::object();
    dump_params(dir / "params", ext.params(), params);
    if (opt) dump_state(dir / "opt", opt->state(), optstate);
    if (!loss_history.empty()) write_text_file(dir / "loss_history.csv", loss_history);

    json j{{"format_version", 1},
           {"kind", "extension"},
           {"epoch", epoch},
           {"base_checkpoint", base_dir.string()},
           {"base_manifest_sha256", sha256_file(base_dir / "manifest.json")},
           {"lora", {{"rank", ext.config().rank}, {"alpha", ext.config().alpha}}},
           {"tasks", std::vector<int>(ext.active_tasks().begin(), ext.active_tasks().end())},
           {"params", params},
           {"optimizer", optstate},
           {"extra", extra},
           {"has_loss_history", !loss_history.empty()}};
    write_text_file(dir / "manifest.json", j.dump(2) + "\n");
}

template <typename T>
LoadedExtension<T> load_extension_checkpoint(const fs::path& dir) {
    const json j = json::parse(read_text_file(dir / "manifest.json"));
    if (j.at("kind").get<std::string>() != "extension")
        throw IoError("checkpoint at " + dir.string() + " is not an extension checkpoint");
    LoadedExtension<T> out;
    fs::path base_dir = j.at("base_checkpoint").get<std::string>();
    if (base_dir.is_relative() && !fs::exists(base_dir / "manifest.json"))
        base_dir = dir / base_dir;
    if (!fs::exists(base_dir / "manifest.json"))
        throw IoError("extension base checkpoint not found: " + base_dir.string());
    const std::string want = j.at("base_manifest_sha256").get<std::string>();
    const std::string got = sha256_file(base_dir / "manifest.json");
    if (want != got)
        throw IoError("extension base checkpoint at " + base_dir.string() +
                      " does not match the recorded hash");
    out.base = load_checkpoint<T>(base_dir);
    LoraConfig cfg;
    cfg.rank = j.at("lora").at("rank").get<int>();
    cfg.alpha = j.at("lora").at("alpha").get<double>();
    out.extension = std::make_unique<LoraExtension<T>>(*out.base.model, cfg,
                                                       j.at("tasks").get<std::vector<int>>(), Rng(0));
    for (const auto& [name, shape] : j.at("params").items()) {
        auto it = out.extension->params().find(name);
        if (it == out.extension->params().end())
            throw IoError("extension checkpoint param " + name + " not present in rebuilt extension");
        Tensor<T> t = read_array<T>(dir / "params" / (name + ".f32"), shape_from_json(shape));
        if (!shape_eq(t.shape(), it->second->value.shape()))
            throw IoError("extension param " + name + " shape mismatch");
        it->second->value = std::move(t);
    }
    for (const auto& [name, shape] : j.at("optimizer").items())
        out.opt_state[name] = read_array<T>(dir / "opt" / (name + ".f32"), shape_from_json(shape));
    out.epoch = j.at("epoch").get<int>();
    out.extra = j.at("extra");
    if (j.at("has_loss_history").get<bool>())
        out.loss_history = read_text_file(dir / "loss_history.csv");
    return out;
}

template void save_checkpoint<float>(const fs::path&, const Model<float>&, const Sgd<float>*, int,
                                     const json&, const std::string&);
template void save_checkpoint<double>(const fs::path&, const Model<double>&, const Sgd<double>*, int,
                                      const json&, const std::string&);
template LoadedCheckpoint<float> load_checkpoint<float>(const fs::path&);
template LoadedCheckpoint<double> load_checkpoint<double>(const fs::path&);
template void save_extension_checkpoint<float>(const fs::path&, const LoraExtension<float>&,
                                               const fs::path&, const Sgd<float>*, int, const json&,
                                               const std::string&);
template void save_extension_checkpoint<double>(const fs::path&, const LoraExtension<double>&,
                                                const fs::path&, const Sgd<double>*, int,
                                                const json&, const std::string&);
template LoadedExtension<float> load_extension_checkpoint<float>(const fs::path&);
template LoadedExtension<double> load_extension_checkpoint<double>(const fs::path&);

}  // namespace pseg
