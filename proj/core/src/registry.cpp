#include "pseg/registry.hpp"

#include <fstream>
#include <sstream>

namespace pseg {

std::string to_string(Dimensionality d) { return d == Dimensionality::k2d ? "2d" : "3d"; }

Dimensionality dimensionality_from_string(const std::string& s) {
    if (s == "2d" || s == "2D") return Dimensionality::k2d;
    if (s == "3d" || s == "3D") return Dimensionality::k3d;
    throw ConfigError("unknown dimensionality '" + s + "' (expected 2d or 3d)");
}

namespace {

void check_name(const std::string& name) {
    if (name.empty()) throw ConfigError("registry: empty name");
    for (char c : name)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'))
            throw ConfigError("registry: name '" + name + "' contains invalid character");
}

}  // namespace

void Registry::check_mutable() const {
    if (frozen_) throw ConfigError("registry is frozen");
}

int Registry::register_modality(ModalityDescriptor m) {
    check_mutable();
    check_name(m.name);
    if (m.channel_count < 1 || m.channel_count > 4)
        throw ConfigError("modality '" + m.name + "': channel_count must be in [1,4], got " +
                          std::to_string(m.channel_count));
    const int next = static_cast<int>(modalities_.size());
    if (m.modal_id >= 0 && m.modal_id < next)
        throw ConfigError("duplicate modal_id " + std::to_string(m.modal_id));
    if (m.modal_id > next)
        throw ConfigError("non-dense modal_id " + std::to_string(m.modal_id) + ", expected " +
                          std::to_string(next));
    m.modal_id = next;
    modalities_.push_back(std::move(m));
    return next;
}

int Registry::register_task(TaskDescriptor t) {
    check_mutable();
    check_name(t.name);
    if (t.class_count < 2)
        throw ConfigError("task '" + t.name + "': class_count must be >= 2 (including background)");
    const int next = static_cast<int>(tasks_.size());
    if (t.task_id >= 0 && t.task_id < next)
        throw ConfigError("duplicate task_id " + std::to_string(t.task_id));
    if (t.task_id > next)
        throw ConfigError("non-dense task_id " + std::to_string(t.task_id) + ", expected " +
                          std::to_string(next));
    if (t.modal_id < 0 || t.modal_id >= modality_count())
        throw LookupError("task '" + t.name + "' references unknown modal_id " +
                          std::to_string(t.modal_id));
    t.task_id = next;
    max_class_count_ = std::max(max_class_count_, t.class_count);
    tasks_.push_back(std::move(t));
    return next;
}

const ModalityDescriptor& Registry::modality(int modal_id) const {
    if (modal_id < 0 || modal_id >= modality_count())
        throw LookupError("unknown modal_id " + std::to_string(modal_id));
    return modalities_[static_cast<size_t>(modal_id)];
}

const TaskDescriptor& Registry::task(int task_id) const {
    if (task_id < 0 || task_id >= task_count())
        throw LookupError("unknown task_id " + std::to_string(task_id));
    return tasks_[static_cast<size_t>(task_id)];
}

std::pair<const TaskDescriptor&, const ModalityDescriptor&> Registry::resolve(int task_id) const {
    const TaskDescriptor& t = task(task_id);
    return {t, modality(t.modal_id)};
}

std::string Registry::serialize() const {
    std::ostringstream os;
    os << "# promptseg registry v1\n";
    for (const auto& m : modalities_)
        os << "modality id=" << m.modal_id << " name=" << m.name << " channels=" << m.channel_count
           << " dim=" << to_string(m.dimensionality) << "\n";
    for (const auto& t : tasks_)
        os << "task id=" << t.task_id << " name=" << t.name << " classes=" << t.class_count
           << " modality=" << t.modal_id << "\n";
    return os.str();
}

Registry Registry::deserialize(const std::string& text) {
    Registry r;
    std::istringstream is(text);
    std::string line;
    auto field = [](const std::string& tok, const std::string& key) {
        if (tok.rfind(key + "=", 0) != 0)
            throw ConfigError("registry parse: expected '" + key + "=', got '" + tok + "'");
        return tok.substr(key.size() + 1);
    };
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        std::vector<std::string> toks;
        std::string tok;
        while (ls >> tok) toks.push_back(tok);
        if (kind == "modality") {
            if (toks.size() != 4) throw ConfigError("registry parse: malformed modality line");
            ModalityDescriptor m;
            m.modal_id = std::stoi(field(toks[0], "id"));
            m.name = field(toks[1], "name");
            m.channel_count = std::stoi(field(toks[2], "channels"));
            m.dimensionality = dimensionality_from_string(field(toks[3], "dim"));
            r.register_modality(std::move(m));
        } else if (kind == "task") {
            if (toks.size() != 4) throw ConfigError("registry parse: malformed task line");
            TaskDescriptor t;
            t.task_id = std::stoi(field(toks[0], "id"));
            t.name = field(toks[1], "name");
            t.class_count = std::stoi(field(toks[2], "classes"));
            t.modal_id = std::stoi(field(toks[3], "modality"));
            r.register_task(std::move(t));
        } else {
            throw ConfigError("registry parse: unknown record '" + kind + "'");
        }
    }
    return r;
}

void Registry::save(const std::filesystem::path& file) const {
    std::ofstream os(file, std::ios::binary);
    if (!os) throw IoError("cannot write registry file " + file.string());
    os << serialize();
}

Registry Registry::load(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IoError("cannot read registry file " + file.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    Registry r = deserialize(ss.str());
    r.freeze();
    return r;
}

}  // namespace pseg
