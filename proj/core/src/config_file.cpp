#include "pseg/config_file.hpp"

#include <sstream>

#include "pseg/error.hpp"
#include "pseg/io.hpp"

namespace pseg {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

ConfigFile ConfigFile::parse_file(const std::filesystem::path& path) {
    return parse_string(read_text_file(path), path.string());
}

ConfigFile ConfigFile::parse_string(const std::string& text, const std::string& origin) {
    ConfigFile cf;
    cf.origin_ = origin;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    Section* cur = nullptr;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
            const std::string name = trim(t.substr(1, t.size() - 2));
            if (name.empty()) throw ConfigError(origin + ": empty section name");
            for (const auto& s : cf.sections_)
                if (s.name == name)
                    throw ConfigError(origin + ": duplicate section [" + name + "]");
            cf.sections_.push_back({name, {}});
            cur = &cf.sections_.back();
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        if (!cur) throw ConfigError(origin + ": key outside any [section]");
        Entry e{trim(t.substr(0, eq)), trim(t.substr(eq + 1)), false};
        if (e.key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        for (const auto& other : cur->entries)
            if (other.key == e.key)
                throw ConfigError(origin + ": duplicate key '" + e.key + "' in [" + cur->name + "]");
        cur->entries.push_back(std::move(e));
    }
    return cf;
}

bool ConfigFile::has_section(const std::string& section) const {
    for (const auto& s : sections_)
        if (s.name == section) return true;
    return false;
}

std::vector<std::string> ConfigFile::section_names() const {
    std::vector<std::string> out;
    for (const auto& s : sections_) out.push_back(s.name);
    return out;
}

bool ConfigFile::has_key(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

const ConfigFile::Entry* ConfigFile::find(const std::string& section, const std::string& key) const {
    for (const auto& s : sections_)
        if (s.name == section)
            for (const auto& e : s.entries)
                if (e.key == key) return &e;
    return nullptr;
}

const ConfigFile::Entry& ConfigFile::require(const std::string& section, const std::string& key) {
    const Entry* e = find(section, key);
    if (!e) throw ConfigError(origin_ + ": missing key '" + key + "' in [" + section + "]");
    e->consumed = true;
    return *e;
}

std::string ConfigFile::get_str(const std::string& section, const std::string& key) {
    return require(section, key).value;
}

std::string ConfigFile::get_str_or(const std::string& section, const std::string& key,
                                   std::string dflt) {
    const Entry* e = find(section, key);
    if (!e) return dflt;
    e->consumed = true;
    return e->value;
}

namespace {

int64_t to_int(const std::string& v, const std::string& what) {
    try {
        size_t pos = 0;
        const int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("value '" + v + "' for " + what + " is not an integer");
    }
}

double to_double(const std::string& v, const std::string& what) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("value '" + v + "' for " + what + " is not a number");
    }
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

}  // namespace

int64_t ConfigFile::get_int(const std::string& section, const std::string& key) {
    return to_int(require(section, key).value, key);
}

int64_t ConfigFile::get_int_or(const std::string& section, const std::string& key, int64_t dflt) {
    const Entry* e = find(section, key);
    if (!e) return dflt;
    e->consumed = true;
    return to_int(e->value, key);
}

double ConfigFile::get_double(const std::string& section, const std::string& key) {
    return to_double(require(section, key).value, key);
}

double ConfigFile::get_double_or(const std::string& section, const std::string& key, double dflt) {
    const Entry* e = find(section, key);
    if (!e) return dflt;
    e->consumed = true;
    return to_double(e->value, key);
}

bool ConfigFile::get_bool_or(const std::string& section, const std::string& key, bool dflt) {
    const Entry* e = find(section, key);
    if (!e) return dflt;
    e->consumed = true;
    if (e->value == "true" || e->value == "1") return true;
    if (e->value == "false" || e->value == "0") return false;
    throw ConfigError("value '" + e->value + "' for " + key + " is not a boolean");
}

std::vector<double> ConfigFile::get_doubles(const std::string& section, const std::string& key) {
    std::vector<double> out;
    for (const auto& tok : split(require(section, key).value, ','))
        out.push_back(to_double(tok, key));
    return out;
}

std::vector<double> ConfigFile::get_doubles_or(const std::string& section, const std::string& key,
                                               std::vector<double> dflt) {
    if (!has_key(section, key)) return dflt;
    return get_doubles(section, key);
}

std::vector<int64_t> ConfigFile::get_ints(const std::string& section, const std::string& key) {
    std::vector<int64_t> out;
    for (const auto& tok : split(require(section, key).value, ','))
        out.push_back(to_int(tok, key));
    return out;
}

void ConfigFile::finish() const {
    std::string leftovers;
    for (const auto& s : sections_)
        for (const auto& e : s.entries)
            if (!e.consumed) leftovers += " [" + s.name + "]." + e.key;
    if (!leftovers.empty())
        throw ConfigError(origin_ + ": unknown configuration keys:" + leftovers);
}

std::string ConfigFile::canonical() const {
    std::ostringstream os;
    for (const auto& s : sections_) {
        os << "[" << s.name << "]\n";
        for (const auto& e : s.entries) os << e.key << "=" << e.value << "\n";
    }
    return os.str();
}

ModelConfig parse_model_section(ConfigFile& cf, const std::string& sec) {
    ModelConfig mc;
    if (cf.has_key(sec, "widths")) {
        const auto w = cf.get_ints(sec, "widths");
        if (w.size() != 6) throw ConfigError("[" + sec + "].widths needs 6 entries");
        for (size_t i = 0; i < 6; ++i) mc.stage_widths[i] = w[i];
    }
    if (cf.has_key(sec, "strides")) {
        const auto triples = cf.get_str(sec, "strides");
        std::istringstream is(triples);
        std::string tok;
        std::vector<std::array<int, 3>> parsed;
        while (std::getline(is, tok, ';')) {
            std::istringstream ts(tok);
            std::string n;
            std::array<int, 3> tri{};
            for (int a = 0; a < 3; ++a) {
                if (!std::getline(ts, n, ',')) throw ConfigError("strides: expected d,h,w triple");
                tri[static_cast<size_t>(a)] = static_cast<int>(to_int(trim(n), "strides"));
            }
            parsed.push_back(tri);
        }
        if (parsed.size() != 6) throw ConfigError("[" + sec + "].strides needs 6 'd,h,w' triples");
        for (size_t i = 0; i < 6; ++i) mc.stage_strides[i] = parsed[i];
    }
    mc.kernel = static_cast<int>(cf.get_int_or(sec, "kernel", mc.kernel));
    if (cf.has_key(sec, "patch_3d")) {
        const auto p = cf.get_ints(sec, "patch_3d");
        if (p.size() != 3) throw ConfigError("[" + sec + "].patch_3d needs D,H,W");
        mc.patch3d = {p[0], p[1], p[2]};
    }
    if (cf.has_key(sec, "patch_2d")) {
        const auto p = cf.get_ints(sec, "patch_2d");
        if (p.size() != 2) throw ConfigError("[" + sec + "].patch_2d needs H,W");
        mc.patch2d = {p[0], p[1]};
    }
    mc.prompt.modal_prompt_length = cf.get_int_or(sec, "prompt_length", mc.prompt.modal_prompt_length);
    mc.prompt.task_prompt_channels =
        cf.get_int_or(sec, "task_prompt_channels", mc.prompt.task_prompt_channels);
    mc.prompt.fuse_blocks = static_cast<int>(cf.get_int_or(sec, "fuse_blocks", mc.prompt.fuse_blocks));
    mc.prompt.fuse_reduction =
        static_cast<int>(cf.get_int_or(sec, "fuse_reduction", mc.prompt.fuse_reduction));
    mc.variant = variant_from_string(cf.get_str_or(sec, "variant", to_string(mc.variant)));
    mc.validate();
    return mc;
}

TrainConfig parse_train_section(ConfigFile& cf, const std::string& sec) {
    TrainConfig tc;
    tc.max_epochs = static_cast<int>(cf.get_int_or(sec, "max_epochs", tc.max_epochs));
    tc.iterations_per_dataset =
        static_cast<int>(cf.get_int_or(sec, "iterations_per_dataset", tc.iterations_per_dataset));
    tc.initial_lr = cf.get_double_or(sec, "initial_lr", tc.initial_lr);
    tc.lr_power = cf.get_double_or(sec, "lr_power", tc.lr_power);
    tc.momentum = cf.get_double_or(sec, "momentum", tc.momentum);
    tc.weight_decay = cf.get_double_or(sec, "weight_decay", tc.weight_decay);
    tc.clip_norm = cf.get_double_or(sec, "clip_norm", tc.clip_norm);
    tc.batch_3d = static_cast<int>(cf.get_int_or(sec, "batch_3d", tc.batch_3d));
    tc.batch_2d = static_cast<int>(cf.get_int_or(sec, "batch_2d", tc.batch_2d));
    tc.seed = static_cast<uint64_t>(cf.get_int_or(sec, "seed", static_cast<int64_t>(tc.seed)));
    tc.augment_flips = cf.get_bool_or(sec, "augment_flips", tc.augment_flips);
    tc.augment_jitter = cf.get_double_or(sec, "augment_jitter", tc.augment_jitter);
    if (tc.max_epochs < 1 || tc.iterations_per_dataset < 1 || tc.batch_2d < 1 || tc.batch_3d < 1)
        throw ConfigError("[" + sec + "]: epochs, iterations and batch sizes must be positive");
    return tc;
}

}  // namespace pseg
