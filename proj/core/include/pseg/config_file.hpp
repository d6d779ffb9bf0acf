#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pseg/model_config.hpp"
#include "pseg/trainer.hpp"

namespace pseg {

// Flat key-value configuration with explicit [sections]. Keys must be
// consumed by a reader; finish() rejects anything left over, so unknown keys
// are hard errors. Section and key order is preserved (registration order is
// semantic) and canonical() is the hashing form.
class ConfigFile {
public:
    static ConfigFile parse_file(const std::filesystem::path& path);
    static ConfigFile parse_string(const std::string& text, const std::string& origin = "<string>");

    bool has_section(const std::string& section) const;
    std::vector<std::string> section_names() const;  // file order
    bool has_key(const std::string& section, const std::string& key) const;

    std::string get_str(const std::string& section, const std::string& key);
    std::string get_str_or(const std::string& section, const std::string& key, std::string dflt);
    int64_t get_int(const std::string& section, const std::string& key);
    int64_t get_int_or(const std::string& section, const std::string& key, int64_t dflt);
    double get_double(const std::string& section, const std::string& key);
    double get_double_or(const std::string& section, const std::string& key, double dflt);
    bool get_bool_or(const std::string& section, const std::string& key, bool dflt);
    std::vector<double> get_doubles(const std::string& section, const std::string& key);
    std::vector<double> get_doubles_or(const std::string& section, const std::string& key,
                                       std::vector<double> dflt);
    std::vector<int64_t> get_ints(const std::string& section, const std::string& key);

    // Throws listing every unconsumed key.
    void finish() const;

    std::string canonical() const;

private:
    struct Entry {
        std::string key, value;
        mutable bool consumed = false;
    };
    struct Section {
        std::string name;
        std::vector<Entry> entries;
    };
    std::vector<Section> sections_;
    std::string origin_;

    const Entry* find(const std::string& section, const std::string& key) const;
    const Entry& require(const std::string& section, const std::string& key);
};

// Shared section readers ([model], [train]).
ModelConfig parse_model_section(ConfigFile& cf, const std::string& section = "model");
TrainConfig parse_train_section(ConfigFile& cf, const std::string& section = "train");

}  // namespace pseg
