#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace pseg {

std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::filesystem::path& file);

// One manifest per artifact-producing command. wall_clock_seconds is the only
// field allowed to differ between identical reruns.
struct RunManifest {
    std::string command;
    std::string config_path;
    uint64_t seed = 0;
    std::string inputs_hash;  // sha256 over the canonicalized config + input refs
    std::vector<std::string> outputs;
    double wall_clock_seconds = 0;
};

void write_run_manifest(const std::filesystem::path& dir, const RunManifest& m);
RunManifest read_run_manifest(const std::filesystem::path& dir);

}  // namespace pseg
