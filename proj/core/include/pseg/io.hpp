#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg {

// Raw array files are little-endian, no header; shapes live in manifests.
void write_raw_f32(const std::filesystem::path& file, const float* data, int64_t n);
void write_raw_u8(const std::filesystem::path& file, const uint8_t* data, int64_t n);
Tensor<float> read_raw_f32(const std::filesystem::path& file, Shape shape);
Tensor<uint8_t> read_raw_u8(const std::filesystem::path& file, Shape shape);

std::string read_text_file(const std::filesystem::path& file);
void write_text_file(const std::filesystem::path& file, const std::string& text);

std::vector<unsigned char> read_bytes(const std::filesystem::path& file);
bool files_byte_equal(const std::filesystem::path& a, const std::filesystem::path& b);

}  // namespace pseg
