#include "pseg/io.hpp"

#include <fstream>

#include "pseg/error.hpp"

namespace pseg {

namespace {

void write_bytes(const std::filesystem::path& file, const void* data, size_t n) {
    std::ofstream os(file, std::ios::binary);
    if (!os) throw IoError("cannot open " + file.string() + " for writing");
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!os) throw IoError("short write to " + file.string());
}

void read_exact(const std::filesystem::path& file, void* data, size_t n) {
    std::ifstream is(file, std::ios::binary | std::ios::ate);
    if (!is) throw IoError("cannot open " + file.string() + " for reading");
    const auto sz = static_cast<size_t>(is.tellg());
    if (sz != n)
        throw IoError("file " + file.string() + " has " + std::to_string(sz) +
                      " bytes, expected " + std::to_string(n));
    is.seekg(0);
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!is) throw IoError("short read from " + file.string());
}

}  // namespace

void write_raw_f32(const std::filesystem::path& file, const float* data, int64_t n) {
    write_bytes(file, data, static_cast<size_t>(n) * sizeof(float));
}

void write_raw_u8(const std::filesystem::path& file, const uint8_t* data, int64_t n) {
    write_bytes(file, data, static_cast<size_t>(n));
}

Tensor<float> read_raw_f32(const std::filesystem::path& file, Shape shape) {
    Tensor<float> t(std::move(shape));
    read_exact(file, t.data(), static_cast<size_t>(t.size()) * sizeof(float));
    return t;
}

Tensor<uint8_t> read_raw_u8(const std::filesystem::path& file, Shape shape) {
    Tensor<uint8_t> t(std::move(shape));
    read_exact(file, t.data(), static_cast<size_t>(t.size()));
    return t;
}

std::string read_text_file(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IoError("cannot read " + file.string());
    std::string out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return out;
}

void write_text_file(const std::filesystem::path& file, const std::string& text) {
    write_bytes(file, text.data(), text.size());
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IoError("cannot read " + file.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

bool files_byte_equal(const std::filesystem::path& a, const std::filesystem::path& b) {
    return read_bytes(a) == read_bytes(b);
}

}  // namespace pseg
