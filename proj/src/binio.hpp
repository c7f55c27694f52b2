#pragma once

// Little-endian binary file helpers for the container formats. The build
// targets little-endian hosts only; the static_assert keeps that honest.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "facet/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "container formats are little-endian; big-endian hosts are unsupported");

namespace facet {

struct BinWriter {
    explicit BinWriter(const std::string& path) : path_(path) {
        f_ = std::fopen(path.c_str(), "wb");
        if (!f_) throw IoError("cannot open " + path + " for writing");
    }
    ~BinWriter() {
        if (f_) std::fclose(f_);
    }
    BinWriter(const BinWriter&) = delete;
    BinWriter& operator=(const BinWriter&) = delete;

    void bytes(const void* p, std::size_t n) {
        if (std::fwrite(p, 1, n, f_) != n) throw IoError("write failed for " + path_);
    }
    void magic(const char m[4]) { bytes(m, 4); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f64(double v) { bytes(&v, 8); }
    void f64s(const std::vector<double>& v) { bytes(v.data(), v.size() * 8); }
    void u32s(const std::vector<std::uint32_t>& v) { bytes(v.data(), v.size() * 4); }

private:
    std::string path_;
    std::FILE* f_ = nullptr;
};

struct BinReader {
    explicit BinReader(const std::string& path) : path_(path) {
        f_ = std::fopen(path.c_str(), "rb");
        if (!f_) throw IoError("cannot open " + path);
    }
    ~BinReader() {
        if (f_) std::fclose(f_);
    }
    BinReader(const BinReader&) = delete;
    BinReader& operator=(const BinReader&) = delete;

    void bytes(void* p, std::size_t n) {
        if (std::fread(p, 1, n, f_) != n)
            throw IoError("truncated or unreadable file " + path_);
    }
    void expect_magic(const char m[4]) {
        char got[4];
        bytes(got, 4);
        if (std::memcmp(got, m, 4) != 0)
            throw IoError(path_ + ": bad magic, not a " + std::string(m, 4) + " file");
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, 8);
        return v;
    }
    std::vector<double> f64s(std::size_t n) {
        std::vector<double> v(n);
        bytes(v.data(), n * 8);
        return v;
    }
    std::vector<std::uint32_t> u32s(std::size_t n) {
        std::vector<std::uint32_t> v(n);
        bytes(v.data(), n * 4);
        return v;
    }

private:
    std::string path_;
    std::FILE* f_ = nullptr;
};

} // namespace facet
