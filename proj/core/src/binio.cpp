#include "cortex/binio.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cortex/error.hpp"

namespace cortex::binio {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

void Writer::bytes(std::span<const std::uint8_t> data) {
    buf_.insert(buf_.end(), data.begin(), data.end());
}

void Writer::magic(std::string_view tag) {
    for (char c : tag) buf_.push_back(static_cast<std::uint8_t>(c));
}

void Writer::u8(std::uint8_t v) { buf_.push_back(v); }

void Writer::u16(std::uint16_t v) {
    buf_.push_back(static_cast<std::uint8_t>(v & 0xff));
    buf_.push_back(static_cast<std::uint8_t>(v >> 8));
}

void Writer::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void Writer::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void Writer::str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    magic(s);
}

Reader::Reader(std::span<const std::uint8_t> data, std::string what)
    : data_(data), what_(std::move(what)) {}

void Reader::fail(const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " (offset " + std::to_string(pos_) + ")");
}

std::span<const std::uint8_t> Reader::bytes(std::size_t n) {
    if (n > remaining()) fail("truncated, needed " + std::to_string(n) + " more bytes");
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
}

void Reader::expect_magic(std::string_view tag) {
    auto got = bytes(tag.size());
    if (std::memcmp(got.data(), tag.data(), tag.size()) != 0) {
        fail("bad magic, expected \"" + std::string(tag) + "\"");
    }
}

std::uint8_t Reader::u8() { return bytes(1)[0]; }

std::uint16_t Reader::u16() {
    auto b = bytes(2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t Reader::u32() {
    auto b = bytes(4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

float Reader::f32() { return std::bit_cast<float>(u32()); }

std::string Reader::str(std::size_t max_len) {
    std::uint32_t n = u32();
    if (n > max_len) fail("string length " + std::to_string(n) + " exceeds limit");
    auto b = bytes(n);
    return {reinterpret_cast<const char*>(b.data()), b.size()};
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> data(size);
    if (size > 0 && !in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size))) {
        throw IoError("read failed: " + path.string());
    }
    return data;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace cortex::binio
