#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cortex::binio {

/// Append-only little-endian byte buffer.
class Writer {
  public:
    void bytes(std::span<const std::uint8_t> data);
    void magic(std::string_view tag);
    void u8(std::uint8_t v);
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void f32(float v);
    void str(std::string_view s);  // u32 length + bytes

    [[nodiscard]] const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

  private:
    std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader; every overrun throws FormatError naming `what`.
class Reader {
  public:
    Reader(std::span<const std::uint8_t> data, std::string what);

    void expect_magic(std::string_view tag);
    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    float f32();
    std::string str(std::size_t max_len = 1U << 16);
    std::span<const std::uint8_t> bytes(std::size_t n);

    [[nodiscard]] std::size_t remaining() const noexcept { return data_.size() - pos_; }
    [[nodiscard]] bool at_end() const noexcept { return pos_ == data_.size(); }
    [[noreturn]] void fail(const std::string& msg) const;

  private:
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
    std::string what_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace cortex::binio
