#include <doctest.h>

#include "cortex/binio.hpp"
#include "cortex/error.hpp"
#include "support.hpp"

using namespace cortex;

TEST_SUITE("binio") {

TEST_CASE("writer and reader agree on little-endian layout") {
    binio::Writer w;
    w.magic("ABCD");
    w.u16(0x0102);
    w.u32(0x03040506);
    w.f32(1.5f);
    w.str("hi");
    const auto& buf = w.buffer();
    CHECK(buf[4] == 0x02);
    CHECK(buf[5] == 0x01);
    CHECK(buf[6] == 0x06);

    binio::Reader r(buf, "test");
    r.expect_magic("ABCD");
    CHECK(r.u16() == 0x0102);
    CHECK(r.u32() == 0x03040506);
    CHECK(r.f32() == 1.5f);
    CHECK(r.str(16) == "hi");
    CHECK(r.at_end());
    CHECK_THROWS_AS(r.u32(), FormatError);
}

TEST_CASE("bad magic is a format error") {
    std::vector<std::uint8_t> bytes{'X', 'Y', 'Z', 'W'};
    binio::Reader r(bytes, "test");
    CHECK_THROWS_AS(r.expect_magic("ABCD"), FormatError);
}

TEST_CASE("atomic writes replace the file") {
    auto dir = testing::scratch("binio");
    binio::write_file_atomic(dir / "f.bin", std::vector<std::uint8_t>{1, 2, 3});
    binio::write_file_atomic(dir / "f.bin", std::vector<std::uint8_t>{4});
    CHECK(binio::read_file(dir / "f.bin") == std::vector<std::uint8_t>{4});
    binio::write_text_atomic(dir / "t.txt", "abc\n");
    CHECK(binio::read_file(dir / "t.txt").size() == 4);
    CHECK_THROWS_AS(binio::read_file(dir / "missing"), IoError);
}

}
