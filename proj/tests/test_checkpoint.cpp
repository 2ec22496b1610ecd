#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "mmvq/checkpoint.hpp"

using namespace mmvq;
using namespace mmvq::io;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("mmvq_ck_" + name);
    std::filesystem::remove(p);
    return p;
}

}  // namespace

TEST_CASE("container round trip preserves entries and order") {
    Container c;
    c.put_f32("weights/a", {2, 3}, {1, 2, 3, 4, 5, 6});
    c.put_string("__config__", "{\"k\":1}");
    c.put_f32("weights/b", {4}, {-1.5f, 0.25f, 1e-7f, 3e8f});
    const auto path = temp_file("roundtrip.mmvq");
    c.save(path);

    auto back = Container::load(path);
    CHECK(back.size() == 3);
    CHECK(back.names() == std::vector<std::string>{"weights/a", "__config__", "weights/b"});
    CHECK(back.get("weights/a").dims == std::vector<uint32_t>{2, 3});
    CHECK(back.get("weights/a").f32 == std::vector<float>{1, 2, 3, 4, 5, 6});
    CHECK(back.get("weights/b").f32 == std::vector<float>{-1.5f, 0.25f, 1e-7f, 3e8f});
    CHECK(back.get_string("__config__") == "{\"k\":1}");
    CHECK(back.has("weights/a"));
    CHECK(!back.has("missing"));
    CHECK_THROWS_AS(back.get("missing"), ValidationError);
    std::filesystem::remove(path);
}

TEST_CASE("container byte layout starts with magic and little-endian version") {
    Container c;
    c.put_f32("x", {1}, {1.0f});
    const auto path = temp_file("layout.mmvq");
    c.save(path);
    std::ifstream is(path, std::ios::binary);
    std::vector<unsigned char> head(12);
    is.read(reinterpret_cast<char*>(head.data()), 12);
    CHECK(std::memcmp(head.data(), "MMVQ", 4) == 0);
    // version 1 LE
    CHECK(head[4] == 1);
    CHECK(head[5] == 0);
    CHECK(head[6] == 0);
    CHECK(head[7] == 0);
    // entry count 1 LE
    CHECK(head[8] == 1);
    CHECK(head[9] == 0);
    std::filesystem::remove(path);
}

TEST_CASE("container rejects bad magic and truncation") {
    const auto path = temp_file("bad.mmvq");
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOPE";
    }
    CHECK_THROWS_AS(Container::load(path), ValidationError);

    Container c;
    c.put_f32("x", {4}, {1, 2, 3, 4});
    c.save(path);
    // truncate mid-payload
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 6);
    CHECK_THROWS_AS(Container::load(path), ValidationError);
    std::filesystem::remove(path);
}

TEST_CASE("put replaces an existing entry in place") {
    Container c;
    c.put_f32("x", {1}, {1.0f});
    c.put_f32("y", {1}, {2.0f});
    c.put_f32("x", {2}, {3.0f, 4.0f});
    CHECK(c.size() == 2);
    CHECK(c.names() == std::vector<std::string>{"x", "y"});
    CHECK(c.get("x").f32 == std::vector<float>{3.0f, 4.0f});
}
