#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "logitlens/rng.hpp"
#include "logitlens/safetensors.hpp"
#include "testutil.hpp"

using namespace logitlens;

namespace {

std::string temp_file(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

void write_raw(const std::string& path, const std::string& header,
               const std::vector<std::uint16_t>& payload) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    const std::uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) {
        out.put(static_cast<char>((len >> (8 * i)) & 0xff));
    }
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * 2));
}

}  // namespace

TEST_CASE("safetensors write/read round trip") {
    Rng rng(11);
    NamedTensorMap tensors;
    for (int t = 0; t < 5; ++t) {
        NamedTensor nt;
        const auto rows = static_cast<std::int64_t>(1 + uniform_below(rng, 6));
        const auto cols = static_cast<std::int64_t>(1 + uniform_below(rng, 9));
        nt.shape = {rows, cols};
        for (std::int64_t i = 0; i < rows * cols; ++i) {
            nt.data.push_back(static_cast<float>(normal01(rng)));
        }
        tensors["tensor_" + std::to_string(t)] = std::move(nt);
    }
    const std::string path = temp_file("st_roundtrip.safetensors");
    write_safetensors(path, tensors);
    const NamedTensorMap back = read_safetensors(path);
    REQUIRE(back.size() == tensors.size());
    for (const auto& [name, nt] : tensors) {
        const auto it = back.find(name);
        REQUIRE(it != back.end());
        CHECK(it->second.shape == nt.shape);
        CHECK(it->second.data == nt.data);
    }
}

TEST_CASE("safetensors writes are byte-stable") {
    NamedTensorMap tensors;
    tensors["b"] = NamedTensor{{2}, {1.5f, -2.25f}};
    tensors["a"] = NamedTensor{{1, 3}, {0.0f, 1.0f, 2.0f}};
    const std::string p1 = temp_file("st_det1.safetensors");
    const std::string p2 = temp_file("st_det2.safetensors");
    write_safetensors(p1, tensors);
    write_safetensors(p2, tensors);
    CHECK(testutil::read_file(p1) == testutil::read_file(p2));
}

TEST_CASE("half and bfloat16 payloads widen correctly") {
    const std::string path = temp_file("st_half.safetensors");
    SECTION("F16") {
        std::string header =
            R"({"t":{"dtype":"F16","shape":[4],"data_offsets":[0,8]}})";
        while (header.size() % 8 != 0) header.push_back(' ');
        write_raw(path, header, {0x3C00, 0xC000, 0x0001, 0x3555});
        const NamedTensorMap m = read_safetensors(path);
        const auto& d = m.at("t").data;
        CHECK(d[0] == 1.0f);
        CHECK(d[1] == -2.0f);
        CHECK(d[2] == Catch::Approx(5.9604644775390625e-08).epsilon(0));
        CHECK(d[3] == Catch::Approx(0.333251953125).epsilon(0));
    }
    SECTION("BF16") {
        std::string header =
            R"({"t":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}})";
        while (header.size() % 8 != 0) header.push_back(' ');
        write_raw(path, header, {0x3F80, 0xC040});
        const NamedTensorMap m = read_safetensors(path);
        CHECK(m.at("t").data[0] == 1.0f);
        CHECK(m.at("t").data[1] == -3.0f);
    }
}

TEST_CASE("safetensors load failures") {
    CHECK_THROWS_AS(read_safetensors("/nonexistent/file.safetensors"), LoadError);

    SECTION("header length exceeding the file") {
        const std::string path = temp_file("st_badlen.safetensors");
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        const char bytes[8] = {~0, ~0, 0, 0, 0, 0, 0, 0};
        out.write(bytes, 8);
        out.close();
        CHECK_THROWS_AS(read_safetensors(path), LoadError);
    }
    SECTION("shape disagreeing with the byte count") {
        const std::string path = temp_file("st_badshape.safetensors");
        std::string header =
            R"({"t":{"dtype":"F16","shape":[3],"data_offsets":[0,8]}})";
        while (header.size() % 8 != 0) header.push_back(' ');
        write_raw(path, header, {0, 0, 0, 0});
        CHECK_THROWS_AS(read_safetensors(path), ShapeMismatchError);
    }
    SECTION("offsets past the data section") {
        const std::string path = temp_file("st_badoff.safetensors");
        std::string header =
            R"({"t":{"dtype":"F16","shape":[4],"data_offsets":[0,999]}})";
        while (header.size() % 8 != 0) header.push_back(' ');
        write_raw(path, header, {0, 0, 0, 0});
        CHECK_THROWS_AS(read_safetensors(path), LoadError);
    }
    SECTION("unsupported dtype") {
        const std::string path = temp_file("st_baddtype.safetensors");
        std::string header =
            R"({"t":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})";
        while (header.size() % 8 != 0) header.push_back(' ');
        write_raw(path, header, {0, 0, 0, 0});
        CHECK_THROWS_AS(read_safetensors(path), LoadError);
    }
}
