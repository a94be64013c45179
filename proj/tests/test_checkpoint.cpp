#include "doctest.h"
#include "tcae/checkpoint.hpp"

#include <cstring>

using namespace tcae;

TEST_CASE("checkpoint bytes match the format spec exactly") {
    TensorMap m;
    m["ab"] = NamedTensor{{2}, {1.0f, -2.0f}};
    std::string blob = serialize_checkpoint(m);

    // magic, version=1, count=1
    CHECK(blob.substr(0, 4) == "TCAE");
    auto u32_at = [&](std::size_t off) {
        auto b = reinterpret_cast<const unsigned char*>(blob.data() + off);
        return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
               std::uint32_t(b[3]) << 24;
    };
    CHECK(u32_at(4) == 1);   // version
    CHECK(u32_at(8) == 1);   // tensor count
    CHECK(u32_at(12) == 2);  // name length
    CHECK(blob.substr(16, 2) == "ab");
    CHECK(u32_at(18) == 1);  // ndim
    CHECK(u32_at(22) == 2);  // dim 0
    float f0, f1;
    std::uint32_t b0 = u32_at(26), b1 = u32_at(30);
    std::memcpy(&f0, &b0, 4);
    std::memcpy(&f1, &b1, 4);
    CHECK(f0 == 1.0f);
    CHECK(f1 == -2.0f);
    CHECK(blob.size() == 34);
}

TEST_CASE("round-trip preserves payloads bitwise") {
    TensorMap m;
    m["x"] = NamedTensor{{2, 3}, {0.1f, -0.2f, 3e-8f, 1e20f, -0.0f, 42.0f}};
    m["y"] = NamedTensor{{1}, {7.0f}};
    auto back = parse_checkpoint(serialize_checkpoint(m));
    REQUIRE(back.size() == 2);
    CHECK(back["x"].dims == std::vector<std::uint32_t>{2, 3});
    for (int i = 0; i < 6; ++i) {
        std::uint32_t a, b;
        std::memcpy(&a, &m["x"].data[std::size_t(i)], 4);
        std::memcpy(&b, &back["x"].data[std::size_t(i)], 4);
        CHECK(a == b);
    }
}

TEST_CASE("unknown versions are rejected") {
    TensorMap m;
    m["x"] = NamedTensor{{1}, {1.0f}};
    std::string blob = serialize_checkpoint(m);
    blob[4] = 9;  // bump version byte
    CHECK_THROWS_AS(parse_checkpoint(blob), IoError);
}

TEST_CASE("bad magic and truncation are rejected") {
    CHECK_THROWS_AS(parse_checkpoint("nope"), IoError);
    TensorMap m;
    m["x"] = NamedTensor{{4}, {1, 2, 3, 4}};
    std::string blob = serialize_checkpoint(m);
    CHECK_THROWS_AS(parse_checkpoint(blob.substr(0, blob.size() - 3)), IoError);
}

TEST_CASE("registry save/load round-trips values through f32") {
    ParamRegistry<float> reg;
    RngStream rng = RngStream::from_seed(5);
    reg.add("a.w", Tensor::randn({3, 4}, rng));
    reg.add("a.b", Tensor::randn({4}, rng));
    auto blob = serialize_checkpoint(registry_to_tensors(reg));

    ParamRegistry<float> reg2;
    reg2.add("a.w", Tensor::zeros({3, 4}));
    reg2.add("a.b", Tensor::zeros({4}));
    load_registry(reg2, parse_checkpoint(blob));
    for (std::size_t i = 0; i < reg.all().size(); ++i) {
        const auto& a = reg.all()[i]->values();
        const auto& b = reg2.all()[i]->values();
        for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
    }
    CHECK(reg.content_hash() == reg2.content_hash());
}

TEST_CASE("missing tensors are an error on load") {
    ParamRegistry<float> reg;
    reg.add("present", Tensor::zeros({2}));
    auto tensors = registry_to_tensors(reg);
    ParamRegistry<float> reg2;
    reg2.add("absent", Tensor::zeros({2}));
    CHECK_THROWS_AS(load_registry(reg2, tensors), IoError);
}
