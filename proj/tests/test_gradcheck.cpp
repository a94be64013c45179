#include "doctest.h"
#include "tcae/gradcheck.hpp"

using namespace tcae;

// Spec example: gradient of sum(gelu(x)) on a random 4x4 input matches
// central finite differences (eps=1e-4, 64-bit) within rel err 1e-5.
TEST_CASE("gelu gradient matches finite differences on 4x4") {
    GradCheckCase c{"gelu_4x4", {{4, 4}}, [](const std::vector<Tensor64>& in) {
                        return sum_all(gelu(in[0]));
                    }};
    auto res = run_gradcheck(c, RngStream::from_seed(99));
    CHECK(res.pass);
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("softmax gradient matches finite differences on 3x5") {
    GradCheckCase c{"softmax_3x5", {{3, 5}}, [](const std::vector<Tensor64>& in) {
                        return sum_all(square(softmax(in[0], -1)));
                    }};
    auto res = run_gradcheck(c, RngStream::from_seed(100));
    CHECK(res.pass);
}

TEST_CASE("every core op passes the finite-difference suite") {
    auto rng = RngStream::from_seed(1234);
    for (const auto& c : core_op_cases()) {
        auto res = run_gradcheck(c, rng.split(c.name));
        INFO(c.name, " max_rel_err=", res.max_rel_err);
        CHECK(res.pass);
    }
}
