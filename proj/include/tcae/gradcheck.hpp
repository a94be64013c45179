#pragma once

// Central finite-difference gradient checks. Always runs in 64-bit: at
// 32-bit the FD quotient is too noisy to certify anything.

#include <functional>
#include <string>
#include <vector>

#include "tcae/tensor.hpp"

namespace tcae {

struct GradCheckCase {
    std::string name;
    std::vector<Shape> input_shapes;
    std::function<Tensor64(const std::vector<Tensor64>&)> fn;  // -> scalar
    int variants = 3;
    double tol = 1e-5;
    // inputs are drawn away from zero when the op has a kink there
    double lo = -1.0, hi = 1.0, min_abs = 0.0;
};

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = true;
};

namespace detail {
inline double rel_err(double a, double b) {
    double denom = std::max({std::abs(a), std::abs(b), 1e-3});
    return std::abs(a - b) / denom;
}
}  // namespace detail

inline GradCheckResult run_gradcheck(const GradCheckCase& c, RngStream rng, double eps = 1e-4) {
    GradCheckResult res;
    res.name = c.name;
    for (int variant = 0; variant < c.variants; ++variant) {
        auto vr = rng.split(std::uint64_t(variant));
        std::vector<Tensor64> inputs;
        for (const auto& s : c.input_shapes) {
            std::vector<double> d(std::size_t(numel(s)));
            for (auto& x : d) {
                x = vr.uniform(c.lo, c.hi);
                if (c.min_abs > 0 && std::abs(x) < c.min_abs)
                    x = x < 0 ? x - c.min_abs : x + c.min_abs;
            }
            inputs.push_back(Tensor64::leaf(s, std::move(d), true));
        }
        Tensor64 loss = c.fn(inputs);
        backward(loss);

        for (std::size_t t = 0; t < inputs.size(); ++t) {
            const auto& g = inputs[t].grad();
            auto& vals = inputs[t].mutable_values();
            for (std::size_t i = 0; i < vals.size(); ++i) {
                double orig = vals[i];
                vals[i] = orig + eps;
                double fp = c.fn(inputs).item();
                vals[i] = orig - eps;
                double fm = c.fn(inputs).item();
                vals[i] = orig;
                double fd = (fp - fm) / (2 * eps);
                double ad = g.empty() ? 0.0 : g[i];
                double e = detail::rel_err(ad, fd);
                if (e > res.max_rel_err) res.max_rel_err = e;
            }
        }
    }
    res.pass = res.max_rel_err < c.tol;
    return res;
}

// The differentiable-op suite; nn.hpp layer cases are appended by
// all_gradcheck_cases() in nn_gradcheck.hpp.
inline std::vector<GradCheckCase> core_op_cases() {
    std::vector<GradCheckCase> cases;
    auto sum_of = [](Tensor64 t) { return sum_all(t); };

    cases.push_back({"add", {{3, 4}, {3, 4}}, [&](const std::vector<Tensor64>& in) {
                         return sum_all(mul(add(in[0], in[1]), in[0]));
                     }});
    cases.push_back({"add_broadcast", {{2, 3, 4}, {4}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(add(in[0], in[1])));
                     }});
    cases.push_back({"sub_broadcast", {{2, 1, 4}, {2, 3, 1}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(sub(in[0], in[1])));
                     }});
    cases.push_back({"mul", {{5, 3}, {5, 3}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(mul(in[0], in[1]));
                     }});
    cases.push_back({"mul_broadcast", {{2, 3, 4}, {3, 1}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(mul(in[0], in[1])));
                     }});
    {
        GradCheckCase c{"div", {{4, 3}, {4, 3}}, [](const std::vector<Tensor64>& in) {
                            return sum_all(div(in[0], in[1]));
                        }};
        c.min_abs = 0.3;  // keep denominators away from 0
        cases.push_back(c);
    }
    cases.push_back({"exp", {{3, 5}}, [&](const std::vector<Tensor64>& in) { return sum_all(exp(in[0])); }});
    {
        GradCheckCase c{"log", {{3, 5}}, [](const std::vector<Tensor64>& in) {
                            return sum_all(log(add_scalar(in[0], 2.0)));
                        }};
        cases.push_back(c);
    }
    {
        GradCheckCase c{"sqrt", {{6}}, [](const std::vector<Tensor64>& in) {
                            return sum_all(sqrt(add_scalar(in[0], 2.0)));
                        }};
        cases.push_back(c);
    }
    {
        GradCheckCase c{"abs", {{4, 4}}, [](const std::vector<Tensor64>& in) { return sum_all(abs(in[0])); }};
        c.min_abs = 0.1;
        cases.push_back(c);
    }
    {
        GradCheckCase c{"relu", {{4, 4}}, [](const std::vector<Tensor64>& in) {
                            return sum_all(square(relu(in[0])));
                        }};
        c.min_abs = 0.1;
        cases.push_back(c);
    }
    {
        GradCheckCase c{"leaky_relu", {{4, 4}}, [](const std::vector<Tensor64>& in) {
                            return sum_all(square(leaky_relu(in[0], 0.2)));
                        }};
        c.min_abs = 0.1;
        cases.push_back(c);
    }
    cases.push_back({"gelu", {{4, 4}}, [&](const std::vector<Tensor64>& in) { return sum_all(gelu(in[0])); }});
    cases.push_back({"tanh", {{3, 4}}, [&](const std::vector<Tensor64>& in) { return sum_all(tanh(in[0])); }});
    cases.push_back({"silu", {{3, 4}}, [&](const std::vector<Tensor64>& in) { return sum_all(silu(in[0])); }});
    cases.push_back({"matmul", {{5, 7}, {7, 3}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(matmul(in[0], in[1])));
                     }});
    cases.push_back({"bmm", {{2, 3, 4}, {2, 4, 5}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(bmm(in[0], in[1])));
                     }});
    cases.push_back({"bmm_trans", {{2, 3, 4}, {2, 5, 4}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(bmm(in[0], in[1], true)));
                     }});
    cases.push_back({"softmax", {{3, 5}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(softmax(in[0], -1)));
                     }});
    cases.push_back({"softmax_axis0", {{4, 3}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(softmax(in[0], 0)));
                     }});
    cases.push_back({"log_softmax", {{3, 6}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(log_softmax(in[0], -1)));
                     }});
    cases.push_back({"layer_norm", {{4, 6}, {6}, {6}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(layer_norm(in[0], in[1], in[2])));
                     }});
    cases.push_back({"layer_norm_plain", {{4, 6}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(layer_norm(in[0], Tensor64(), Tensor64())));
                     }});
    cases.push_back({"conv2d", {{1, 2, 6, 6}, {3, 2, 3, 3}, {3}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(conv2d(in[0], in[1], in[2], 1, 1)));
                     }});
    cases.push_back({"conv2d_stride2", {{2, 2, 5, 5}, {2, 2, 3, 3}, {2}},
                     [](const std::vector<Tensor64>& in) {
                         return sum_all(square(conv2d(in[0], in[1], in[2], 2, 1)));
                     }});
    cases.push_back({"sum_axis", {{3, 4, 2}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(sum_axis(in[0], 1)));
                     }});
    cases.push_back({"mean_axis", {{3, 4}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(mean_axis(in[0], 0)));
                     }});
    cases.push_back({"reshape_permute", {{3, 4, 2}}, [](const std::vector<Tensor64>& in) {
                         auto p = permute(in[0], {2, 0, 1});
                         return sum_all(square(reshape(p, {6, 4})));
                     }});
    cases.push_back({"concat_slice", {{2, 3}, {2, 2}}, [](const std::vector<Tensor64>& in) {
                         auto c = concat<double>({in[0], in[1]}, 1);
                         return sum_all(square(slice(c, 1, 1, 4)));
                     }});
    cases.push_back({"gather_rows", {{5, 3}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(gather_rows(in[0], {0, 2, 2, 4})));
                     }});
    cases.push_back({"grid_merge_split", {{2, 16, 3}}, [](const std::vector<Tensor64>& in) {
                         return sum_all(square(grid_split(grid_merge(in[0], 2), 2)));
                     }});
    cases.push_back({"clamp", {{4, 4}}, [](const std::vector<Tensor64>& in) {
                         // keep inputs strictly inside the clamp band
                         return sum_all(square(clamp(mul_scalar(in[0], 0.4), -0.5, 0.5)));
                     }});
    (void)sum_of;
    return cases;
}

}  // namespace tcae
