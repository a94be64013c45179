#include "doctest.h"
#include "tcae/optim.hpp"

using namespace tcae;

namespace {
ParamPtr<double> make_param(ParamRegistry<double>& reg, const std::string& name,
                            std::vector<double> vals) {
    Shape s{std::int64_t(vals.size())};
    return reg.add(name, Tensor64::leaf(s, std::move(vals)));
}
}  // namespace

TEST_CASE("zero grad and zero weight decay is an exact fixed point") {
    ParamRegistry<double> reg;
    auto p = make_param(reg, "w", {0.5, -1.25, 3.0});
    auto before = p->values();
    OptimizerConfig cfg;
    cfg.weight_decay = 0;
    cfg.base_lr = 1e-2;
    cfg.min_lr = 1e-2;
    cfg.warmup_epochs = 0;
    // grads never populated -> parameters bitwise unchanged
    adamw_step(reg.all(), cfg, 0);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(p->values()[i] == before[i]);

    // explicit zero grads too
    auto loss = mul_scalar(sum_all(p->tensor), 0.0);
    backward(loss);
    adamw_step(reg.all(), cfg, 1);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(p->values()[i] == before[i]);
}

TEST_CASE("single Adam step with constant grad 1 reproduces the textbook update") {
    ParamRegistry<double> reg;
    auto p = make_param(reg, "w", {1.0});
    auto loss = sum_all(p->tensor);  // d loss / d w = 1
    backward(loss);
    OptimizerConfig cfg;
    cfg.base_lr = 1e-3;
    cfg.min_lr = 1e-3;
    cfg.weight_decay = 0;
    cfg.warmup_epochs = 0;
    adamw_step(reg.all(), cfg, 0);
    // with bias correction at t=1: mhat=1, vhat=1 -> delta = lr * 1/(sqrt(1)+eps)
    double expected = 1.0 - 1e-3 * (1.0 / (1.0 + cfg.eps));
    CHECK(p->values()[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("warmup ramps linearly from base_lr/warmup_steps") {
    OptimizerConfig cfg;
    cfg.base_lr = 1e-3;
    cfg.min_lr = 1e-6;
    cfg.warmup_epochs = 5;
    cfg.schedule = {100, 50};  // 100 steps/epoch, 50 epochs
    std::int64_t warmup_steps = 500;
    CHECK(lr_at_step(cfg, 0) == doctest::Approx(cfg.base_lr / double(warmup_steps)));
    CHECK(lr_at_step(cfg, 249) == doctest::Approx(cfg.base_lr * 250.0 / 500.0));
    CHECK(lr_at_step(cfg, 499) == doctest::Approx(cfg.base_lr));
    // cosine tail ends at min_lr
    CHECK(lr_at_step(cfg, 5000 - 1) == doctest::Approx(cfg.min_lr).epsilon(1e-4));
    // midpoint of decay is the average
    CHECK(lr_at_step(cfg, 500 + 2250) == doctest::Approx(0.5 * (cfg.base_lr + cfg.min_lr)).epsilon(1e-3));
}

TEST_CASE("optimizer config validation") {
    OptimizerConfig cfg;
    cfg.min_lr = 2e-3;  // above base_lr
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    OptimizerConfig c2;
    c2.beta1 = 1.0;
    CHECK_THROWS_AS(c2.validate(), ConfigError);
}

TEST_CASE("ema_update endpoints and formula") {
    ParamRegistry<double> sreg, treg;
    auto s = make_param(sreg, "w", {0.0, 2.0});
    auto t = make_param(treg, "w", {1.0, 4.0});

    SUBCASE("m=1 leaves the teacher unchanged") {
        ema_update(treg.all(), sreg.all(), 1.0);
        CHECK(t->values()[0] == 1.0);
        CHECK(t->values()[1] == 4.0);
    }
    SUBCASE("m=0 copies the student") {
        ema_update(treg.all(), sreg.all(), 0.0);
        CHECK(t->values()[0] == 0.0);
        CHECK(t->values()[1] == 2.0);
    }
    SUBCASE("m=0.9 blends") {
        ema_update(treg.all(), sreg.all(), 0.9);
        CHECK(t->values()[0] == doctest::Approx(0.9));
    }
}

TEST_CASE("ema_update is bit-exact m*t + (1-m)*s in 64-bit") {
    ParamRegistry<double> sreg, treg;
    RngStream rng = RngStream::from_seed(17);
    std::vector<double> sv(64), tv(64);
    for (auto& x : sv) x = rng.normal();
    for (auto& x : tv) x = rng.normal();
    auto s = make_param(sreg, "w", sv);
    auto t = make_param(treg, "w", tv);
    double m = 0.997;
    ema_update(treg.all(), sreg.all(), m);
    for (std::size_t i = 0; i < sv.size(); ++i) {
        double expect = m * tv[i] + (1.0 - m) * sv[i];
        CHECK(t->values()[i] == expect);  // bitwise
    }
}

TEST_CASE("ema_update rejects name and shape mismatches") {
    ParamRegistry<double> sreg, treg;
    make_param(sreg, "a", {1.0});
    make_param(treg, "b", {1.0});
    CHECK_THROWS_AS(ema_update(treg.all(), sreg.all(), 0.5), ConfigError);

    ParamRegistry<double> s2, t2;
    make_param(s2, "a", {1.0, 2.0});
    make_param(t2, "a", {1.0});
    CHECK_THROWS_AS(ema_update(t2.all(), s2.all(), 0.5), ConfigError);
}

TEST_CASE("teacher built without grads never enters a tape") {
    ParamRegistry<double> treg(/*trainable=*/false);
    auto t = make_param(treg, "w", {1.0, 2.0});
    auto y = sum_all(square(t->tensor));
    CHECK(!y.requires_grad());
    backward(y);  // no-op sweep
    CHECK(t->grad().empty());
}
