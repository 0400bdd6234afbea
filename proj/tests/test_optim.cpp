#include <doctest.h>

#include <cmath>

#include "e4srec/errors.hpp"
#include "e4srec/optim.hpp"

using namespace e4srec;
using namespace e4srec::ad;

TEST_CASE("adam: zero gradient and zero decay leave params unchanged") {
  Param p("p", Tensor::of({1.0f, -2.0f, 3.5f}));
  Tensor before = p.value;
  Adam opt({&p}, {});
  p.grad = Tensor::zeros({3});
  opt.step(0.1f);
  CHECK(p.value.bitwise_equal(before));
}

TEST_CASE("adam: single step with unit gradient moves by about lr") {
  // m_hat = 1, v_hat = 1 after one step, so the update is lr / (1 + eps)
  Param p("p", Tensor::of({0.0f}));
  Adam opt({&p}, {});
  p.grad = Tensor::of({1.0f});
  opt.step(0.1f);
  CHECK(p.value(0) == doctest::Approx(-0.1).epsilon(1e-5));
  CHECK(opt.step_count() == 1);
}

TEST_CASE("adam: identical params with identical grads get identical updates") {
  Param a("a", Tensor::of({0.7f, -0.3f}));
  Param b("b", Tensor::of({0.7f, -0.3f}));
  Adam opt({&a, &b}, {});
  for (int s = 0; s < 5; ++s) {
    a.grad = Tensor::of({0.2f, -0.9f});
    b.grad = Tensor::of({0.2f, -0.9f});
    opt.step(0.05f);
    CHECK(a.value.bitwise_equal(b.value));
  }
}

TEST_CASE("adam: decoupled weight decay shrinks params even without gradient") {
  Param p("p", Tensor::of({2.0f}));
  AdamConfig cfg;
  cfg.weight_decay = 0.1f;
  Adam opt({&p}, cfg);
  p.grad = Tensor::zeros({1});
  opt.step(0.5f);
  // update term is 0, decay term is lr * wd * value
  CHECK(p.value(0) == doctest::Approx(2.0f - 0.5f * 0.1f * 2.0f).epsilon(1e-6));
}

TEST_CASE("adam: negative lr and shape mismatch are errors") {
  Param p("p", Tensor::of({1.0f}));
  Adam opt({&p}, {});
  CHECK_THROWS_AS(opt.step(-0.1f), ConfigError);
  p.grad = Tensor::zeros({2});
  CHECK_THROWS_AS(opt.step(0.1f), ShapeError);
}

TEST_CASE("lr schedule: warmup endpoint reaches base_lr") {
  LRSchedule s{0.02f, 100, 1000};
  CHECK(s.at(100) == doctest::Approx(0.02f));
  CHECK(s.at(0) == doctest::Approx(0.0f));
  CHECK(s.at(50) == doctest::Approx(0.01f));
}

TEST_CASE("lr schedule: cosine endpoint decays to zero") {
  LRSchedule s{0.02f, 100, 1000};
  CHECK(s.at(1000) == doctest::Approx(0.0f).epsilon(1e-9));
}

TEST_CASE("lr schedule: cosine midpoint is half of base_lr") {
  LRSchedule s{0.02f, 100, 1000};
  CHECK(s.at(100 + (1000 - 100) / 2) == doctest::Approx(0.01f).epsilon(1e-6));
}

TEST_CASE("lr schedule: monotone warmup then non-increasing decay") {
  LRSchedule s{0.5f, 37, 400};
  for (int64_t t = 1; t <= 37; ++t) CHECK(s.at(t) >= s.at(t - 1));
  for (int64_t t = 38; t <= 400; ++t) {
    CHECK(s.at(t) <= s.at(t - 1) + 1e-9f);
    CHECK(s.at(t) >= 0.0f);
  }
}

TEST_CASE("lr schedule: steps past total clamp to the final value") {
  LRSchedule s{0.1f, 10, 100};
  CHECK(s.at(150) == doctest::Approx(s.at(100)));
}
