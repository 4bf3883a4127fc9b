#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "fdet/backbone.hpp"
#include "fdet/gradcheck.hpp"
#include "fdet/gradsuite.hpp"
#include "fdet/layers.hpp"
#include "fdet/weights.hpp"

using namespace fdet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("fdet_test_net_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.frobenius_norm() == doctest::Approx(std::sqrt(6 * 2.25)));
  CHECK_THROWS(t.reshaped({4, 2}));
  CHECK(t.reshaped({3, 2}).shape() == std::vector<int>{3, 2});
  t[0] = NAN;
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS(Tensor({2, 2}, std::vector<double>{1, 2, 3}));
}

TEST_CASE("every layer passes the finite-difference check") {
  const auto cases = gradient_suite();
  CHECK(cases.size() >= 12);
  for (const auto& c : cases) {
    INFO(c.name << "\n" << c.report.to_string());
    CHECK(c.report.max_rel_error() < 1e-5);
    std::size_t checked = 0;
    for (const auto& e : c.report.entries) checked += e.checked;
    CHECK(checked > 0);
  }
  CHECK(max_rel_error(cases) < 1e-4);
  CHECK(format_suite(cases).find("concat") != std::string::npos);
}

TEST_CASE("gradient check catches a wrong gradient") {
  Param p("p", Tensor({3}, std::vector<double>{0.3, -0.7, 1.1}));
  std::vector<Param*> ps{&p};
  auto loss = [&] { return p.value[0] * p.value[0] + 3 * p.value[1] + std::sin(p.value[2]); };
  auto good = [&] {
    p.zero_grad();
    p.grad[0] = 2 * p.value[0];
    p.grad[1] = 3;
    p.grad[2] = std::cos(p.value[2]);
  };
  auto bad = [&] {
    good();
    p.grad[2] *= 1.01;
  };
  CHECK(finite_diff_check(ps, loss, good).max_rel_error() < 1e-8);
  CHECK(finite_diff_check(ps, loss, bad).max_rel_error() > 1e-3);
  GradCheckOptions o;
  o.eps = 1e-2;
  CHECK_THROWS_AS(finite_diff_check(ps, loss, good, o), std::invalid_argument);
}

TEST_CASE("softmax cross-entropy by hand") {
  const Tensor logits({2, 2}, std::vector<double>{0.0, 0.0, 1.0, 3.0});
  const std::vector<int> labels{0, 1};
  const auto r = softmax_ce_loss(logits, labels);
  const double l1 = std::log(2.0), l2 = std::log(1 + std::exp(-2.0));
  CHECK(r.loss == doctest::Approx((l1 + l2) / 2));
  CHECK(r.grad.at(0, 0) == doctest::Approx((0.5 - 1) / 2));
  CHECK(r.grad.at(1, 1) == doctest::Approx((1 / (1 + std::exp(-2.0)) - 1) / 2));
  const std::vector<int> bad{0, 2};
  CHECK_THROWS_AS(softmax_ce_loss(logits, bad), std::out_of_range);
  // large logits stay finite
  const Tensor big({1, 2}, std::vector<double>{1000, -1000});
  const std::vector<int> one{1};
  CHECK(std::isfinite(softmax_ce_loss(big, one).loss));
}

TEST_CASE("smooth l1 by hand") {
  const Tensor pred({1, 4}, std::vector<double>{0.5, 2.0, -3.0, 9.0});
  const Tensor tgt({1, 4}, std::vector<double>{0.0, 0.0, 0.0, 0.0});
  const Tensor w({1, 4}, std::vector<double>{1, 1, 1, 0});
  const auto r = smooth_l1_loss(pred, tgt, w);
  CHECK(r.loss == doctest::Approx((0.125 + 1.5 + 2.5) / 3));
  CHECK(r.grad[0] == doctest::Approx(0.5 / 3));
  CHECK(r.grad[1] == doctest::Approx(1.0 / 3));
  CHECK(r.grad[2] == doctest::Approx(-1.0 / 3));
  CHECK(r.grad[3] == 0.0);
}

TEST_CASE("conv layer shape checks") {
  Conv2d c("c", 2, 3, 3, 1, 1);
  CHECK(c.forward(Tensor({1, 2, 5, 5})).shape() == std::vector<int>{1, 3, 5, 5});
  CHECK_THROWS_AS(c.forward(Tensor({1, 3, 5, 5})), std::invalid_argument);
  Linear l("l", 4, 2);
  CHECK_THROWS_AS(l.forward(Tensor({2, 5})), std::invalid_argument);
}

TEST_CASE("momentum sgd with zero momentum equals plain sgd") {
  std::mt19937_64 rng(3);
  Param a("a", Tensor({4, 3})), b("a", Tensor({4, 3}));
  he_uniform(a.value, 3, rng);
  b.value = a.value;
  a.lr_mult = b.lr_mult = 0.5;
  std::vector<Param*> pa{&a}, pb{&b};
  MomentumSgd opt(0.0, 0.0);
  for (int step = 0; step < 5; ++step) {
    Tensor g({4, 3});
    he_uniform(g, 1, rng);
    a.grad = g;
    b.grad = g;
    opt.step(pa, 0.1);
    sgd_step(pb, 0.1);
    CHECK(a.value == b.value);
  }
}

TEST_CASE("momentum sgd by hand") {
  Param p("p", Tensor({1}, std::vector<double>{1.0}));
  std::vector<Param*> ps{&p};
  MomentumSgd opt(0.9, 0.1);
  p.grad[0] = 2.0;
  opt.step(ps, 0.5);  // v = 0.5 * (2 + 0.1) = 1.05
  CHECK(p.value[0] == doctest::Approx(-0.05));
  p.grad[0] = 0.0;
  opt.step(ps, 0.5);  // v = 0.945 + 0.5 * (0.1 * -0.05)
  CHECK(p.value[0] == doctest::Approx(-0.05 - (0.945 - 0.0025)));
  std::vector<Param*> two{&p, &p};
  CHECK_THROWS_AS(opt.step(two, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(MomentumSgd(1.0), std::invalid_argument);
}

TEST_CASE("weights round trip bit for bit") {
  const auto dir = temp_dir("rt");
  std::mt19937_64 rng(5);
  Backbone a(BackboneSpec{}, rng), b(BackboneSpec{}, rng);
  auto pa = a.params(), pb = b.params();
  CHECK(pa[0]->value != pb[0]->value);
  save_weights(dir / "w.bin", pa);
  load_weights(dir / "w.bin", pb);
  for (std::size_t k = 0; k < pa.size(); ++k) CHECK(pa[k]->value == pb[k]->value);
}

TEST_CASE("weight loading rejects bad files") {
  const auto dir = temp_dir("bad");
  Param p("x", Tensor({2, 2}, 1.0)), q("y", Tensor({2, 2})), r("x", Tensor({4}));
  std::vector<Param*> ps{&p};
  save_weights(dir / "w.bin", ps);
  std::vector<Param*> wrong_name{&q}, wrong_shape{&r}, wrong_count{&p, &q};
  CHECK_THROWS_AS(load_weights(dir / "w.bin", wrong_name), std::runtime_error);
  CHECK_THROWS_AS(load_weights(dir / "w.bin", wrong_shape), std::runtime_error);
  CHECK_THROWS_AS(load_weights(dir / "w.bin", wrong_count), std::runtime_error);
  CHECK_THROWS_AS(load_weights(dir / "missing.bin", ps), std::runtime_error);

  std::string bytes;
  {
    std::ifstream f(dir / "w.bin", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(f), {});
  }
  auto write = [&](const std::string& s) {
    std::ofstream f(dir / "x.bin", std::ios::binary | std::ios::trunc);
    f << s;
  };
  std::string magic = bytes;
  magic[0] = 'X';
  write(magic);
  CHECK_THROWS_AS(load_weights(dir / "x.bin", ps), std::runtime_error);
  std::string version = bytes;
  version[8] = 9;
  write(version);
  CHECK_THROWS_AS(load_weights(dir / "x.bin", ps), std::runtime_error);
  write(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_weights(dir / "x.bin", ps), std::runtime_error);
  write(bytes + "zz");
  CHECK_THROWS_AS(load_weights(dir / "x.bin", ps), std::runtime_error);
}

TEST_CASE("backbone taps and padding") {
  std::mt19937_64 rng(6);
  BackboneSpec spec;
  CHECK(spec.max_stride() == 16);
  CHECK(spec.tap_stride(0) == 4);
  CHECK(spec.tap_stride(1) == 8);
  Backbone bb(spec, rng);
  const Tensor img = pad_to_multiple(Tensor({1, 1, 50, 70}, 0.5), 16);
  CHECK(img.h() == 64);
  CHECK(img.w() == 80);
  CHECK(img.at(0, 0, 60, 75) == 0.0);
  CHECK(img.at(0, 0, 49, 69) == 0.5);
  const auto taps = bb.forward(img);
  REQUIRE(taps.size() == 3);
  CHECK(taps[0].map.shape() == std::vector<int>{1, 16, 16, 20});
  CHECK(taps[2].map.shape() == std::vector<int>{1, 32, 4, 5});
  CHECK(taps[2].stride == 16);
  BackboneSpec bad;
  bad.taps = {2, 1};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.taps = {5};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
