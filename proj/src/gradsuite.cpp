#include "fdet/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "fdet/backbone.hpp"
#include "fdet/featconcat.hpp"
#include "fdet/layers.hpp"

namespace fdet {

namespace {

Tensor uniform(std::vector<int> shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Values at least 0.9/size apart in [0.1, 1], so every max is unique by far
// more than eps.
Tensor distinct(std::vector<int> shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::vector<std::size_t> perm(t.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const double step = 0.9 / static_cast<double>(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.1 + step * static_cast<double>(perm[i]);
  return t;
}

// Magnitudes in [0.1, 1] with random signs: no entry near the ReLU kink.
Tensor off_zero(std::vector<int> shape, std::mt19937_64& rng) {
  Tensor t = uniform(std::move(shape), rng, 0.1, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (auto& v : t.data())
    if (flip(rng)) v = -v;
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct Suite {
  GradCheckOptions opts;
  std::vector<GradSuiteCase> cases;

  void run(const std::string& name, std::vector<Param*> params, const std::function<double()>& loss,
           const std::function<void()>& analytic) {
    auto o = opts;
    o.seed = opts.seed + cases.size();
    cases.push_back({name, finite_diff_check(params, loss, analytic, o)});
  }
};

void zero(std::vector<Param*>& ps) {
  for (Param* p : ps) p->zero_grad();
}

}  // namespace

std::vector<GradSuiteCase> gradient_suite(const GradCheckOptions& opts) {
  Suite s{opts, {}};
  std::mt19937_64 rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);

  // Convolutions: several stride/pad/kernel combinations.
  struct ConvCase {
    int k, stride, pad;
  };
  for (const ConvCase cc : {ConvCase{3, 1, 1}, ConvCase{3, 2, 0}, ConvCase{1, 1, 0}}) {
    Conv2d conv("conv", 3, 4, cc.k, cc.stride, cc.pad);
    he_uniform(conv.weight().value, 3 * cc.k * cc.k, rng);
    conv.bias().value = uniform({4}, rng, -0.1, 0.1);
    Param x("input", uniform({2, 3, 7, 6}, rng, -1, 1));
    const Tensor probe = conv.forward(x.value);
    const Tensor r = uniform(probe.shape(), rng, -1, 1);
    std::vector<Param*> ps{&x, &conv.weight(), &conv.bias()};
    s.run("conv2d k" + std::to_string(cc.k) + " s" + std::to_string(cc.stride) + " p" +
              std::to_string(cc.pad),
          ps, [&] { return dot(conv.forward(x.value), r); },
          [&] {
            zero(ps);
            conv.forward(x.value);
            x.grad = conv.backward(r);
          });
  }

  {
    ReLU relu;
    Param x("input", off_zero({2, 3, 4, 4}, rng));
    const Tensor r = uniform(x.value.shape(), rng, -1, 1);
    std::vector<Param*> ps{&x};
    s.run("relu", ps, [&] { return dot(relu.forward(x.value), r); },
          [&] {
            zero(ps);
            relu.forward(x.value);
            x.grad = relu.backward(r);
          });
  }

  {
    MaxPool2d pool(2);
    Param x("input", distinct({2, 3, 6, 8}, rng));
    const Tensor r = uniform({2, 3, 3, 4}, rng, -1, 1);
    std::vector<Param*> ps{&x};
    s.run("maxpool2d", ps, [&] { return dot(pool.forward(x.value), r); },
          [&] {
            zero(ps);
            pool.forward(x.value);
            x.grad = pool.backward(r);
          });
  }

  {
    Linear fc("fc", 10, 5);
    he_uniform(fc.weight().value, 10, rng);
    fc.bias().value = uniform({5}, rng, -0.1, 0.1);
    Param x("input", uniform({4, 10}, rng, -1, 1));
    const Tensor r = uniform({4, 5}, rng, -1, 1);
    std::vector<Param*> ps{&x, &fc.weight(), &fc.bias()};
    s.run("linear", ps, [&] { return dot(fc.forward(x.value), r); },
          [&] {
            zero(ps);
            fc.forward(x.value);
            x.grad = fc.backward(r);
          });
  }

  {
    Param x("logits", uniform({6, 3}, rng, -3, 3));
    const std::vector<int> labels{0, 2, 1, 1, 0, 2};
    std::vector<Param*> ps{&x};
    s.run("softmax_ce", ps, [&] { return softmax_ce_loss(x.value, labels).loss; },
          [&] { x.grad = softmax_ce_loss(x.value, labels).grad; });
  }

  {
    // |pred - target| kept clear of the quadratic/linear switch at 1.
    Param x("pred", Tensor({5, 4}));
    Tensor target = uniform({5, 4}, rng, -1, 1);
    Tensor w({5, 4});
    std::uniform_real_distribution<double> mag(0.05, 2.5);
    std::bernoulli_distribution sign(0.5), on(0.7);
    for (std::size_t i = 0; i < x.value.size(); ++i) {
      double d = mag(rng);
      if (std::abs(d - 1) < 0.05) d += 0.1;
      x.value[i] = target[i] + (sign(rng) ? d : -d);
      w[i] = on(rng) ? 1.0 : 0.0;
    }
    std::vector<Param*> ps{&x};
    s.run("smooth_l1", ps, [&] { return smooth_l1_loss(x.value, target, w).loss; },
          [&] { x.grad = smooth_l1_loss(x.value, target, w).grad; });
  }

  {
    Param fmap("fmap", distinct({1, 3, 9, 11}, rng));
    const BBox roi(5, 3, 37, 30);
    const Tensor r = uniform({1, 3, 4, 4}, rng, -1, 1);
    std::vector<Param*> ps{&fmap};
    s.run("roi_pool", ps, [&] { return dot(roi_pool(fmap.value, 4, roi, 4).pooled, r); },
          [&] {
            zero(ps);
            roi_pool_backward(roi_pool(fmap.value, 4, roi, 4), r, fmap.grad);
          });
  }

  {
    Param x("input", uniform({1, 4, 3, 3}, rng, -1, 1));
    const Tensor r = uniform(x.value.shape(), rng, -1, 1);
    std::vector<Param*> ps{&x};
    s.run("l2_normalize", ps, [&] { return dot(l2_normalize(x.value), r); },
          [&] { x.grad = l2_normalize_backward(x.value, r); });
  }

  {
    Param a("blob0", uniform({1, 2, 3, 3}, rng, -1, 1));
    Param b("blob1", uniform({1, 3, 3, 3}, rng, -1, 1));
    const Tensor r = uniform({1, 5, 3, 3}, rng, -1, 1);
    const double norm = 4700;
    std::vector<Param*> ps{&a, &b};
    auto blobs = [&] { return std::vector<Tensor>{a.value, b.value}; };
    s.run("concat_rescale", ps, [&] { return dot(concat_rescale(blobs(), norm), r) / norm; },
          [&] {
            auto g = concat_rescale_backward(blobs(), norm, r);
            a.grad = g[0];
            b.grad = g[1];
            a.grad *= 1.0 / norm;
            b.grad *= 1.0 / norm;
          });
  }

  {
    BackboneSpec spec;
    spec.stages = {{4, 1, 2}, {6, 2, 2}};
    spec.taps = {0, 1};
    std::mt19937_64 init(opts.seed + 11);
    Backbone net(spec, init);
    const Tensor image = uniform({1, 1, 12, 16}, rng, 0, 1);
    auto maps = net.forward(image);
    std::vector<Tensor> rs;
    for (const auto& m : maps) rs.push_back(uniform(m.map.shape(), rng, -1, 1));
    std::vector<Param*> ps = net.params();
    s.run("backbone", ps,
          [&] {
            auto m = net.forward(image);
            double v = 0;
            for (std::size_t t = 0; t < m.size(); ++t) v += dot(m[t].map, rs[t]);
            return v;
          },
          [&] {
            zero(ps);
            net.forward(image);
            net.backward(rs);
          });
  }

  {
    // Full concatenation head: three taps -> pool/normalize/concat/rescale
    // -> 1x1 reduce -> fc -> relu -> cls + box with both losses.
    ConcatConfig cc;
    cc.taps = {0, 1, 2};
    cc.pooled = 3;
    cc.out_channels = 4;
    const std::vector<int> chans{2, 3, 3};
    const int strides[] = {4, 8, 16};
    const int sizes[] = {16, 8, 4};
    std::vector<Param> taps;
    for (int t = 0; t < 3; ++t)
      taps.emplace_back("tap" + std::to_string(t), distinct({1, chans[static_cast<std::size_t>(t)], sizes[t], sizes[t]}, rng));
    const std::vector<BBox> rois{BBox(4, 6, 40, 52), BBox(20, 10, 60, 44)};
    const std::vector<int> labels{1, 0};
    Tensor target = uniform({2, 4}, rng, -0.5, 0.5);
    Tensor weights({2, 4});
    for (int c = 0; c < 4; ++c) weights.at(0, c) = 1.0;

    FeatureConcat layer;
    Linear fc, cls, box;
    ReLU relu;
    std::uint64_t attempt = 0;
    auto feature_maps = [&] {
      std::vector<FeatureMap> m;
      for (int t = 0; t < 3; ++t) m.push_back({taps[static_cast<std::size_t>(t)].value, strides[t]});
      return m;
    };
    // Re-draw weights until no hidden unit sits near the ReLU kink.
    for (;; ++attempt) {
      std::mt19937_64 init(opts.seed + 100 + attempt);
      layer = FeatureConcat(cc, chans, init);
      fc = Linear("head.fc", cc.out_channels * 9, 6);
      cls = Linear("head.cls", 6, 2);
      box = Linear("head.bbox", 6, 4);
      he_uniform(fc.weight().value, cc.out_channels * 9, init);
      fc.bias().value = uniform({6}, init, -0.1, 0.1);
      he_uniform(cls.weight().value, 6, init);
      he_uniform(box.weight().value, 6, init);
      const auto m = feature_maps();
      const Tensor f = layer.forward(m, rois);
      const Tensor pre = fc.forward(f.reshaped({2, static_cast<int>(f.size() / 2)}));
      bool ok = true;
      for (double v : pre.data()) ok = ok && std::abs(v) > 1e-2;
      if (ok) break;
    }
    auto forward = [&](Tensor& cls_out, Tensor& box_out) {
      const auto m = feature_maps();
      const Tensor f = layer.forward(m, rois);
      const Tensor h = relu.forward(fc.forward(f.reshaped({2, static_cast<int>(f.size() / 2)})));
      cls_out = cls.forward(h);
      box_out = box.forward(h);
      return f.shape();
    };
    std::vector<Param*> ps;
    for (auto& t : taps) ps.push_back(&t);
    for (Param* p : layer.params()) ps.push_back(p);
    for (auto* l : {&fc, &cls, &box})
      for (Param* p : l->params()) ps.push_back(p);
    s.run("concat_head", ps,
          [&] {
            Tensor c, b;
            forward(c, b);
            return softmax_ce_loss(c, labels).loss + smooth_l1_loss(b, target, weights).loss;
          },
          [&] {
            zero(ps);
            Tensor c, b;
            const auto fshape = forward(c, b);
            Tensor dh = cls.backward(softmax_ce_loss(c, labels).grad);
            dh += box.backward(smooth_l1_loss(b, target, weights).grad);
            const Tensor df = fc.backward(relu.backward(dh)).reshaped(fshape);
            const auto g = layer.backward(df);
            for (std::size_t t = 0; t < 3; ++t) taps[t].grad += g[t];
          });
  }
  return s.cases;
}

double max_rel_error(const std::vector<GradSuiteCase>& cases) {
  double m = 0;
  for (const auto& c : cases) m = std::max(m, c.report.max_rel_error());
  return m;
}

std::string format_suite(const std::vector<GradSuiteCase>& cases) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific;
  for (const auto& c : cases) {
    os << c.name << "\n";
    for (const auto& e : c.report.entries)
      os << "  " << e.name << "  checked=" << e.checked << "  max_rel_err=" << e.max_rel_error << "\n";
  }
  os << "max_rel_err=" << max_rel_error(cases) << "\n";
  return os.str();
}

}  // namespace fdet
