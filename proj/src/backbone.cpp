#include "fdet/backbone.hpp"

#include <stdexcept>
#include <string>

namespace fdet {

void BackboneSpec::validate() const {
  if (stages.empty()) throw std::invalid_argument("backbone needs at least one stage");
  if (taps.empty()) throw std::invalid_argument("backbone needs at least one tap");
  for (const auto& s : stages)
    if (s.channels < 1 || s.convs < 1 || s.downsample < 1)
      throw std::invalid_argument("backbone stage fields must be positive");
  int prev = 0;
  for (int t : taps) {
    if (t < 0 || t >= static_cast<int>(stages.size()))
      throw std::invalid_argument("backbone tap " + std::to_string(t) + " out of range");
    const int s = stage_stride(t);
    if ((s & (s - 1)) != 0)
      throw std::invalid_argument("tap stride " + std::to_string(s) + " is not a power of two");
    if (s <= prev) throw std::invalid_argument("tap strides must be strictly increasing");
    prev = s;
  }
}

int BackboneSpec::stage_stride(int stage) const {
  int s = 1;
  for (int i = 0; i <= stage; ++i) s *= stages.at(i).downsample;
  return s;
}

Backbone::Backbone(const BackboneSpec& spec, std::mt19937_64& rng) : spec_(spec) {
  spec_.validate();
  int in = spec_.input_channels;
  for (std::size_t si = 0; si < spec_.stages.size(); ++si) {
    const auto& ss = spec_.stages[si];
    Stage stage;
    stage.downsample = ss.downsample;
    stage.pool = MaxPool2d(ss.downsample);
    for (int b = 0; b < ss.convs; ++b) {
      Block blk{Conv2d("backbone.s" + std::to_string(si) + ".c" + std::to_string(b), in,
                       ss.channels, 3, 1, 1),
                ReLU{}};
      he_uniform(blk.conv.weight().value, in * 9, rng);
      stage.blocks.push_back(std::move(blk));
      in = ss.channels;
    }
    stages_.push_back(std::move(stage));
  }
}

std::vector<FeatureMap> Backbone::forward(const Tensor& image) {
  const int m = spec_.max_stride();
  if (image.rank() != 4 || image.h() % m || image.w() % m)
    throw std::invalid_argument("backbone input " + shape_string(image.shape()) +
                                " must be 4-D with spatial dims divisible by " +
                                std::to_string(m));
  std::vector<FeatureMap> out;
  Tensor x = image;
  std::size_t next_tap = 0;
  for (std::size_t si = 0; si < stages_.size(); ++si) {
    auto& st = stages_[si];
    for (auto& blk : st.blocks) x = blk.relu.forward(blk.conv.forward(x));
    if (st.downsample > 1) x = st.pool.forward(x);
    if (next_tap < spec_.taps.size() && spec_.taps[next_tap] == static_cast<int>(si)) {
      out.push_back({x, spec_.stage_stride(static_cast<int>(si))});
      ++next_tap;
    }
    if (next_tap == spec_.taps.size()) break;
  }
  return out;
}

void Backbone::backward(const std::vector<Tensor>& tap_grads) {
  if (tap_grads.size() != spec_.taps.size())
    throw std::invalid_argument("backbone backward: expected one gradient per tap");
  const int last = spec_.taps.back();
  Tensor g;
  int tap = static_cast<int>(spec_.taps.size()) - 1;
  for (int si = last; si >= 0; --si) {
    if (tap >= 0 && spec_.taps[tap] == si) {
      const Tensor& tg = tap_grads[tap];
      if (!tg.empty()) {
        if (g.empty())
          g = tg;
        else
          g += tg;
      }
      --tap;
    }
    if (g.empty()) continue;  // nothing flows from above yet
    auto& st = stages_[si];
    if (st.downsample > 1) g = st.pool.backward(g);
    for (auto it = st.blocks.rbegin(); it != st.blocks.rend(); ++it)
      g = it->conv.backward(it->relu.backward(g));
  }
}

std::vector<Param*> Backbone::params() {
  std::vector<Param*> ps;
  for (auto& st : stages_)
    for (auto& blk : st.blocks)
      for (Param* p : blk.conv.params()) ps.push_back(p);
  return ps;
}

Tensor pad_to_multiple(const Tensor& image, int multiple) {
  const int h = (image.h() + multiple - 1) / multiple * multiple;
  const int w = (image.w() + multiple - 1) / multiple * multiple;
  if (h == image.h() && w == image.w()) return image;
  Tensor out({image.n(), image.c(), h, w});
  for (int n = 0; n < image.n(); ++n)
    for (int c = 0; c < image.c(); ++c)
      for (int y = 0; y < image.h(); ++y)
        for (int x = 0; x < image.w(); ++x) out.at(n, c, y, x) = image.at(n, c, y, x);
  return out;
}

}  // namespace fdet
