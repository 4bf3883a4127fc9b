#include "fdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fdet {

namespace {

// exp() of larger deltas overflows box sizes long before training recovers
const double kMaxLogScale = std::log(1000.0 / 16.0);

BoxDelta clamp_delta(BoxDelta d) {
  d.tw = std::min(d.tw, kMaxLogScale);
  d.th = std::min(d.th, kMaxLogScale);
  return d;
}

Tensor scatter_rows(const Tensor& rows, std::vector<int> shape, std::size_t per_location,
                    int per_anchor) {
  Tensor out(std::move(shape));
  const int h = out.h(), w = out.w();
  const int A = static_cast<int>(per_location);
  for (int j = 0; j < h; ++j)
    for (int i = 0; i < w; ++i)
      for (int a = 0; a < A; ++a) {
        const int k = (j * w + i) * A + a;
        for (int c = 0; c < per_anchor; ++c) out.at(0, per_anchor * a + c, j, i) = rows.at(k, c);
      }
  return out;
}

Tensor gather_rows(const Tensor& map, std::size_t per_location, int per_anchor) {
  const int h = map.h(), w = map.w();
  const int A = static_cast<int>(per_location);
  if (map.c() != per_anchor * A)
    throw std::invalid_argument("rpn map " + shape_string(map.shape()) + " does not hold " +
                                std::to_string(A) + " anchors");
  Tensor rows({h * w * A, per_anchor});
  for (int j = 0; j < h; ++j)
    for (int i = 0; i < w; ++i)
      for (int a = 0; a < A; ++a) {
        const int k = (j * w + i) * A + a;
        for (int c = 0; c < per_anchor; ++c) rows.at(k, c) = map.at(0, per_anchor * a + c, j, i);
      }
  return rows;
}

double fg_prob(double bg, double fg) {
  // two-way softmax, stable for large logits
  const double d = bg - fg;
  return d > 0 ? std::exp(-d) / (1 + std::exp(-d)) : 1 / (1 + std::exp(d));
}

}  // namespace

Tensor rpn_logits(const Tensor& cls, std::size_t per_location) {
  return gather_rows(cls, per_location, 2);
}

Tensor rpn_deltas(const Tensor& box, std::size_t per_location) {
  return gather_rows(box, per_location, 4);
}

void ModelConfig::validate() const {
  backbone.validate();
  anchors.validate();
  if (anchors.stride != backbone.max_stride())
    throw std::invalid_argument("anchor stride " + std::to_string(anchors.stride) +
                                " must equal the last tap stride " +
                                std::to_string(backbone.max_stride()));
  if (rpn.channels < 1 || head.hidden < 1) throw std::invalid_argument("layer widths must be >= 1");
  if (rpn.batch < 1) throw std::invalid_argument("rpn batch must be >= 1");
  for (double v : {rpn.fg_fraction, rpn.pos_iou, rpn.neg_iou, rpn.nms})
    if (!(v >= 0 && v <= 1)) throw std::invalid_argument("rpn thresholds must be in [0, 1]");
  if (rpn.neg_iou > rpn.pos_iou) throw std::invalid_argument("rpn neg_iou must be <= pos_iou");
  if (rpn.post_nms_train < 1 || rpn.post_nms_test < 1)
    throw std::invalid_argument("proposal counts must be >= 1");
  for (double s : head.target_stds)
    if (!(s > 0)) throw std::invalid_argument("head target stds must be positive");
  concat.validate();
  for (int t : concat.taps)
    if (t < 0 || static_cast<std::size_t>(t) >= backbone.taps.size())
      throw std::invalid_argument("concat tap " + std::to_string(t) + " not exposed by backbone");
}

Detector::Detector(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  backbone_ = Backbone(cfg_.backbone, rng);
  const int last = cfg_.backbone.tap_channels(cfg_.backbone.taps.size() - 1);
  const int A = static_cast<int>(cfg_.anchors.per_location());
  const int rc = cfg_.rpn.channels;
  rpn_conv_ = Conv2d("rpn.conv", last, rc, 3, 1, 1);
  rpn_cls_ = Conv2d("rpn.cls", rc, 2 * A, 1, 1, 0);
  rpn_box_ = Conv2d("rpn.bbox", rc, 4 * A, 1, 1, 0);
  he_uniform(rpn_conv_.weight().value, last * 9, rng);
  he_uniform(rpn_cls_.weight().value, rc, rng, 0.1);
  he_uniform(rpn_box_.weight().value, rc, rng, 0.01);

  const int P = cfg_.concat.pooled;
  int head_channels = last;
  if (cfg_.use_concat) {
    std::vector<int> tap_channels;
    for (std::size_t t = 0; t < cfg_.backbone.taps.size(); ++t)
      tap_channels.push_back(cfg_.backbone.tap_channels(t));
    concat_ = FeatureConcat(cfg_.concat, tap_channels, rng);
    head_channels = cfg_.concat.out_channels;
  } else {
    pool_ = RoiPoolLayer(static_cast<int>(cfg_.backbone.taps.size()) - 1, P);
  }
  const int in = head_channels * P * P;
  fc_ = Linear("head.fc", in, cfg_.head.hidden);
  cls_ = Linear("head.cls", cfg_.head.hidden, 2);
  box_ = Linear("head.bbox", cfg_.head.hidden, 4);
  he_uniform(fc_.weight().value, in, rng);
  he_uniform(cls_.weight().value, cfg_.head.hidden, rng, 0.1);
  he_uniform(box_.weight().value, cfg_.head.hidden, rng, 0.01);
}

std::vector<Param*> Detector::params() {
  std::vector<Param*> out = backbone_.params();
  for (auto* layer : {&rpn_conv_, &rpn_cls_, &rpn_box_})
    for (Param* p : layer->params()) out.push_back(p);
  if (cfg_.use_concat)
    for (Param* p : concat_.params()) out.push_back(p);
  for (auto* layer : {&fc_, &cls_, &box_})
    for (Param* p : layer->params()) out.push_back(p);
  return out;
}

Detector::RpnOut Detector::run_rpn(const Tensor& padded) {
  RpnOut out;
  out.taps = backbone_.forward(padded);
  const Tensor& top = out.taps.back().map;
  const Tensor r = rpn_relu_.forward(rpn_conv_.forward(top));
  out.cls = rpn_cls_.forward(r);
  out.box = rpn_box_.forward(r);
  out.anchors = generate_anchors(cfg_.anchors, top.w(), top.h());
  return out;
}

std::vector<ScoredRegion> Detector::make_proposals(const RpnOut& out, int width, int height,
                                                   std::size_t pre_k, std::size_t post_k) const {
  const std::size_t A = cfg_.anchors.per_location();
  const Tensor logits = rpn_logits(out.cls, A);
  const Tensor deltas = rpn_deltas(out.box, A);
  std::vector<ScoredRegion> scored;
  scored.reserve(out.anchors.size());
  for (std::size_t k = 0; k < out.anchors.size(); ++k) {
    const int r = static_cast<int>(k);
    const BoxDelta d{deltas.at(r, 0), deltas.at(r, 1), deltas.at(r, 2), deltas.at(r, 3)};
    const BBox b = clip_box(decode_delta(out.anchors[k], clamp_delta(d)), width, height);
    if (b.width() < cfg_.rpn.min_size || b.height() < cfg_.rpn.min_size) continue;
    scored.push_back({b, fg_prob(logits.at(r, 0), logits.at(r, 1))});
  }
  return select_proposals(scored, pre_k, cfg_.rpn.nms, post_k);
}

Tensor Detector::head_features(std::span<const FeatureMap> taps, std::span<const BBox> rois,
                               std::vector<std::size_t>* dropped) {
  if (cfg_.use_concat) return concat_.forward(taps, rois, dropped);
  return pool_.forward(taps, rois);
}

std::vector<Tensor> Detector::head_features_backward(const Tensor& dy) {
  if (cfg_.use_concat) return concat_.backward(dy);
  return pool_.backward(dy);
}

StepStats Detector::train_step(const Tensor& image, const ImageRecord& record,
                               std::span<const HardNegative> hards, const RoiSampling& sampling,
                               const LossWeights& weights, std::mt19937_64& rng) {
  for (Param* p : params()) p->zero_grad();
  StepStats stats;
  const int width = image.w(), height = image.h();
  const Tensor padded = pad_to_multiple(image, cfg_.backbone.max_stride());
  RpnOut out = run_rpn(padded);
  const std::vector<BBox> gts = record.boxes();
  const std::size_t A = cfg_.anchors.per_location();

  // RPN: sample anchors, classify and regress.
  const AnchorLabels labels = label_anchors(out.anchors, gts, cfg_.rpn.pos_iou, cfg_.rpn.neg_iou);
  std::vector<std::size_t> pos, neg;
  for (std::size_t k = 0; k < labels.labels.size(); ++k) {
    if (labels.labels[k] == AnchorLabel::kPositive) pos.push_back(k);
    else if (labels.labels[k] == AnchorLabel::kNegative) neg.push_back(k);
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const auto pos_quota = static_cast<std::size_t>(
      std::lround(static_cast<double>(cfg_.rpn.batch) * cfg_.rpn.fg_fraction));
  pos.resize(std::min(pos.size(), pos_quota));
  neg.resize(std::min(neg.size(), cfg_.rpn.batch - pos.size()));

  const Tensor logits = rpn_logits(out.cls, A);
  const Tensor deltas = rpn_deltas(out.box, A);
  std::vector<std::size_t> chosen = pos;
  chosen.insert(chosen.end(), neg.begin(), neg.end());
  Tensor sel_logits({static_cast<int>(chosen.size()), 2});
  std::vector<int> sel_labels;
  for (std::size_t s = 0; s < chosen.size(); ++s) {
    sel_logits.at(static_cast<int>(s), 0) = logits.at(static_cast<int>(chosen[s]), 0);
    sel_logits.at(static_cast<int>(s), 1) = logits.at(static_cast<int>(chosen[s]), 1);
    sel_labels.push_back(s < pos.size() ? 1 : 0);
  }
  const LossGrad rpn_ce = softmax_ce_loss(sel_logits, sel_labels);
  Tensor pos_pred({static_cast<int>(pos.size()), 4}), pos_target(pos_pred.shape()),
      pos_w(pos_pred.shape(), 1.0);
  for (std::size_t s = 0; s < pos.size(); ++s) {
    const int r = static_cast<int>(s);
    const std::size_t k = pos[s];
    const BoxDelta t = encode_delta(out.anchors[k], gts[static_cast<std::size_t>(labels.matched_gt[k])]);
    const double tv[4] = {t.tx, t.ty, t.tw, t.th};
    for (int c = 0; c < 4; ++c) {
      pos_pred.at(r, c) = deltas.at(static_cast<int>(k), c);
      pos_target.at(r, c) = tv[c];
    }
  }
  const LossGrad rpn_l1 = smooth_l1_loss(pos_pred, pos_target, pos_w);
  stats.loss.rpn_cls = rpn_ce.loss;
  stats.loss.rpn_box = rpn_l1.loss;

  Tensor dlogits(logits.shape()), ddeltas(deltas.shape());
  for (std::size_t s = 0; s < chosen.size(); ++s)
    for (int c = 0; c < 2; ++c)
      dlogits.at(static_cast<int>(chosen[s]), c) = weights.rpn_cls * rpn_ce.grad.at(static_cast<int>(s), c);
  for (std::size_t s = 0; s < pos.size(); ++s)
    for (int c = 0; c < 4; ++c)
      ddeltas.at(static_cast<int>(pos[s]), c) = weights.rpn_box * rpn_l1.grad.at(static_cast<int>(s), c);

  // Head: proposals (treated as constants) plus ground truth, sampled.
  std::vector<BBox> rois;
  for (const auto& p : make_proposals(out, width, height, cfg_.rpn.pre_nms_train,
                                      cfg_.rpn.post_nms_train))
    rois.push_back(std::get<BBox>(p.region));
  rois.insert(rois.end(), gts.begin(), gts.end());
  SampleBatch batch = sample_rois(rois, gts, sampling.fg_iou, sampling.batch, sampling.fg_fraction, rng);
  if (!hards.empty()) batch = inject_hard_negatives(batch, hards, sampling.batch, rng);
  stats.foreground = batch.foreground;
  stats.background = batch.background;
  stats.hard = batch.hard;
  stats.hard_overflow = batch.hard_overflow;

  std::vector<BBox> batch_rois;
  for (const auto& s : batch.samples) batch_rois.push_back(s.roi);
  std::vector<std::size_t> dropped;
  const Tensor feats = head_features(out.taps, batch_rois, &dropped);
  stats.dropped = dropped.size();
  if (cfg_.use_concat) stats.blob_norms = concat_.blob_norms();
  std::vector<const RoiSample*> kept;
  {
    std::size_t d = 0;
    for (std::size_t r = 0; r < batch.samples.size(); ++r) {
      if (d < dropped.size() && dropped[d] == r) {
        ++d;
        continue;
      }
      kept.push_back(&batch.samples[r]);
    }
  }

  std::vector<Tensor> tap_grads(out.taps.size());
  if (!kept.empty()) {
    const int R = static_cast<int>(kept.size());
    const Tensor hidden = fc_relu_.forward(fc_.forward(feats.reshaped({R, static_cast<int>(feats.size()) / R})));
    const Tensor cls = cls_.forward(hidden);
    const Tensor box = box_.forward(hidden);
    std::vector<int> head_labels;
    Tensor target({R, 4}), wts({R, 4});
    for (int r = 0; r < R; ++r) {
      const RoiSample& s = *kept[static_cast<std::size_t>(r)];
      head_labels.push_back(s.label == RoiLabel::kForeground ? 1 : 0);
      if (s.label == RoiLabel::kForeground && s.target) {
        const double tv[4] = {s.target->tx, s.target->ty, s.target->tw, s.target->th};
        for (int c = 0; c < 4; ++c) {
          target.at(r, c) = tv[c] / cfg_.head.target_stds[static_cast<std::size_t>(c)];
          wts.at(r, c) = 1.0;
        }
      }
    }
    LossGrad head_ce = softmax_ce_loss(cls, head_labels);
    LossGrad head_l1 = smooth_l1_loss(box, target, wts);
    stats.loss.head_cls = head_ce.loss;
    stats.loss.head_box = head_l1.loss;
    head_ce.grad *= weights.head_cls;
    head_l1.grad *= weights.head_box;
    Tensor dhidden = cls_.backward(head_ce.grad);
    dhidden += box_.backward(head_l1.grad);
    const Tensor dfeat = fc_.backward(fc_relu_.backward(dhidden)).reshaped(feats.shape());
    tap_grads = head_features_backward(dfeat);
  }

  const Tensor dr = rpn_relu_.backward(
      [&] {
        Tensor g = rpn_cls_.backward(scatter_rows(dlogits, out.cls.shape(), A, 2));
        g += rpn_box_.backward(scatter_rows(ddeltas, out.box.shape(), A, 4));
        return g;
      }());
  const Tensor dtop = rpn_conv_.backward(dr);
  tap_grads.resize(out.taps.size());
  if (tap_grads.back().empty()) tap_grads.back() = dtop;
  else tap_grads.back() += dtop;
  backbone_.backward(tap_grads);

  stats.total = stats.loss.total(weights);
  return stats;
}

std::vector<ScoredRegion> Detector::proposals(const Tensor& image) {
  const Tensor padded = pad_to_multiple(image, cfg_.backbone.max_stride());
  const RpnOut out = run_rpn(padded);
  return make_proposals(out, image.w(), image.h(), cfg_.rpn.pre_nms_test, cfg_.rpn.post_nms_test);
}

std::vector<ScoredRegion> Detector::detect(const Tensor& image, const DetectParams& params) {
  const int width = image.w(), height = image.h();
  const Tensor padded = pad_to_multiple(image, cfg_.backbone.max_stride());
  const RpnOut out = run_rpn(padded);
  const auto props = make_proposals(out, width, height, cfg_.rpn.pre_nms_test, cfg_.rpn.post_nms_test);
  std::vector<BBox> rois;
  for (const auto& p : props) rois.push_back(std::get<BBox>(p.region));
  if (rois.empty()) return {};
  std::vector<std::size_t> dropped;
  const Tensor feats = head_features(out.taps, rois, &dropped);
  std::vector<BBox> kept;
  {
    std::size_t d = 0;
    for (std::size_t r = 0; r < rois.size(); ++r) {
      if (d < dropped.size() && dropped[d] == r) {
        ++d;
        continue;
      }
      kept.push_back(rois[r]);
    }
  }
  if (kept.empty()) return {};
  const int R = static_cast<int>(kept.size());
  const Tensor hidden = fc_relu_.forward(fc_.forward(feats.reshaped({R, static_cast<int>(feats.size()) / R})));
  const Tensor cls = cls_.forward(hidden);
  const Tensor box = box_.forward(hidden);
  std::vector<BBox> boxes;
  std::vector<double> scores;
  const auto& sd = cfg_.head.target_stds;
  for (int r = 0; r < R; ++r) {
    const double score = fg_prob(cls.at(r, 0), cls.at(r, 1));
    if (!(score > params.score_threshold)) continue;
    const BoxDelta d{box.at(r, 0) * sd[0], box.at(r, 1) * sd[1], box.at(r, 2) * sd[2],
                     box.at(r, 3) * sd[3]};
    const BBox b = clip_box(decode_delta(kept[static_cast<std::size_t>(r)], clamp_delta(d)), width, height);
    if (!(b.area() > 0)) continue;
    boxes.push_back(b);
    scores.push_back(score);
  }
  std::vector<ScoredRegion> result;
  for (std::size_t k : nms(boxes, scores, params.nms)) result.push_back({boxes[k], scores[k]});
  return result;
}

}  // namespace fdet
