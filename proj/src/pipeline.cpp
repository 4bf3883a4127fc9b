#include "fdet/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "fdet/weights.hpp"
#include "json.hpp"

namespace fdet {

using nlohmann::json;

// ---------------------------------------------------------------- config

namespace {

// Walks one JSON object; every key must be consumed exactly by a getter.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw std::invalid_argument(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument(where(key) + ": wrong type");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  ObjectReader sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return ObjectReader(j_.contains(key) ? j_.at(key) : empty, where(key));
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw std::invalid_argument("unknown config key " + where(it.key().c_str()));
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_schedule(ObjectReader r, StageSchedule& s) {
  r.get("iterations", s.iterations);
  r.get("lr", s.lr);
  r.finish();
}

void read_policy(ObjectReader r, ScalePolicy& p) {
  r.get("targets", p.targets);
  r.get("cap", p.cap);
  r.finish();
}

json schedule_json(const StageSchedule& s) { return {{"iterations", s.iterations}, {"lr", s.lr}}; }
json policy_json(const ScalePolicy& p) { return {{"targets", p.targets}, {"cap", p.cap}}; }

void check_unit(double v, const char* name) {
  if (!(v >= 0 && v <= 1)) throw std::invalid_argument(std::string(name) + " must be in [0, 1]");
}

}  // namespace

void PipelineConfig::validate() const {
  model.validate();
  pretrain_scales.validate();
  finetune_scales.validate();
  test_scales.validate();
  check_unit(sampling.fg_iou, "sampling.fg_iou");
  check_unit(sampling.fg_fraction, "sampling.fg_fraction");
  if (sampling.batch < 1) throw std::invalid_argument("sampling.batch must be >= 1");
  check_unit(mining.score, "mining.score");
  check_unit(mining.iou, "mining.iou");
  check_unit(detection.score, "detection.score");
  check_unit(detection.nms, "detection.nms");
  check_unit(detection.export_floor, "detection.export_floor");
  for (const auto& [name, s] : {std::pair{"trainer.pretrain", trainer.pretrain},
                                {"trainer.hardneg", trainer.hardneg},
                                {"trainer.finetune", trainer.finetune}}) {
    if (s.iterations < 1) throw std::invalid_argument(std::string(name) + ".iterations must be >= 1");
    if (!(s.lr > 0)) throw std::invalid_argument(std::string(name) + ".lr must be positive");
  }
  if (!(trainer.momentum >= 0 && trainer.momentum < 1))
    throw std::invalid_argument("trainer.momentum must be in [0, 1)");
  if (!(trainer.weight_decay >= 0)) throw std::invalid_argument("trainer.weight_decay must be >= 0");
  if (trainer.checkpoint_every < 0) throw std::invalid_argument("trainer.checkpoint_every must be >= 0");
  const auto& w = trainer.loss_weights;
  for (double v : {w.rpn_cls, w.rpn_box, w.head_cls, w.head_box})
    if (!(v >= 0)) throw std::invalid_argument("trainer.loss_weights must be >= 0");
}

PipelineConfig parse_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c;
  ObjectReader root(j, "");
  root.get("seed", c.seed);
  {
    auto r = root.sub("switches");
    r.get("pretrain_external", c.pretrain_external);
    r.get("hard_negative_mining", c.hard_negative_mining);
    r.get("feature_concat", c.model.use_concat);
    r.get("multi_scale", c.multi_scale);
    r.finish();
  }
  {
    auto r = root.sub("backbone");
    r.get("input_channels", c.model.backbone.input_channels);
    if (const json* st = r.raw("stages")) {
      if (!st->is_array()) throw std::invalid_argument("backbone.stages: expected an array");
      c.model.backbone.stages.clear();
      for (std::size_t i = 0; i < st->size(); ++i) {
        StageSpec s;
        ObjectReader sr((*st)[i], "backbone.stages[" + std::to_string(i) + "]");
        sr.get("channels", s.channels);
        sr.get("convs", s.convs);
        sr.get("downsample", s.downsample);
        sr.finish();
        c.model.backbone.stages.push_back(s);
      }
    }
    r.get("taps", c.model.backbone.taps);
    r.finish();
  }
  {
    auto r = root.sub("anchors");
    r.get("sizes", c.model.anchors.sizes);
    r.get("ratios", c.model.anchors.ratios);
    r.get("stride", c.model.anchors.stride);
    r.finish();
  }
  {
    auto r = root.sub("rpn");
    auto& p = c.model.rpn;
    r.get("channels", p.channels);
    r.get("batch", p.batch);
    r.get("fg_fraction", p.fg_fraction);
    r.get("pos_iou", p.pos_iou);
    r.get("neg_iou", p.neg_iou);
    r.get("nms", p.nms);
    r.get("pre_nms_train", p.pre_nms_train);
    r.get("post_nms_train", p.post_nms_train);
    r.get("pre_nms_test", p.pre_nms_test);
    r.get("post_nms_test", p.post_nms_test);
    r.get("min_size", p.min_size);
    r.finish();
  }
  {
    auto r = root.sub("head");
    r.get("hidden", c.model.head.hidden);
    r.get("target_stds", c.model.head.target_stds);
    r.finish();
  }
  {
    auto r = root.sub("concat");
    r.get("taps", c.model.concat.taps);
    r.get("pooled", c.model.concat.pooled);
    r.get("target_norm", c.model.concat.target_norm);
    r.get("out_channels", c.model.concat.out_channels);
    r.finish();
  }
  {
    auto r = root.sub("scales");
    read_policy(r.sub("pretrain"), c.pretrain_scales);
    read_policy(r.sub("finetune"), c.finetune_scales);
    read_policy(r.sub("test"), c.test_scales);
    r.finish();
  }
  {
    auto r = root.sub("sampling");
    r.get("fg_iou", c.sampling.fg_iou);
    r.get("fg_fraction", c.sampling.fg_fraction);
    r.get("batch", c.sampling.batch);
    r.finish();
  }
  {
    auto r = root.sub("mining");
    r.get("score", c.mining.score);
    r.get("iou", c.mining.iou);
    r.finish();
  }
  {
    auto r = root.sub("detection");
    r.get("score", c.detection.score);
    r.get("nms", c.detection.nms);
    r.get("export_floor", c.detection.export_floor);
    r.finish();
  }
  {
    auto r = root.sub("trainer");
    auto& t = c.trainer;
    read_schedule(r.sub("pretrain"), t.pretrain);
    read_schedule(r.sub("hardneg"), t.hardneg);
    read_schedule(r.sub("finetune"), t.finetune);
    r.get("momentum", t.momentum);
    r.get("weight_decay", t.weight_decay);
    r.get("flip", t.flip);
    r.get("checkpoint_every", t.checkpoint_every);
    auto lw = r.sub("loss_weights");
    lw.get("rpn_cls", t.loss_weights.rpn_cls);
    lw.get("rpn_box", t.loss_weights.rpn_box);
    lw.get("head_cls", t.loss_weights.head_cls);
    lw.get("head_box", t.loss_weights.head_box);
    lw.finish();
    r.finish();
  }
  root.raw("reference");  // informational only
  root.finish();
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::invalid_argument("config file not found: " + path.string());
  try {
    return parse_config(read_text_file(path));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

std::string config_to_json(const PipelineConfig& c) {
  json stages = json::array();
  for (const auto& s : c.model.backbone.stages)
    stages.push_back({{"channels", s.channels}, {"convs", s.convs}, {"downsample", s.downsample}});
  const auto& p = c.model.rpn;
  const auto& t = c.trainer;
  json j = {
      {"seed", c.seed},
      {"switches",
       {{"pretrain_external", c.pretrain_external},
        {"hard_negative_mining", c.hard_negative_mining},
        {"feature_concat", c.model.use_concat},
        {"multi_scale", c.multi_scale}}},
      {"backbone",
       {{"input_channels", c.model.backbone.input_channels},
        {"stages", stages},
        {"taps", c.model.backbone.taps}}},
      {"anchors",
       {{"sizes", c.model.anchors.sizes},
        {"ratios", c.model.anchors.ratios},
        {"stride", c.model.anchors.stride}}},
      {"rpn",
       {{"channels", p.channels},
        {"batch", p.batch},
        {"fg_fraction", p.fg_fraction},
        {"pos_iou", p.pos_iou},
        {"neg_iou", p.neg_iou},
        {"nms", p.nms},
        {"pre_nms_train", p.pre_nms_train},
        {"post_nms_train", p.post_nms_train},
        {"pre_nms_test", p.pre_nms_test},
        {"post_nms_test", p.post_nms_test},
        {"min_size", p.min_size}}},
      {"head", {{"hidden", c.model.head.hidden}, {"target_stds", c.model.head.target_stds}}},
      {"concat",
       {{"taps", c.model.concat.taps},
        {"pooled", c.model.concat.pooled},
        {"target_norm", c.model.concat.target_norm},
        {"out_channels", c.model.concat.out_channels}}},
      {"scales",
       {{"pretrain", policy_json(c.pretrain_scales)},
        {"finetune", policy_json(c.finetune_scales)},
        {"test", policy_json(c.test_scales)}}},
      {"sampling",
       {{"fg_iou", c.sampling.fg_iou},
        {"fg_fraction", c.sampling.fg_fraction},
        {"batch", c.sampling.batch}}},
      {"mining", {{"score", c.mining.score}, {"iou", c.mining.iou}}},
      {"detection",
       {{"score", c.detection.score},
        {"nms", c.detection.nms},
        {"export_floor", c.detection.export_floor}}},
      {"trainer",
       {{"pretrain", schedule_json(t.pretrain)},
        {"hardneg", schedule_json(t.hardneg)},
        {"finetune", schedule_json(t.finetune)},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"flip", t.flip},
        {"checkpoint_every", t.checkpoint_every},
        {"loss_weights",
         {{"rpn_cls", t.loss_weights.rpn_cls},
          {"rpn_box", t.loss_weights.rpn_box},
          {"head_cls", t.loss_weights.head_cls},
          {"head_box", t.loss_weights.head_box}}}}},
      {"reference",
       {{"pretrain", schedule_json(kFullScalePretrain)},
        {"hardneg", schedule_json(kFullScaleHardNeg)},
        {"finetune", schedule_json(kFullScaleFinetune)}}},
  };
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------- training

namespace {

int stage_code(const std::string& stage) {
  if (stage == "pretrain") return 1;
  if (stage == "hardneg") return 2;
  if (stage == "finetune") return 3;
  throw std::invalid_argument("unknown training stage '" + stage + "'");
}

std::string stage_name(int code) {
  switch (code) {
    case 0: return "";
    case 1: return "pretrain";
    case 2: return "hardneg";
    case 3: return "finetune";
  }
  throw std::runtime_error("checkpoint holds unknown stage code " + std::to_string(code));
}

std::mt19937_64 iteration_rng(std::uint64_t seed, int stage, int iteration, int salt = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(iteration),
                    static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

struct CheckpointParams {
  std::vector<Param> velocity;
  Param state{"trainer.state", Tensor({2})};
  std::vector<Param*> all;
};

CheckpointParams checkpoint_params(TrainState& st) {
  CheckpointParams cp;
  auto model = st.model.params();
  auto& vel = st.optimizer.velocity();
  for (std::size_t k = 0; k < model.size(); ++k)
    cp.velocity.emplace_back("optimizer." + model[k]->name,
                             vel.empty() ? Tensor(model[k]->value.shape()) : vel[k]);
  cp.all = model;
  for (auto& v : cp.velocity) cp.all.push_back(&v);
  cp.all.push_back(&cp.state);
  return cp;
}

struct StageRun {
  std::string stage;
  StageSchedule schedule;
  const ScalePolicy* policy = nullptr;
  const HardNegativeStore* store = nullptr;
};

TrainLog train(TrainState& st, const PipelineConfig& cfg, std::span<const LabeledImage> data,
               const StageRun& run, const StageOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  const int code = stage_code(run.stage);
  if (st.stage != run.stage) {
    st.stage = run.stage;
    st.iteration = 0;
    st.optimizer = MomentumSgd(cfg.trainer.momentum, cfg.trainer.weight_decay);
  }
  TrainLog log;
  log.stage = run.stage;
  log.start_iteration = st.iteration;

  std::vector<ImageRecord> records;
  for (const auto& d : data) records.push_back(d.record);
  const auto filtered = filter_records(records);
  std::map<std::string, const Tensor*> images;
  for (const auto& d : data) images[d.record.id] = &d.image;
  if (filtered.empty()) throw std::invalid_argument(run.stage + ": no trainable images after filtering");
  const int N = static_cast<int>(filtered.size());

  auto params = st.model.params();
  std::vector<int> perm;
  int perm_epoch = -1;
  const double target_norm = cfg.model.concat.target_norm;
  int done = 0;
  for (int it = st.iteration; it < run.schedule.iterations; ++it) {
    if (opts.stop_after && done >= *opts.stop_after) break;
    const int epoch = it / N;
    if (epoch != perm_epoch) {
      perm.resize(static_cast<std::size_t>(N));
      std::iota(perm.begin(), perm.end(), 0);
      auto prng = iteration_rng(cfg.seed, code, epoch, 1);
      std::shuffle(perm.begin(), perm.end(), prng);
      perm_epoch = epoch;
    }
    const ImageRecord& rec0 = filtered[static_cast<std::size_t>(perm[static_cast<std::size_t>(it % N)])];
    const Tensor& img0 = *images.at(rec0.id);
    auto rng = iteration_rng(cfg.seed, code, it);

    const double f = choose_scale(img0.w(), img0.h(), *run.policy, rng);
    Tensor img = resize_image(img0, f);
    ImageRecord rec = scale_record(rec0, f);
    rec.width = img.w();
    rec.height = img.h();
    bool flipped = false;
    if (cfg.trainer.flip && std::bernoulli_distribution(0.5)(rng)) {
      auto [fi, fr] = hflip(img, rec);
      img = std::move(fi);
      rec = std::move(fr);
      flipped = true;
    }
    std::vector<HardNegative> hards;
    if (run.store)
      for (const auto& h : run.store->for_image(rec0.id)) {
        BBox b(h.roi.x1 * f, h.roi.y1 * f, h.roi.x2 * f, h.roi.y2 * f);
        if (flipped) b = BBox(img.w() - b.x2, b.y1, img.w() - b.x1, b.y2);
        b = clip_box(b, img.w(), img.h());
        if (b.area() > 0) hards.push_back({b, h.score, h.image_id});
      }

    const StepStats stats =
        st.model.train_step(img, rec, hards, cfg.sampling, cfg.trainer.loss_weights, rng);
    if (!std::isfinite(stats.total))
      throw std::runtime_error(run.stage + " diverged at iteration " + std::to_string(it) +
                               " (non-finite loss)");
    st.optimizer.step(params, run.schedule.lr);
    st.iteration = it + 1;
    ++done;

    log.losses.push_back(stats.loss);
    log.totals.push_back(stats.total);
    log.hard_injected += stats.hard;
    log.hard_overflow += stats.hard_overflow;
    for (double n : stats.blob_norms) {
      ++log.blob_checks;
      log.max_blob_rel_error = std::max(log.max_blob_rel_error, std::abs(n - target_norm) / target_norm);
    }
    if (opts.on_step) opts.on_step(it, stats);
    if (!opts.checkpoint_dir.empty() && cfg.trainer.checkpoint_every > 0 &&
        st.iteration % cfg.trainer.checkpoint_every == 0)
      save_checkpoint(opts.checkpoint_dir / (run.stage + ".ckpt"), st);
  }
  if (!opts.checkpoint_dir.empty()) save_checkpoint(opts.checkpoint_dir / (run.stage + ".ckpt"), st);
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

}  // namespace

TrainState make_state(const PipelineConfig& cfg) {
  cfg.validate();
  return TrainState{Detector(cfg.model, cfg.seed),
                    MomentumSgd(cfg.trainer.momentum, cfg.trainer.weight_decay), "", 0};
}

void save_checkpoint(const std::filesystem::path& path, TrainState& state) {
  auto cp = checkpoint_params(state);
  cp.state.value[0] = state.iteration;
  cp.state.value[1] = state.stage.empty() ? 0 : stage_code(state.stage);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_weights(path, cp.all);
}

void load_checkpoint(const std::filesystem::path& path, TrainState& state) {
  auto cp = checkpoint_params(state);
  load_weights(path, cp.all);
  state.iteration = static_cast<int>(cp.state.value[0]);
  state.stage = stage_name(static_cast<int>(cp.state.value[1]));
  auto& vel = state.optimizer.velocity();
  vel.clear();
  bool any = false;
  for (const auto& v : cp.velocity) any = any || v.value.frobenius_norm() > 0;
  if (any)
    for (auto& v : cp.velocity) vel.push_back(std::move(v.value));
}

TrainLog stage_pretrain(TrainState& state, const PipelineConfig& cfg,
                        std::span<const LabeledImage> data, const StageOptions& opts) {
  return train(state, cfg, data, {"pretrain", cfg.trainer.pretrain, &cfg.pretrain_scales, nullptr}, opts);
}

TrainLog stage_finetune(TrainState& state, const PipelineConfig& cfg,
                        std::span<const LabeledImage> data, const HardNegativeStore& store,
                        const std::string& stage, const StageOptions& opts) {
  if (stage == "hardneg")
    return train(state, cfg, data, {"hardneg", cfg.trainer.hardneg, &cfg.pretrain_scales, &store}, opts);
  if (stage != "finetune") throw std::invalid_argument("stage_finetune: unknown stage '" + stage + "'");
  const ScalePolicy* policy = cfg.multi_scale ? &cfg.finetune_scales : &cfg.pretrain_scales;
  return train(state, cfg, data, {"finetune", cfg.trainer.finetune, policy, &store}, opts);
}

// ---------------------------------------------------------------- detection

std::vector<ScoredRegion> detect_image(Detector& model, const Tensor& image, const PipelineConfig& cfg,
                                       std::optional<double> threshold) {
  const double f =
      scale_for_target(image.w(), image.h(), cfg.test_scales.targets.front(), cfg.test_scales.cap);
  const Tensor scaled = resize_image(image, f);
  const auto dets =
      model.detect(scaled, {threshold.value_or(cfg.detection.score), cfg.detection.nms});
  std::vector<ScoredRegion> out;
  for (const auto& d : dets) {
    const BBox& b = std::get<BBox>(d.region);
    const BBox m = clip_box(BBox(b.x1 / f, b.y1 / f, b.x2 / f, b.y2 / f), image.w(), image.h());
    if (m.area() > 0) out.push_back({m, d.score});
  }
  return out;
}

DetectionList detect_corpus(const Detector& model, std::span<const LabeledImage> data,
                            const PipelineConfig& cfg, double threshold, int jobs) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return data[a].record.id < data[b].record.id; });
  DetectionList out(data.size());
  const int n = static_cast<int>(order.size());
  if (jobs <= 1) {
    Detector local = model;
    for (int i = 0; i < n; ++i) {
      const auto& d = data[order[static_cast<std::size_t>(i)]];
      out[static_cast<std::size_t>(i)] = {d.record.id, detect_image(local, d.image, cfg, threshold)};
    }
    return out;
  }
  std::exception_ptr error;
#pragma omp parallel num_threads(jobs)
  {
    Detector local = model;
#pragma omp for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
      try {
        const auto& d = data[order[static_cast<std::size_t>(i)]];
        out[static_cast<std::size_t>(i)] = {d.record.id, detect_image(local, d.image, cfg, threshold)};
      } catch (...) {
#pragma omp critical
        if (!error) error = std::current_exception();
      }
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

std::vector<ImageEval> make_eval_set(const DetectionList& dets, std::span<const LabeledImage> data,
                                     DetectionMode mode) {
  std::map<std::string, const ImageRecord*> by_id;
  for (const auto& d : data) by_id[d.record.id] = &d.record;
  std::vector<ImageEval> out;
  for (const auto& [id, list] : dets) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw std::invalid_argument("detections for unknown image " + id);
    ImageEval e{id, {}, it->second->annotations};
    for (const auto& d : list) {
      if (mode == DetectionMode::kEllipse && std::holds_alternative<BBox>(d.region))
        e.dets.push_back({box_to_ellipse(std::get<BBox>(d.region)), d.score});
      else
        e.dets.push_back(d);
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::size_t count_false_positives(const DetectionList& dets, std::span<const LabeledImage> data,
                                  double score, double iou) {
  std::map<std::string, const ImageRecord*> by_id;
  for (const auto& d : data) by_id[d.record.id] = &d.record;
  std::size_t n = 0;
  for (const auto& [id, list] : dets) {
    const auto boxes = by_id.at(id)->boxes();
    n += mine_hard_negatives(list, boxes, score, iou, id).size();
  }
  return n;
}

HardNegativeStore stage_mine(Detector& model, const PipelineConfig& cfg,
                             std::span<const LabeledImage> data, int jobs) {
  HardNegativeStore store;
  const auto dets = detect_corpus(model, data, cfg, cfg.mining.score, jobs);
  std::map<std::string, const ImageRecord*> by_id;
  for (const auto& d : data) by_id[d.record.id] = &d.record;
  for (const auto& [id, list] : dets) {
    const auto boxes = by_id.at(id)->boxes();
    for (auto& h : mine_hard_negatives(list, boxes, cfg.mining.score, cfg.mining.iou, id)) store.add(h);
  }
  return store;
}

// ---------------------------------------------------------------- corpus

Corpus synthetic_corpus(std::uint64_t seed) {
  Corpus c;
  SynthConfig sc;
  sc.id_prefix = "ext";
  sc.distractors = 2.0;
  c.external = gen_synthetic(sc, seed * 3 + 1);
  sc.id_prefix = "train";
  sc.distractors = 1.0;
  c.train = gen_synthetic(sc, seed * 3 + 2);
  sc.id_prefix = "test";
  sc.count = 50;
  c.test = gen_synthetic(sc, seed * 3 + 3);
  return c;
}

Corpus load_corpus(const std::filesystem::path& dir) {
  for (const char* part : {"external", "train", "test"})
    if (!std::filesystem::is_directory(dir / part))
      throw std::invalid_argument("corpus directory " + (dir / part).string() + " not found");
  return {load_synthetic(dir / "external"), load_synthetic(dir / "train"), load_synthetic(dir / "test")};
}

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  save_synthetic(dir / "external", corpus.external);
  save_synthetic(dir / "train", corpus.train);
  save_synthetic(dir / "test", corpus.test);
}

// ---------------------------------------------------------------- ablation

std::vector<AblationRow> table2_rows() {
  return {
      {1, 9, false, false, false, false},  {2, 12, false, false, false, false},
      {3, 12, false, false, true, false},  {4, 12, true, false, false, false},
      {5, 12, true, true, false, false},   {6, 12, true, true, true, false},
      {7, 12, true, true, true, true},
  };
}

PipelineConfig apply_row(const PipelineConfig& base, const AblationRow& row) {
  PipelineConfig c = base;
  auto& a = c.model.anchors;
  std::sort(a.sizes.begin(), a.sizes.end());
  while (a.sizes.size() > 1 && a.per_location() > static_cast<std::size_t>(row.anchors))
    a.sizes.erase(a.sizes.begin());
  if (a.per_location() != static_cast<std::size_t>(row.anchors))
    throw std::invalid_argument("ablation row " + std::to_string(row.id) + " wants " +
                                std::to_string(row.anchors) + " anchors; the base config has " +
                                std::to_string(base.model.anchors.per_location()));
  c.pretrain_external = row.pretrain_external;
  c.hard_negative_mining = row.hard_negative_mining;
  c.model.use_concat = row.feature_concat;
  c.multi_scale = row.multi_scale;
  return c;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

std::string row_label(const AblationRow& r) { return "ID " + std::to_string(r.id); }

}  // namespace

RowResult run_pipeline(const PipelineConfig& cfg, const Corpus& corpus, const RunOptions& opts,
                       const AblationRow& row) {
  const auto t0 = std::chrono::steady_clock::now();
  auto say = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };
  RowResult res;
  res.row = row;
  TrainState state = make_state(cfg);
  StageOptions so;
  if (!opts.out_dir.empty()) so.checkpoint_dir = opts.out_dir / "checkpoints";
  const auto& pre_set = cfg.pretrain_external ? corpus.external : corpus.train;

  res.logs.push_back(stage_pretrain(state, cfg, pre_set, so));
  say("pretrain: " + std::to_string(res.logs.back().totals.size()) + " iterations, " +
      std::to_string(res.logs.back().seconds) + " s");
  res.fp_before = count_false_positives(
      detect_corpus(state.model, corpus.test, cfg, cfg.mining.score, opts.jobs), corpus.test,
      cfg.mining.score, cfg.mining.iou);

  HardNegativeStore store;
  if (cfg.hard_negative_mining) {
    store = stage_mine(state.model, cfg, pre_set, opts.jobs);
    // the finetune set is mined too, so its stage has negatives to inject
    if (&pre_set != &corpus.train) {
      const HardNegativeStore more = stage_mine(state.model, cfg, corpus.train, opts.jobs);
      for (const auto& [id, list] : more.all())
        for (const auto& h : list) store.add(h);
    }
    res.store_size = store.size();
    say("mine: " + std::to_string(store.size()) + " hard negatives");
    if (!opts.out_dir.empty()) {
      std::filesystem::remove(opts.out_dir / "hard_negatives.jsonl");
      store.append_to(opts.out_dir / "hard_negatives.jsonl");
    }
    res.logs.push_back(stage_finetune(state, cfg, pre_set, store, "hardneg", so));
    say("hardneg: " + std::to_string(res.logs.back().seconds) + " s");
  }
  res.logs.push_back(stage_finetune(state, cfg, corpus.train, store, "finetune", so));
  say("finetune: " + std::to_string(res.logs.back().seconds) + " s");

  res.detections = detect_corpus(state.model, corpus.test, cfg, cfg.detection.export_floor, opts.jobs);
  res.fp_after = count_false_positives(res.detections, corpus.test, cfg.mining.score, cfg.mining.iou);
  res.roc = compute_roc(make_eval_set(res.detections, corpus.test));
  if (!opts.out_dir.empty()) {
    write_text(opts.out_dir / "detections.txt", serialize_detections(res.detections, DetectionMode::kRect));
    emit_report(res.roc, opts.out_dir, "roc");
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

std::vector<RowResult> run_ablation(std::span<const AblationRow> rows, const PipelineConfig& base,
                                    const Corpus& corpus, const RunOptions& opts) {
  std::vector<RowResult> results;
  for (const auto& row : rows) {
    RunOptions ro = opts;
    if (!opts.out_dir.empty()) ro.out_dir = opts.out_dir / ("row" + std::to_string(row.id));
    if (opts.log) opts.log("== " + row_label(row));
    results.push_back(run_pipeline(apply_row(base, row), corpus, ro, row));
  }
  if (!opts.out_dir.empty()) {
    const double images = static_cast<double>(corpus.test.size());
    std::string csv =
        "id,anchors,pretrain_external,hard_negative_mining,feature_concat,multi_scale,"
        "discrete_tpr_at_1fp_per_image,continuous_at_1fp_per_image,fp_before,fp_after\n";
    std::vector<std::pair<std::string, RocPair>> curves;
    for (const auto& r : results) {
      char buf[512];
      std::snprintf(buf, sizeof(buf), "%d,%d,%d,%d,%d,%d,%.6f,%.6f,%zu,%zu\n", r.row.id,
                    r.row.anchors, r.row.pretrain_external, r.row.hard_negative_mining,
                    r.row.feature_concat, r.row.multi_scale,
                    y_at_false_positives(r.roc.discrete, images),
                    y_at_false_positives(r.roc.continuous, images), r.fp_before, r.fp_after);
      csv += buf;
      curves.emplace_back(row_label(r.row), r.roc);
    }
    write_text(opts.out_dir / "ablation.csv", csv);
    write_text(opts.out_dir / "ablation.svg", roc_svg(curves));
  }
  return results;
}

}  // namespace fdet
