// fdet: command-line front end for the toy face detector.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fdet/data.hpp"
#include "fdet/eval.hpp"
#include "fdet/gradsuite.hpp"
#include "fdet/kernels.hpp"
#include "fdet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fdet;

namespace {

struct ConfigFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
};

void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.config,
                  "Pipeline JSON config; unset fields keep the built-in defaults "
                  "(full-scale values: anchors 64-512 x {1:1,1:2,2:1}, shorter side 600 capped "
                  "at 1000, 2000/100 proposals, fg IoU 0.5 at 1:3, score 0.8, NMS 0.3). "
                  "configs/desk.json holds the 128x128 desk values");
  app->add_option("--seed", f.seed, "Seed for every random choice (overrides the config; default 7)");
  app->add_option("--jobs", f.jobs, "Parallel images during detection; output does not depend on it")
      ->capture_default_str()
      ->check(CLI::Range(1, 256));
}

PipelineConfig resolve_config(const ConfigFlags& f) {
  PipelineConfig cfg = f.config.empty() ? PipelineConfig{} : load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  cfg.validate();
  return cfg;
}

std::vector<LabeledImage> load_set(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::invalid_argument("data directory not found: " + dir);
  if (!fs::exists(fs::path(dir) / "gt.jsonl"))
    throw std::invalid_argument("data directory has no gt.jsonl: " + dir);
  return load_synthetic(dir);
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw std::invalid_argument(std::string(what) + " not found: " + path);
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

std::string loss_csv(const TrainLog& log) {
  std::string s = "iteration,total,rpn_cls,rpn_box,head_cls,head_box\n";
  char buf[256];
  for (std::size_t i = 0; i < log.losses.size(); ++i) {
    const auto& l = log.losses[i];
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<std::size_t>(log.start_iteration) + i, log.totals[i], l.rpn_cls,
                  l.rpn_box, l.head_cls, l.head_box);
    s += buf;
  }
  return s;
}

void report_stage(const TrainLog& log) {
  std::fprintf(stderr, "%s: %zu iterations in %.1f s", log.stage.c_str(), log.totals.size(), log.seconds);
  if (!log.totals.empty())
    std::fprintf(stderr, ", loss %.4f -> %.4f", log.totals.front(), log.totals.back());
  if (log.blob_checks)
    std::fprintf(stderr, ", %zu blob norms, max rel error %.2e", log.blob_checks, log.max_blob_rel_error);
  if (log.hard_injected) std::fprintf(stderr, ", %zu hard negatives injected", log.hard_injected);
  std::fprintf(stderr, "\n");
}

DetectionMode parse_mode(const std::string& m) { return m == "ellipse" ? DetectionMode::kEllipse : DetectionMode::kRect; }

std::vector<ImageRecord> read_annotations(const std::string& path) {
  require_file(path, "annotation file");
  if (fs::path(path).extension() == ".jsonl") return read_ground_truth(path);
  return parse_fddb_ellipses(read_text_file(path));
}

void print_summary(const RocPair& roc, std::size_t images) {
  std::printf("images %zu faces %zu\n", images, roc.total_faces);
  for (double per_image : {0.0, 0.1, 0.5, 1.0}) {
    const double fp = per_image * static_cast<double>(images);
    std::printf("fp<=%g (%.2f/image): discrete %.4f continuous %.4f\n", fp, per_image,
                y_at_false_positives(roc.discrete, fp), y_at_false_positives(roc.continuous, fp));
  }
}

std::vector<int> parse_rows(const std::string& text) {
  std::vector<int> ids;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    int id = 0;
    try {
      id = std::stoi(tok);
    } catch (const std::exception&) {
      throw std::invalid_argument("bad row id '" + tok + "'");
    }
    if (id < 1 || id > 7) throw std::invalid_argument("row ids run from 1 to 7, got " + tok);
    ids.push_back(id);
  }
  return ids;
}

int run(int argc, char** argv) {
  CLI::App app{"fdet: toy multi-stage Faster R-CNN face detector (train, mine, detect, evaluate)"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic face set (or the reference three-way corpus)");
  SynthConfig sc;
  std::string synth_out;
  std::uint64_t synth_seed = 7;
  bool synth_corpus = false;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_flag("--corpus", synth_corpus,
                  "Write external/ (200, 2 distractors per image), train/ (200) and test/ (50) "
                  "subsets of the reference corpus instead of one set");
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--count", sc.count, "Images")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--width", sc.width, "Image width")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--height", sc.height, "Image height")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--min-faces", sc.min_faces, "Fewest faces per image")->capture_default_str();
  synth->add_option("--max-faces", sc.max_faces, "Most faces per image")->capture_default_str();
  synth->add_option("--min-face", sc.min_face, "Smallest face height, pixels")->capture_default_str();
  synth->add_option("--max-face", sc.max_face, "Largest face height, pixels")->capture_default_str();
  synth->add_option("--distractors", sc.distractors, "Mean non-face shapes per image")->capture_default_str();
  synth->add_option("--noise", sc.noise, "Pixel noise amplitude")->capture_default_str();
  synth->add_option("--attribute-rate", sc.attribute_rate,
                    "Probability of each adverse WIDER attribute per face")
      ->capture_default_str();
  synth->add_option("--prefix", sc.id_prefix, "Image id prefix")->capture_default_str();

  // pretrain
  auto* pretrain = app.add_subcommand(
      "pretrain", "Stage 1: joint RPN + head training at the pretrain scale policy "
                  "(full-scale reference: 110000 iterations at lr 0.0001)");
  ConfigFlags pre_flags;
  std::string pre_data, pre_out, pre_resume;
  std::optional<int> pre_iters, pre_stop;
  std::optional<double> pre_lr;
  add_config_flags(pretrain, pre_flags);
  pretrain->add_option("--data", pre_data, "Training set directory (gt.jsonl + images/)")->required();
  pretrain->add_option("--out", pre_out, "Output directory for pretrain.ckpt and pretrain_loss.csv")->required();
  pretrain->add_option("--resume", pre_resume, "Checkpoint to continue from");
  pretrain->add_option("--iterations", pre_iters, "Override trainer.pretrain.iterations (desk default 550)");
  pretrain->add_option("--lr", pre_lr, "Override trainer.pretrain.lr (desk default 0.005)");
  pretrain->add_option("--stop-after", pre_stop, "Stop after this many iterations (the checkpoint can be resumed)");

  // mine
  auto* mine = app.add_subcommand(
      "mine", "Stage 2a: harvest hard negatives (score > mining.score, IoU < mining.iou; "
              "defaults 0.8 and 0.5)");
  ConfigFlags mine_flags;
  std::string mine_data, mine_weights, mine_out;
  add_config_flags(mine, mine_flags);
  mine->add_option("--data", mine_data, "Image set to mine")->required();
  mine->add_option("--weights", mine_weights, "Trained checkpoint")->required();
  mine->add_option("--out", mine_out, "Hard-negative JSON-lines file to write")->required();

  // finetune
  auto* finetune = app.add_subcommand(
      "finetune", "Stage 2b/3: training with hard negatives injected; stage 'hardneg' runs at the "
                  "pretrain scale (reference: 100000 iterations at 0.0001), stage 'finetune' uses "
                  "multi-scale {480,600,750} capped at 1250 when enabled (reference: 40000 at 0.001)");
  ConfigFlags ft_flags;
  std::string ft_data, ft_weights, ft_hard, ft_out, ft_stage = "finetune", ft_resume;
  std::optional<int> ft_iters, ft_stop;
  std::optional<double> ft_lr;
  add_config_flags(finetune, ft_flags);
  finetune->add_option("--data", ft_data, "Training set directory")->required();
  finetune->add_option("--weights", ft_weights, "Starting checkpoint (from pretrain or hardneg)");
  finetune->add_option("--resume", ft_resume, "Checkpoint of this stage to continue from");
  finetune->add_option("--hard", ft_hard, "Hard-negative store from `mine`");
  finetune->add_option("--stage", ft_stage, "hardneg or finetune")
      ->capture_default_str()
      ->check(CLI::IsMember({"hardneg", "finetune"}));
  finetune->add_option("--out", ft_out, "Output directory for <stage>.ckpt and <stage>_loss.csv")->required();
  finetune->add_option("--iterations", ft_iters, "Override the stage's iterations (desk defaults 500/200)");
  finetune->add_option("--lr", ft_lr, "Override the stage's learning rate (desk default 0.005)");
  finetune->add_option("--stop-after", ft_stop, "Stop after this many iterations");

  // detect
  auto* detect = app.add_subcommand(
      "detect", "Detect faces: test-scale resize, 100 proposals, head scores, NMS 0.3, boxes in "
                "image coordinates");
  ConfigFlags det_flags;
  std::string det_data, det_weights, det_out, det_mode = "rect";
  std::optional<double> det_threshold;
  add_config_flags(detect, det_flags);
  detect->add_option("--data", det_data, "Image set directory")->required();
  detect->add_option("--weights", det_weights, "Trained checkpoint")->required();
  detect->add_option("--out", det_out, "Detection file (FDDB submission layout)")->required();
  detect->add_option("--threshold", det_threshold,
                     "Keep scores above this (default: detection.export_floor = 0.001, so the "
                     "ROC can be swept; use 0.8 for the operating point)");
  detect->add_option("--mode", det_mode, "rect or ellipse output")
      ->capture_default_str()
      ->check(CLI::IsMember({"rect", "ellipse"}));

  // eval
  auto* eval = app.add_subcommand("eval", "FDDB-style discrete and continuous ROC");
  std::string ev_dets, ev_ann, ev_out, ev_mode = "rect";
  std::vector<std::string> ev_folds;
  std::optional<std::size_t> ev_expected;
  EvalOptions ev_opts;
  eval->add_option("--detections", ev_dets, "Detection file")->required();
  eval->add_option("--annotations", ev_ann, "gt.jsonl or an FDDB ellipse list")->required();
  eval->add_option("--out", ev_out, "Report directory for roc.csv and roc.svg")->required();
  eval->add_option("--mode", ev_mode, "Detection file layout: rect or ellipse")
      ->capture_default_str()
      ->check(CLI::IsMember({"rect", "ellipse"}));
  eval->add_option("--fold", ev_folds,
                   "Fold listing (one image name per line); repeat per fold to get per-fold "
                   "curves besides the pooled one");
  eval->add_option("--expected-folds", ev_expected, "Fail unless exactly this many --fold files are given");
  eval->add_option("--continuous-floor", ev_opts.continuous_floor,
                   "Matched IoUs at or below this are left out of the continuous score")
      ->capture_default_str();
  eval->add_option("--resolution", ev_opts.resolution, "Raster grid for ellipse IoU")
      ->capture_default_str()
      ->check(CLI::Range(64, 4096));

  // ablate
  auto* ablate = app.add_subcommand(
      "ablate", "Run the seven-row ablation grid (anchors 9/12, external pretraining, hard "
                "negative mining, feature concatenation, multi-scale) end to end");
  ConfigFlags ab_flags;
  std::string ab_data, ab_out, ab_rows = "1,2,3,4,5,6,7";
  add_config_flags(ablate, ab_flags);
  ablate->add_option("--data", ab_data,
                     "Corpus directory with external/, train/ and test/ (default: generate the "
                     "reference corpus in memory from --seed)");
  ablate->add_option("--out", ab_out, "Output directory (per-row reports, ablation.csv/svg)")->required();
  ablate->add_option("--rows", ab_rows, "Comma-separated row ids")->capture_default_str();

  // gradcheck
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "Finite-difference check of every layer and the concatenation head; exit 0 "
                   "iff max relative error < 1e-4");
  GradCheckOptions gc;
  gradcheck->add_option("--eps", gc.eps, "Central-difference step")->capture_default_str()->check(CLI::Range(1e-7, 1e-3));
  gradcheck->add_option("--seed", gc.seed, "Seed for inputs and element sampling")->capture_default_str();
  gradcheck->add_option("--max-per-param", gc.max_per_param, "Elements checked per parameter")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (*synth) {
    if (sc.min_faces < 0 || sc.max_faces < sc.min_faces)
      throw std::invalid_argument("need 0 <= --min-faces <= --max-faces");
    if (synth_corpus) {
      save_corpus(synth_out, synthetic_corpus(synth_seed));
    } else {
      save_synthetic(synth_out, gen_synthetic(sc, synth_seed));
    }
    std::fprintf(stderr, "wrote %s\n", synth_out.c_str());
    return 0;
  }

  if (*pretrain) {
    PipelineConfig cfg = resolve_config(pre_flags);
    if (pre_iters) cfg.trainer.pretrain.iterations = *pre_iters;
    if (pre_lr) cfg.trainer.pretrain.lr = *pre_lr;
    cfg.validate();
    const auto data = load_set(pre_data);
    TrainState st = make_state(cfg);
    if (!pre_resume.empty()) {
      require_file(pre_resume, "checkpoint");
      load_checkpoint(pre_resume, st);
    }
    StageOptions so;
    so.checkpoint_dir = pre_out;
    so.stop_after = pre_stop;
    const TrainLog log = stage_pretrain(st, cfg, data, so);
    write_file(fs::path(pre_out) / "pretrain_loss.csv", loss_csv(log));
    report_stage(log);
    return 0;
  }

  if (*mine) {
    const PipelineConfig cfg = resolve_config(mine_flags);
    const auto data = load_set(mine_data);
    require_file(mine_weights, "checkpoint");
    TrainState st = make_state(cfg);
    load_checkpoint(mine_weights, st);
    const HardNegativeStore store = stage_mine(st.model, cfg, data, mine_flags.jobs);
    if (fs::exists(mine_out)) fs::remove(mine_out);
    store.append_to(mine_out);
    std::fprintf(stderr, "mined %zu hard negatives from %zu images\n", store.size(), data.size());
    return 0;
  }

  if (*finetune) {
    PipelineConfig cfg = resolve_config(ft_flags);
    StageSchedule& sched = ft_stage == "hardneg" ? cfg.trainer.hardneg : cfg.trainer.finetune;
    if (ft_iters) sched.iterations = *ft_iters;
    if (ft_lr) sched.lr = *ft_lr;
    cfg.validate();
    const auto data = load_set(ft_data);
    TrainState st = make_state(cfg);
    if (!ft_resume.empty()) {
      require_file(ft_resume, "checkpoint");
      load_checkpoint(ft_resume, st);
    } else if (!ft_weights.empty()) {
      require_file(ft_weights, "checkpoint");
      load_checkpoint(ft_weights, st);
    }
    HardNegativeStore store;
    if (!ft_hard.empty()) {
      require_file(ft_hard, "hard-negative store");
      store = HardNegativeStore::load(ft_hard);
    }
    StageOptions so;
    so.checkpoint_dir = ft_out;
    so.stop_after = ft_stop;
    const TrainLog log = stage_finetune(st, cfg, data, store, ft_stage, so);
    write_file(fs::path(ft_out) / (ft_stage + "_loss.csv"), loss_csv(log));
    report_stage(log);
    return 0;
  }

  if (*detect) {
    const PipelineConfig cfg = resolve_config(det_flags);
    const auto data = load_set(det_data);
    require_file(det_weights, "checkpoint");
    TrainState st = make_state(cfg);
    load_checkpoint(det_weights, st);
    const double thr = det_threshold.value_or(cfg.detection.export_floor);
    if (!(thr >= 0 && thr <= 1)) throw std::invalid_argument("--threshold must be in [0, 1]");
    const auto dets = detect_corpus(st.model, data, cfg, thr, det_flags.jobs);
    write_file(det_out, serialize_detections(dets, parse_mode(det_mode)));
    std::size_t n = 0;
    for (const auto& d : dets) n += d.second.size();
    std::fprintf(stderr, "%zu detections on %zu images\n", n, dets.size());
    return 0;
  }

  if (*eval) {
    require_file(ev_dets, "detection file");
    const auto dets = parse_detections(read_text_file(ev_dets), parse_mode(ev_mode));
    const auto records = read_annotations(ev_ann);
    std::map<std::string, const ImageRecord*> by_id;
    for (const auto& r : records) by_id[r.id] = &r;
    std::map<std::string, const std::vector<ScoredRegion>*> det_by_id;
    for (const auto& [id, list] : dets) {
      if (!by_id.count(id)) throw std::invalid_argument("detections for unannotated image " + id);
      det_by_id[id] = &list;
    }
    auto image_eval = [&](const ImageRecord& r) {
      ImageEval e{r.id, {}, r.annotations};
      if (auto it = det_by_id.find(r.id); it != det_by_id.end()) e.dets = *it->second;
      return e;
    };
    if (ev_folds.empty()) {
      if (ev_expected && *ev_expected != 1)
        throw std::invalid_argument("--expected-folds " + std::to_string(*ev_expected) + " but no --fold listings");
      std::vector<ImageEval> images;
      for (const auto& r : records) images.push_back(image_eval(r));
      const RocPair roc = compute_roc(images, ev_opts);
      emit_report(roc, ev_out, "roc");
      print_summary(roc, images.size());
      return 0;
    }
    std::vector<std::vector<ImageEval>> folds;
    for (const auto& listing : ev_folds) {
      require_file(listing, "fold listing");
      std::vector<ImageEval> fold;
      std::istringstream in(read_text_file(listing));
      std::string line;
      while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) continue;
        auto it = by_id.find(line);
        if (it == by_id.end()) throw std::invalid_argument(listing + ": image " + line + " is not annotated");
        fold.push_back(image_eval(*it->second));
      }
      folds.push_back(std::move(fold));
    }
    const FoldReport rep = aggregate_folds(folds, ev_expected, ev_opts);
    emit_report(rep.pooled, ev_out, "roc");
    for (std::size_t k = 0; k < rep.per_fold.size(); ++k)
      emit_report(rep.per_fold[k], ev_out, "roc_fold" + std::to_string(k + 1));
    std::size_t n = 0;
    for (const auto& f : folds) n += f.size();
    print_summary(rep.pooled, n);
    return 0;
  }

  if (*ablate) {
    const PipelineConfig cfg = resolve_config(ab_flags);
    const auto ids = parse_rows(ab_rows);
    const Corpus corpus = ab_data.empty() ? synthetic_corpus(cfg.seed) : load_corpus(ab_data);
    std::vector<AblationRow> rows;
    for (int id : ids) rows.push_back(table2_rows()[static_cast<std::size_t>(id - 1)]);
    RunOptions ro;
    ro.jobs = ab_flags.jobs;
    ro.out_dir = ab_out;
    ro.log = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
    const auto results = run_ablation(rows, cfg, corpus, ro);
    const double images = static_cast<double>(corpus.test.size());
    for (const auto& r : results)
      std::printf("ID %d: discrete %.4f continuous %.4f at <= 1 FP/image; FP@%.2f %zu -> %zu (%.1f s)\n",
                  r.row.id, y_at_false_positives(r.roc.discrete, images),
                  y_at_false_positives(r.roc.continuous, images), cfg.mining.score, r.fp_before,
                  r.fp_after, r.seconds);
    return 0;
  }

  if (*gradcheck) {
    const auto cases = gradient_suite(gc);
    std::printf("gradcheck eps=%.1e\n%s", gc.eps, format_suite(cases).c_str());
    return max_rel_error(cases) < 1e-4 ? 0 : 2;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ParseError& e) {
    std::fprintf(stderr, "fdet: input error: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "fdet: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fdet: runtime failure: %s\n", e.what());
    return 2;
  }
}
