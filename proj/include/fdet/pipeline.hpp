#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fdet/data.hpp"
#include "fdet/detector.hpp"
#include "fdet/eval.hpp"
#include "fdet/sampling.hpp"
#include "fdet/scaling.hpp"

namespace fdet {

struct StageSchedule {
  int iterations = 500;
  double lr = 0.005;
};

// Full-scale schedules from the original training run; kept for reference and
// printed by `fdet --help`. The desk defaults below replace them.
inline constexpr StageSchedule kFullScalePretrain{110000, 0.0001};
inline constexpr StageSchedule kFullScaleHardNeg{100000, 0.0001};
inline constexpr StageSchedule kFullScaleFinetune{40000, 0.001};

struct TrainerConfig {
  StageSchedule pretrain{550, 0.005};
  StageSchedule hardneg{500, 0.005};
  StageSchedule finetune{200, 0.005};
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool flip = true;
  LossWeights loss_weights;
  /// Iterations between checkpoints (0 = only at stage end).
  int checkpoint_every = 0;
};

struct MiningConfig {
  double score = 0.8;
  double iou = 0.5;
};

struct DetectionConfig {
  double score = 0.8;
  double nms = 0.3;
  double export_floor = 0.001;
};

/// Everything a run needs. Built-in values are the full-scale ones where the
/// original work states them, except the schedules, which are desk-sized;
/// configs/desk.json holds the toy-scale values for 128x128 images.
struct PipelineConfig {
  ModelConfig model;
  ScalePolicy pretrain_scales = ScalePolicy::pretrain();
  ScalePolicy finetune_scales = ScalePolicy::finetune();
  ScalePolicy test_scales = ScalePolicy::pretrain();
  RoiSampling sampling;
  MiningConfig mining;
  DetectionConfig detection;
  TrainerConfig trainer;

  // Ablation switches (all on = the full method).
  bool pretrain_external = true;
  bool hard_negative_mining = true;
  bool multi_scale = true;

  std::uint64_t seed = 7;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Parses a JSON config on top of the built-in defaults. Unknown keys and
/// wrong types are rejected with std::invalid_argument.
PipelineConfig parse_config(std::string_view json_text);
PipelineConfig load_config(const std::filesystem::path& path);
/// Full JSON form (every field) of a config.
std::string config_to_json(const PipelineConfig& cfg);

using LabeledImage = SyntheticImage;

struct TrainLog {
  std::string stage;
  int start_iteration = 0;
  std::vector<LossBreakdown> losses;
  std::vector<double> totals;
  std::size_t blob_checks = 0;
  double max_blob_rel_error = 0;
  std::size_t hard_injected = 0;
  std::size_t hard_overflow = 0;
  double seconds = 0;
};

/// Model plus optimizer state; what a checkpoint holds.
struct TrainState {
  Detector model;
  MomentumSgd optimizer;
  std::string stage;
  int iteration = 0;  // completed iterations of `stage`
};

TrainState make_state(const PipelineConfig& cfg);

/// Weight container with the model parameters, optimizer buffers and the
/// stage position, so a reload continues bit-identically.
void save_checkpoint(const std::filesystem::path& path, TrainState& state);
void load_checkpoint(const std::filesystem::path& path, TrainState& state);

struct StageOptions {
  /// Directory for <stage>.ckpt files; empty disables checkpointing.
  std::filesystem::path checkpoint_dir;
  /// Stop after this many iterations of the stage (to test resuming).
  std::optional<int> stop_after;
  std::function<void(int iteration, const StepStats&)> on_step;
};

/// Joint RPN + head training at the pretrain scale policy. Continues from
/// state.iteration when state.stage is "pretrain". Throws std::runtime_error
/// with the iteration number on a non-finite loss.
TrainLog stage_pretrain(TrainState& state, const PipelineConfig& cfg,
                        std::span<const LabeledImage> data, const StageOptions& opts = {});

/// Detects on every image at the mining score and keeps the detections
/// overlapping no face by `mining.iou` or more.
HardNegativeStore stage_mine(Detector& model, const PipelineConfig& cfg,
                             std::span<const LabeledImage> data, int jobs = 1);

/// Training with hard negatives from `store` injected per image. `stage`
/// names the checkpoint ("hardneg" or "finetune") and picks the schedule;
/// the finetune stage uses the multi-scale policy when cfg.multi_scale.
TrainLog stage_finetune(TrainState& state, const PipelineConfig& cfg,
                        std::span<const LabeledImage> data, const HardNegativeStore& store,
                        const std::string& stage = "finetune", const StageOptions& opts = {});

/// Test-policy resize, detection above `threshold` (cfg.detection.score when
/// unset), boxes mapped back to image coordinates and clipped.
std::vector<ScoredRegion> detect_image(Detector& model, const Tensor& image,
                                       const PipelineConfig& cfg,
                                       std::optional<double> threshold = std::nullopt);

using DetectionList = std::vector<std::pair<std::string, std::vector<ScoredRegion>>>;

/// Per-image detection over a corpus, ordered by image id. `jobs` > 1 runs
/// images in parallel on model copies; the output does not depend on it.
DetectionList detect_corpus(const Detector& model, std::span<const LabeledImage> data,
                            const PipelineConfig& cfg, double threshold, int jobs = 1);

/// Pairs detections with ground truth by image id for the evaluator.
std::vector<ImageEval> make_eval_set(const DetectionList& dets, std::span<const LabeledImage> data,
                                     DetectionMode mode = DetectionMode::kRect);

/// Detections above `score` that overlap no face by `iou` or more.
std::size_t count_false_positives(const DetectionList& dets, std::span<const LabeledImage> data,
                                  double score, double iou);

struct AblationRow {
  int id = 7;
  int anchors = 12;  // 9 drops the smallest anchor size
  bool pretrain_external = true;
  bool hard_negative_mining = true;
  bool feature_concat = true;
  bool multi_scale = true;
};

/// The seven-row ablation grid, IDs 1 to 7.
std::vector<AblationRow> table2_rows();
/// `base` with the row's switches applied; nothing else changes.
PipelineConfig apply_row(const PipelineConfig& base, const AblationRow& row);

struct Corpus {
  std::vector<LabeledImage> external;  // pretraining and mining set
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> test;
};

/// The reference desk corpus: 200 external images with extra distractors,
/// 200 training and 50 test images, all 128x128, from seeds derived from
/// `seed`.
Corpus synthetic_corpus(std::uint64_t seed = 7);
/// Reads <dir>/external, <dir>/train and <dir>/test synthetic sets.
Corpus load_corpus(const std::filesystem::path& dir);
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);

struct RowResult {
  AblationRow row;
  RocPair roc;
  DetectionList detections;  // test set, export floor
  std::vector<TrainLog> logs;
  std::size_t store_size = 0;
  /// False positives at the mining score on the test set, right after
  /// pretraining and at the end of the run.
  std::size_t fp_before = 0;
  std::size_t fp_after = 0;
  double seconds = 0;
};

struct RunOptions {
  int jobs = 1;
  std::filesystem::path out_dir;  // checkpoints, detections, reports; empty = none
  std::function<void(const std::string&)> log;
};

/// Runs one configuration end to end: pretrain (external set when enabled,
/// else the training set), optional mining plus hard-negative training on the
/// same set, finetune on the training set, detect and evaluate the test set.
RowResult run_pipeline(const PipelineConfig& cfg, const Corpus& corpus, const RunOptions& opts = {},
                       const AblationRow& row = {});

/// Runs every row and writes ablation.csv and ablation.svg into opts.out_dir.
std::vector<RowResult> run_ablation(std::span<const AblationRow> rows, const PipelineConfig& base,
                                    const Corpus& corpus, const RunOptions& opts = {});

}  // namespace fdet
