#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fdet/geometry.hpp"
#include "fdet/tensor.hpp"

namespace fdet {

enum class Blur { kNone = 0, kNormal = 1, kHeavy = 2 };
enum class Expression { kTypical = 0, kExtreme = 1 };
enum class Illumination { kNormal = 0, kExtreme = 1 };
enum class Occlusion { kNone = 0, kPartial = 1, kHeavy = 2 };
enum class Pose { kTypical = 0, kAtypical = 1 };

/// WIDER FACE per-face attribute flags.
struct FaceAttributes {
  Blur blur = Blur::kNone;
  Expression expression = Expression::kTypical;
  Illumination illumination = Illumination::kNormal;
  Occlusion occlusion = Occlusion::kNone;
  Pose pose = Pose::kTypical;
  bool invalid = false;

  friend bool operator==(const FaceAttributes&, const FaceAttributes&) = default;
};

struct Annotation {
  Region region;
  std::optional<FaceAttributes> attributes;  // WIDER source only

  BBox box() const { return bounding_box(region); }
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// Width/height are 0 when the source format does not carry them.
struct ImageRecord {
  std::string id;
  int width = 0;
  int height = 0;
  std::vector<Annotation> annotations;

  std::vector<BBox> boxes() const;
  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct FoldSplit {
  int fold = 1;  // 1-based
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

/// Input format error carrying the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Additive difficulty: normal blur 0.5, heavy blur 1, extreme expression 1,
/// extreme illumination 1, partial occlusion 0.5, heavy occlusion 1,
/// atypical pose 1.
double difficulty(const FaceAttributes& attrs);

inline constexpr double kMaxDifficulty = 2.0;
inline constexpr std::size_t kMaxAnnotationsPerImage = 1000;

/// Drops annotations with difficulty > 2, then images with more than 1000
/// remaining annotations or none at all. Annotations without attributes count
/// as difficulty 0.
std::vector<ImageRecord> filter_records(std::span<const ImageRecord> records);

/// WIDER layout: path line, count line, then per face
/// "x y w h blur expression illumination invalid occlusion pose".
/// Invalid faces are dropped.
std::vector<ImageRecord> parse_wider(std::string_view text);
std::string serialize_wider(std::span<const ImageRecord> records);

/// FDDB ellipse list: name line, count line, then per face
/// "major_radius minor_radius angle center_x center_y score" (score ignored).
std::vector<ImageRecord> parse_fddb_ellipses(std::string_view text);
/// Orders the ellipse records by a fold listing (one image name per line).
/// An empty listing keeps ellipse-file order.
std::vector<ImageRecord> parse_fddb(std::string_view folds_text, std::string_view ellipse_text);
std::string serialize_fddb(std::span<const ImageRecord> records);

/// Seeded image-level partition into k near-equal test sets.
std::vector<FoldSplit> make_folds(std::span<const ImageRecord> records, int k,
                                  std::mt19937_64& rng);
/// Folds taken verbatim from external listings (one list of ids per fold).
std::vector<FoldSplit> make_folds(std::span<const ImageRecord> records,
                                  std::span<const std::vector<std::string>> listings);

struct SynthConfig {
  int count = 200;
  int width = 128;
  int height = 128;
  int min_faces = 1;
  int max_faces = 3;
  double min_face = 24;  // bounding-box height range, pixels
  double max_face = 56;
  /// Expected number of non-face distractor shapes per image.
  double distractors = 1.0;
  double noise = 0.04;
  /// Probability of each adverse WIDER attribute on a synthetic face.
  double attribute_rate = 0.08;
  std::string id_prefix = "synth";
};

struct SyntheticImage {
  ImageRecord record;  // ellipse annotations carrying WIDER-style attributes
  Tensor image;        // (1, 1, H, W), values k/255
};

/// Textured noise background with bright elliptical "faces" (two dark eyes
/// and a mouth) plus eyeless blobs, rings and bars as distractors.
/// Deterministic per seed.
std::vector<SyntheticImage> gen_synthetic(const SynthConfig& cfg, std::uint64_t seed);

/// Binary PGM (P5) or PPM (P6, averaged to gray), values mapped to [0, 1].
Tensor read_pnm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor& image);

/// Ground-truth JSON lines: {"id","width","height","faces":[{"ellipse":
/// [major,minor,angle,cx,cy]} | {"box":[x1,y1,x2,y2]}, optional "attributes"]}.
void write_ground_truth(const std::filesystem::path& path, std::span<const ImageRecord> records);
std::vector<ImageRecord> read_ground_truth(const std::filesystem::path& path);

/// Persists a synthetic set: images/<id>.pgm, gt.jsonl, wider.txt and
/// fddb-ellipseList.txt under `dir`.
void save_synthetic(const std::filesystem::path& dir, std::span<const SyntheticImage> data);
std::vector<SyntheticImage> load_synthetic(const std::filesystem::path& dir);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace fdet
