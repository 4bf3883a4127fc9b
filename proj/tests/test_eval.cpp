#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "doctest.h"
#include "fdet/eval.hpp"
#include "oracles.hpp"

using namespace fdet;
namespace fs = std::filesystem;

namespace {

std::string fixture(const std::string& name) { return read_text_file(fs::path(FDET_FIXTURES) / name); }

std::vector<std::vector<double>> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng,
                                               double zero_rate = 0.3) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::vector<double>> m(r, std::vector<double>(c));
  for (auto& row : m)
    for (auto& v : row) v = u(rng) < zero_rate ? 0.0 : u(rng);
  return m;
}

double assigned_total(const std::vector<std::vector<double>>& w, const std::vector<int>& a) {
  double t = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] >= 0) t += w[i][static_cast<std::size_t>(a[i])];
  return t;
}

// Random rect scene: gts plus detections that jitter some of them, a few
// duplicates and a few strays.
ImageEval random_scene(std::mt19937_64& rng, const std::string& id) {
  ImageEval im;
  im.id = id;
  std::uniform_real_distribution<double> u(0, 1);
  const int n_gt = 1 + static_cast<int>(rng() % 4);
  for (int g = 0; g < n_gt; ++g) im.gts.push_back({oracle::random_box(rng, 200, 60), std::nullopt});
  for (const auto& g : im.gts) {
    const BBox b = g.box();
    const int copies = static_cast<int>(rng() % 3);
    for (int c = 0; c < copies; ++c) {
      const double j = 0.3 * b.width() * (u(rng) - 0.5);
      im.dets.push_back({BBox(b.x1 + j, b.y1 + j, b.x2 + j, b.y2 + j), u(rng)});
    }
  }
  const int strays = static_cast<int>(rng() % 3);
  for (int s = 0; s < strays; ++s) im.dets.push_back({oracle::random_box(rng, 200, 60), u(rng)});
  return im;
}

}  // namespace

TEST_CASE("assignment equals brute force and beats greedy") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t r = 1 + rng() % 6, c = 1 + rng() % 6;
    const auto w = random_matrix(r, c, rng);
    for (double min_w : {1e-6, 0.3}) {
      const auto a = max_weight_assignment(w, min_w);
      REQUIRE(a.size() == r);
      std::vector<int> used(c, 0);
      for (int j : a)
        if (j >= 0) {
          CHECK(++used[static_cast<std::size_t>(j)] == 1);
        }
      for (std::size_t i = 0; i < r; ++i)
        if (a[i] >= 0) CHECK(w[i][static_cast<std::size_t>(a[i])] >= min_w);
      const double best = oracle::best_assignment(w, min_w);
      CHECK(assigned_total(w, a) == doctest::Approx(best).epsilon(1e-12));
      CHECK(assigned_total(w, a) >= oracle::greedy_assignment(w, min_w) - 1e-12);
    }
  }
  CHECK(max_weight_assignment({}, 0.1).empty());
}

TEST_CASE("greedy can lose to the optimal matching") {
  // greedy takes 0.9 and is left with 0.1; optimal pairs 0.8 + 0.7
  const std::vector<std::vector<double>> w{{0.9, 0.8}, {0.7, 0.1}};
  CHECK(assigned_total(w, max_weight_assignment(w, 1e-6)) == doctest::Approx(1.5));
  CHECK(oracle::greedy_assignment(w, 1e-6) == doctest::Approx(1.0));
}

TEST_CASE("matching detections") {
  const std::vector<ScoredRegion> dets{{BBox(0, 0, 10, 10), 0.9}, {BBox(100, 100, 110, 110), 0.8},
                                       {BBox(1, 0, 11, 10), 0.7}};
  const std::vector<Annotation> gts{{BBox(0, 0, 10, 10), std::nullopt}, {BBox(50, 0, 60, 10), std::nullopt}};
  const auto m = match_detections(dets, gts);
  REQUIRE(m.pairs.size() == 1);
  CHECK(m.pairs[0].det == 0);
  CHECK(m.pairs[0].iou == 1.0);
  CHECK(m.unmatched_dets == std::vector<std::size_t>{1, 2});
  CHECK(m.unmatched_gts == std::vector<std::size_t>{1});
}

TEST_CASE("ground truth as detections gives a perfect curve") {
  std::mt19937_64 rng(2);
  std::vector<ImageEval> images;
  for (int k = 0; k < 20; ++k) {
    auto im = random_scene(rng, "img" + std::to_string(k));
    im.dets.clear();
    for (const auto& g : im.gts) im.dets.push_back({g.region, 0.5 + 0.01 * k});
    images.push_back(im);
  }
  const auto roc = compute_roc(images);
  CHECK(roc.discrete.points.back().y == doctest::Approx(1.0));
  CHECK(roc.continuous.points.back().y == doctest::Approx(1.0));
  for (const auto& p : roc.discrete.points) CHECK(p.false_positives == 0);
  CHECK(y_at_false_positives(roc.discrete, 0) == doctest::Approx(1.0));
}

TEST_CASE("ellipse ground truth matched against itself") {
  std::vector<ImageEval> images;
  for (const auto& r : parse_fddb_ellipses(fixture("fddb20_ellipseList.txt"))) {
    ImageEval im{r.id, {}, r.annotations};
    for (const auto& a : r.annotations) im.dets.push_back({a.region, 0.9});
    images.push_back(im);
  }
  const auto roc = compute_roc(images);
  REQUIRE(roc.discrete.points.size() == 1);
  CHECK(roc.discrete.points[0].y == 1.0);
  CHECK(roc.continuous.points[0].y == 1.0);
  CHECK(roc.discrete.points[0].false_positives == 0);
}

TEST_CASE("hand-built three image fixture") {
  const auto gts = parse_fddb_ellipses(fixture("eval3_ellipseList.txt"));
  const auto dets = parse_detections(fixture("eval3_dets_ellipse.txt"), DetectionMode::kEllipse);
  std::vector<ImageEval> images;
  for (std::size_t k = 0; k < gts.size(); ++k) images.push_back({gts[k].id, dets.at(k).second, gts[k].annotations});
  const auto roc = compute_roc(images);
  CHECK(roc.total_faces == 5);
  std::istringstream csv(fixture("eval3_expected.csv"));
  std::string line;
  std::getline(csv, line);
  std::size_t k = 0;
  while (std::getline(csv, line)) {
    double t, x, y;
    REQUIRE(std::sscanf(line.c_str(), "%lf,%lf,%lf", &t, &x, &y) == 3);
    REQUIRE(k < roc.discrete.points.size());
    CHECK(roc.discrete.points[k].threshold == doctest::Approx(t));
    CHECK(roc.discrete.points[k].false_positives == x);
    CHECK(roc.discrete.points[k].y == doctest::Approx(y));
    CHECK(roc.continuous.points[k].y == doctest::Approx(y));
    ++k;
  }
  CHECK(k == roc.discrete.points.size());
}

TEST_CASE("roc matches a brute-force sweep") {
  std::mt19937_64 rng(3);
  std::vector<ImageEval> images;
  for (int k = 0; k < 8; ++k) images.push_back(random_scene(rng, "s" + std::to_string(k)));
  const auto roc = compute_roc(images);
  std::size_t faces = 0;
  for (const auto& im : images) faces += im.gts.size();
  for (std::size_t p = 0; p < roc.discrete.points.size(); ++p) {
    const double t = roc.discrete.points[p].threshold;
    double iou_sum = 0;
    std::size_t tp = 0, fp = 0;
    for (const auto& im : images) {
      std::vector<std::vector<double>> m;
      for (const auto& d : im.dets)
        if (d.score >= t) {
          std::vector<double> row;
          for (const auto& g : im.gts) row.push_back(oracle::iou(std::get<BBox>(d.region), g.box()));
          m.push_back(row);
        }
      if (m.empty()) continue;
      const double best = oracle::best_assignment(m, 1e-6);
      iou_sum += best;
      tp += oracle::max_pairs_above(m, 0.5);
      std::size_t matched = 0;
      const auto a = max_weight_assignment(m, 1e-6);
      for (int j : a) matched += j >= 0;
      fp += m.size() - matched;
    }
    CHECK(roc.continuous.points[p].y == doctest::Approx(iou_sum / faces).epsilon(1e-12));
    CHECK(roc.discrete.points[p].y == doctest::Approx(static_cast<double>(tp) / faces));
    CHECK(roc.discrete.points[p].false_positives == fp);
  }
}

TEST_CASE("curves are monotone as the threshold drops") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<ImageEval> images;
    for (int k = 0; k < 15; ++k) images.push_back(random_scene(rng, "m" + std::to_string(k)));
    const auto roc = compute_roc(images);
    for (std::size_t p = 1; p < roc.discrete.points.size(); ++p) {
      CHECK(roc.discrete.points[p].threshold < roc.discrete.points[p - 1].threshold);
      CHECK(roc.discrete.points[p].false_positives >= roc.discrete.points[p - 1].false_positives);
      CHECK(roc.discrete.points[p].y >= roc.discrete.points[p - 1].y);
      CHECK(roc.continuous.points[p].false_positives == roc.discrete.points[p].false_positives);
    }
    for (const auto& p : roc.continuous.points) {
      CHECK(p.y >= 0);
      CHECK(p.y <= 1 + 1e-12);
    }
  }
}

TEST_CASE("degenerate corpora") {
  std::vector<ImageEval> none{{"a", {}, {{BBox(0, 0, 1, 1), std::nullopt}}}};
  const auto roc = compute_roc(none);
  REQUIRE(roc.discrete.points.size() == 1);
  CHECK(roc.discrete.points[0].y == 0);
  std::vector<ImageEval> no_faces{{"a", {{BBox(0, 0, 1, 1), 0.5}}, {}}};
  CHECK_THROWS_AS(compute_roc(no_faces), std::invalid_argument);
}

TEST_CASE("continuous floor drops weak matches") {
  std::vector<ImageEval> im{{"a", {{BBox(0, 0, 10, 10), 0.9}}, {{BBox(5, 0, 15, 10), std::nullopt}}}};
  EvalOptions o;
  CHECK(compute_roc(im, o).continuous.points[0].y == doctest::Approx(1.0 / 3));
  o.continuous_floor = 0.5;
  CHECK(compute_roc(im, o).continuous.points[0].y == 0.0);
}

TEST_CASE("box to ellipse factor agrees with the grid-search oracle") {
  // tests/oracles/ellipse_factor.py: k* = 1.098913, IoU* = 0.837030
  const double k = ellipse_fit_factor();
  CHECK(std::abs(k - 1.098913) < 5e-3);
  const EllipseRegion e = box_to_ellipse(BBox(0, 0, 1, 1));
  CHECK(std::abs(raster_iou(BBox(0, 0, 1, 1), e, 1024) - 0.837030) < 1e-3);
  const EllipseRegion f = box_to_ellipse(BBox(10, 20, 50, 100));
  CHECK(f.cx == 30);
  CHECK(f.cy == 60);
  CHECK(f.major_r == doctest::Approx(40 * k));
  CHECK(f.minor_r == doctest::Approx(20 * k));
  CHECK(std::abs(raster_iou(BBox(10, 20, 50, 100), f, 512) - 0.837) < 5e-3);
  CHECK_THROWS_AS(box_to_ellipse(BBox(0, 0, 0, 5)), std::invalid_argument);
}

TEST_CASE("fold aggregation") {
  std::mt19937_64 rng(5);
  std::vector<std::vector<ImageEval>> folds(3);
  std::vector<ImageEval> all;
  for (int f = 0; f < 3; ++f)
    for (int k = 0; k < 4; ++k) {
      folds[f].push_back(random_scene(rng, "f" + std::to_string(f) + "_" + std::to_string(k)));
      all.push_back(folds[f].back());
    }
  const auto rep = aggregate_folds(folds, 3);
  CHECK(rep.per_fold.size() == 3);
  const auto direct = compute_roc(all);
  REQUIRE(rep.pooled.discrete.points.size() == direct.discrete.points.size());
  for (std::size_t p = 0; p < direct.discrete.points.size(); ++p)
    CHECK(rep.pooled.discrete.points[p].y == direct.discrete.points[p].y);
  CHECK_THROWS_AS(aggregate_folds(folds, 10), std::invalid_argument);
  CHECK_THROWS_AS(aggregate_folds({}), std::invalid_argument);
}

TEST_CASE("detection files round trip") {
  const std::vector<std::pair<std::string, std::vector<ScoredRegion>>> d{
      {"a/b", {{BBox(1.5, 2.25, 11.5, 22.25), 0.987654}, {BBox(0, 0, 3, 4), 0.001}}}, {"c", {}}};
  const auto txt = serialize_detections(d, DetectionMode::kRect);
  const auto back = parse_detections(txt, DetectionMode::kRect);
  REQUIRE(back.size() == 2);
  CHECK(back[0].first == "a/b");
  CHECK(std::get<BBox>(back[0].second[0].region) == BBox(1.5, 2.25, 11.5, 22.25));
  CHECK(back[0].second[0].score == doctest::Approx(0.987654));
  CHECK(back[1].second.empty());
  CHECK(serialize_detections(back, DetectionMode::kRect) == txt);
  const auto ell = parse_detections(serialize_detections(d, DetectionMode::kEllipse), DetectionMode::kEllipse);
  const auto& e = std::get<EllipseRegion>(ell[0].second[0].region);
  CHECK(e.cx == doctest::Approx(6.5));
  CHECK(e.cy == doctest::Approx(12.25));
  CHECK_THROWS_AS(parse_detections("a\n1\n1 2 3\n", DetectionMode::kRect), ParseError);
  CHECK_THROWS_AS(parse_detections("a\n2\n1 2 3 4 0.5\n", DetectionMode::kRect), ParseError);
}

TEST_CASE("report files") {
  const auto dir = fs::temp_directory_path() / "fdet_test_eval_report";
  fs::remove_all(dir);
  std::mt19937_64 rng(6);
  std::vector<ImageEval> images{random_scene(rng, "x"), random_scene(rng, "y")};
  const auto roc = compute_roc(images);
  emit_report(roc, dir, "r");
  const auto csv = read_text_file(dir / "r.csv");
  CHECK(csv.rfind("threshold,false_positives,y_discrete,y_continuous\n", 0) == 0);
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == roc.discrete.points.size() + 1);
  const auto svg = read_text_file(dir / "r.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
}
