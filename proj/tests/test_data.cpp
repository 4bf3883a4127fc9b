#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "fdet/data.hpp"

using namespace fdet;
namespace fs = std::filesystem;

namespace {

std::string fixture(const std::string& name) { return read_text_file(fs::path(FDET_FIXTURES) / name); }

fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("fdet_test_data_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("difficulty weights") {
  FaceAttributes a;
  CHECK(difficulty(a) == 0.0);
  a.blur = Blur::kNormal;
  CHECK(difficulty(a) == 0.5);
  a.blur = Blur::kHeavy;
  CHECK(difficulty(a) == 1.0);
  a.occlusion = Occlusion::kPartial;
  CHECK(difficulty(a) == 1.5);
  a.occlusion = Occlusion::kHeavy;
  a.pose = Pose::kAtypical;
  a.expression = Expression::kExtreme;
  a.illumination = Illumination::kExtreme;
  CHECK(difficulty(a) == 5.0);
}

TEST_CASE("difficulty fixture covers every attribute combination") {
  const auto records = parse_wider(fixture("table1_wider.txt"));
  std::istringstream expected(fixture("table1_expected.txt"));
  std::map<std::string, std::vector<std::pair<double, bool>>> want;
  std::string id, keep;
  int k;
  double d;
  while (expected >> id >> k >> d >> keep) want[id].push_back({d, keep == "keep"});
  std::size_t faces = 0, kept_expected = 0;
  for (const auto& r : records) {
    REQUIRE(r.annotations.size() == want[r.id].size());
    for (std::size_t i = 0; i < r.annotations.size(); ++i) {
      CHECK(difficulty(*r.annotations[i].attributes) == doctest::Approx(want[r.id][i].first));
      kept_expected += want[r.id][i].second;
      ++faces;
    }
  }
  CHECK(faces == 72);
  const auto filtered = filter_records(records);
  std::size_t kept = 0;
  for (const auto& r : filtered) {
    kept += r.annotations.size();
    for (const auto& a : r.annotations) CHECK(difficulty(*a.attributes) <= 2.0);
  }
  CHECK(kept == kept_expected);
}

TEST_CASE("filter drops empty and crowded images") {
  ImageRecord hard{"hard", 0, 0, {}};
  FaceAttributes bad;
  bad.occlusion = Occlusion::kHeavy;
  bad.pose = Pose::kAtypical;
  bad.blur = Blur::kNormal;  // 2.5
  hard.annotations.push_back({BBox(0, 0, 1, 1), bad});
  ImageRecord crowd{"crowd", 0, 0, {}};
  for (int k = 0; k < 1001; ++k) crowd.annotations.push_back({BBox(k, 0, k + 1, 1), std::nullopt});
  ImageRecord edge{"edge", 0, 0, {}};
  for (int k = 0; k < 1000; ++k) edge.annotations.push_back({BBox(k, 0, k + 1, 1), std::nullopt});
  FaceAttributes exactly_two;
  exactly_two.pose = Pose::kAtypical;
  exactly_two.illumination = Illumination::kExtreme;
  ImageRecord two{"two", 0, 0, {{BBox(0, 0, 1, 1), exactly_two}}};
  const std::vector<ImageRecord> in{hard, crowd, edge, two, ImageRecord{"empty", 0, 0, {}}};
  const auto out = filter_records(in);
  REQUIRE(out.size() == 2);
  CHECK(out[0].id == "edge");
  CHECK(out[1].id == "two");
}

TEST_CASE("wider parser handles placeholders and invalid faces") {
  const auto r = parse_wider(fixture("wider_sample.txt"));
  REQUIRE(r.size() == 3);
  CHECK(r[0].annotations.size() == 1);
  CHECK(r[0].annotations[0].box() == BBox(449, 330, 571, 479));
  CHECK(r[1].annotations.empty());
  CHECK(r[2].annotations.size() == 2);  // third face is flagged invalid
  CHECK(r[2].annotations[0].attributes->blur == Blur::kHeavy);
  const auto again = parse_wider(serialize_wider(r));
  CHECK(again == r);
}

TEST_CASE("wider parser errors carry line numbers") {
  auto line_of = [](const std::string& text) -> std::size_t {
    try {
      parse_wider(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  CHECK(line_of("a.jpg\n1\n1 2 3 4 0 0 0 0 0\n") == 3);
  CHECK(line_of("a.jpg\nx\n") == 2);
  CHECK(line_of("a.jpg\n1\n1 2 3 4 5 0 0 0 0 0\n") == 3);
  CHECK(line_of("a.jpg\n2\n1 2 3 4 0 0 0 0 0 0\n") > 0);
  CHECK(line_of("a.jpg\n1\n1 2 -3 4 0 0 0 0 0 0\n") == 3);
  CHECK(line_of("a.jpg\n") > 0);
}

TEST_CASE("fddb parser and fold ordering") {
  const auto ell = fixture("fddb20_ellipseList.txt");
  const auto records = parse_fddb_ellipses(ell);
  CHECK(records.size() == 20);
  for (const auto& r : records)
    for (const auto& a : r.annotations) {
      const auto& e = std::get<EllipseRegion>(a.region);
      CHECK(e.major_r >= e.minor_r);
    }
  const auto ordered = parse_fddb(fixture("fddb20_order.txt"), ell);
  std::istringstream order(fixture("fddb20_order.txt"));
  std::string name;
  std::size_t k = 0;
  while (std::getline(order, name)) CHECK(ordered.at(k++).id == name);
  CHECK(parse_fddb("", ell).size() == 20);
  CHECK_THROWS_AS(parse_fddb("no/such/image\n", ell), ParseError);
  const auto again = parse_fddb_ellipses(serialize_fddb(records));
  REQUIRE(again.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    for (std::size_t j = 0; j < records[i].annotations.size(); ++j) {
      const auto& a = std::get<EllipseRegion>(records[i].annotations[j].region);
      const auto& b = std::get<EllipseRegion>(again[i].annotations[j].region);
      CHECK(a.cx == doctest::Approx(b.cx));
      CHECK(a.angle == doctest::Approx(b.angle));
      CHECK(a.major_r == doctest::Approx(b.major_r));
    }
  CHECK_THROWS_AS(parse_fddb_ellipses("img\n1\n10 -5 0 3 3 1\n"), ParseError);
}

TEST_CASE("folds partition the images") {
  const auto records = parse_fddb_ellipses(fixture("fddb20_ellipseList.txt"));
  std::mt19937_64 rng(3);
  const auto folds = make_folds(records, 10, rng);
  REQUIRE(folds.size() == 10);
  std::multiset<std::string> seen;
  for (const auto& f : folds) {
    CHECK(f.test_ids.size() == 2);
    CHECK(f.train_ids.size() == 18);
    seen.insert(f.test_ids.begin(), f.test_ids.end());
    for (const auto& t : f.test_ids)
      CHECK(std::find(f.train_ids.begin(), f.train_ids.end(), t) == f.train_ids.end());
  }
  CHECK(seen.size() == 20);
  CHECK(std::set<std::string>(seen.begin(), seen.end()).size() == 20);
  std::mt19937_64 again(3);
  CHECK(make_folds(records, 10, again)[0].test_ids == folds[0].test_ids);
  std::mt19937_64 r2(1);
  CHECK_THROWS_AS(make_folds(records, 1, r2), std::invalid_argument);
  CHECK_THROWS_AS(make_folds(records, 21, r2), std::invalid_argument);

  std::vector<std::vector<std::string>> listings(2);
  std::istringstream f1(fixture("fddb20_fold1.txt")), f2(fixture("fddb20_fold2.txt"));
  std::string name;
  while (std::getline(f1, name)) listings[0].push_back(name);
  while (std::getline(f2, name)) listings[1].push_back(name);
  const auto ext = make_folds(records, listings);
  CHECK(ext[1].fold == 2);
  CHECK(ext[0].test_ids == listings[0]);
  listings[0].push_back("nope");
  CHECK_THROWS_AS(make_folds(records, listings), std::invalid_argument);
}

TEST_CASE("synthetic generator") {
  SynthConfig cfg;
  cfg.count = 12;
  cfg.width = 96;
  cfg.height = 80;
  const auto a = gen_synthetic(cfg, 5), b = gen_synthetic(cfg, 5), c = gen_synthetic(cfg, 6);
  REQUIRE(a.size() == 12);
  std::set<std::string> ids;
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].image == b[k].image);
    CHECK(a[k].record == b[k].record);
    ids.insert(a[k].record.id);
    CHECK(a[k].image.shape() == std::vector<int>{1, 1, 80, 96});
    CHECK(a[k].record.width == 96);
    CHECK(a[k].record.annotations.size() >= 1);
    CHECK(a[k].record.annotations.size() <= 3);
    for (double v : a[k].image.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      CHECK(std::abs(v * 255 - std::round(v * 255)) < 1e-9);
    }
    for (const auto& ann : a[k].record.annotations) {
      const BBox bb = ann.box();
      CHECK(bb.height() >= cfg.min_face - 1e-9);
      CHECK(bb.height() <= cfg.max_face + 1e-9);
      CHECK(bb.x1 >= 0);
      CHECK(bb.x2 <= 96);
      CHECK(ann.attributes.has_value());
    }
  }
  CHECK(ids.size() == 12);
  CHECK(a[0].image != c[0].image);
  SynthConfig bad = cfg;
  bad.min_faces = 4;
  CHECK_THROWS_AS(gen_synthetic(bad, 1), std::invalid_argument);
}

TEST_CASE("synthetic set round trips through disk") {
  const auto dir = temp_dir("synth");
  SynthConfig cfg;
  cfg.count = 4;
  const auto a = gen_synthetic(cfg, 9);
  save_synthetic(dir, a);
  CHECK(fs::exists(dir / "gt.jsonl"));
  CHECK(fs::exists(dir / "wider.txt"));
  CHECK(fs::exists(dir / "fddb-ellipseList.txt"));
  const auto b = load_synthetic(dir);
  REQUIRE(b.size() == a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].image == b[k].image);
    CHECK(a[k].record == b[k].record);
  }
  CHECK(parse_wider(read_text_file(dir / "wider.txt")).size() == 4);
  CHECK(parse_fddb_ellipses(read_text_file(dir / "fddb-ellipseList.txt")).size() == 4);
}

TEST_CASE("pnm io") {
  const auto dir = temp_dir("pnm");
  Tensor img({1, 1, 3, 2}, std::vector<double>{0, 1, 2 / 255.0, 128 / 255.0, 1, 0});
  write_pgm(dir / "a.pgm", img);
  CHECK(read_pnm(dir / "a.pgm") == img);
  {
    std::ofstream f(dir / "c.ppm", std::ios::binary);
    f << "P6\n# comment\n2 1\n255\n";
    const unsigned char px[] = {255, 0, 0, 30, 60, 90};
    f.write(reinterpret_cast<const char*>(px), 6);
  }
  const Tensor c = read_pnm(dir / "c.ppm");
  CHECK(c.shape() == std::vector<int>{1, 1, 1, 2});
  CHECK(c[0] == doctest::Approx(85 / 255.0));
  CHECK(c[1] == doctest::Approx(60 / 255.0));
  {
    std::ofstream f(dir / "t.pgm", std::ios::binary);
    f << "P5\n4 4\n255\nab";
  }
  CHECK_THROWS_AS(read_pnm(dir / "t.pgm"), std::runtime_error);
  {
    std::ofstream f(dir / "p2.pgm", std::ios::binary);
    f << "P2\n1 1\n255\n3\n";
  }
  CHECK_THROWS_AS(read_pnm(dir / "p2.pgm"), std::runtime_error);
  CHECK_THROWS_AS(read_pnm(dir / "missing.pgm"), std::runtime_error);
}

TEST_CASE("ground truth json lines") {
  const auto dir = temp_dir("gt");
  FaceAttributes at;
  at.blur = Blur::kNormal;
  const std::vector<ImageRecord> recs{
      {"x", 10, 20, {{BBox(1, 2, 3, 4), at}, {EllipseRegion(5, 6, 3, 2, 0.25), std::nullopt}}},
      {"y", 5, 5, {}}};
  write_ground_truth(dir / "gt.jsonl", recs);
  CHECK(read_ground_truth(dir / "gt.jsonl") == recs);
  {
    std::ofstream f(dir / "bad.jsonl");
    f << "{\"id\": \"a\", \"width\": 1, \"height\": 1, \"faces\": []}\n{not json\n";
  }
  try {
    read_ground_truth(dir / "bad.jsonl");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}
