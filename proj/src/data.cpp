#include "fdet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "text_util.hpp"

namespace fdet {

using nlohmann::json;
using namespace text;

std::vector<BBox> ImageRecord::boxes() const {
  std::vector<BBox> out;
  out.reserve(annotations.size());
  for (const auto& a : annotations) out.push_back(a.box());
  return out;
}

double difficulty(const FaceAttributes& a) {
  double d = 0;
  if (a.blur == Blur::kNormal) d += 0.5;
  if (a.blur == Blur::kHeavy) d += 1.0;
  if (a.expression == Expression::kExtreme) d += 1.0;
  if (a.illumination == Illumination::kExtreme) d += 1.0;
  if (a.occlusion == Occlusion::kPartial) d += 0.5;
  if (a.occlusion == Occlusion::kHeavy) d += 1.0;
  if (a.pose == Pose::kAtypical) d += 1.0;
  return d;
}

std::vector<ImageRecord> filter_records(std::span<const ImageRecord> records) {
  std::vector<ImageRecord> out;
  for (const auto& r : records) {
    ImageRecord kept = r;
    std::erase_if(kept.annotations, [](const Annotation& a) {
      return a.attributes && difficulty(*a.attributes) > kMaxDifficulty;
    });
    if (kept.annotations.empty() || kept.annotations.size() > kMaxAnnotationsPerImage) continue;
    out.push_back(std::move(kept));
  }
  return out;
}

namespace {

int code(double v, int max, const char* field, std::size_t lineno) {
  if (v != std::floor(v) || v < 0 || v > max)
    throw ParseError(lineno, std::string("bad ") + field + " code " + fmt_num(v));
  return static_cast<int>(v);
}

FaceAttributes wider_attributes(const std::vector<double>& f, std::size_t lineno) {
  FaceAttributes a;
  a.blur = static_cast<Blur>(code(f[4], 2, "blur", lineno));
  a.expression = static_cast<Expression>(code(f[5], 1, "expression", lineno));
  a.illumination = static_cast<Illumination>(code(f[6], 1, "illumination", lineno));
  a.invalid = code(f[7], 1, "invalid", lineno) == 1;
  a.occlusion = static_cast<Occlusion>(code(f[8], 2, "occlusion", lineno));
  a.pose = static_cast<Pose>(code(f[9], 1, "pose", lineno));
  return a;
}

bool is_numeric_row(std::string_view line, std::size_t fields) {
  try {
    return parse_numbers(line, 0).size() == fields;
  } catch (const ParseError&) {
    return false;
  }
}

}  // namespace

std::vector<ImageRecord> parse_wider(std::string_view text) {
  const auto lines = split_lines(text);
  std::vector<ImageRecord> out;
  std::size_t i = 0;
  while (i < lines.size()) {
    ImageRecord rec;
    rec.id = std::string(lines[i++].text);
    if (i >= lines.size()) throw ParseError(eof_line(text), "missing face count for " + rec.id);
    const int count = parse_count(lines[i].text, lines[i].number);
    ++i;
    if (count == 0) {
      // WIDER writes one all-zero placeholder row for images without faces.
      if (i < lines.size() && is_numeric_row(lines[i].text, 10)) ++i;
    }
    for (int k = 0; k < count; ++k) {
      if (i >= lines.size())
        throw ParseError(eof_line(text), "expected " + std::to_string(count) + " faces for " + rec.id);
      const auto& ln = lines[i++];
      const auto f = parse_numbers(ln.text, ln.number);
      if (f.size() != 10) throw ParseError(ln.number, "expected 10 fields per WIDER face");
      if (f[2] < 0 || f[3] < 0) throw ParseError(ln.number, "negative box size");
      const auto a = wider_attributes(f, ln.number);
      if (!a.invalid) rec.annotations.push_back({BBox::from_xywh(f[0], f[1], f[2], f[3]), a});
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::string serialize_wider(std::span<const ImageRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += r.id + "\n" + std::to_string(r.annotations.size()) + "\n";
    if (r.annotations.empty()) out += "0 0 0 0 0 0 0 0 0 0\n";
    for (const auto& a : r.annotations) {
      const BBox b = a.box();
      const FaceAttributes at = a.attributes.value_or(FaceAttributes{});
      out += fmt_num(b.x1) + " " + fmt_num(b.y1) + " " + fmt_num(b.width()) + " " +
             fmt_num(b.height()) + " " + std::to_string(static_cast<int>(at.blur)) + " " +
             std::to_string(static_cast<int>(at.expression)) + " " +
             std::to_string(static_cast<int>(at.illumination)) + " " +
             std::to_string(at.invalid ? 1 : 0) + " " +
             std::to_string(static_cast<int>(at.occlusion)) + " " +
             std::to_string(static_cast<int>(at.pose)) + "\n";
    }
  }
  return out;
}

std::vector<ImageRecord> parse_fddb_ellipses(std::string_view text) {
  const auto lines = split_lines(text);
  std::vector<ImageRecord> out;
  std::size_t i = 0;
  while (i < lines.size()) {
    ImageRecord rec;
    rec.id = std::string(lines[i++].text);
    if (i >= lines.size()) throw ParseError(eof_line(text), "missing face count for " + rec.id);
    const int count = parse_count(lines[i].text, lines[i].number);
    ++i;
    for (int k = 0; k < count; ++k) {
      if (i >= lines.size())
        throw ParseError(eof_line(text), "expected " + std::to_string(count) + " faces for " + rec.id);
      const auto& ln = lines[i++];
      const auto f = parse_numbers(ln.text, ln.number);
      if (f.size() != 6) throw ParseError(ln.number, "expected 6 fields per FDDB ellipse");
      if (!(f[0] > 0) || !(f[1] > 0)) throw ParseError(ln.number, "ellipse radii must be positive");
      rec.annotations.push_back({EllipseRegion(f[3], f[4], f[0], f[1], f[2]), std::nullopt});
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<ImageRecord> parse_fddb(std::string_view folds_text, std::string_view ellipse_text) {
  auto records = parse_fddb_ellipses(ellipse_text);
  const auto listing = split_lines(folds_text);
  if (listing.empty()) return records;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index.emplace(records[i].id, i);
  std::vector<ImageRecord> out;
  out.reserve(listing.size());
  for (const auto& ln : listing) {
    auto it = index.find(std::string(ln.text));
    if (it == index.end())
      throw ParseError(ln.number, "image '" + std::string(ln.text) + "' has no ellipse annotations");
    out.push_back(records[it->second]);
  }
  return out;
}

std::string serialize_fddb(std::span<const ImageRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += r.id + "\n" + std::to_string(r.annotations.size()) + "\n";
    for (const auto& a : r.annotations) {
      const auto* e = std::get_if<EllipseRegion>(&a.region);
      if (!e) throw std::invalid_argument("serialize_fddb: annotation of " + r.id + " is not an ellipse");
      out += fmt_num(e->major_r) + " " + fmt_num(e->minor_r) + " " + fmt_num(e->angle) + " " +
             fmt_num(e->cx) + " " + fmt_num(e->cy) + "  1\n";
    }
  }
  return out;
}

std::vector<FoldSplit> make_folds(std::span<const ImageRecord> records, int k,
                                  std::mt19937_64& rng) {
  if (k < 2) throw std::invalid_argument("make_folds: k must be >= 2");
  if (static_cast<std::size_t>(k) > records.size())
    throw std::invalid_argument("make_folds: k=" + std::to_string(k) + " exceeds " +
                                std::to_string(records.size()) + " records");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::string>> listings(static_cast<std::size_t>(k));
  const std::size_t n = records.size();
  for (int f = 0; f < k; ++f) {
    const std::size_t lo = n * static_cast<std::size_t>(f) / static_cast<std::size_t>(k);
    const std::size_t hi = n * static_cast<std::size_t>(f + 1) / static_cast<std::size_t>(k);
    for (std::size_t i = lo; i < hi; ++i) listings[static_cast<std::size_t>(f)].push_back(records[order[i]].id);
  }
  return make_folds(records, listings);
}

std::vector<FoldSplit> make_folds(std::span<const ImageRecord> records,
                                  std::span<const std::vector<std::string>> listings) {
  std::set<std::string> known;
  for (const auto& r : records) known.insert(r.id);
  std::vector<FoldSplit> out;
  for (std::size_t f = 0; f < listings.size(); ++f) {
    FoldSplit split;
    split.fold = static_cast<int>(f + 1);
    split.test_ids = listings[f];
    std::set<std::string> test(listings[f].begin(), listings[f].end());
    for (const auto& id : listings[f])
      if (!known.count(id)) throw std::invalid_argument("fold listing names unknown image " + id);
    for (const auto& r : records)
      if (!test.count(r.id)) split.train_ids.push_back(r.id);
    out.push_back(std::move(split));
  }
  return out;
}

namespace {

struct Shape {
  enum Kind { kFace, kBlob, kRing, kBar } kind;
  EllipseRegion ellipse;  // kBar uses its bounding box
  double intensity;
};

double shade(const Shape& s, double x, double y, double bg) {
  const auto& e = s.ellipse;
  const double c = std::cos(e.angle), sn = std::sin(e.angle);
  const double dx = x - e.cx, dy = y - e.cy;
  // u runs along the major (vertical for faces) axis, v across it
  double u = (dx * c + dy * sn) / e.major_r;
  if (sn < 0) u = -u;  // keep u < 0 towards the top of the image
  const double v = (-dx * sn + dy * c) / e.minor_r;
  switch (s.kind) {
    case Shape::kBar: {
      const BBox b = e.bounding_box();
      return b.contains(x, y) ? s.intensity : bg;
    }
    case Shape::kRing: {
      const double r2 = u * u + v * v;
      return (r2 <= 1.0 && r2 >= 0.45) ? s.intensity : bg;
    }
    case Shape::kBlob:
      return u * u + v * v <= 1.0 ? s.intensity : bg;
    case Shape::kFace: {
      if (u * u + v * v > 1.0) return bg;
      const double dark = 0.12;
      // eyes above the centre, mouth below (u < 0 is towards the top for the
      // default upright orientation)
      for (double side : {-1.0, 1.0}) {
        const double eu = u + 0.3, ev = v - side * 0.38;
        if (eu * eu / 0.02 + ev * ev / 0.035 <= 1.0) return dark;
      }
      const double mu = u - 0.45, mv = v;
      if (mu * mu / 0.006 + mv * mv / 0.12 <= 1.0) return dark + 0.1;
      return s.intensity;
    }
  }
  return bg;
}

}  // namespace

std::vector<SyntheticImage> gen_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.count < 0 || cfg.width < 16 || cfg.height < 16 || cfg.min_faces < 0 ||
      cfg.max_faces < cfg.min_faces || !(cfg.min_face > 4) || cfg.max_face < cfg.min_face)
    throw std::invalid_argument("invalid synthetic dataset configuration");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * U(rng); };
  constexpr double pi = std::numbers::pi;

  std::vector<SyntheticImage> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int img = 0; img < cfg.count; ++img) {
    const int W = cfg.width, H = cfg.height;
    // low-frequency texture
    struct Wave {
      double fx, fy, phase, amp;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 3; ++k)
      waves.push_back({uni(-0.25, 0.25), uni(-0.25, 0.25), uni(0, 2 * pi), uni(0.02, 0.06)});
    const double base = uni(0.3, 0.45);

    std::vector<Shape> shapes;
    std::vector<BBox> occupied;
    auto place = [&](Shape::Kind kind, double h, double aspect, double jitter) -> std::optional<Shape> {
      for (int attempt = 0; attempt < 60; ++attempt) {
        const double major = h / 2, minor = h / (2 * aspect);
        const double angle = pi / 2 + uni(-jitter, jitter);
        const double cx = uni(minor + 2, W - minor - 2), cy = uni(major + 2, H - major - 2);
        EllipseRegion e(cx, cy, major, minor, angle);
        const BBox b = e.bounding_box();
        if (b.x1 < 0 || b.y1 < 0 || b.x2 > W || b.y2 > H) continue;
        const BBox grown(b.x1 - 3, b.y1 - 3, b.x2 + 3, b.y2 + 3);
        bool clash = false;
        for (const auto& o : occupied) clash |= iou_rect(grown, o) > 0;
        if (clash) continue;
        occupied.push_back(b);
        return Shape{kind, e, 0.0};
      }
      return std::nullopt;
    };

    ImageRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "%s_%04d", cfg.id_prefix.c_str(), img);
    rec.id = idbuf;
    rec.width = W;
    rec.height = H;

    const int faces = cfg.min_faces + static_cast<int>(U(rng) * (cfg.max_faces - cfg.min_faces + 1));
    for (int f = 0; f < std::min(faces, cfg.max_faces); ++f) {
      auto s = place(Shape::kFace, uni(cfg.min_face, cfg.max_face), uni(1.15, 1.4), 0.15);
      if (!s) continue;
      FaceAttributes a;
      const double r = cfg.attribute_rate;
      if (U(rng) < r) a.blur = U(rng) < 0.5 ? Blur::kNormal : Blur::kHeavy;
      if (U(rng) < r) a.expression = Expression::kExtreme;
      if (U(rng) < r) a.illumination = Illumination::kExtreme;
      if (U(rng) < r) a.occlusion = U(rng) < 0.5 ? Occlusion::kPartial : Occlusion::kHeavy;
      if (U(rng) < r) a.pose = Pose::kAtypical;
      double contrast = 1.0;
      if (a.blur == Blur::kNormal) contrast *= 0.8;
      if (a.blur == Blur::kHeavy) contrast *= 0.6;
      if (a.illumination == Illumination::kExtreme) contrast *= 0.7;
      s->intensity = base + contrast * (uni(0.78, 0.9) - base);
      shapes.push_back(*s);
      rec.annotations.push_back({s->ellipse, a});
    }
    std::poisson_distribution<int> P(cfg.distractors);
    const int extra = cfg.distractors > 0 ? P(rng) : 0;
    for (int d = 0; d < extra; ++d) {
      const double pick = U(rng);
      const auto kind = pick < 0.4 ? Shape::kBlob : pick < 0.7 ? Shape::kRing : Shape::kBar;
      auto s = place(kind, uni(cfg.min_face, cfg.max_face), uni(1.0, 1.6), 0.6);
      if (!s) continue;
      s->intensity = uni(0.75, 0.9);
      shapes.push_back(*s);
    }

    Tensor image({1, 1, H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        double v = base;
        for (const auto& w : waves) v += w.amp * std::sin(w.fx * px + w.fy * py + w.phase);
        for (const auto& s : shapes) v = shade(s, px, py, v);
        v += cfg.noise * N(rng);
        image.at(0, 0, y, x) = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
      }
    out.push_back({std::move(rec), std::move(image)});
  }
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t += ch;
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6")
    throw std::runtime_error(path.string() + ": only binary PGM (P5) and PPM (P6) are supported");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw std::runtime_error(path.string() + ": malformed PNM header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw std::runtime_error(path.string() + ": unsupported PNM dimensions or depth");
  const int channels = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw std::runtime_error(path.string() + ": truncated pixel data");
  Tensor t({1, 1, h, w});
  for (std::size_t i = 0; i < t.size(); ++i) {
    double s = 0;
    for (int c = 0; c < channels; ++c) s += raw[i * channels + c];
    t[i] = s / channels / maxval;
  }
  return t;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write image " + path.string());
  os << "P5\n" << image.w() << " " << image.h() << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(image.h()) * image.w());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

namespace {

json attributes_json(const FaceAttributes& a) {
  return {{"blur", static_cast<int>(a.blur)},
          {"expression", static_cast<int>(a.expression)},
          {"illumination", static_cast<int>(a.illumination)},
          {"invalid", a.invalid ? 1 : 0},
          {"occlusion", static_cast<int>(a.occlusion)},
          {"pose", static_cast<int>(a.pose)}};
}

FaceAttributes attributes_from_json(const json& j) {
  FaceAttributes a;
  a.blur = static_cast<Blur>(j.at("blur").get<int>());
  a.expression = static_cast<Expression>(j.at("expression").get<int>());
  a.illumination = static_cast<Illumination>(j.at("illumination").get<int>());
  a.invalid = j.at("invalid").get<int>() != 0;
  a.occlusion = static_cast<Occlusion>(j.at("occlusion").get<int>());
  a.pose = static_cast<Pose>(j.at("pose").get<int>());
  return a;
}

}  // namespace

void write_ground_truth(const std::filesystem::path& path, std::span<const ImageRecord> records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) {
    json faces = json::array();
    for (const auto& a : r.annotations) {
      json f;
      if (const auto* e = std::get_if<EllipseRegion>(&a.region))
        f["ellipse"] = {e->major_r, e->minor_r, e->angle, e->cx, e->cy};
      else {
        const auto& b = std::get<BBox>(a.region);
        f["box"] = {b.x1, b.y1, b.x2, b.y2};
      }
      if (a.attributes) f["attributes"] = attributes_json(*a.attributes);
      faces.push_back(f);
    }
    os << json{{"id", r.id}, {"width", r.width}, {"height", r.height}, {"faces", faces}}.dump()
       << "\n";
  }
}

std::vector<ImageRecord> read_ground_truth(const std::filesystem::path& path) {
  std::istringstream is(read_text_file(path));
  std::vector<ImageRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      ImageRecord r;
      r.id = j.at("id").get<std::string>();
      r.width = j.at("width").get<int>();
      r.height = j.at("height").get<int>();
      for (const auto& f : j.at("faces")) {
        Annotation a;
        if (f.contains("ellipse")) {
          const auto& e = f["ellipse"];
          a.region = EllipseRegion(e.at(3), e.at(4), e.at(0), e.at(1), e.at(2));
        } else {
          const auto& b = f.at("box");
          a.region = BBox(b.at(0), b.at(1), b.at(2), b.at(3));
        }
        if (f.contains("attributes")) a.attributes = attributes_from_json(f["attributes"]);
        r.annotations.push_back(std::move(a));
      }
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ParseError(lineno, path.string() + ": " + e.what());
    }
  }
  return out;
}

void save_synthetic(const std::filesystem::path& dir, std::span<const SyntheticImage> data) {
  std::filesystem::create_directories(dir / "images");
  std::vector<ImageRecord> records;
  for (const auto& d : data) {
    write_pgm(dir / "images" / (d.record.id + ".pgm"), d.image);
    records.push_back(d.record);
  }
  write_ground_truth(dir / "gt.jsonl", records);
  std::ofstream(dir / "wider.txt", std::ios::trunc) << serialize_wider(records);
  std::ofstream(dir / "fddb-ellipseList.txt", std::ios::trunc) << serialize_fddb(records);
}

std::vector<SyntheticImage> load_synthetic(const std::filesystem::path& dir) {
  std::vector<SyntheticImage> out;
  for (auto& r : read_ground_truth(dir / "gt.jsonl")) {
    Tensor img = read_pnm(dir / "images" / (r.id + ".pgm"));
    if (r.width == 0) r.width = img.w();
    if (r.height == 0) r.height = img.h();
    out.push_back({std::move(r), std::move(img)});
  }
  return out;
}

}  // namespace fdet
