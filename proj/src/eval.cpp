#include "fdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>

#include "text_util.hpp"

namespace fdet {

// Kuhn-Munkres with potentials on a rows <= cols cost matrix (minimization).
namespace {

std::vector<int> hungarian_min(const std::vector<std::vector<double>>& cost, int rows, int cols) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<int> p(cols + 1, 0), way(cols + 1, 0);
  for (int i = 1; i <= rows; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(rows, -1);
  for (int j = 1; j <= cols; ++j)
    if (p[j]) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace

std::vector<int> max_weight_assignment(const std::vector<std::vector<double>>& weights,
                                       double min_weight) {
  const int rows = static_cast<int>(weights.size());
  if (rows == 0) return {};
  const int cols = static_cast<int>(weights[0].size());
  std::vector<int> out(rows, -1);
  if (cols == 0) return out;
  // Forbidden pairs get weight 0, the same as staying unmatched; all allowed
  // weights are positive so padding never displaces a real pair.
  const bool transpose = rows > cols;
  const int r = transpose ? cols : rows, c = transpose ? rows : cols;
  std::vector<std::vector<double>> cost(r, std::vector<double>(c, 0.0));
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const double w = weights[i][j];
      const double eff = (w >= min_weight && w > 0) ? w : 0.0;
      (transpose ? cost[j][i] : cost[i][j]) = -eff;
    }
  const auto assign = hungarian_min(cost, r, c);
  for (int a = 0; a < r; ++a) {
    const int b = assign[a];
    if (b < 0) continue;
    const int i = transpose ? b : a, j = transpose ? a : b;
    const double w = weights[i][j];
    if (w >= min_weight && w > 0) out[i] = j;
  }
  return out;
}

double MatchResult::total_iou() const {
  double s = 0;
  for (const auto& p : pairs) s += p.iou;
  return s;
}

std::vector<std::vector<double>> iou_matrix(std::span<const ScoredRegion> dets,
                                            std::span<const Annotation> gts, int resolution) {
  std::vector<std::vector<double>> m(dets.size(), std::vector<double>(gts.size(), 0.0));
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = 0; j < gts.size(); ++j)
      m[i][j] = region_iou(dets[i].region, gts[j].region, resolution);
  return m;
}

namespace {

MatchResult match_from_matrix(const std::vector<std::vector<double>>& m, std::size_t n_dets,
                              std::size_t n_gts, double min_iou) {
  MatchResult r;
  const auto assign = max_weight_assignment(m, min_iou);
  std::vector<char> gt_used(n_gts, 0);
  for (std::size_t i = 0; i < n_dets; ++i) {
    if (i < assign.size() && assign[i] >= 0) {
      r.pairs.push_back({i, static_cast<std::size_t>(assign[i]), m[i][static_cast<std::size_t>(assign[i])]});
      gt_used[static_cast<std::size_t>(assign[i])] = 1;
    } else {
      r.unmatched_dets.push_back(i);
    }
  }
  for (std::size_t j = 0; j < n_gts; ++j)
    if (!gt_used[j]) r.unmatched_gts.push_back(j);
  return r;
}

// Largest number of one-to-one pairs with IoU > 0.5, computed as a
// max-weight assignment whose weights make cardinality dominate.
std::size_t count_true_positives(const std::vector<std::vector<double>>& m) {
  if (m.empty() || m[0].empty()) return 0;
  const double big = static_cast<double>(m.size() + m[0].size() + 1);
  std::vector<std::vector<double>> w(m.size(), std::vector<double>(m[0].size(), 0.0));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) w[i][j] = m[i][j] > 0.5 ? big + m[i][j] : 0.0;
  const auto assign = max_weight_assignment(w, big);
  return static_cast<std::size_t>(std::count_if(assign.begin(), assign.end(), [](int a) { return a >= 0; }));
}

}  // namespace

MatchResult match_detections(std::span<const ScoredRegion> dets, std::span<const Annotation> gts,
                             const EvalOptions& opts) {
  const auto m = iou_matrix(dets, gts, opts.resolution);
  return match_from_matrix(m, dets.size(), gts.size(), opts.min_iou);
}

RocPair compute_roc(std::span<const ImageEval> images, const EvalOptions& opts) {
  RocPair out;
  out.images = images.size();
  for (const auto& im : images) out.total_faces += im.gts.size();
  if (out.total_faces == 0) throw std::invalid_argument("ROC needs at least one annotated face");
  const double faces = static_cast<double>(out.total_faces);

  struct State {
    std::vector<std::size_t> order;            // detections by descending score
    std::vector<std::vector<double>> iou;      // full matrix in `order`
    std::size_t active = 0;                    // prefix of `order` above threshold
    std::size_t fp = 0, tp = 0;
    double iou_sum = 0;
  };
  std::vector<State> states(images.size());
  std::vector<double> thresholds;
  for (std::size_t k = 0; k < images.size(); ++k) {
    const auto& im = images[k];
    auto& st = states[k];
    st.order.resize(im.dets.size());
    std::iota(st.order.begin(), st.order.end(), std::size_t{0});
    std::stable_sort(st.order.begin(), st.order.end(), [&](std::size_t a, std::size_t b) {
      return im.dets[a].score > im.dets[b].score;
    });
    std::vector<ScoredRegion> sorted;
    for (std::size_t i : st.order) {
      sorted.push_back(im.dets[i]);
      thresholds.push_back(im.dets[i].score);
    }
    st.iou = iou_matrix(sorted, im.gts, opts.resolution);
  }
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  if (thresholds.empty()) {
    const double inf = std::numeric_limits<double>::infinity();
    out.discrete.points.push_back({inf, 0, 0});
    out.continuous.points.push_back({inf, 0, 0});
    return out;
  }

  std::size_t fp = 0, tp = 0;
  double iou_sum = 0;
  for (double t : thresholds) {
    for (std::size_t k = 0; k < images.size(); ++k) {
      auto& st = states[k];
      const auto& dets = images[k].dets;
      std::size_t active = st.active;
      while (active < st.order.size() && dets[st.order[active]].score >= t) ++active;
      if (active == st.active) continue;
      st.active = active;
      fp -= st.fp;
      tp -= st.tp;
      iou_sum -= st.iou_sum;
      // Detections overlapping no face are always unmatched; keep them out of
      // the assignment problems.
      std::vector<std::vector<double>> sub;
      std::size_t lonely = 0;
      for (std::size_t i = 0; i < active; ++i) {
        const auto& row = st.iou[i];
        if (std::any_of(row.begin(), row.end(), [&](double v) { return v >= opts.min_iou; }))
          sub.push_back(row);
        else
          ++lonely;
      }
      const auto mr = match_from_matrix(sub, sub.size(), images[k].gts.size(), opts.min_iou);
      st.fp = lonely + mr.unmatched_dets.size();
      st.tp = count_true_positives(sub);
      st.iou_sum = 0;
      for (const auto& p : mr.pairs)
        if (p.iou > opts.continuous_floor) st.iou_sum += p.iou;
      fp += st.fp;
      tp += st.tp;
      iou_sum += st.iou_sum;
    }
    out.discrete.points.push_back({t, static_cast<double>(fp), static_cast<double>(tp) / faces});
    out.continuous.points.push_back({t, static_cast<double>(fp), iou_sum / faces});
  }
  return out;
}

RocCurve discrete_roc(std::span<const ImageEval> images, const EvalOptions& opts) {
  return compute_roc(images, opts).discrete;
}

RocCurve continuous_roc(std::span<const ImageEval> images, const EvalOptions& opts) {
  return compute_roc(images, opts).continuous;
}

double y_at_false_positives(const RocCurve& c, double max_fp) {
  double y = 0;
  for (const auto& p : c.points)
    if (p.false_positives <= max_fp) y = std::max(y, p.y);
  return y;
}

double fit_ellipse_factor(int resolution, double tol) {
  const BBox unit(0, 0, 1, 1);
  auto objective = [&](double k) {
    return raster_iou(unit, EllipseRegion(0.5, 0.5, k / 2, k / 2, 0.0), resolution);
  };
  const double phi = (std::sqrt(5.0) - 1) / 2;
  double a = 0.8, b = 1.6;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = objective(c), fd = objective(d);
  while (b - a > tol) {
    if (fc >= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = objective(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = objective(d);
    }
  }
  return 0.5 * (a + b);
}

double ellipse_fit_factor() {
  static const double k = fit_ellipse_factor(1024);
  return k;
}

EllipseRegion box_to_ellipse(const BBox& b) {
  if (!(b.area() > 0)) throw std::invalid_argument("box_to_ellipse: degenerate box");
  const double k = ellipse_fit_factor();
  return EllipseRegion(b.cx(), b.cy(), k * b.width() / 2, k * b.height() / 2, 0.0);
}

FoldReport aggregate_folds(std::span<const std::vector<ImageEval>> folds,
                           std::optional<std::size_t> expected_folds, const EvalOptions& opts) {
  if (folds.empty()) throw std::invalid_argument("aggregate_folds: no folds");
  if (expected_folds && *expected_folds != folds.size())
    throw std::invalid_argument("aggregate_folds: got " + std::to_string(folds.size()) +
                                " folds, configuration expects " +
                                std::to_string(*expected_folds));
  FoldReport r;
  std::vector<ImageEval> pooled;
  for (const auto& f : folds) {
    r.per_fold.push_back(compute_roc(f, opts));
    pooled.insert(pooled.end(), f.begin(), f.end());
  }
  r.pooled = compute_roc(pooled, opts);
  return r;
}

namespace {

std::string num(double v, int prec = 6) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

}  // namespace

std::string roc_csv(const RocPair& curves) {
  std::string s = "threshold,false_positives,y_discrete,y_continuous\n";
  for (std::size_t i = 0; i < curves.discrete.points.size(); ++i) {
    const auto& d = curves.discrete.points[i];
    const auto& c = curves.continuous.points[i];
    s += num(d.threshold) + "," + num(d.false_positives, 0) + "," + num(d.y) + "," + num(c.y) + "\n";
  }
  return s;
}

std::string roc_svg(std::span<const std::pair<std::string, RocPair>> curves) {
  constexpr double W = 640, H = 420, L = 60, R = 170, T = 30, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  double max_x = 1;
  for (const auto& [name, c] : curves)
    for (const auto& p : c.discrete.points) max_x = std::max(max_x, p.false_positives);
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  auto px = [&](double x) { return num(L + pw * x / max_x, 2); };
  auto py = [&](double y) { return num(T + ph * (1 - y), 2); };

  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W, 0) + "\" height=\"" + num(H, 0) +
       "\" viewBox=\"0 0 " + num(W, 0) + " " + num(H, 0) + "\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + num(W, 0) + "\" height=\"" + num(H, 0) + "\" fill=\"white\"/>\n";
  s += "<rect x=\"" + num(L, 0) + "\" y=\"" + num(T, 0) + "\" width=\"" + num(pw, 0) + "\" height=\"" +
       num(ph, 0) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double y = k / 5.0;
    s += "<text x=\"" + num(L - 8, 0) + "\" y=\"" + py(y) + "\" font-size=\"11\" text-anchor=\"end\">" +
         num(y, 1) + "</text>\n";
    const double x = max_x * k / 5.0;
    s += "<text x=\"" + px(x) + "\" y=\"" + num(T + ph + 16, 0) +
         "\" font-size=\"11\" text-anchor=\"middle\">" + num(x, 0) + "</text>\n";
  }
  s += "<text x=\"" + num(L + pw / 2, 0) + "\" y=\"" + num(H - 12, 0) +
       "\" font-size=\"12\" text-anchor=\"middle\">false positives</text>\n";
  s += "<text x=\"16\" y=\"" + num(T + ph / 2, 0) + "\" font-size=\"12\" text-anchor=\"middle\" "
       "transform=\"rotate(-90 16 " + num(T + ph / 2, 0) + ")\">true positive rate</text>\n";
  std::size_t ci = 0;
  for (const auto& [name, c] : curves) {
    const char* color = colors[ci % 8];
    for (int kind = 0; kind < 2; ++kind) {
      const auto& pts = kind == 0 ? c.discrete.points : c.continuous.points;
      std::string poly;
      for (const auto& p : pts) poly += px(p.false_positives) + "," + py(p.y) + " ";
      if (!poly.empty()) poly.pop_back();
      s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\"" +
           (kind == 1 ? " stroke-dasharray=\"5,3\"" : "") + " points=\"" + poly + "\"/>\n";
    }
    const double ly = T + 14 + 18.0 * static_cast<double>(ci);
    s += "<line x1=\"" + num(W - R + 10, 0) + "\" y1=\"" + num(ly, 0) + "\" x2=\"" + num(W - R + 30, 0) +
         "\" y2=\"" + num(ly, 0) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + num(W - R + 36, 0) + "\" y=\"" + num(ly + 4, 0) + "\" font-size=\"11\">" + name +
         "</text>\n";
    ++ci;
  }
  s += "<text x=\"" + num(W - R + 10, 0) + "\" y=\"" + num(H - B, 0) +
       "\" font-size=\"10\">solid: discrete, dashed: continuous</text>\n";
  s += "</svg>\n";
  return s;
}

void emit_report(const RocPair& curves, const std::filesystem::path& dir, const std::string& stem) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create report directory " + dir.string() + ": " + ec.message());
  const auto csv_path = dir / (stem + ".csv");
  const auto svg_path = dir / (stem + ".svg");
  std::ofstream csv(csv_path, std::ios::trunc | std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
  csv << roc_csv(curves);
  std::ofstream svg(svg_path, std::ios::trunc | std::ios::binary);
  if (!svg) throw std::runtime_error("cannot write " + svg_path.string());
  const std::pair<std::string, RocPair> one[] = {{stem, curves}};
  svg << roc_svg(one);
  if (!csv || !svg) throw std::runtime_error("failed writing report to " + dir.string());
}

std::vector<std::pair<std::string, std::vector<ScoredRegion>>> parse_detections(
    std::string_view text, DetectionMode mode) {
  using namespace text;
  const auto lines = split_lines(text);
  std::vector<std::pair<std::string, std::vector<ScoredRegion>>> out;
  std::size_t i = 0;
  while (i < lines.size()) {
    std::pair<std::string, std::vector<ScoredRegion>> entry;
    entry.first = std::string(lines[i++].text);
    if (i >= lines.size()) throw ParseError(eof_line(text), "missing detection count for " + entry.first);
    const int count = parse_count(lines[i].text, lines[i].number);
    ++i;
    for (int k = 0; k < count; ++k) {
      if (i >= lines.size())
        throw ParseError(eof_line(text), "expected " + std::to_string(count) + " detections for " + entry.first);
      const auto& ln = lines[i++];
      const auto f = parse_numbers(ln.text, ln.number);
      if (mode == DetectionMode::kRect) {
        if (f.size() != 5) throw ParseError(ln.number, "expected 'x y w h score'");
        if (f[2] < 0 || f[3] < 0) throw ParseError(ln.number, "negative detection size");
        entry.second.push_back({BBox::from_xywh(f[0], f[1], f[2], f[3]), f[4]});
      } else {
        if (f.size() != 6) throw ParseError(ln.number, "expected 'major minor angle cx cy score'");
        if (!(f[0] > 0) || !(f[1] > 0)) throw ParseError(ln.number, "ellipse radii must be positive");
        entry.second.push_back({EllipseRegion(f[3], f[4], f[0], f[1], f[2]), f[5]});
      }
    }
    out.push_back(std::move(entry));
  }
  return out;
}

std::string serialize_detections(
    std::span<const std::pair<std::string, std::vector<ScoredRegion>>> dets, DetectionMode mode) {
  std::string s;
  for (const auto& [id, list] : dets) {
    s += id + "\n" + std::to_string(list.size()) + "\n";
    for (const auto& d : list) {
      if (mode == DetectionMode::kRect) {
        const BBox b = bounding_box(d.region);
        s += num(b.x1, 4) + " " + num(b.y1, 4) + " " + num(b.width(), 4) + " " + num(b.height(), 4) +
             " " + num(d.score, 6) + "\n";
      } else {
        const EllipseRegion e = std::holds_alternative<EllipseRegion>(d.region)
                                    ? std::get<EllipseRegion>(d.region)
                                    : box_to_ellipse(std::get<BBox>(d.region));
        s += num(e.major_r, 4) + " " + num(e.minor_r, 4) + " " + num(e.angle, 6) + " " + num(e.cx, 4) +
             " " + num(e.cy, 4) + " " + num(d.score, 6) + "\n";
      }
    }
  }
  return s;
}

}  // namespace fdet
