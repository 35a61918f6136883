#include "tirgan/evaluation.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "tirgan/io.hpp"

namespace tirgan::eval {

using nlohmann::json;

std::string_view to_string(Category c) {
  switch (c) {
    case Category::car: return "car";
    case Category::bus: return "bus";
    case Category::truck: return "truck";
    case Category::motorcycle: return "motorcycle";
    case Category::bicycle: return "bicycle";
  }
  return "?";
}

std::optional<Category> parse_category(std::string_view name) {
  for (Category c : kAllCategories)
    if (to_string(c) == name) return c;
  return std::nullopt;
}

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double iy = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<Annotation>& anns,
                             double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw EvalError("iou_threshold must be in (0, 1], got " + std::to_string(iou_threshold));
  }
  using Key = std::pair<std::string, Category>;
  std::map<Key, std::vector<std::size_t>> gt_groups;
  MatchResult result;
  result.true_positive.assign(dets.size(), false);
  for (std::size_t i = 0; i < anns.size(); ++i) {
    gt_groups[{anns[i].image_id, anns[i].category}].push_back(i);
    ++result.gt_counts[anns[i].category];
  }

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });

  std::vector<bool> used(anns.size(), false);
  for (std::size_t di : order) {
    const auto& d = dets[di];
    auto it = gt_groups.find({d.image_id, d.category});
    if (it == gt_groups.end()) continue;
    double best = -1.0;
    std::size_t best_idx = 0;
    for (std::size_t ai : it->second) {
      if (used[ai]) continue;
      const double o = iou(d.box, anns[ai].box);
      if (o > best) {
        best = o;
        best_idx = ai;
      }
    }
    if (best >= iou_threshold) {
      used[best_idx] = true;
      result.true_positive[di] = true;
    }
  }
  return result;
}

std::vector<PrPoint> pr_points(const std::vector<bool>& labels, std::size_t n_gt) {
  std::vector<PrPoint> out;
  out.reserve(labels.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) ++tp;
    const double recall = n_gt == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(n_gt);
    const double precision = static_cast<double>(tp) / static_cast<double>(i + 1);
    out.push_back({recall, precision});
  }
  return out;
}

double average_precision(const std::vector<PrPoint>& points, Interpolation interp) {
  if (points.empty()) return 0.0;
  if (interp == Interpolation::all_points) {
    std::vector<double> rec{0.0}, prec{0.0};
    for (const auto& p : points) {
      rec.push_back(p.recall);
      prec.push_back(p.precision);
    }
    rec.push_back(1.0);
    prec.push_back(0.0);
    for (std::size_t i = prec.size() - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
    double ap = 0.0;
    for (std::size_t i = 0; i + 1 < rec.size(); ++i) {
      if (rec[i + 1] != rec[i]) ap += (rec[i + 1] - rec[i]) * prec[i + 1];
    }
    return std::clamp(ap, 0.0, 1.0);
  }
  const int steps = interp == Interpolation::eleven_point ? 10 : 100;
  double ap = 0.0;
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    double best = 0.0;
    for (const auto& p : points)
      if (p.recall >= t - 1e-12) best = std::max(best, p.precision);
    ap += best;
  }
  return ap / (steps + 1);
}

EvalReport evaluate(const std::vector<Detection>& dets,
                    const std::vector<Annotation>& anns, const EvalOptions& options) {
  const MatchResult match = match_detections(dets, anns, options.iou_threshold);
  EvalReport report;
  report.options = options;
  report.n_annotations = anns.size();
  report.n_detections = dets.size();

  std::set<std::string> images;
  for (const auto& a : anns) images.insert(a.image_id);
  for (const auto& d : dets) images.insert(d.image_id);
  report.n_images = images.size();

  std::map<Category, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < dets.size(); ++i) by_class[dets[i].category].push_back(i);

  double ap_sum = 0.0;
  std::size_t ap_classes = 0;
  for (Category c : kAllCategories) {
    const std::size_t n_gt = match.gt_counts.contains(c) ? match.gt_counts.at(c) : 0;
    auto& idx = by_class[c];
    if (n_gt == 0 && idx.empty()) continue;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return dets[a].score > dets[b].score;
    });
    std::vector<bool> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) labels.push_back(match.true_positive[i]);
    ClassResult cr;
    cr.n_gt = n_gt;
    cr.n_det = idx.size();
    cr.curve = pr_points(labels, n_gt);
    cr.ap = n_gt == 0 ? 0.0 : average_precision(cr.curve, options.interpolation);
    if (n_gt > 0) {
      ap_sum += cr.ap;
      ++ap_classes;
    }
    report.per_class[c] = std::move(cr);
  }
  report.map = ap_classes ? ap_sum / static_cast<double>(ap_classes) : 0.0;

  std::size_t kept = 0, tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].score >= options.score_threshold) {
      ++kept;
      if (match.true_positive[i]) ++tp;
    }
  }
  report.precision = kept ? static_cast<double>(tp) / static_cast<double>(kept) : 0.0;
  report.recall = anns.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(anns.size());
  return report;
}

namespace {

std::string_view interp_name(Interpolation i) {
  switch (i) {
    case Interpolation::all_points: return "all_points";
    case Interpolation::eleven_point: return "11_point";
    case Interpolation::hundred_one_point: return "101_point";
  }
  return "?";
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

[[noreturn]] void fail_at(const fs::path& file, std::size_t line, const std::string& msg) {
  throw EvalError(file.string() + ":" + std::to_string(line) + ": " + msg);
}

Box parse_bbox(const json& j, const fs::path& file, std::size_t line) {
  if (!j.is_array() || j.size() != 4) fail_at(file, line, "\"bbox\" must be [x, y, w, h]");
  for (const auto& v : j)
    if (!v.is_number()) fail_at(file, line, "\"bbox\" entries must be numbers");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) fail_at(file, line, "box width and height must be positive");
  return b;
}

template <typename F>
void for_each_jsonl(const fs::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot open " + path.string());
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      fail_at(path, line, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) fail_at(path, line, "record must be a JSON object");
    f(j, line);
  }
}

std::string require_string(const json& j, const char* key, const fs::path& file,
                           std::size_t line) {
  if (!j.contains(key) || !j[key].is_string())
    fail_at(file, line, std::string("missing string field \"") + key + "\"");
  return j[key].get<std::string>();
}

Category require_category(const json& j, const fs::path& file, std::size_t line) {
  const std::string name = require_string(j, "category", file, line);
  auto c = parse_category(name);
  if (!c) fail_at(file, line, "unknown category \"" + name + "\"");
  return *c;
}

}  // namespace

std::string EvalReport::to_json() const {
  json j;
  json classes = json::object();
  for (const auto& [c, r] : per_class) {
    classes[std::string(to_string(c))] = {{"ap", r.ap}, {"n_gt", r.n_gt}, {"n_det", r.n_det}};
  }
  j["per_class"] = classes;
  j["map"] = map;
  j["precision"] = precision;
  j["recall"] = recall;
  j["images"] = n_images;
  j["annotations"] = n_annotations;
  j["detections"] = n_detections;
  j["iou_threshold"] = options.iou_threshold;
  j["score_threshold"] = options.score_threshold;
  j["interpolation"] = std::string(interp_name(options.interpolation));
  return j.dump(2) + "\n";
}

std::string EvalReport::pr_csv() const {
  std::string out = "class,recall,precision\n";
  for (const auto& [c, r] : per_class) {
    for (const auto& p : r.curve) {
      out += std::string(to_string(c)) + "," + fmt("%.6f", p.recall) + "," +
             fmt("%.6f", p.precision) + "\n";
    }
  }
  return out;
}

std::string EvalReport::table_row() const {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu %zu %.3f %.3f %.3f", n_images, n_annotations,
                precision, recall, map);
  return buf;
}

std::vector<Annotation> load_annotations(const fs::path& path) {
  std::vector<Annotation> out;
  for_each_jsonl(path, [&](const json& j, std::size_t line) {
    Annotation a;
    a.image_id = require_string(j, "image_id", path, line);
    a.category = require_category(j, path, line);
    if (!j.contains("bbox")) fail_at(path, line, "missing field \"bbox\"");
    a.box = parse_bbox(j["bbox"], path, line);
    out.push_back(std::move(a));
  });
  return out;
}

std::vector<Detection> load_detections(const fs::path& path) {
  std::vector<Detection> out;
  for_each_jsonl(path, [&](const json& j, std::size_t line) {
    Detection d;
    d.image_id = require_string(j, "image_id", path, line);
    d.category = require_category(j, path, line);
    if (!j.contains("bbox")) fail_at(path, line, "missing field \"bbox\"");
    d.box = parse_bbox(j["bbox"], path, line);
    if (!j.contains("score") || !j["score"].is_number())
      fail_at(path, line, "missing numeric field \"score\"");
    d.score = j["score"].get<double>();
    if (!(d.score >= 0.0 && d.score <= 1.0)) fail_at(path, line, "score outside [0, 1]");
    out.push_back(std::move(d));
  });
  return out;
}

std::string annotations_jsonl(const std::vector<Annotation>& anns) {
  std::string out;
  for (const auto& a : anns) {
    json j = {{"image_id", a.image_id},
              {"category", std::string(to_string(a.category))},
              {"bbox", {a.box.x, a.box.y, a.box.w, a.box.h}}};
    out += j.dump() + "\n";
  }
  return out;
}

std::string detections_jsonl(const std::vector<Detection>& dets) {
  std::string out;
  for (const auto& d : dets) {
    json j = {{"image_id", d.image_id},
              {"category", std::string(to_string(d.category))},
              {"bbox", {d.box.x, d.box.y, d.box.w, d.box.h}},
              {"score", d.score}};
    out += j.dump() + "\n";
  }
  return out;
}

EvalReport evaluate_files(const fs::path& det_file, const fs::path& ann_file,
                          const EvalOptions& options) {
  return evaluate(load_detections(det_file), load_annotations(ann_file), options);
}

std::vector<Detection> import_yolo_detections(const fs::path& dir,
                                              const fs::path& size_sidecar) {
  static const std::map<int, Category> kCocoVehicles = {
      {1, Category::bicycle}, {2, Category::car}, {3, Category::motorcycle},
      {5, Category::bus}, {7, Category::truck}};
  json sizes;
  try {
    sizes = json::parse(read_text_file(size_sidecar));
  } catch (const json::parse_error& e) {
    throw EvalError(size_sidecar.string() + ": malformed JSON: " + e.what());
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".txt") files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  std::vector<Detection> out;
  for (const auto& file : files) {
    const std::string image_id = file.stem().string();
    if (!sizes.contains(image_id)) {
      throw EvalError(size_sidecar.string() + ": no image size for \"" + image_id + "\"");
    }
    const double width = sizes[image_id].at(0).get<double>();
    const double height = sizes[image_id].at(1).get<double>();
    std::ifstream in(file);
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
      ++line;
      if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::istringstream ss(text);
      int cls = -1;
      double cx, cy, w, h, score;
      if (!(ss >> cls >> cx >> cy >> w >> h >> score)) {
        fail_at(file, line, "expected \"class cx cy w h score\"");
      }
      auto it = kCocoVehicles.find(cls);
      if (it == kCocoVehicles.end()) continue;
      Detection d;
      d.image_id = image_id;
      d.category = it->second;
      d.box = {(cx - w / 2) * width, (cy - h / 2) * height, w * width, h * height};
      d.score = score;
      if (!d.box.valid()) fail_at(file, line, "box width and height must be positive");
      if (!(score >= 0.0 && score <= 1.0)) fail_at(file, line, "score outside [0, 1]");
      out.push_back(std::move(d));
    }
  }
  return out;
}

void render_pr_curve(const EvalReport& report, const fs::path& png_path, int width,
                     int height) {
  Image8 img;
  img.width = static_cast<std::size_t>(width);
  img.height = static_cast<std::size_t>(height);
  img.channels = 3;
  img.pixels.assign(img.width * img.height * 3, 255);
  const int margin = 30;
  auto plot = [&](int x, int y, std::array<std::uint8_t, 3> rgb) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    for (int c = 0; c < 3; ++c)
      img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(c)) = rgb[c];
  };
  auto line = [&](int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> rgb) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      plot(x0, y0, rgb);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) { err += dy; x0 += sx; }
      if (e2 <= dx) { err += dx; y0 += sy; }
    }
  };
  auto to_px = [&](double recall, double precision) {
    const int x = margin + static_cast<int>(std::lround(recall * (width - 2 * margin)));
    const int y = height - margin - static_cast<int>(std::lround(precision * (height - 2 * margin)));
    return std::pair{x, y};
  };
  const std::array<std::uint8_t, 3> black{0, 0, 0};
  line(margin, height - margin, width - margin, height - margin, black);
  line(margin, height - margin, margin, margin, black);
  static constexpr std::array<std::array<std::uint8_t, 3>, 5> kColors = {{
      {220, 40, 40}, {230, 160, 0}, {40, 90, 220}, {30, 160, 60}, {170, 50, 190}}};
  for (const auto& [c, r] : report.per_class) {
    const auto color = kColors[static_cast<std::size_t>(c)];
    auto [px, py] = to_px(0.0, r.curve.empty() ? 0.0 : r.curve.front().precision);
    for (const auto& p : r.curve) {
      auto [x, y] = to_px(p.recall, p.precision);
      line(px, py, x, y, color);
      px = x;
      py = y;
    }
  }
  write_png(png_path, img);
}

}  // namespace tirgan::eval
