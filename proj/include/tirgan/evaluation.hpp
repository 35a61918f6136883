#pragma once

// Vehicle-detection evaluation: IoU matching, precision/recall curves,
// per-class average precision and mAP at a single IoU threshold.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tirgan::eval {

namespace fs = std::filesystem;

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Category { car, bus, truck, motorcycle, bicycle };

inline constexpr std::array<Category, 5> kAllCategories = {
    Category::car, Category::bus, Category::truck, Category::motorcycle,
    Category::bicycle};

std::string_view to_string(Category c);
std::optional<Category> parse_category(std::string_view name);

// Top-left corner plus size, real-valued pixels.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  bool valid() const { return w > 0.0 && h > 0.0; }
};

struct Annotation {
  std::string image_id;
  Category category = Category::car;
  Box box;
};

struct Detection {
  std::string image_id;
  Category category = Category::car;
  Box box;
  double score = 0.0;
};

double iou(const Box& a, const Box& b);

struct MatchResult {
  // One entry per input detection, in input order.
  std::vector<bool> true_positive;
  std::map<Category, std::size_t> gt_counts;
};

// Pascal-VOC greedy matching per (image, category). Detections are visited
// in descending score order (stable on ties); each takes the unmatched
// same-class annotation of highest IoU, if that IoU >= threshold.
MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<Annotation>& anns,
                             double iou_threshold);

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
  bool operator==(const PrPoint&) const = default;
};

// `labels` are TP flags ranked by descending score.
std::vector<PrPoint> pr_points(const std::vector<bool>& labels, std::size_t n_gt);

enum class Interpolation { all_points, eleven_point, hundred_one_point };

double average_precision(const std::vector<PrPoint>& points,
                         Interpolation interp = Interpolation::all_points);

struct ClassResult {
  double ap = 0.0;
  std::size_t n_gt = 0;
  std::size_t n_det = 0;
  std::vector<PrPoint> curve;
};

struct EvalOptions {
  double iou_threshold = 0.5;
  double score_threshold = 0.25;
  Interpolation interpolation = Interpolation::all_points;
};

struct EvalReport {
  std::map<Category, ClassResult> per_class;
  double map = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t n_images = 0;
  std::size_t n_annotations = 0;
  std::size_t n_detections = 0;
  EvalOptions options;

  std::string to_json() const;
  std::string pr_csv() const;
  // "images vehicles precision recall mAP@0.5" with metrics to 3 decimals.
  std::string table_row() const;
};

EvalReport evaluate(const std::vector<Detection>& dets,
                    const std::vector<Annotation>& anns,
                    const EvalOptions& options = {});
EvalReport evaluate_files(const fs::path& det_file, const fs::path& ann_file,
                          const EvalOptions& options = {});

// JSON-lines readers/writers. Errors carry "file:line:" prefixes.
std::vector<Annotation> load_annotations(const fs::path& path);
std::vector<Detection> load_detections(const fs::path& path);
std::string annotations_jsonl(const std::vector<Annotation>& anns);
std::string detections_jsonl(const std::vector<Detection>& dets);

// Imports detector text output: one file per image named <image_id>.txt,
// lines "class_index cx cy w h score" with coordinates normalized to the
// image size given in the JSON sidecar {"<image_id>": [width, height]}.
// Class indices follow COCO numbering; non-vehicle classes are dropped.
std::vector<Detection> import_yolo_detections(const fs::path& dir,
                                              const fs::path& size_sidecar);

// Renders PR curves (one polyline per class) into an RGB PNG.
void render_pr_curve(const EvalReport& report, const fs::path& png_path,
                     int width = 480, int height = 360);

// Object-detection results reported for the full-scale experiment
// (200 test images). Reference values only; not reproduced at desk scale.
struct ReferenceRow {
  std::string_view model;
  int images;
  int annotated_vehicles;
  double precision;
  double recall;
  double map50;
};

inline constexpr std::array<ReferenceRow, 6> kReferenceResults = {{
    {"TIC-GAN", 200, 987, 0.563, 0.342, 0.347},
    {"Proposed approach-1", 200, 987, 0.658, 0.348, 0.441},
    {"Proposed approach-2", 200, 987, 0.734, 0.480, 0.571},
    {"Proposed approach-3", 200, 987, 0.681, 0.614, 0.667},
    {"Night-time RGB", 200, 987, 0.861, 0.653, 0.797},
    {"Day-time RGB", 200, 1247, 0.877, 0.881, 0.907},
}};

}  // namespace tirgan::eval
