#include "tirgan/dataset.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <unordered_map>

#include "tirgan/io.hpp"

namespace tirgan::data {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(TimeOfDay t) { return t == TimeOfDay::day ? "day" : "night"; }
std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

namespace {

[[noreturn]] void fail_at(const fs::path& file, std::size_t line, const std::string& msg) {
  throw DataError(file.string() + ":" + std::to_string(line) + ": " + msg);
}

fs::path resolve(const fs::path& root, const std::string& rel) {
  fs::path p(rel);
  return (p.is_absolute() ? p : root / p).lexically_normal();
}

void check_sample_images(const SamplePair& s, const fs::path& file, std::size_t line) {
  PngInfo ir;
  try {
    ir = read_png_info(s.ir_path);
  } catch (const IoError& e) {
    fail_at(file, line, e.what());
  }
  if (ir.channels != 1 || !ir.eight_bit) {
    fail_at(file, line, "IR image " + s.ir_path.string() + " must be single-channel 8-bit, has " +
                            std::to_string(ir.channels) + " channels");
  }
  if (!s.rgb_path) return;
  PngInfo rgb;
  try {
    rgb = read_png_info(*s.rgb_path);
  } catch (const IoError& e) {
    fail_at(file, line, e.what());
  }
  if (rgb.channels != 3 || !rgb.eight_bit) {
    fail_at(file, line, "RGB image " + s.rgb_path->string() + " must be 3-channel 8-bit");
  }
  if (rgb.width != ir.width || rgb.height != ir.height) {
    fail_at(file, line, "RGB image size " + std::to_string(rgb.width) + "x" +
                            std::to_string(rgb.height) + " differs from IR size " +
                            std::to_string(ir.width) + "x" + std::to_string(ir.height));
  }
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  DatasetManifest manifest;
  manifest.root = fs::absolute(path).parent_path().lexically_normal();

  std::unordered_map<std::string, std::size_t> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      fail_at(path, line, std::string("malformed record: ") + e.what());
    }
    if (!j.is_object()) fail_at(path, line, "malformed record: expected a JSON object");
    if (j.size() == 1 && j.contains("meta")) {
      if (!j["meta"].is_object()) fail_at(path, line, "\"meta\" must be an object");
      for (const auto& [k, v] : j["meta"].items())
        manifest.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    auto str = [&](const char* key) {
      if (!j.contains(key) || !j[key].is_string())
        fail_at(path, line, std::string("malformed record: missing string field \"") + key + "\"");
      return j[key].get<std::string>();
    };
    SamplePair s;
    s.id = str("id");
    if (auto [it, inserted] = seen.emplace(s.id, line); !inserted) {
      fail_at(path, line, "duplicate id \"" + s.id + "\" (lines " + std::to_string(it->second) +
                              " and " + std::to_string(line) + ")");
    }
    s.ir_path = resolve(manifest.root, str("ir"));
    if (j.contains("rgb") && !j["rgb"].is_null()) {
      if (!j["rgb"].is_string()) fail_at(path, line, "malformed record: \"rgb\" must be a string or null");
      s.rgb_path = resolve(manifest.root, j["rgb"].get<std::string>());
    }
    const std::string tod = str("tod");
    if (tod == "day") s.time_of_day = TimeOfDay::day;
    else if (tod == "night") s.time_of_day = TimeOfDay::night;
    else fail_at(path, line, "malformed record: \"tod\" must be \"day\" or \"night\"");
    const std::string split = str("split");
    if (split == "train") s.split = Split::train;
    else if (split == "test") s.split = Split::test;
    else fail_at(path, line, "malformed record: \"split\" must be \"train\" or \"test\"");

    if (!fs::exists(s.ir_path)) fail_at(path, line, "unresolvable path " + s.ir_path.string());
    if (s.rgb_path && !fs::exists(*s.rgb_path))
      fail_at(path, line, "unresolvable path " + s.rgb_path->string());
    check_sample_images(s, path, line);
    manifest.samples.push_back(std::move(s));
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path root = fs::absolute(path).parent_path().lexically_normal();
  std::string out;
  if (!manifest.meta.empty()) {
    ordered_json meta = ordered_json::object();
    for (const auto& [k, v] : manifest.meta) meta[k] = v;
    out += ordered_json{{"meta", meta}}.dump() + "\n";
  }
  auto rel = [&](const fs::path& p) {
    return fs::absolute(p).lexically_normal().lexically_relative(root).generic_string();
  };
  for (const auto& s : manifest.samples) {
    ordered_json j;
    j["id"] = s.id;
    j["ir"] = rel(s.ir_path);
    j["rgb"] = s.rgb_path ? ordered_json(rel(*s.rgb_path)) : ordered_json(nullptr);
    j["tod"] = std::string(to_string(s.time_of_day));
    j["split"] = std::string(to_string(s.split));
    out += j.dump() + "\n";
  }
  write_text_file(path, out);
}

std::vector<SamplePair> filter_samples(const DatasetManifest& manifest,
                                       std::optional<TimeOfDay> time_of_day,
                                       std::optional<Split> split, bool paired_only) {
  std::vector<SamplePair> out;
  for (const auto& s : manifest.samples) {
    if (time_of_day && s.time_of_day != *time_of_day) continue;
    if (split && s.split != *split) continue;
    if (paired_only && !s.paired()) continue;
    out.push_back(s);
  }
  return out;
}

ImageTensor load_image(const fs::path& path, std::size_t expected_channels) {
  Image8 img;
  try {
    img = read_png(path);
  } catch (const IoError& e) {
    throw DataError(e.what());
  }
  if (img.channels != expected_channels) {
    throw DataError("image " + path.string() + " has " + std::to_string(img.channels) +
                    " channels, expected " + std::to_string(expected_channels));
  }
  Tensor t({img.channels, img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        t[(c * img.height + y) * img.width + x] = img.at(y, x, c) / 127.5 - 1.0;
  return ImageTensor(std::move(t));
}

std::uint8_t denormalize(double v) {
  const double s = std::round((v + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(s, 0.0, 255.0));
}

void save_image(const fs::path& path, const ImageTensor& image) {
  Image8 img;
  img.channels = image.channels();
  img.height = image.height();
  img.width = image.width();
  img.pixels.resize(img.channels * img.height * img.width);
  const auto& t = image.tensor();
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        img.at(y, x, c) = denormalize(t[(c * img.height + y) * img.width + x]);
  try {
    write_png(path, img);
  } catch (const IoError& e) {
    throw DataError(e.what());
  }
}

void FileAudit::record(const fs::path& path) {
  std::lock_guard lock(mu_);
  reads_.push_back(fs::absolute(path).lexically_normal());
}

std::vector<fs::path> FileAudit::reads() const {
  std::lock_guard lock(mu_);
  return reads_;
}

void FileAudit::clear() {
  std::lock_guard lock(mu_);
  reads_.clear();
}

FileImageSet::FileImageSet(std::vector<fs::path> paths, std::size_t channels, FileAudit* audit)
    : paths_(std::move(paths)), channels_(channels), audit_(audit), cache_(paths_.size()) {}

ImageTensor FileImageSet::get(std::size_t i) const {
  auto& slot = cache_.at(i);
  if (!slot) {
    if (audit_) audit_->record(paths_[i]);
    slot = load_image(paths_[i], channels_);
  }
  return *slot;
}

// ---------------------------------------------------------------------------
// Toy scenes

namespace {

struct Rgb {
  double r, g, b;
};

Rgb vehicle_color(eval::Category c) {
  switch (c) {
    case eval::Category::car: return {200, 30, 30};
    case eval::Category::bus: return {235, 190, 20};
    case eval::Category::truck: return {30, 70, 200};
    case eval::Category::motorcycle: return {30, 170, 60};
    case eval::Category::bicycle: return {190, 40, 190};
  }
  return {0, 0, 0};
}

struct SceneRaster {
  Image8 day_rgb, night_rgb, day_ir, night_ir;
  std::vector<eval::Annotation> vehicles;
};

Image8 blank(std::size_t size, std::size_t channels) {
  Image8 img;
  img.width = img.height = size;
  img.channels = channels;
  img.pixels.assign(size * size * channels, 0);
  return img;
}

std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
}

bool overlaps(const eval::Box& a, const eval::Box& b) {
  return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;
}

SceneRaster render_scene(std::mt19937_64& rng, int size, const std::string& image_id) {
  const auto S = static_cast<std::size_t>(size);
  const int road_top = static_cast<int>(size * 0.45);
  const int road_bottom = static_cast<int>(size * 0.85);
  auto uniform = [&](int lo, int hi) {  // inclusive
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };

  SceneRaster sc;
  const int n_vehicles = uniform(0, 4);
  const int min_w = std::max(4, size / 8), max_w = std::max(min_w, size / 4);
  const int min_h = std::max(3, size / 10), max_h = std::max(min_h, size / 6);
  for (int v = 0, attempts = 0; v < n_vehicles && attempts < 50; ++attempts) {
    const int w = uniform(min_w, max_w);
    const int h = uniform(min_h, max_h);
    const int x = uniform(0, size - w);
    const int y = uniform(road_top, road_bottom - h);
    eval::Box box{static_cast<double>(x), static_cast<double>(y), static_cast<double>(w),
                  static_cast<double>(h)};
    bool clash = false;
    for (const auto& a : sc.vehicles) clash = clash || overlaps(a.box, box);
    if (clash) continue;
    const int roll = uniform(0, 9);
    const eval::Category cat = roll < 5   ? eval::Category::car
                               : roll < 6 ? eval::Category::bus
                               : roll < 8 ? eval::Category::truck
                               : roll < 9 ? eval::Category::motorcycle
                                          : eval::Category::bicycle;
    sc.vehicles.push_back({image_id, cat, box});
    ++v;
  }

  sc.day_rgb = blank(S, 3);
  sc.day_ir = blank(S, 1);
  std::vector<double> ir(S * S);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Rgb c;
      double t;
      const int noise = uniform(-6, 6);
      if (y < road_top) {
        const double f = static_cast<double>(y) / road_top;
        c = {110 + 60 * f, 160 + 40 * f, 235.0};
        t = 35;
      } else if (y < road_bottom) {
        const bool lane = (y == (road_top + road_bottom) / 2) && ((x / 4) % 2 == 0);
        c = lane ? Rgb{235, 235, 235} : Rgb{100.0 + noise, 100.0 + noise, 104.0 + noise};
        t = lane ? 95 : 80;
      } else {
        c = {70.0 + noise, 125.0 + noise, 60.0};
        t = 60;
      }
      sc.day_rgb.at(y, x, 0) = to_u8(c.r);
      sc.day_rgb.at(y, x, 1) = to_u8(c.g);
      sc.day_rgb.at(y, x, 2) = to_u8(c.b);
      ir[y * S + x] = t + uniform(-5, 5);
    }
  }
  for (const auto& a : sc.vehicles) {
    const Rgb body = vehicle_color(a.category);
    const int x0 = static_cast<int>(a.box.x), y0 = static_cast<int>(a.box.y);
    const int w = static_cast<int>(a.box.w), h = static_cast<int>(a.box.h);
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) {
        const bool window = y < y0 + h / 3 && x > x0 + w / 5 && x < x0 + w - w / 5;
        const Rgb c = window ? Rgb{40, 50, 60} : body;
        sc.day_rgb.at(y, x, 0) = to_u8(c.r);
        sc.day_rgb.at(y, x, 1) = to_u8(c.g);
        sc.day_rgb.at(y, x, 2) = to_u8(c.b);
        const bool engine = y >= y0 + h / 2;
        ir[y * S + x] = (engine ? 230.0 : 195.0) + uniform(-5, 5);
      }
  }
  for (std::size_t i = 0; i < S * S; ++i) sc.day_ir.pixels[i] = to_u8(ir[i]);

  // Night thermal: compressed around a mid level, so contrast is strictly lower.
  constexpr double kNightLevel = 100.0, kNightContrast = 0.4;
  sc.night_ir = blank(S, 1);
  for (std::size_t i = 0; i < S * S; ++i)
    sc.night_ir.pixels[i] =
        to_u8(kNightLevel + kNightContrast * (sc.day_ir.pixels[i] - kNightLevel));

  // Night visible: darkened scene with headlight glare.
  sc.night_rgb = blank(S, 3);
  std::vector<double> glare(S * S, 0.0);
  for (const auto& a : sc.vehicles) {
    const double sigma = std::max(1.5, a.box.h / 3.0);
    const double cy = a.box.y + 0.75 * a.box.h;
    for (double fx : {0.2, 0.8}) {
      const double cx = a.box.x + fx * a.box.w;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          glare[y * S + x] += std::exp(-d2 / (2 * sigma * sigma));
        }
    }
  }
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double g = std::min(1.0, glare[y * S + x]);
      const double tint[3] = {240, 230, 170};
      for (std::size_t c = 0; c < 3; ++c)
        sc.night_rgb.at(y, x, c) = to_u8(0.22 * sc.day_rgb.at(y, x, c) + g * tint[c]);
    }
  return sc;
}

}  // namespace

ToyDataset synth_toy_dataset(const fs::path& out_dir, int n_pairs, int image_size,
                             std::uint64_t seed) {
  if (n_pairs < 1) throw DataError("n_pairs must be >= 1");
  if (image_size < 32) throw DataError("image_size must be >= 32");
  std::error_code ec;
  fs::create_directories(out_dir / "ir", ec);
  fs::create_directories(out_dir / "rgb", ec);
  if (ec || !fs::is_directory(out_dir / "ir")) {
    throw DataError("cannot write to output directory " + out_dir.string());
  }

  ToyDataset ds;
  ds.manifest.root = fs::absolute(out_dir).lexically_normal();
  ds.manifest.meta = {{"source", "synth_toy_dataset"},
                      {"seed", std::to_string(seed)},
                      {"n_pairs", std::to_string(n_pairs)},
                      {"image_size", std::to_string(image_size)}};
  std::mt19937_64 rng(seed);
  std::vector<eval::Annotation> all_boxes;
  for (int i = 0; i < n_pairs; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%04d", i);
    const std::string scene = buf;
    ToyScene ts{scene, scene + "_day", scene + "_night", {}};
    SceneRaster sc = render_scene(rng, image_size, ts.night_sample_id);
    const fs::path root = ds.manifest.root;
    try {
      write_png(root / "ir" / (ts.day_sample_id + ".png"), sc.day_ir);
      write_png(root / "rgb" / (ts.day_sample_id + ".png"), sc.day_rgb);
      write_png(root / "ir" / (ts.night_sample_id + ".png"), sc.night_ir);
      write_png(root / "rgb" / (ts.night_sample_id + ".png"), sc.night_rgb);
    } catch (const IoError& e) {
      throw DataError(e.what());
    }
    ds.manifest.samples.push_back({ts.day_sample_id, root / "ir" / (ts.day_sample_id + ".png"),
                                   root / "rgb" / (ts.day_sample_id + ".png"), TimeOfDay::day,
                                   Split::train});
    ds.manifest.samples.push_back({ts.night_sample_id,
                                   root / "ir" / (ts.night_sample_id + ".png"),
                                   root / "rgb" / (ts.night_sample_id + ".png"),
                                   TimeOfDay::night, Split::train});
    ts.vehicles = sc.vehicles;
    all_boxes.insert(all_boxes.end(), sc.vehicles.begin(), sc.vehicles.end());
    ds.scenes.push_back(std::move(ts));
  }
  ds.manifest_path = ds.manifest.root / "manifest.jsonl";
  ds.annotations_path = ds.manifest.root / "annotations.jsonl";
  save_manifest(ds.manifest, ds.manifest_path);
  write_text_file(ds.annotations_path, eval::annotations_jsonl(all_boxes));
  return ds;
}

}  // namespace tirgan::data
