#pragma once

// Paired thermal/RGB sample manifests, image loading, and the deterministic
// toy scene generator used for desk-scale runs.

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "tirgan/evaluation.hpp"
#include "tirgan/tensor.hpp"

namespace tirgan::data {

namespace fs = std::filesystem;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TimeOfDay { day, night };
enum class Split { train, test };

std::string_view to_string(TimeOfDay t);
std::string_view to_string(Split s);

struct SamplePair {
  std::string id;
  fs::path ir_path;                  // absolute once loaded
  std::optional<fs::path> rgb_path;  // absent for IR-only samples
  TimeOfDay time_of_day = TimeOfDay::day;
  Split split = Split::train;

  bool paired() const { return rgb_path.has_value(); }
};

struct DatasetManifest {
  std::vector<SamplePair> samples;
  fs::path root;
  std::map<std::string, std::string> meta;
};

// JSON-lines manifest, one sample per line:
//   {"id", "ir", "rgb" (or null), "tod": "day"|"night", "split": "train"|"test"}
// An optional line {"meta": {...}} carries free-form string metadata.
// Paths are relative to the manifest's directory.
DatasetManifest load_manifest(const fs::path& path);
void save_manifest(const DatasetManifest& manifest, const fs::path& path);

std::vector<SamplePair> filter_samples(const DatasetManifest& manifest,
                                       std::optional<TimeOfDay> time_of_day,
                                       std::optional<Split> split, bool paired_only);

// v -> v / 127.5 - 1, shape (C, H, W).
ImageTensor load_image(const fs::path& path, std::size_t expected_channels);
// Inverse map with rounding, clamped to [0, 255].
void save_image(const fs::path& path, const ImageTensor& image);
std::uint8_t denormalize(double v);

// Records every image file read through it, for provenance audits.
class FileAudit {
 public:
  void record(const fs::path& path);
  std::vector<fs::path> reads() const;
  void clear();

 private:
  mutable std::mutex mu_;
  std::vector<fs::path> reads_;
};

// Image source used by training loops.
class ImageSet {
 public:
  virtual ~ImageSet() = default;
  virtual std::size_t size() const = 0;
  virtual ImageTensor get(std::size_t i) const = 0;
};

class InMemoryImageSet : public ImageSet {
 public:
  InMemoryImageSet() = default;
  explicit InMemoryImageSet(std::vector<ImageTensor> images) : images_(std::move(images)) {}
  std::size_t size() const override { return images_.size(); }
  ImageTensor get(std::size_t i) const override { return images_.at(i); }
  void push_back(ImageTensor img) { images_.push_back(std::move(img)); }

 private:
  std::vector<ImageTensor> images_;
};

// Decodes lazily and caches decoded images.
class FileImageSet : public ImageSet {
 public:
  FileImageSet(std::vector<fs::path> paths, std::size_t channels,
               FileAudit* audit = nullptr);
  std::size_t size() const override { return paths_.size(); }
  ImageTensor get(std::size_t i) const override;
  const std::vector<fs::path>& paths() const { return paths_; }

 private:
  std::vector<fs::path> paths_;
  std::size_t channels_;
  FileAudit* audit_;
  mutable std::vector<std::optional<ImageTensor>> cache_;
};

struct ToyScene {
  std::string scene_id;
  std::string day_sample_id;
  std::string night_sample_id;
  std::vector<eval::Annotation> vehicles;
};

struct ToyDataset {
  DatasetManifest manifest;
  fs::path manifest_path;
  fs::path annotations_path;
  std::vector<ToyScene> scenes;
};

// Renders n_pairs registered scenes (day-RGB, day-IR, night-RGB, night-IR)
// under out_dir, plus manifest.jsonl and annotations.jsonl. Deterministic in
// (n_pairs, image_size, seed).
ToyDataset synth_toy_dataset(const fs::path& out_dir, int n_pairs, int image_size,
                             std::uint64_t seed);

}  // namespace tirgan::data
