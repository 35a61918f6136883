#pragma once

// Composition of trained stages into the baseline and the three night-IR ->
// day-RGB approaches, synthesized-dataset construction, and batch inference.
//
// Work directory layout:
//   stages/<name>/checkpoint     stage checkpoint archive
//   stages/<name>/stage.json     cache key and training-set record
//   stages/<name>/loss_log.csv
//   synth/<name>/manifest.jsonl  synthesized paired dataset (+ ir/, rgb/)
//   lineage.json                 what fed what, with file hashes
//   out/                         default translate output

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "tirgan/dataset.hpp"
#include "tirgan/training.hpp"

namespace tirgan::pipe {

namespace fs = std::filesystem;

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Approach { baseline, approach1, approach2, approach3 };

std::string_view to_string(Approach a);
Approach parse_approach(std::string_view name);

// Stage names used in the work directory.
inline constexpr const char* kColorizerStage = "colorizer";          // day-IR -> day-RGB
inline constexpr const char* kIrTranslatorStage = "ir_translator";   // A=night-IR, B=day-IR
inline constexpr const char* kDayTranslatorStage = "day_translator"; // A=night-RGB, B=day-RGB
inline constexpr const char* kColorizerFakeDayStage = "colorizer_fake_day";
inline constexpr const char* kColorizerFakeNightStage = "colorizer_fake_night";
inline constexpr const char* kSynthFakeDay = "night_ir_fake_day_rgb";
inline constexpr const char* kSynthFakeNight = "fake_night_ir_day_rgb";

struct PipelineSpec {
  Approach approach = Approach::baseline;
  fs::path manifest;
  fs::path work_dir;
  std::uint64_t seed = 0;
  train::ColorizerOptions colorizer;
  train::CycleStageOptions ir_translator;
  train::CycleStageOptions day_translator = train::day_translator_defaults();

  // Test hook: Stage A is replaced by the identity map and not trained.
  bool identity_stage_a = false;
  data::FileAudit* audit = nullptr;
  // Off when the caller already holds a WorkdirLock.
  bool lock_work_dir = true;
  std::function<void(const std::string&)> log;
};

// Sets every stage schedule to `epochs` total epochs, keeping the
// constant/decay proportion (at least one constant epoch).
void override_epochs(PipelineSpec& spec, int epochs);

struct StageRecord {
  std::string name;
  std::string role;               // stage role, or "identity" for the test hook
  fs::path checkpoint;            // relative to work_dir; empty for identity
  std::string checkpoint_sha256;  // file hash
  std::string content_hash;       // archive content hash
  std::string cache_key;
  std::vector<std::string> inputs;  // "manifest" or synthesized dataset names
  fs::path loss_log;
  std::string loss_log_sha256;
  std::size_t training_pairs = 0;
  bool cached = false;            // not serialized
};

struct FileRecord {
  fs::path path;  // relative to work_dir
  std::string sha256;
};

struct SynthRecord {
  std::string name;
  std::string produced_by;  // stage name
  fs::path manifest;        // relative to work_dir
  std::string manifest_sha256;
  std::size_t n_pairs = 0;
  std::vector<FileRecord> files;
};

// One step of the inference chain: a stage's generator, or identity.
struct InferenceStep {
  std::string stage;
  std::string generator;  // "G_AB", "G_BA", "G"; empty for identity
};

struct PipelineArtifacts {
  Approach approach = Approach::baseline;
  fs::path work_dir;
  std::string manifest_sha256;
  std::vector<StageRecord> stages;
  std::vector<SynthRecord> synthesized;
  std::vector<InferenceStep> inference;

  const StageRecord& stage(const std::string& name) const;
  nlohmann::json lineage() const;
};

PipelineArtifacts run_pipeline(const PipelineSpec& spec);
PipelineArtifacts run_baseline(const PipelineSpec& spec);
PipelineArtifacts run_approach1(const PipelineSpec& spec);
PipelineArtifacts run_approach2(const PipelineSpec& spec);
PipelineArtifacts run_approach3(const PipelineSpec& spec);

// Reads lineage.json from a completed work directory.
PipelineArtifacts load_artifacts(const fs::path& work_dir);
// Lists files in the lineage that are missing or whose hash differs.
std::vector<std::string> verify_lineage(const PipelineArtifacts& artifacts);

// Night-IR -> RGB through the inference chain. Writes <stem>.png per input
// into out_dir and returns the output paths in input order.
std::vector<fs::path> translate(const PipelineArtifacts& artifacts,
                                const std::vector<fs::path>& inputs, const fs::path& out_dir,
                                data::FileAudit* audit = nullptr);

// Runs a generator on an (N, C, H, W) batch of any spatial size: reflect-pads
// bottom/right up to the generator's size multiple, then crops back.
Tensor run_generator_padded(const nn::Generator& g, const Tensor& x);

// Exclusive lock on a work directory, released on destruction. A lock left
// by a process that no longer exists is taken over.
class WorkdirLock {
 public:
  explicit WorkdirLock(const fs::path& work_dir);
  ~WorkdirLock();
  WorkdirLock(const WorkdirLock&) = delete;
  WorkdirLock& operator=(const WorkdirLock&) = delete;

 private:
  fs::path path_;
};

}  // namespace tirgan::pipe
