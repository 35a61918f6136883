#pragma once

// Command-line front end: synth, pipeline, translate, eval.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "tirgan/pipelines.hpp"

namespace tirgan::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kWorkdirEnv = "TIRGAN_WORKDIR";
inline constexpr const char* kResolvedConfigName = "config.resolved.json";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Key/value config documents: `[a.b]` section headers and `key = value`
// lines, where value is a quoted string, number, true/false, or a one-line
// array of those. `#` starts a comment.
nlohmann::json parse_kv_config(std::string_view text, const std::string& origin);
// .json files are parsed as JSON, anything else as key/value.
nlohmann::json load_config_file(const fs::path& path);

// "1" / "approach1" -> approach1, "baseline" -> baseline.
pipe::Approach parse_approach_flag(std::string_view value);

nlohmann::json default_pipeline_config();
// Recursively overlays `overlay` onto `base`; unknown keys are rejected.
void merge_config(nlohmann::json& base, const nlohmann::json& overlay, const std::string& where = "");
// Fills the spec from a resolved document. Applies "epochs" when set.
pipe::PipelineSpec spec_from_config(const nlohmann::json& resolved);
// Snapshot of the spec that fully determines a run.
nlohmann::json snapshot_config(const pipe::PipelineSpec& spec);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tirgan::cli
