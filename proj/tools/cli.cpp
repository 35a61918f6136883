#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "tirgan/dataset.hpp"
#include "tirgan/evaluation.hpp"
#include "tirgan/io.hpp"

namespace tirgan::cli {

using nlohmann::json;

// ---------------------------------------------------------------- config text

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Drops a trailing comment that is not inside a quoted string.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

json parse_scalar(const std::string& raw, const std::string& where) {
  if (raw == "true") return true;
  if (raw == "false") return false;
  if (!raw.empty() && raw.front() == '"') {
    try {
      return json::parse(raw);
    } catch (const json::exception&) {
      throw UsageError(where + ": malformed string " + raw);
    }
  }
  // Numbers: integers stay integral so seeds round-trip exactly.
  try {
    std::size_t used = 0;
    if (raw.find_first_of(".eE") == std::string::npos) {
      long long v = std::stoll(raw, &used);
      if (used == raw.size()) return v;
    } else {
      double v = std::stod(raw, &used);
      if (used == raw.size()) return v;
    }
  } catch (const std::exception&) {
  }
  throw UsageError(where + ": cannot parse value '" + raw + "'");
}

json parse_value(const std::string& raw, const std::string& where) {
  if (raw.empty()) throw UsageError(where + ": missing value");
  if (raw.front() != '[') return parse_scalar(raw, where);
  if (raw.back() != ']') throw UsageError(where + ": unterminated array");
  json arr = json::array();
  std::string inner = raw.substr(1, raw.size() - 2);
  std::string item;
  bool quoted = false;
  auto flush = [&] {
    std::string t = trim(item);
    if (!t.empty()) arr.push_back(parse_scalar(t, where));
    item.clear();
  };
  for (char c : inner) {
    if (c == '"') quoted = !quoted;
    if (c == ',' && !quoted) {
      flush();
    } else {
      item += c;
    }
  }
  flush();
  return arr;
}

std::vector<std::string> split_dotted(const std::string& key, const std::string& where) {
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string p;
  while (std::getline(ss, p, '.')) {
    p = trim(p);
    if (p.empty()) throw UsageError(where + ": empty key segment in '" + key + "'");
    parts.push_back(p);
  }
  if (parts.empty()) throw UsageError(where + ": empty key");
  return parts;
}

void set_path(json& root, const std::vector<std::string>& path, json value, const std::string& where) {
  json* node = &root;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    json& next = (*node)[path[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw UsageError(where + ": '" + path[i] + "' is not a table");
    node = &next;
  }
  if (node->contains(path.back())) throw UsageError(where + ": duplicate key '" + path.back() + "'");
  (*node)[path.back()] = std::move(value);
}

}  // namespace

json parse_kv_config(std::string_view text, const std::string& origin) {
  json root = json::object();
  std::vector<std::string> section;
  std::stringstream ss{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    std::string t = trim(strip_comment(line));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw UsageError(where + ": malformed section header");
      section = split_dotted(t.substr(1, t.size() - 2), where);
      json* node = &root;
      for (const auto& s : section) {
        json& next = (*node)[s];
        if (next.is_null()) next = json::object();
        if (!next.is_object()) throw UsageError(where + ": '" + s + "' is not a table");
        node = &next;
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw UsageError(where + ": expected key = value");
    auto path = section;
    for (auto& k : split_dotted(trim(t.substr(0, eq)), where)) path.push_back(k);
    set_path(root, path, parse_value(trim(t.substr(eq + 1)), where), where);
  }
  return root;
}

json load_config_file(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
  const std::string text = read_text_file(path);
  json doc;
  if (path.extension() == ".json") {
    try {
      doc = json::parse(text);
    } catch (const json::exception& e) {
      throw UsageError(path.string() + ": " + e.what());
    }
  } else {
    doc = parse_kv_config(text, path.string());
  }
  if (!doc.is_object()) throw UsageError(path.string() + ": config must be a table/object");
  // Paths inside a config file are relative to the file.
  for (const char* key : {"manifest", "workdir"}) {
    if (doc.contains(key) && doc[key].is_string()) {
      fs::path p = doc[key].get<std::string>();
      if (p.is_relative()) doc[key] = (fs::absolute(path).parent_path() / p).lexically_normal().string();
    }
  }
  return doc;
}

pipe::Approach parse_approach_flag(std::string_view value) {
  if (value == "1") return pipe::Approach::approach1;
  if (value == "2") return pipe::Approach::approach2;
  if (value == "3") return pipe::Approach::approach3;
  try {
    return pipe::parse_approach(value);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

json default_pipeline_config() {
  pipe::PipelineSpec spec;
  json j = snapshot_config(spec);
  j["approach"] = nullptr;
  j["manifest"] = nullptr;
  j["workdir"] = nullptr;
  return j;
}

void merge_config(json& base, const json& overlay, const std::string& where) {
  if (!overlay.is_object()) throw UsageError("config section '" + where + "' must be a table");
  for (const auto& [key, value] : overlay.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw UsageError("unknown config key '" + path + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, path);
    } else {
      slot = value;
    }
  }
}

pipe::PipelineSpec spec_from_config(const json& j) {
  pipe::PipelineSpec spec;
  try {
    if (j.at("approach").is_null()) throw UsageError("no approach given (--approach or config 'approach')");
    spec.approach = parse_approach_flag(j.at("approach").get<std::string>());
    if (j.at("manifest").is_null()) throw UsageError("no manifest given (--manifest or config 'manifest')");
    spec.manifest = j.at("manifest").get<std::string>();
    if (j.at("workdir").is_null())
      throw UsageError(std::string("no work directory given (--workdir, config 'workdir' or $") +
                       kWorkdirEnv + ")");
    spec.work_dir = j.at("workdir").get<std::string>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    train::from_json(j.at("colorizer"), spec.colorizer);
    train::from_json(j.at("ir_translator"), spec.ir_translator);
    train::from_json(j.at("day_translator"), spec.day_translator);
    if (!j.at("epochs").is_null()) pipe::override_epochs(spec, j.at("epochs").get<int>());
  } catch (const json::exception& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  return spec;
}

json snapshot_config(const pipe::PipelineSpec& spec) {
  return {{"approach", std::string(pipe::to_string(spec.approach))},
          {"manifest", spec.manifest.string()},
          {"workdir", spec.work_dir.string()},
          {"seed", spec.seed},
          {"epochs", nullptr},
          {"colorizer", train::to_json(spec.colorizer)},
          {"ir_translator", train::to_json(spec.ir_translator)},
          {"day_translator", train::to_json(spec.day_translator)}};
}

// ---------------------------------------------------------------- commands

namespace {

fs::path absolute_path(const std::string& p) { return fs::absolute(p).lexically_normal(); }

int cmd_synth(int n, int size, std::uint64_t seed, const std::string& out_dir, std::ostream& out) {
  auto ds = data::synth_toy_dataset(out_dir, n, size, seed);
  out << ds.manifest_path.string() << "\n";
  return kExitOk;
}

struct PipelineFlags {
  std::string approach;
  std::string config;
  std::string workdir;
  std::string manifest;
  std::uint64_t seed = 0;
  int epochs = 0;
  std::vector<std::string> sets;
};

int cmd_pipeline(const PipelineFlags& f, bool seed_given, bool epochs_given, std::ostream& out,
                 std::ostream& err) {
  json resolved = default_pipeline_config();
  if (const char* env = std::getenv(kWorkdirEnv); env && *env) resolved["workdir"] = absolute_path(env).string();
  if (!f.config.empty()) merge_config(resolved, load_config_file(f.config));
  json flags = json::object();
  if (!f.approach.empty()) {
    parse_approach_flag(f.approach);
    flags["approach"] = f.approach;
  }
  if (!f.workdir.empty()) flags["workdir"] = absolute_path(f.workdir).string();
  if (!f.manifest.empty()) flags["manifest"] = absolute_path(f.manifest).string();
  if (seed_given) flags["seed"] = f.seed;
  if (epochs_given) flags["epochs"] = f.epochs;
  merge_config(resolved, flags);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    json value;
    const std::string raw = s.substr(eq + 1);
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    json doc = json::object();
    set_path(doc, split_dotted(s.substr(0, eq), "--set"), value, "--set");
    merge_config(resolved, doc);
  }

  pipe::PipelineSpec spec = spec_from_config(resolved);
  spec.log = [&out](const std::string& msg) { out << "[pipeline] " << msg << "\n" << std::flush; };
  fs::create_directories(spec.work_dir);
  pipe::WorkdirLock lock(spec.work_dir);
  spec.lock_work_dir = false;
  write_text_file(spec.work_dir / kResolvedConfigName, snapshot_config(spec).dump(2) + "\n");
  (void)err;
  auto art = pipe::run_pipeline(spec);
  out << "[pipeline] " << pipe::to_string(art.approach) << ": " << art.stages.size()
      << " stage(s), " << art.synthesized.size() << " synthesized dataset(s)\n";
  out << (spec.work_dir / "lineage.json").string() << "\n";
  return kExitOk;
}

int cmd_translate(const std::string& workdir_flag, const std::string& input,
                  const std::string& out_flag, std::ostream& out, std::ostream& err) {
  std::string workdir = workdir_flag;
  if (workdir.empty()) {
    if (const char* env = std::getenv(kWorkdirEnv); env && *env) workdir = env;
  }
  if (workdir.empty()) throw UsageError(std::string("no work directory given (--workdir or $") + kWorkdirEnv + ")");
  const fs::path in = input;
  std::vector<fs::path> inputs;
  if (fs::is_directory(in)) {
    for (const auto& e : fs::directory_iterator(in))
      if (e.is_regular_file() && e.path().extension() == ".png") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else if (fs::is_regular_file(in)) {
    inputs.push_back(in);
  } else {
    throw UsageError("input not found: " + in.string());
  }
  auto art = pipe::load_artifacts(workdir);
  const fs::path out_dir = out_flag.empty() ? fs::path(workdir) / "out" : fs::path(out_flag);
  if (inputs.empty()) {
    err << "warning: no PNG images in " << in.string() << "\n";
    return kExitOk;
  }
  auto outputs = pipe::translate(art, inputs, out_dir);
  for (const auto& p : outputs) out << p.string() << "\n";
  return kExitOk;
}

eval::Interpolation parse_interp(const std::string& s) {
  if (s == "all_points") return eval::Interpolation::all_points;
  if (s == "eleven_point") return eval::Interpolation::eleven_point;
  if (s == "hundred_one_point") return eval::Interpolation::hundred_one_point;
  throw UsageError("unknown interpolation '" + s + "'");
}

struct EvalFlags {
  std::string detections, annotations, yolo_dir, sizes, out_dir;
  double iou = 0.5;
  double score = 0.25;
  std::string interp = "all_points";
};

int cmd_eval(const EvalFlags& f, std::ostream& out) {
  eval::EvalOptions opts;
  opts.iou_threshold = f.iou;
  opts.score_threshold = f.score;
  opts.interpolation = parse_interp(f.interp);
  if (f.detections.empty() == f.yolo_dir.empty())
    throw UsageError("give exactly one of --detections or --yolo-dir");
  if (!f.yolo_dir.empty() && f.sizes.empty()) throw UsageError("--yolo-dir needs --sizes");
  auto anns = eval::load_annotations(f.annotations);
  auto dets = f.detections.empty() ? eval::import_yolo_detections(f.yolo_dir, f.sizes)
                                   : eval::load_detections(f.detections);
  auto report = eval::evaluate(dets, anns, opts);
  const fs::path dir = f.out_dir;
  fs::create_directories(dir);
  write_text_file(dir / "report.json", report.to_json());
  write_text_file(dir / "pr_curve.csv", report.pr_csv());
  eval::render_pr_curve(report, dir / "pr_curve.png");
  out << report.table_row() << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Thermal-IR night to day RGB translation: data synthesis, pipelines, inference "
               "and detection evaluation",
               "tirgan"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Render the synthetic toy dataset");
  int n = 4, size = 64;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  synth->add_option("--n", n, "Number of day/night scene pairs")->check(CLI::PositiveNumber);
  synth->add_option("--size", size, "Image side length in pixels")->check(CLI::Range(8, 4096));
  synth->add_option("--seed", synth_seed, "Random seed");
  synth->add_option("--out", synth_out, "Output directory")->required();

  auto* pipeline = app.add_subcommand("pipeline", "Train the stages of an approach");
  PipelineFlags pf;
  pipeline->add_option("--approach", pf.approach, "baseline, 1, 2 or 3");
  pipeline->add_option("--config", pf.config, "Config file (.json or key/value)");
  pipeline->add_option("--workdir", pf.workdir, std::string("Work directory (default $") + kWorkdirEnv + ")");
  pipeline->add_option("--manifest", pf.manifest, "Dataset manifest");
  auto* seed_opt = pipeline->add_option("--seed", pf.seed, "Root seed, fanned out per stage");
  auto* epochs_opt = pipeline->add_option("--epochs", pf.epochs, "Override every stage's epoch count")
                         ->check(CLI::PositiveNumber);
  pipeline->add_option("--set", pf.sets, "Config override key.path=value (repeatable)");

  auto* translate = app.add_subcommand("translate", "Translate night-IR images with trained artifacts");
  std::string tr_workdir, tr_input, tr_out;
  translate->add_option("--workdir", tr_workdir, std::string("Work directory (default $") + kWorkdirEnv + ")");
  translate->add_option("--input", tr_input, "PNG file or directory of PNGs")->required();
  translate->add_option("--out", tr_out, "Output directory (default <workdir>/out)");

  auto* evalc = app.add_subcommand("eval", "Score detections against annotations");
  EvalFlags ef;
  evalc->add_option("--detections", ef.detections, "Detections JSON-lines file");
  evalc->add_option("--yolo-dir", ef.yolo_dir, "Directory of per-image detector text files");
  evalc->add_option("--sizes", ef.sizes, "Image-size sidecar JSON for --yolo-dir");
  evalc->add_option("--annotations", ef.annotations, "Annotations JSON-lines file")->required();
  evalc->add_option("--iou", ef.iou, "IoU threshold")->check(CLI::Range(0.0, 1.0));
  evalc->add_option("--score", ef.score, "Score threshold for precision/recall")->check(CLI::Range(0.0, 1.0));
  evalc->add_option("--interp", ef.interp, "all_points, eleven_point or hundred_one_point");
  evalc->add_option("--out", ef.out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(n, size, synth_seed, synth_out, out);
    if (*pipeline) return cmd_pipeline(pf, seed_opt->count() > 0, epochs_opt->count() > 0, out, err);
    if (*translate) return cmd_translate(tr_workdir, tr_input, tr_out, out, err);
    if (*evalc) return cmd_eval(ef, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"tirgan"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace tirgan::cli
