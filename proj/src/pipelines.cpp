#include "tirgan/pipelines.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <set>

#include "tirgan/io.hpp"

namespace tirgan::pipe {

using nlohmann::json;

std::string_view to_string(Approach a) {
  switch (a) {
    case Approach::baseline: return "baseline";
    case Approach::approach1: return "approach1";
    case Approach::approach2: return "approach2";
    case Approach::approach3: return "approach3";
  }
  return "?";
}

Approach parse_approach(std::string_view name) {
  if (name == "baseline") return Approach::baseline;
  if (name == "approach1") return Approach::approach1;
  if (name == "approach2") return Approach::approach2;
  if (name == "approach3") return Approach::approach3;
  throw std::invalid_argument("unknown approach \"" + std::string(name) +
                              "\" (expected baseline, approach1, approach2 or approach3)");
}

void override_epochs(PipelineSpec& spec, int epochs) {
  if (epochs < 1) throw std::invalid_argument("epoch override must be >= 1");
  auto apply = [epochs](train::TrainSchedule& s) {
    const double frac = static_cast<double>(s.constant_epochs) / s.total_epochs;
    s.total_epochs = epochs;
    s.constant_epochs = std::clamp(static_cast<int>(std::lround(frac * epochs)), 1, epochs);
  };
  apply(spec.colorizer.schedule);
  apply(spec.ir_translator.schedule);
  apply(spec.day_translator.schedule);
}

const StageRecord& PipelineArtifacts::stage(const std::string& name) const {
  for (const auto& s : stages)
    if (s.name == name) return s;
  throw PipelineError("pipeline has no stage \"" + name + "\"");
}

// ---------------------------------------------------------------- lineage JSON

namespace {

json stage_json(const StageRecord& s) {
  return {{"name", s.name},
          {"role", s.role},
          {"checkpoint", s.checkpoint.generic_string()},
          {"checkpoint_sha256", s.checkpoint_sha256},
          {"content_hash", s.content_hash},
          {"cache_key", s.cache_key},
          {"inputs", s.inputs},
          {"loss_log", s.loss_log.generic_string()},
          {"loss_log_sha256", s.loss_log_sha256},
          {"training_pairs", s.training_pairs}};
}

StageRecord stage_from_json(const json& j) {
  StageRecord s;
  s.name = j.at("name").get<std::string>();
  s.role = j.at("role").get<std::string>();
  s.checkpoint = j.at("checkpoint").get<std::string>();
  s.checkpoint_sha256 = j.at("checkpoint_sha256").get<std::string>();
  s.content_hash = j.at("content_hash").get<std::string>();
  s.cache_key = j.at("cache_key").get<std::string>();
  s.inputs = j.at("inputs").get<std::vector<std::string>>();
  s.loss_log = j.at("loss_log").get<std::string>();
  s.loss_log_sha256 = j.at("loss_log_sha256").get<std::string>();
  s.training_pairs = j.at("training_pairs").get<std::size_t>();
  return s;
}

}  // namespace

json PipelineArtifacts::lineage() const {
  json j;
  j["approach"] = std::string(to_string(approach));
  j["manifest_sha256"] = manifest_sha256;
  j["stages"] = json::array();
  for (const auto& s : stages) j["stages"].push_back(stage_json(s));
  j["synthesized"] = json::array();
  for (const auto& d : synthesized) {
    json files = json::array();
    for (const auto& f : d.files) files.push_back({{"path", f.path.generic_string()}, {"sha256", f.sha256}});
    j["synthesized"].push_back({{"name", d.name},
                                {"produced_by", d.produced_by},
                                {"manifest", d.manifest.generic_string()},
                                {"manifest_sha256", d.manifest_sha256},
                                {"n_pairs", d.n_pairs},
                                {"files", files}});
  }
  j["inference"] = json::array();
  for (const auto& step : inference)
    j["inference"].push_back({{"stage", step.stage}, {"generator", step.generator}});
  return j;
}

PipelineArtifacts load_artifacts(const fs::path& work_dir) {
  const fs::path path = work_dir / "lineage.json";
  if (!fs::exists(path))
    throw PipelineError("no lineage.json in " + work_dir.string() + "; run a pipeline first");
  PipelineArtifacts art;
  art.work_dir = work_dir;
  try {
    json j = json::parse(read_text_file(path));
    art.approach = parse_approach(j.at("approach").get<std::string>());
    art.manifest_sha256 = j.at("manifest_sha256").get<std::string>();
    for (const auto& s : j.at("stages")) art.stages.push_back(stage_from_json(s));
    for (const auto& d : j.at("synthesized")) {
      SynthRecord r;
      r.name = d.at("name").get<std::string>();
      r.produced_by = d.at("produced_by").get<std::string>();
      r.manifest = d.at("manifest").get<std::string>();
      r.manifest_sha256 = d.at("manifest_sha256").get<std::string>();
      r.n_pairs = d.at("n_pairs").get<std::size_t>();
      for (const auto& f : d.at("files"))
        r.files.push_back({f.at("path").get<std::string>(), f.at("sha256").get<std::string>()});
      art.synthesized.push_back(std::move(r));
    }
    for (const auto& step : j.at("inference"))
      art.inference.push_back({step.at("stage").get<std::string>(),
                               step.at("generator").get<std::string>()});
  } catch (const json::exception& e) {
    throw PipelineError(path.string() + ": malformed lineage: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw PipelineError(path.string() + ": " + e.what());
  }
  return art;
}

std::vector<std::string> verify_lineage(const PipelineArtifacts& art) {
  std::vector<std::string> problems;
  auto check = [&](const fs::path& rel, const std::string& expected) {
    const fs::path p = art.work_dir / rel;
    if (!fs::exists(p)) {
      problems.push_back("missing " + rel.generic_string());
    } else if (sha256_file(p) != expected) {
      problems.push_back("hash mismatch " + rel.generic_string());
    }
  };
  for (const auto& s : art.stages) {
    if (s.role == "identity") continue;
    check(s.checkpoint, s.checkpoint_sha256);
    check(s.loss_log, s.loss_log_sha256);
  }
  for (const auto& d : art.synthesized) {
    check(d.manifest, d.manifest_sha256);
    for (const auto& f : d.files) check(f.path, f.sha256);
  }
  return problems;
}

// ---------------------------------------------------------------- inference helpers

namespace {

std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

}  // namespace

Tensor run_generator_padded(const nn::Generator& g, const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("expected (N, C, H, W), got " + shape_str(x.shape()));
  const std::size_t m = g.size_multiple();
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t hp = (h + m - 1) / m * m, wp = (w + m - 1) / m * m;
  if (hp == h && wp == w) return g.infer(x);
  Tensor padded({n, c, hp, wp});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < hp; ++y)
        for (std::size_t xx = 0; xx < wp; ++xx)
          padded.at(b, k, y, xx) = x.at(b, k, reflect_index(y, h), reflect_index(xx, w));
  Tensor out = g.infer(padded);
  const std::size_t co = out.dim(1);
  Tensor cropped({n, co, h, w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < co; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) cropped.at(b, k, y, xx) = out.at(b, k, y, xx);
  return cropped;
}

// ---------------------------------------------------------------- lock

WorkdirLock::WorkdirLock(const fs::path& work_dir) : path_(work_dir / ".lock") {
  fs::create_directories(work_dir);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      return;
    }
    if (errno != EEXIST) throw PipelineError("cannot create " + path_.string() + ": " + std::strerror(errno));
    long holder = 0;
    try {
      holder = std::stol(read_text_file(path_));
    } catch (const std::exception&) {
      holder = 0;
    }
    if (holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno != ESRCH)) {
      throw PipelineError("work directory " + path_.parent_path().string() +
                          " is locked by process " + std::to_string(holder));
    }
    fs::remove(path_);  // stale
  }
  throw PipelineError("could not lock work directory " + path_.parent_path().string());
}

WorkdirLock::~WorkdirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------- runner

namespace {

using data::FileImageSet;
using data::SamplePair;
using data::TimeOfDay;

std::vector<fs::path> ir_paths(const std::vector<SamplePair>& s) {
  std::vector<fs::path> out;
  for (const auto& x : s) out.push_back(x.ir_path);
  return out;
}

std::vector<fs::path> rgb_paths(const std::vector<SamplePair>& s) {
  std::vector<fs::path> out;
  for (const auto& x : s) out.push_back(*x.rgb_path);
  return out;
}

class Runner {
 public:
  explicit Runner(const PipelineSpec& spec) : spec_(spec) {
    if (spec_.work_dir.empty()) throw PipelineError("work_dir is not set");
    if (spec_.manifest.empty()) throw PipelineError("manifest is not set");
    manifest_ = data::load_manifest(spec_.manifest);
    art_.approach = spec_.approach;
    art_.work_dir = spec_.work_dir;
    art_.manifest_sha256 = sha256_file(spec_.manifest);
  }

  std::vector<SamplePair> select(std::optional<TimeOfDay> tod, bool paired, const std::string& what) {
    auto s = data::filter_samples(manifest_, tod, data::Split::train, paired);
    if (s.empty()) {
      throw PipelineError(std::string(to_string(spec_.approach)) + " needs " + what +
                          " in the training split of " + spec_.manifest.string());
    }
    return s;
  }

  StageRecord cycle_stage(const std::string& name, train::StageRole role,
                                 train::CycleStageOptions opts, const std::vector<fs::path>& a,
                                 const std::vector<fs::path>& b, std::size_t ch_a, std::size_t ch_b) {
    opts.schedule.seed = derive_seed(spec_.seed, name);
    opts.generator.in_channels = static_cast<int>(ch_a);
    opts.generator.out_channels = static_cast<int>(ch_b);
    if (spec_.identity_stage_a) {
      StageRecord rec;
      rec.name = name;
      rec.role = "identity";
      rec.inputs = {"manifest"};
      log("stage " + name + ": identity (test hook)");
      art_.stages.push_back(rec);
      return art_.stages.back();
    }
    const json key_doc = {{"role", std::string(train::to_string(role))},
                          {"options", train::to_json(opts)},
                          {"a", file_hashes(a)},
                          {"b", file_hashes(b)}};
    return finish_stage(name, key_doc, {"manifest"}, a.size(), [&] {
      FileImageSet sa(a, ch_a, spec_.audit), sb(b, ch_b, spec_.audit);
      train::CycleTrainer t(sa, sb, opts, role);
      return t.run();
    });
  }

  StageRecord colorizer_stage(const std::string& name, train::ColorizerOptions opts,
                                     const std::vector<fs::path>& ir,
                                     const std::vector<fs::path>& rgb, const std::string& input) {
    opts.schedule.seed = derive_seed(spec_.seed, name);
    const json key_doc = {{"role", "colorizer"},
                          {"options", train::to_json(opts)},
                          {"ir", file_hashes(ir)},
                          {"rgb", file_hashes(rgb)}};
    return finish_stage(name, key_doc, {input}, ir.size(), [&] {
      FileImageSet si(ir, 1, spec_.audit), sr(rgb, 3, spec_.audit);
      train::ColorizerTrainer t(si, sr, opts);
      return t.run();
    });
  }

  // Applies a stage's generator (or identity) to each source image and
  // writes a paired dataset under synth/<name>/. `generated_is_ir` says which
  // side of the pair is produced; the other side is copied from `kept`.
  SynthRecord synthesize(const std::string& name, const StageRecord& stage,
                                const std::string& generator, const std::vector<SamplePair>& samples,
                                bool generated_is_ir, TimeOfDay tod) {
    const fs::path rel_dir = fs::path("synth") / name;
    const fs::path dir = spec_.work_dir / rel_dir;
    fs::remove_all(dir);
    fs::create_directories(dir / "ir");
    fs::create_directories(dir / "rgb");
    std::unique_ptr<nn::Generator> g;
    if (stage.role != "identity") {
      auto ck = train::load_checkpoint(spec_.work_dir / stage.checkpoint);
      g = ck.generator(generator);
    }
    SynthRecord rec;
    rec.name = name;
    rec.produced_by = stage.name;
    rec.manifest = rel_dir / "manifest.jsonl";
    data::DatasetManifest out;
    out.meta = {{"produced_by", stage.name},
                {"generator", g ? generator : std::string("identity")},
                {"generated", generated_is_ir ? "ir" : "rgb"}};
    for (const auto& s : samples) {
      const fs::path src_gen = generated_is_ir ? s.ir_path : *s.rgb_path;
      const fs::path src_keep = generated_is_ir ? *s.rgb_path : s.ir_path;
      const std::size_t ch_gen = generated_is_ir ? 1 : 3;
      if (spec_.audit) spec_.audit->record(src_gen);
      ImageTensor in = data::load_image(src_gen, ch_gen);
      ImageTensor produced =
          g ? ImageTensor::from_batch(run_generator_padded(*g, in.as_batch())) : in;
      const fs::path gen_rel = rel_dir / (generated_is_ir ? "ir" : "rgb") / (s.id + ".png");
      const fs::path keep_rel = rel_dir / (generated_is_ir ? "rgb" : "ir") / (s.id + ".png");
      data::save_image(spec_.work_dir / gen_rel, produced);
      if (spec_.audit) spec_.audit->record(src_keep);
      fs::copy_file(src_keep, spec_.work_dir / keep_rel, fs::copy_options::overwrite_existing);
      SamplePair p;
      p.id = s.id;
      p.ir_path = spec_.work_dir / (generated_is_ir ? gen_rel : keep_rel);
      p.rgb_path = spec_.work_dir / (generated_is_ir ? keep_rel : gen_rel);
      p.time_of_day = tod;
      p.split = data::Split::train;
      out.samples.push_back(p);
      rec.files.push_back({generated_is_ir ? gen_rel : keep_rel, sha256_file(p.ir_path)});
      rec.files.push_back({generated_is_ir ? keep_rel : gen_rel, sha256_file(*p.rgb_path)});
    }
    data::save_manifest(out, spec_.work_dir / rec.manifest);
    rec.manifest_sha256 = sha256_file(spec_.work_dir / rec.manifest);
    rec.n_pairs = out.samples.size();
    log("synthesized " + name + ": " + std::to_string(rec.n_pairs) + " pairs");
    synth_manifests_[name] = out;
    art_.synthesized.push_back(std::move(rec));
    return art_.synthesized.back();
  }

  const data::DatasetManifest& synth_manifest(const std::string& name) const {
    return synth_manifests_.at(name);
  }

  PipelineArtifacts finish(std::vector<InferenceStep> inference) {
    art_.inference = std::move(inference);
    write_text_file(spec_.work_dir / "lineage.json", art_.lineage().dump(2) + "\n");
    return art_;
  }

 private:
  void log(const std::string& msg) const {
    if (spec_.log) spec_.log(msg);
  }

  std::vector<std::string> file_hashes(const std::vector<fs::path>& paths) const {
    std::vector<std::string> out;
    for (const auto& p : paths) {
      if (spec_.audit) spec_.audit->record(p);
      out.push_back(sha256_file(p));
    }
    return out;
  }

  template <typename Train>
  StageRecord finish_stage(const std::string& name, const json& key_doc,
                                  std::vector<std::string> inputs, std::size_t pairs, Train&& train) {
    const fs::path rel_dir = fs::path("stages") / name;
    const fs::path dir = spec_.work_dir / rel_dir;
    const fs::path stage_json_path = dir / "stage.json";
    const std::string key = sha256_hex(key_doc.dump());

    if (fs::exists(stage_json_path)) {
      try {
        StageRecord rec = stage_from_json(json::parse(read_text_file(stage_json_path)));
        if (rec.cache_key == key && fs::exists(spec_.work_dir / rec.checkpoint) &&
            sha256_file(spec_.work_dir / rec.checkpoint) == rec.checkpoint_sha256 &&
            fs::exists(spec_.work_dir / rec.loss_log) &&
            sha256_file(spec_.work_dir / rec.loss_log) == rec.loss_log_sha256) {
          rec.cached = true;
          log("stage " + name + ": cached");
          art_.stages.push_back(rec);
          return art_.stages.back();
        }
      } catch (const std::exception&) {
        // unreadable record: retrain
      }
    }

    log("stage " + name + ": training on " + std::to_string(pairs) + " samples");
    fs::create_directories(dir);
    train::TrainResult result;
    try {
      result = train();
    } catch (const std::exception& e) {
      throw PipelineError("stage " + name + " failed: " + e.what());
    }
    StageRecord rec;
    rec.name = name;
    rec.role = std::string(train::to_string(result.checkpoint.role));
    rec.checkpoint = rel_dir / "checkpoint";
    rec.loss_log = rel_dir / "loss_log.csv";
    rec.cache_key = key;
    rec.inputs = std::move(inputs);
    rec.training_pairs = pairs;
    train::save_checkpoint(result.checkpoint, spec_.work_dir / rec.checkpoint);
    rec.content_hash = result.checkpoint.content_hash;
    rec.checkpoint_sha256 = sha256_file(spec_.work_dir / rec.checkpoint);
    write_text_file(spec_.work_dir / rec.loss_log, result.log.to_csv());
    rec.loss_log_sha256 = sha256_file(spec_.work_dir / rec.loss_log);
    write_text_file(stage_json_path, stage_json(rec).dump(2) + "\n");
    art_.stages.push_back(rec);
    return art_.stages.back();
  }

  const PipelineSpec& spec_;
  data::DatasetManifest manifest_;
  PipelineArtifacts art_;
  std::map<std::string, data::DatasetManifest> synth_manifests_;
};

template <typename Body>
PipelineArtifacts with_lock(const PipelineSpec& spec, Approach expected, Body&& body) {
  if (spec.approach != expected) {
    throw PipelineError("spec names " + std::string(to_string(spec.approach)) + " but " +
                        std::string(to_string(expected)) + " was requested");
  }
  std::optional<WorkdirLock> lock;
  if (spec.lock_work_dir) lock.emplace(spec.work_dir);
  fs::create_directories(spec.work_dir);
  Runner runner(spec);
  return body(runner);
}

}  // namespace

PipelineArtifacts run_baseline(const PipelineSpec& spec) {
  return with_lock(spec, Approach::baseline, [&](Runner& r) {
    auto day = r.select(TimeOfDay::day, true, "paired day samples (day IR + day RGB)");
    r.colorizer_stage(kColorizerStage, spec.colorizer, ir_paths(day), rgb_paths(day), "manifest");
    return r.finish({{kColorizerStage, "G"}});
  });
}

PipelineArtifacts run_approach1(const PipelineSpec& spec) {
  return with_lock(spec, Approach::approach1, [&](Runner& r) {
    auto night = r.select(TimeOfDay::night, false, "night IR samples");
    auto day = r.select(TimeOfDay::day, false, "day IR samples");
    auto paired = r.select(TimeOfDay::day, true, "paired day samples (day IR + day RGB)");
    r.cycle_stage(kIrTranslatorStage, train::StageRole::cycle_translator, spec.ir_translator,
                  ir_paths(night), ir_paths(day), 1, 1);
    r.colorizer_stage(kColorizerStage, spec.colorizer, ir_paths(paired), rgb_paths(paired),
                      "manifest");
    return r.finish({{kIrTranslatorStage, spec.identity_stage_a ? "" : "G_AB"},
                     {kColorizerStage, "G"}});
  });
}

PipelineArtifacts run_approach2(const PipelineSpec& spec) {
  return with_lock(spec, Approach::approach2, [&](Runner& r) {
    // Night frames without a registered RGB image cannot be paired and are skipped.
    auto night = r.select(TimeOfDay::night, true, "night samples with registered RGB");
    auto day = r.select(TimeOfDay::day, true, "day RGB samples");
    const StageRecord stage_a = r.cycle_stage(kDayTranslatorStage, train::StageRole::day_translator,
                                        spec.day_translator, rgb_paths(night), rgb_paths(day), 3, 3);
    r.synthesize(kSynthFakeDay, stage_a, "G_AB", night, false, TimeOfDay::night);
    const auto& synth = r.synth_manifest(kSynthFakeDay);
    r.colorizer_stage(kColorizerFakeDayStage, spec.colorizer, ir_paths(synth.samples),
                      rgb_paths(synth.samples), kSynthFakeDay);
    return r.finish({{kColorizerFakeDayStage, "G"}});
  });
}

PipelineArtifacts run_approach3(const PipelineSpec& spec) {
  return with_lock(spec, Approach::approach3, [&](Runner& r) {
    auto night = r.select(TimeOfDay::night, false, "night IR samples");
    auto day = r.select(TimeOfDay::day, false, "day IR samples");
    auto paired = r.select(TimeOfDay::day, true, "paired day samples (day IR + day RGB)");
    const StageRecord stage_a = r.cycle_stage(kIrTranslatorStage, train::StageRole::cycle_translator,
                                        spec.ir_translator, ir_paths(night), ir_paths(day), 1, 1);
    r.synthesize(kSynthFakeNight, stage_a, "G_BA", paired, true, TimeOfDay::day);
    const auto& synth = r.synth_manifest(kSynthFakeNight);
    r.colorizer_stage(kColorizerFakeNightStage, spec.colorizer, ir_paths(synth.samples),
                      rgb_paths(synth.samples), kSynthFakeNight);
    return r.finish({{kColorizerFakeNightStage, "G"}});
  });
}

PipelineArtifacts run_pipeline(const PipelineSpec& spec) {
  switch (spec.approach) {
    case Approach::baseline: return run_baseline(spec);
    case Approach::approach1: return run_approach1(spec);
    case Approach::approach2: return run_approach2(spec);
    case Approach::approach3: return run_approach3(spec);
  }
  throw PipelineError("unknown approach");
}

// ---------------------------------------------------------------- translate

std::vector<fs::path> translate(const PipelineArtifacts& art, const std::vector<fs::path>& inputs,
                                const fs::path& out_dir, data::FileAudit* audit) {
  if (art.inference.empty()) throw PipelineError("artifacts have no inference path");
  std::vector<std::unique_ptr<nn::Generator>> chain;
  for (const auto& step : art.inference) {
    const StageRecord* rec = nullptr;
    for (const auto& s : art.stages)
      if (s.name == step.stage) rec = &s;
    if (!rec) throw PipelineError("incomplete artifacts: no record for stage " + step.stage);
    if (rec->role == "identity" || step.generator.empty()) {
      chain.push_back(nullptr);
      continue;
    }
    const fs::path ck_path = art.work_dir / rec->checkpoint;
    if (!fs::exists(ck_path)) {
      throw PipelineError("incomplete artifacts: checkpoint for stage " + step.stage +
                          " is missing (" + ck_path.string() + ")");
    }
    auto ck = train::load_checkpoint(ck_path);
    chain.push_back(ck.generator(step.generator));
  }

  std::set<std::string> stems;
  for (const auto& in : inputs) {
    if (!stems.insert(in.stem().string()).second)
      throw PipelineError("two inputs share the output name " + in.stem().string() + ".png");
  }
  fs::create_directories(out_dir);
  std::vector<fs::path> outputs;
  for (const auto& in : inputs) {
    if (audit) audit->record(in);
    ImageTensor img = data::load_image(in, 1);
    Tensor x = img.as_batch();
    for (const auto& g : chain)
      if (g) x = run_generator_padded(*g, x);
    if (x.dim(1) != 3) {
      throw PipelineError("inference chain produced " + std::to_string(x.dim(1)) +
                          " channels, expected 3");
    }
    const fs::path out = out_dir / (in.stem().string() + ".png");
    data::save_image(out, ImageTensor::from_batch(x));
    outputs.push_back(out);
  }
  return outputs;
}

}  // namespace tirgan::pipe
