#pragma once

// Optimization loops for the three model roles: the unpaired cycle
// translator, the supervised IR->RGB colorizer, and the night->day RGB
// translator. Includes the learning-rate schedule, Adam, loss logs and the
// stage checkpoint format.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "tirgan/dataset.hpp"
#include "tirgan/losses.hpp"
#include "tirgan/networks.hpp"

namespace tirgan::train {

namespace fs = std::filesystem;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class StageRole { cycle_translator, colorizer, day_translator };

std::string_view to_string(StageRole r);
StageRole parse_stage_role(std::string_view name);

struct TrainSchedule {
  int total_epochs = 60;
  int constant_epochs = 40;
  double base_lr_generator = 2e-4;
  double base_lr_discriminator = 2e-4;
  int batch_size = 1;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainSchedule&) const = default;
};

// 60 epochs, flat 2e-4 for 40, linear decay to 0.
TrainSchedule cyclegan_schedule();
// 100 epochs, flat 2e-4 for 80, linear decay to 0.
TrainSchedule ticgan_schedule();
// 80 epochs, generator 2e-4 / discriminator 1e-4, flat for the first half.
TrainSchedule todaygan_schedule();

// base for epoch < constant_epochs, then
// base * (total - epoch) / (total - constant).
double lr_at_epoch(const TrainSchedule& schedule, int epoch, loss::Side side);

struct AdamConfig {
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(nn::ParameterList params, AdamConfig config = {});

  // Applies one update from the accumulated gradients. Parameters with no
  // gradient are treated as having a zero gradient.
  void step(double lr);
  void zero_grad();

  std::vector<nn::NamedTensor> state(const std::string& prefix) const;
  void load_state(const std::vector<nn::NamedTensor>& state, const std::string& prefix,
                  long steps_taken);
  long steps_taken() const { return t_; }

 private:
  nn::ParameterList params_;
  AdamConfig config_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

struct LossLog {
  struct Row {
    long step = 0;
    int epoch = 0;
    double lr_g = 0.0;
    double lr_d = 0.0;
    std::vector<double> values;
    double total = 0.0;    // generator objective
    double total_d = 0.0;  // discriminator objective
  };

  // The first n_generator_terms terms make up the generator objective
  // (total); the rest make up the discriminator objective (total_d). Each
  // total is the sum of weights[i] * values[i] over its terms.
  std::vector<std::string> terms;
  std::vector<double> weights;
  std::size_t n_generator_terms = 0;
  std::vector<Row> rows;

  std::string to_csv() const;
  double weighted_total(const std::vector<double>& values) const;
  double weighted_total_d(const std::vector<double>& values) const;
};

// CycleGAN-role stage. Domain A -> B is the "forward" direction.
struct CycleStageOptions {
  TrainSchedule schedule = cyclegan_schedule();
  loss::LossWeights weights = {.lambda_cycle = 10.0, .adv_mode = loss::AdvMode::lsgan};
  nn::GeneratorConfig generator = {.in_channels = 1, .out_channels = 1, .base_width = 16,
                                   .n_downsample = 2, .n_resblocks = 3,
                                   .arch = nn::GeneratorArch::resnet};
  nn::DiscriminatorConfig discriminator = {.in_channels = 1, .base_width = 16, .n_layers = 3};
  bool replay_buffer = true;
  std::size_t replay_capacity = 50;
  bool multiview_discriminators = false;
  bool horizontal_flip = false;
};

// Supervised colorizer stage (IR -> RGB).
struct ColorizerOptions {
  TrainSchedule schedule = ticgan_schedule();
  loss::LossWeights weights = {.lambda_l1 = 100.0, .lambda_perceptual = 10.0,
                               .lambda_tv = 1.0, .adv_mode = loss::AdvMode::vanilla};
  nn::GeneratorConfig generator = {.in_channels = 1, .out_channels = 3, .base_width = 16,
                                   .n_downsample = 2, .n_resblocks = 3,
                                   .arch = nn::GeneratorArch::coarse2fine};
  // in_channels is derived: IR channels + RGB channels (conditional input).
  nn::DiscriminatorConfig discriminator = {.in_channels = 4, .base_width = 16, .n_layers = 3};
  loss::ExtractorKind extractor = loss::ExtractorKind::random_conv;
  std::string extractor_weights;
  std::vector<std::string> extractor_taps;
  bool horizontal_flip = false;
};

CycleStageOptions day_translator_defaults();

struct StageCheckpoint {
  StageRole role = StageRole::colorizer;
  std::map<std::string, nn::GeneratorConfig> generators;
  std::map<std::string, nn::DiscriminatorConfig> discriminators;
  std::vector<nn::NamedTensor> parameters;       // "<network>/<parameter>"
  std::vector<nn::NamedTensor> optimizer_state;  // "<optimizer>/<parameter>/{m,v}"
  long optimizer_steps = 0;
  int epochs_completed = 0;
  nlohmann::json config = nlohmann::json::object();
  std::string content_hash;  // filled by save/load

  // Builds the named generator with its trained parameters.
  std::unique_ptr<nn::Generator> generator(const std::string& name) const;
  std::unique_ptr<nn::Discriminator> discriminator(const std::string& name) const;
};

void save_checkpoint(StageCheckpoint& checkpoint, const fs::path& path);
StageCheckpoint load_checkpoint(const fs::path& path,
                                std::optional<StageRole> expected_role = std::nullopt);

struct TrainResult {
  StageCheckpoint checkpoint;
  LossLog log;
};

using StepCallback = std::function<void(const LossLog::Row&)>;

// Holds generated samples for discriminator updates; with probability 1/2 a
// query returns a previously generated sample instead of the new one.
class ImagePool {
 public:
  ImagePool(std::size_t capacity, std::uint64_t seed);
  Tensor query(const Tensor& batch);

 private:
  std::size_t capacity_;
  std::vector<Tensor> images_;
  std::mt19937_64 rng_;
};

class CycleTrainer {
 public:
  CycleTrainer(const data::ImageSet& domain_a, const data::ImageSet& domain_b,
               CycleStageOptions options, StageRole role = StageRole::cycle_translator);

  std::size_t steps_per_epoch() const;
  // Batch `index` of `epoch`; shuffling is deterministic in the seed.
  std::pair<Tensor, Tensor> batch(int epoch, std::size_t index);

  // Generator sub-step: updates G_AB and G_BA only. Returns the generator
  // terms in log order and keeps the fakes for the discriminator sub-step.
  std::vector<double> generator_substep(const Tensor& a, const Tensor& b, double lr);
  // Discriminator sub-step: updates D_A and D_B only.
  std::vector<double> discriminator_substep(const Tensor& a, const Tensor& b, double lr);

  LossLog::Row train_step(int epoch, std::size_t index);
  TrainResult run(const StepCallback& on_step = {});

  StageCheckpoint checkpoint() const;
  // Continues from a whole-epoch checkpoint of the same role and shape.
  void resume(const StageCheckpoint& checkpoint);
  const LossLog& log() const { return log_; }
  nn::Generator& generator_ab() { return *g_ab_; }
  nn::Generator& generator_ba() { return *g_ba_; }
  nn::ParameterList generator_parameters() const;
  nn::ParameterList discriminator_parameters() const;

 private:
  struct ViewDiscriminator {
    std::string name;
    std::function<ag::Var(const ag::Var&)> view;
    std::unique_ptr<nn::Discriminator> net;
  };

  ag::Var adversarial_generator_term(const std::vector<ViewDiscriminator>& ds, const ag::Var& fake) const;
  ag::Var discriminator_term(const std::vector<ViewDiscriminator>& ds, const Tensor& real,
                             const Tensor& fake) const;

  const data::ImageSet& a_;
  const data::ImageSet& b_;
  CycleStageOptions options_;
  StageRole role_;
  std::unique_ptr<nn::Generator> g_ab_, g_ba_;
  std::vector<ViewDiscriminator> d_a_, d_b_;
  std::unique_ptr<Adam> opt_g_, opt_d_;
  ImagePool pool_a_, pool_b_;
  std::mt19937_64 data_rng_;
  int perm_epoch_ = -1;
  std::vector<std::size_t> perm_a_, perm_b_;
  Tensor last_fake_a_, last_fake_b_;
  LossLog log_;
  long step_ = 0;
  int epochs_completed_ = 0;
};

class ColorizerTrainer {
 public:
  ColorizerTrainer(const data::ImageSet& ir, const data::ImageSet& rgb, ColorizerOptions options);

  std::size_t steps_per_epoch() const;
  std::pair<Tensor, Tensor> batch(int epoch, std::size_t index);

  // Terms: g_adv, l1, perceptual, tv.
  std::vector<double> generator_substep(const Tensor& ir, const Tensor& rgb, double lr);
  // Terms: d_adv.
  std::vector<double> discriminator_substep(const Tensor& ir, const Tensor& rgb, double lr);

  LossLog::Row train_step(int epoch, std::size_t index);
  TrainResult run(const StepCallback& on_step = {});

  StageCheckpoint checkpoint() const;
  void resume(const StageCheckpoint& checkpoint);
  const LossLog& log() const { return log_; }
  nn::Generator& generator() { return *g_; }
  nn::Discriminator& discriminator() { return *d_; }
  const loss::FeatureExtractor& feature_extractor() const { return fx_; }

 private:
  const data::ImageSet& ir_;
  const data::ImageSet& rgb_;
  ColorizerOptions options_;
  std::unique_ptr<nn::Generator> g_;
  std::unique_ptr<nn::Discriminator> d_;
  loss::FeatureExtractor fx_;
  std::unique_ptr<Adam> opt_g_, opt_d_;
  std::mt19937_64 data_rng_;
  int perm_epoch_ = -1;
  std::vector<std::size_t> perm_;
  Tensor last_fake_;
  LossLog log_;
  long step_ = 0;
  int epochs_completed_ = 0;
};

TrainResult train_cycle_translator(const data::ImageSet& domain_a, const data::ImageSet& domain_b,
                                   const CycleStageOptions& options,
                                   const StepCallback& on_step = {});
TrainResult train_colorizer(const data::ImageSet& ir, const data::ImageSet& rgb,
                            const ColorizerOptions& options, const StepCallback& on_step = {});
// Domain A = night RGB, domain B = day RGB; G_AB is the night->day direction.
TrainResult train_day_translator(const data::ImageSet& night_rgb, const data::ImageSet& day_rgb,
                                 const CycleStageOptions& options,
                                 const StepCallback& on_step = {});

// JSON views of the configuration types. from_json only overwrites keys that
// are present and rejects unknown keys.
nlohmann::json to_json(const TrainSchedule& s);
nlohmann::json to_json(const loss::LossWeights& w);
nlohmann::json to_json(const nn::GeneratorConfig& g);
nlohmann::json to_json(const nn::DiscriminatorConfig& d);
nlohmann::json to_json(const CycleStageOptions& o);
nlohmann::json to_json(const ColorizerOptions& o);
void from_json(const nlohmann::json& j, TrainSchedule& s);
void from_json(const nlohmann::json& j, loss::LossWeights& w);
void from_json(const nlohmann::json& j, nn::GeneratorConfig& g);
void from_json(const nlohmann::json& j, nn::DiscriminatorConfig& d);
void from_json(const nlohmann::json& j, CycleStageOptions& o);
void from_json(const nlohmann::json& j, ColorizerOptions& o);

}  // namespace tirgan::train
