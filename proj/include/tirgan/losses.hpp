#pragma once

// Training objectives. Every function returns a scalar Var to be minimized.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tirgan/autograd.hpp"
#include "tirgan/networks.hpp"

namespace tirgan::loss {

enum class AdvMode { vanilla, lsgan };
enum class Side { generator, discriminator };

std::string_view to_string(AdvMode m);
AdvMode parse_adv_mode(std::string_view name);

// lambda_cycle is the cycle-consistency weight (10.0 for all cycle stages).
// The colorizer weights (l1 / perceptual / tv) and the adversarial and
// identity weights are project defaults, overridable per stage.
struct LossWeights {
  double lambda_adv = 1.0;
  double lambda_cycle = 10.0;
  double lambda_l1 = 100.0;
  double lambda_perceptual = 10.0;
  double lambda_tv = 1.0;
  double lambda_identity = 0.0;
  AdvMode adv_mode = AdvMode::lsgan;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

inline constexpr double kLogClamp = 1e-7;

// Discriminator side needs both score maps; generator side uses d_fake only
// (d_real may be undefined). Vanilla mode takes pre-sigmoid scores.
ag::Var adversarial_loss(const ag::Var& d_real, const ag::Var& d_fake, AdvMode mode, Side side);

ag::Var cycle_consistency_loss(const ag::Var& x, const ag::Var& x_reconstructed);
ag::Var l1_loss(const ag::Var& y, const ag::Var& y_hat);
ag::Var total_variation_loss(const ag::Var& img);

enum class ExtractorKind { random_conv, pretrained };

// Frozen feature pyramid. Holds no trainable parameters: its weights are
// constants, so no optimizer can reach them.
class FeatureExtractor {
 public:
  // 4-layer stride-2 conv stack; features after layers 2 and 4.
  static FeatureExtractor random_conv(std::uint64_t seed);
  // VGG-16 layout (13 convs in 5 blocks). Widths are read from the weights
  // archive; `taps` name relu outputs such as "relu2_2".
  static FeatureExtractor pretrained(const std::filesystem::path& weights,
                                     std::vector<std::string> taps = {"relu1_2", "relu2_2",
                                                                      "relu3_3", "relu4_3"});

  // Accepts (N, 1 or 3, H, W) in [-1, 1]; 1-channel inputs are replicated.
  std::vector<ag::Var> features(const ag::Var& x) const;
  std::vector<Tensor> features(const Tensor& x) const;

  ExtractorKind kind() const { return kind_; }
  std::size_t depth_count() const;
  const std::vector<nn::NamedTensor>& weights() const { return weights_; }

 private:
  struct Stage {
    ag::Var weight, bias;
    int stride = 1;
    bool pool_before = false;
    bool tap = false;
  };

  ExtractorKind kind_ = ExtractorKind::random_conv;
  std::vector<Stage> stages_;
  std::vector<nn::NamedTensor> weights_;
  bool imagenet_normalize_ = false;
};

FeatureExtractor build_feature_extractor(ExtractorKind kind, std::uint64_t seed,
                                         const std::filesystem::path& weights = {},
                                         std::vector<std::string> taps = {});

// Sum over depths of mean squared feature differences.
ag::Var perceptual_loss(const ag::Var& y, const ag::Var& y_hat, const FeatureExtractor& fx);

// Writes a VGG-16-layout weights archive with random values and the given
// per-block widths; used for tests and as a format reference.
void write_random_vgg_weights(const std::filesystem::path& path, std::vector<int> block_widths,
                              std::uint64_t seed);

}  // namespace tirgan::loss
