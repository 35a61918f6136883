#include "tirgan/losses.hpp"

#include <cmath>
#include <map>
#include <random>

#include "tirgan/archive.hpp"

namespace tirgan::loss {

std::string_view to_string(AdvMode m) { return m == AdvMode::vanilla ? "vanilla" : "lsgan"; }

AdvMode parse_adv_mode(std::string_view name) {
  if (name == "vanilla") return AdvMode::vanilla;
  if (name == "lsgan") return AdvMode::lsgan;
  throw std::invalid_argument("unknown adversarial mode \"" + std::string(name) + "\"");
}

void LossWeights::validate() const {
  for (double w : {lambda_adv, lambda_cycle, lambda_l1, lambda_perceptual, lambda_tv,
                   lambda_identity}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and >= 0");
  }
}

ag::Var adversarial_loss(const ag::Var& d_real, const ag::Var& d_fake, AdvMode mode, Side side) {
  if (side == Side::generator) {
    if (mode == AdvMode::vanilla) {
      // Non-saturating: -mean log sigmoid(d_fake)
      return ag::scale(ag::mean_log_sigmoid(d_fake, 1.0, kLogClamp), -1.0);
    }
    return ag::mean_sq_offset(d_fake, 1.0);
  }
  if (!d_real.defined() || d_real.shape() != d_fake.shape()) {
    throw ShapeError("adversarial_loss: real/fake score maps differ: " +
                     (d_real.defined() ? shape_str(d_real.shape()) : std::string("undefined")) +
                     " vs " + shape_str(d_fake.shape()));
  }
  if (mode == AdvMode::vanilla) {
    // -[mean log sigmoid(d_real) + mean log(1 - sigmoid(d_fake))]
    ag::Var real_term = ag::mean_log_sigmoid(d_real, 1.0, kLogClamp);
    ag::Var fake_term = ag::mean_log_sigmoid(d_fake, -1.0, kLogClamp);
    return ag::scale(ag::add(real_term, fake_term), -1.0);
  }
  return ag::add(ag::mean_sq_offset(d_real, 1.0), ag::mean_sq_offset(d_fake, 0.0));
}

ag::Var cycle_consistency_loss(const ag::Var& x, const ag::Var& x_reconstructed) {
  return ag::mean_abs_diff(x, x_reconstructed);
}

ag::Var l1_loss(const ag::Var& y, const ag::Var& y_hat) { return ag::mean_abs_diff(y, y_hat); }

ag::Var total_variation_loss(const ag::Var& img) { return ag::total_variation(img); }

namespace {

const int kVggBlockDepth[5] = {2, 2, 3, 3, 3};
const double kImagenetMean[3] = {0.485, 0.456, 0.406};
const double kImagenetStd[3] = {0.229, 0.224, 0.225};

std::string vgg_name(int block, int conv) {
  return "conv" + std::to_string(block) + "_" + std::to_string(conv);
}

}  // namespace

FeatureExtractor FeatureExtractor::random_conv(std::uint64_t seed) {
  FeatureExtractor fx;
  fx.kind_ = ExtractorKind::random_conv;
  std::mt19937_64 rng(seed);
  const int widths[4] = {8, 16, 16, 32};
  int cin = 3;
  for (int i = 0; i < 4; ++i) {
    const auto cout = static_cast<std::size_t>(widths[i]);
    Tensor w({cout, static_cast<std::size_t>(cin), 3, 3});
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (cin * 9)));
    for (double& v : w.vec()) v = dist(rng);
    Tensor b({cout}, 0.0);
    fx.weights_.push_back({"conv" + std::to_string(i) + ".weight", w});
    fx.weights_.push_back({"conv" + std::to_string(i) + ".bias", b});
    fx.stages_.push_back({ag::Var::constant(std::move(w)), ag::Var::constant(std::move(b)), 2,
                          false, i == 1 || i == 3});
    cin = widths[i];
  }
  return fx;
}

FeatureExtractor FeatureExtractor::pretrained(const std::filesystem::path& weights,
                                              std::vector<std::string> taps) {
  if (!std::filesystem::exists(weights)) {
    throw std::runtime_error("perceptual feature weights not found: " + weights.string());
  }
  TensorArchive archive = read_archive(weights);
  std::map<std::string, Tensor> by_name;
  for (auto& t : archive.tensors) by_name[t.name] = t.tensor;
  if (taps.empty()) throw std::invalid_argument("pretrained extractor needs at least one tap");

  FeatureExtractor fx;
  fx.kind_ = ExtractorKind::pretrained;
  fx.imagenet_normalize_ = true;
  std::size_t remaining = taps.size();
  std::size_t cin = 3;
  for (int block = 1; block <= 5 && remaining > 0; ++block) {
    for (int conv = 1; conv <= kVggBlockDepth[block - 1] && remaining > 0; ++conv) {
      const std::string name = vgg_name(block, conv);
      auto w = by_name.find(name + ".weight");
      auto b = by_name.find(name + ".bias");
      if (w == by_name.end() || b == by_name.end()) {
        throw std::runtime_error(weights.string() + ": missing tensor " + name);
      }
      const Shape& ws = w->second.shape();
      if (ws.size() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 ||
          b->second.numel() != ws[0]) {
        throw ShapeError(weights.string() + ": tensor " + name + " has unexpected shape " +
                         shape_str(ws));
      }
      const std::string relu = "relu" + std::to_string(block) + "_" + std::to_string(conv);
      const bool tap = std::find(taps.begin(), taps.end(), relu) != taps.end();
      if (tap) --remaining;
      fx.weights_.push_back({name + ".weight", w->second});
      fx.weights_.push_back({name + ".bias", b->second});
      fx.stages_.push_back({ag::Var::constant(w->second), ag::Var::constant(b->second), 1,
                            block > 1 && conv == 1, tap});
      cin = ws[0];
    }
  }
  if (remaining > 0) throw std::invalid_argument("unknown perceptual tap name in tap list");
  return fx;
}

std::size_t FeatureExtractor::depth_count() const {
  return static_cast<std::size_t>(
      std::count_if(stages_.begin(), stages_.end(), [](const Stage& s) { return s.tap; }));
}

std::vector<ag::Var> FeatureExtractor::features(const ag::Var& x) const {
  if (x.value().rank() != 4 || (x.shape()[1] != 1 && x.shape()[1] != 3)) {
    throw ShapeError("feature extractor expects (N, 1|3, H, W), got " + shape_str(x.shape()));
  }
  ag::Var h = x.shape()[1] == 1 ? ag::replicate_channels(x, 3) : x;
  if (imagenet_normalize_) {
    std::vector<double> scales(3), shifts(3);
    for (int c = 0; c < 3; ++c) {
      scales[c] = 0.5 / kImagenetStd[c];
      shifts[c] = (0.5 - kImagenetMean[c]) / kImagenetStd[c];
    }
    h = ag::channel_affine(h, scales, shifts);
  }
  std::vector<ag::Var> out;
  for (const auto& s : stages_) {
    if (s.pool_before) h = ag::max_pool2(h);
    const int pad = 1;
    h = ag::relu(ag::conv2d(h, s.weight, s.bias, s.stride, pad));
    if (s.tap) out.push_back(h);
  }
  return out;
}

std::vector<Tensor> FeatureExtractor::features(const Tensor& x) const {
  ag::NoGradGuard guard;
  std::vector<Tensor> out;
  for (auto& f : features(ag::Var::constant(x))) out.push_back(f.value());
  return out;
}

FeatureExtractor build_feature_extractor(ExtractorKind kind, std::uint64_t seed,
                                         const std::filesystem::path& weights,
                                         std::vector<std::string> taps) {
  if (kind == ExtractorKind::random_conv) return FeatureExtractor::random_conv(seed);
  if (taps.empty()) return FeatureExtractor::pretrained(weights);
  return FeatureExtractor::pretrained(weights, std::move(taps));
}

ag::Var perceptual_loss(const ag::Var& y, const ag::Var& y_hat, const FeatureExtractor& fx) {
  if (y.shape() != y_hat.shape()) {
    throw ShapeError("perceptual_loss shape mismatch: " + shape_str(y.shape()) + " vs " +
                     shape_str(y_hat.shape()));
  }
  auto fa = fx.features(y);
  auto fb = fx.features(y_hat);
  ag::Var total = ag::mean_sq_diff(fa[0], fb[0]);
  for (std::size_t i = 1; i < fa.size(); ++i) total = ag::add(total, ag::mean_sq_diff(fa[i], fb[i]));
  return total;
}

void write_random_vgg_weights(const std::filesystem::path& path, std::vector<int> block_widths,
                              std::uint64_t seed) {
  if (block_widths.size() != 5) throw std::invalid_argument("VGG-16 layout needs 5 block widths");
  std::mt19937_64 rng(seed);
  TensorArchive archive;
  archive.header = {{"kind", "vgg16_features"}, {"block_widths", block_widths}};
  std::size_t cin = 3;
  for (int block = 1; block <= 5; ++block) {
    const auto cout = static_cast<std::size_t>(block_widths[block - 1]);
    for (int conv = 1; conv <= kVggBlockDepth[block - 1]; ++conv) {
      Tensor w({cout, cin, 3, 3});
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (static_cast<double>(cin) * 9)));
      for (double& v : w.vec()) v = dist(rng);
      archive.tensors.push_back({vgg_name(block, conv) + ".weight", std::move(w)});
      archive.tensors.push_back({vgg_name(block, conv) + ".bias", Tensor({cout}, 0.01)});
      cin = cout;
    }
  }
  write_archive(path, archive);
}

}  // namespace tirgan::loss
