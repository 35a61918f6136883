#include "tirgan/networks.hpp"

#include <cstring>
#include <map>
#include <random>

#include "tirgan/io.hpp"

namespace tirgan::nn {

std::string_view to_string(GeneratorArch a) {
  return a == GeneratorArch::resnet ? "resnet" : "coarse2fine";
}

GeneratorArch parse_generator_arch(std::string_view name) {
  if (name == "resnet") return GeneratorArch::resnet;
  if (name == "coarse2fine") return GeneratorArch::coarse2fine;
  throw std::invalid_argument("unknown generator arch \"" + std::string(name) + "\"");
}

void GeneratorConfig::validate() const {
  if (in_channels < 1 || out_channels < 1)
    throw std::invalid_argument("generator channel counts must be positive");
  if (base_width < 4) throw std::invalid_argument("generator base_width must be >= 4");
  if (n_downsample < 1) throw std::invalid_argument("generator n_downsample must be >= 1");
  if (n_resblocks < 1) throw std::invalid_argument("generator n_resblocks must be >= 1");
}

void DiscriminatorConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("discriminator in_channels must be positive");
  if (base_width < 1) throw std::invalid_argument("discriminator base_width must be positive");
  if (n_layers < 1) throw std::invalid_argument("discriminator n_layers must be >= 1");
}

std::size_t count_parameters(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().numel();
  return n;
}

std::vector<NamedTensor> snapshot(const ParameterList& params) {
  std::vector<NamedTensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.var.value()});
  return out;
}

void restore(ParameterList& params, const std::vector<NamedTensor>& values,
             const std::string& prefix) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& v : values) by_name[v.name] = &v.tensor;
  for (auto& p : params) {
    auto it = by_name.find(prefix + p.name);
    if (it == by_name.end()) throw std::runtime_error("missing parameter " + prefix + p.name);
    if (it->second->shape() != p.var.shape()) {
      throw ShapeError("parameter " + prefix + p.name + " has shape " +
                       shape_str(it->second->shape()) + ", expected " + shape_str(p.var.shape()));
    }
    p.var.mutable_value() = *it->second;
  }
}

std::string parameter_digest(const ParameterList& params) {
  std::vector<std::uint8_t> bytes;
  for (const auto& p : params) {
    const auto& v = p.var.value().vec();
    const auto* raw = reinterpret_cast<const std::uint8_t*>(v.data());
    bytes.insert(bytes.end(), raw, raw + v.size() * sizeof(double));
  }
  return sha256_hex(bytes);
}

void zero_grad(ParameterList& params) {
  for (auto& p : params) p.var.zero_grad();
}

Tensor Network::infer(const Tensor& x) const {
  ag::NoGradGuard guard;
  return forward(ag::Var::constant(x)).value();
}

namespace {

ag::Var run(const std::vector<Layer>& layers, ag::Var x) {
  for (const auto& l : layers) x = l(x);
  return x;
}

// Creates parameters in a fixed order so initialization is a pure function of
// (config, seed).
class Builder {
 public:
  Builder(ParameterList& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  ag::Var param(const std::string& name, Shape shape, double stddev) {
    Tensor t(std::move(shape));
    if (stddev > 0.0) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (double& v : t.vec()) v = dist(rng_);
    }
    auto var = ag::Var::parameter(std::move(t));
    params_.push_back({name, var});
    return var;
  }

  // Convolution with optional reflection padding applied first.
  Layer conv(const std::string& name, int cin, int cout, int k, int stride, int zero_pad,
             int reflect_pad, bool bias) {
    auto w = param(name + ".weight", {static_cast<std::size_t>(cout),
                                      static_cast<std::size_t>(cin),
                                      static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
                   kInitStd);
    ag::Var b = bias ? param(name + ".bias", {static_cast<std::size_t>(cout)}, 0.0) : ag::Var();
    return [w, b, stride, zero_pad, reflect_pad](const ag::Var& x) {
      ag::Var in = reflect_pad > 0 ? ag::reflect_pad(x, reflect_pad) : x;
      return ag::conv2d(in, w, b, stride, zero_pad);
    };
  }

  Layer conv_transpose(const std::string& name, int cin, int cout) {
    auto w = param(name + ".weight", {static_cast<std::size_t>(cin),
                                      static_cast<std::size_t>(cout), 3, 3},
                   kInitStd);
    return [w](const ag::Var& x) { return ag::conv_transpose2d(x, w, ag::Var(), 2, 1, 1); };
  }

  Layer residual(const std::string& name, int width) {
    std::vector<Layer> body{conv(name + ".conv1", width, width, 3, 1, 0, 1, false),
                            norm(), relu(),
                            conv(name + ".conv2", width, width, 3, 1, 0, 1, false),
                            norm()};
    return [body = std::move(body)](const ag::Var& x) { return ag::add(x, run(body, x)); };
  }

  static Layer norm() {
    return [](const ag::Var& x) { return ag::instance_norm(x); };
  }
  static Layer relu() {
    return [](const ag::Var& x) { return ag::relu(x); };
  }
  static Layer leaky() {
    return [](const ag::Var& x) { return ag::leaky_relu(x, 0.2); };
  }
  static Layer tanh() {
    return [](const ag::Var& x) { return ag::tanh(x); };
  }

  // conv7 stem, n_down strided convs, residual blocks, n_up transposed convs.
  void encoder_decoder(std::vector<Layer>& out, const std::string& prefix, int in_ch,
                       int width, int n_down, int n_res) {
    out.push_back(conv(prefix + ".stem", in_ch, width, 7, 1, 0, 3, false));
    out.push_back(norm());
    out.push_back(relu());
    int ch = width;
    for (int i = 0; i < n_down; ++i) {
      out.push_back(conv(prefix + ".down" + std::to_string(i), ch, ch * 2, 3, 2, 0, 1, false));
      out.push_back(norm());
      out.push_back(relu());
      ch *= 2;
    }
    for (int i = 0; i < n_res; ++i) out.push_back(residual(prefix + ".res" + std::to_string(i), ch));
    for (int i = 0; i < n_down; ++i) {
      out.push_back(conv_transpose(prefix + ".up" + std::to_string(i), ch, ch / 2));
      out.push_back(norm());
      out.push_back(relu());
      ch /= 2;
    }
  }

  static constexpr double kInitStd = 0.02;

 private:
  ParameterList& params_;
  std::mt19937_64 rng_;
};

}  // namespace

Generator::Generator(const GeneratorConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Builder b(params_, seed);
  const int w = config_.base_width;
  if (config_.arch == GeneratorArch::resnet) {
    b.encoder_decoder(main_, "body", config_.in_channels, w, config_.n_downsample,
                      config_.n_resblocks);
    main_.push_back(b.conv("head", w, config_.out_channels, 7, 1, 0, 3, true));
    main_.push_back(Builder::tanh());
    return;
  }
  // Two-level coarse-to-fine: the global branch runs at half resolution and
  // its features are added to the local branch's downsampled features.
  main_.push_back(b.conv("local.stem", config_.in_channels, w, 7, 1, 0, 3, false));
  main_.push_back(Builder::norm());
  main_.push_back(Builder::relu());
  main_.push_back(b.conv("local.down", w, 2 * w, 3, 2, 0, 1, false));
  main_.push_back(Builder::norm());
  main_.push_back(Builder::relu());
  b.encoder_decoder(global_, "global", config_.in_channels, 2 * w, config_.n_downsample,
                    config_.n_resblocks);
  for (int i = 0; i < config_.n_resblocks; ++i)
    local_back_.push_back(b.residual("local.res" + std::to_string(i), 2 * w));
  local_back_.push_back(b.conv_transpose("local.up", 2 * w, w));
  local_back_.push_back(Builder::norm());
  local_back_.push_back(Builder::relu());
  local_back_.push_back(b.conv("head", w, config_.out_channels, 7, 1, 0, 3, true));
  local_back_.push_back(Builder::tanh());
}

std::size_t Generator::size_multiple() const {
  const int levels = config_.n_downsample + (config_.arch == GeneratorArch::coarse2fine ? 1 : 0);
  return std::size_t{1} << levels;
}

ag::Var Generator::forward(const ag::Var& x) const {
  if (x.value().rank() != 4 || x.shape()[1] != static_cast<std::size_t>(config_.in_channels)) {
    throw ShapeError("generator expects (N, " + std::to_string(config_.in_channels) +
                     ", H, W) input, got " + shape_str(x.shape()));
  }
  const std::size_t m = size_multiple();
  if (x.shape()[2] % m || x.shape()[3] % m) {
    throw ShapeError("generator input " + shape_str(x.shape()) +
                     " must have H and W divisible by " + std::to_string(m));
  }
  if (config_.arch == GeneratorArch::resnet) return run(main_, x);
  ag::Var local = run(main_, x);
  ag::Var global = run(global_, ag::avg_pool2(x));
  return run(local_back_, ag::add(local, global));
}

Discriminator::Discriminator(const DiscriminatorConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  Builder b(params_, seed);
  const int w = config_.base_width;
  layers_.push_back(b.conv("layer0", config_.in_channels, w, 4, 2, 1, 0, true));
  layers_.push_back(Builder::leaky());
  int ch = w;
  for (int i = 1; i < config_.n_layers; ++i) {
    const int next = w * std::min(1 << i, 8);
    layers_.push_back(b.conv("layer" + std::to_string(i), ch, next, 4, 2, 1, 0, false));
    layers_.push_back(Builder::norm());
    layers_.push_back(Builder::leaky());
    ch = next;
  }
  const int next = w * std::min(1 << config_.n_layers, 8);
  layers_.push_back(b.conv("layer" + std::to_string(config_.n_layers), ch, next, 4, 1, 1, 0, false));
  layers_.push_back(Builder::norm());
  layers_.push_back(Builder::leaky());
  layers_.push_back(b.conv("layer" + std::to_string(config_.n_layers + 1), next, 1, 4, 1, 1, 0, true));
}

std::size_t Discriminator::output_extent(std::size_t input_extent) const {
  std::size_t s = input_extent;
  for (int i = 0; i < config_.n_layers && s > 0; ++i) s = ag::conv_output_size(s, 4, 2, 1);
  for (int i = 0; i < 2 && s > 0; ++i) s = ag::conv_output_size(s, 4, 1, 1);
  return s;
}

std::size_t Discriminator::min_input_extent() const {
  std::size_t s = 1;
  while (output_extent(s) == 0) ++s;
  return s;
}

ag::Var Discriminator::forward(const ag::Var& x) const {
  if (x.value().rank() != 4 || x.shape()[1] != static_cast<std::size_t>(config_.in_channels)) {
    throw ShapeError("discriminator expects (N, " + std::to_string(config_.in_channels) +
                     ", H, W) input, got " + shape_str(x.shape()));
  }
  if (output_extent(x.shape()[2]) == 0 || output_extent(x.shape()[3]) == 0) {
    throw ShapeError("discriminator input " + shape_str(x.shape()) +
                     " is too small; minimum spatial extent is " +
                     std::to_string(min_input_extent()));
  }
  return run(layers_, x);
}

}  // namespace tirgan::nn
