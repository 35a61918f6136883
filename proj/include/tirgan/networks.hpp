#pragma once

// Generator and PatchGAN discriminator architectures.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tirgan/autograd.hpp"

namespace tirgan::nn {

enum class GeneratorArch { resnet, coarse2fine };

std::string_view to_string(GeneratorArch a);
GeneratorArch parse_generator_arch(std::string_view name);

struct GeneratorConfig {
  int in_channels = 1;
  int out_channels = 3;
  int base_width = 64;
  int n_downsample = 2;
  int n_resblocks = 9;
  GeneratorArch arch = GeneratorArch::resnet;

  void validate() const;
  bool operator==(const GeneratorConfig&) const = default;
};

struct DiscriminatorConfig {
  int in_channels = 3;
  int base_width = 64;
  int n_layers = 3;

  void validate() const;
  bool operator==(const DiscriminatorConfig&) const = default;
};

struct NamedParameter {
  std::string name;
  ag::Var var;
};

using ParameterList = std::vector<NamedParameter>;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::size_t count_parameters(const ParameterList& params);
std::vector<NamedTensor> snapshot(const ParameterList& params);
// Copies values by name; every parameter must be present with matching shape.
void restore(ParameterList& params, const std::vector<NamedTensor>& values,
             const std::string& prefix = "");
std::string parameter_digest(const ParameterList& params);
void zero_grad(ParameterList& params);

using Layer = std::function<ag::Var(const ag::Var&)>;

class Network {
 public:
  virtual ~Network() = default;
  Network() = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  virtual ag::Var forward(const ag::Var& x) const = 0;
  // Forward without recording a graph.
  Tensor infer(const Tensor& x) const;

  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }
  std::size_t parameter_count() const { return count_parameters(params_); }

 protected:
  ParameterList params_;
};

class Generator : public Network {
 public:
  Generator(const GeneratorConfig& config, std::uint64_t seed);

  ag::Var forward(const ag::Var& x) const override;
  const GeneratorConfig& config() const { return config_; }
  // Input height and width must be multiples of this.
  std::size_t size_multiple() const;

 private:
  GeneratorConfig config_;
  std::vector<Layer> main_;          // resnet body, or coarse2fine local front
  std::vector<Layer> global_;        // coarse2fine only
  std::vector<Layer> local_back_;    // coarse2fine only
};

class Discriminator : public Network {
 public:
  Discriminator(const DiscriminatorConfig& config, std::uint64_t seed);

  // (N, C, H, W) -> (N, 1, h', w') raw patch scores.
  ag::Var forward(const ag::Var& x) const override;
  const DiscriminatorConfig& config() const { return config_; }

  // Score-map size for an input extent, 0 if the input is too small.
  std::size_t output_extent(std::size_t input_extent) const;
  std::size_t min_input_extent() const;

 private:
  DiscriminatorConfig config_;
  std::vector<Layer> layers_;
};

}  // namespace tirgan::nn
