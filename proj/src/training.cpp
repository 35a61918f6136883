#include "tirgan/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "tirgan/archive.hpp"
#include "tirgan/io.hpp"

namespace tirgan::train {

using nlohmann::json;

std::string_view to_string(StageRole r) {
  switch (r) {
    case StageRole::cycle_translator: return "cycle_translator";
    case StageRole::colorizer: return "colorizer";
    case StageRole::day_translator: return "day_translator";
  }
  return "?";
}

StageRole parse_stage_role(std::string_view name) {
  if (name == "cycle_translator") return StageRole::cycle_translator;
  if (name == "colorizer") return StageRole::colorizer;
  if (name == "day_translator") return StageRole::day_translator;
  throw std::invalid_argument("unknown stage role \"" + std::string(name) + "\"");
}

void TrainSchedule::validate() const {
  if (total_epochs <= 0) throw std::invalid_argument("total_epochs must be positive");
  if (constant_epochs <= 0 || constant_epochs > total_epochs)
    throw std::invalid_argument("constant_epochs must be in [1, total_epochs]");
  if (!(base_lr_generator > 0.0) || !(base_lr_discriminator > 0.0))
    throw std::invalid_argument("learning rates must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
}

TrainSchedule cyclegan_schedule() { return {60, 40, 2e-4, 2e-4, 1, 0}; }
TrainSchedule ticgan_schedule() { return {100, 80, 2e-4, 2e-4, 1, 0}; }
TrainSchedule todaygan_schedule() { return {80, 40, 2e-4, 1e-4, 1, 0}; }

double lr_at_epoch(const TrainSchedule& schedule, int epoch, loss::Side side) {
  schedule.validate();
  if (epoch < 0 || epoch >= schedule.total_epochs) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(schedule.total_epochs) + ")");
  }
  const double base = side == loss::Side::generator ? schedule.base_lr_generator
                                                    : schedule.base_lr_discriminator;
  if (epoch < schedule.constant_epochs) return base;
  return base * static_cast<double>(schedule.total_epochs - epoch) /
         static_cast<double>(schedule.total_epochs - schedule.constant_epochs);
}

// ---------------------------------------------------------------- Adam

Adam::Adam(nn::ParameterList params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void Adam::step(double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double step_size = lr / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& value = params_[i].var.mutable_value().vec();
    const auto& grad = params_[i].var.grad();
    const bool has_grad = !grad.empty();
    auto& m = m_[i].vec();
    auto& v = v_[i].vec();
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = has_grad ? grad[k] : 0.0;
      m[k] = b1 * m[k] + (1.0 - b1) * g;
      v[k] = b2 * v[k] + (1.0 - b2) * g * g;
      value[k] -= step_size * m[k] / (std::sqrt(v[k]) / sqrt_bc2 + config_.eps);
    }
  }
}

std::vector<nn::NamedTensor> Adam::state(const std::string& prefix) const {
  std::vector<nn::NamedTensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({prefix + params_[i].name + "/m", m_[i]});
    out.push_back({prefix + params_[i].name + "/v", v_[i]});
  }
  return out;
}

void Adam::load_state(const std::vector<nn::NamedTensor>& state, const std::string& prefix,
                      long steps_taken) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& s : state) by_name[s.name] = &s.tensor;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (auto [suffix, slot] : {std::pair{"/m", &m_[i]}, std::pair{"/v", &v_[i]}}) {
      auto it = by_name.find(prefix + params_[i].name + suffix);
      if (it == by_name.end())
        throw TrainingError("optimizer state missing " + prefix + params_[i].name + suffix);
      if (it->second->shape() != slot->shape())
        throw ShapeError("optimizer state " + it->first + " has wrong shape");
      *slot = *it->second;
    }
  }
  t_ = steps_taken;
}

// ---------------------------------------------------------------- LossLog

double LossLog::weighted_total(const std::vector<double>& values) const {
  double total = 0.0;
  for (std::size_t i = 0; i < n_generator_terms; ++i) total += weights[i] * values[i];
  return total;
}

double LossLog::weighted_total_d(const std::vector<double>& values) const {
  double total = 0.0;
  for (std::size_t i = n_generator_terms; i < terms.size(); ++i) total += weights[i] * values[i];
  return total;
}

std::string LossLog::to_csv() const {
  std::string out = "step,epoch,lr_g,lr_d";
  for (const auto& t : terms) out += "," + t;
  out += ",total,total_d\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out += ',';
    out += buf;
  };
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + std::to_string(r.epoch);
    num(r.lr_g);
    num(r.lr_d);
    for (double v : r.values) num(v);
    num(r.total);
    num(r.total_d);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------- options

CycleStageOptions day_translator_defaults() {
  CycleStageOptions o;
  o.schedule = todaygan_schedule();
  o.weights = {.lambda_cycle = 10.0, .adv_mode = loss::AdvMode::lsgan};
  o.generator.in_channels = 3;
  o.generator.out_channels = 3;
  o.discriminator.in_channels = 3;
  return o;
}

// ---------------------------------------------------------------- checkpoint

std::unique_ptr<nn::Generator> StageCheckpoint::generator(const std::string& name) const {
  auto it = generators.find(name);
  if (it == generators.end())
    throw TrainingError("checkpoint has no generator \"" + name + "\"");
  auto g = std::make_unique<nn::Generator>(it->second, 0);
  nn::restore(g->parameters(), parameters, name + "/");
  return g;
}

std::unique_ptr<nn::Discriminator> StageCheckpoint::discriminator(const std::string& name) const {
  auto it = discriminators.find(name);
  if (it == discriminators.end())
    throw TrainingError("checkpoint has no discriminator \"" + name + "\"");
  auto d = std::make_unique<nn::Discriminator>(it->second, 0);
  nn::restore(d->parameters(), parameters, name + "/");
  return d;
}

namespace {

const std::string kParamPrefix = "param/";
const std::string kOptimPrefix = "optim/";

}  // namespace

void save_checkpoint(StageCheckpoint& checkpoint, const fs::path& path) {
  TensorArchive ar;
  ar.header = json::object();
  ar.header["kind"] = "stage_checkpoint";
  ar.header["role"] = std::string(to_string(checkpoint.role));
  json gens = json::object(), discs = json::object();
  for (const auto& [name, cfg] : checkpoint.generators) gens[name] = to_json(cfg);
  for (const auto& [name, cfg] : checkpoint.discriminators) discs[name] = to_json(cfg);
  ar.header["generators"] = gens;
  ar.header["discriminators"] = discs;
  ar.header["epochs_completed"] = checkpoint.epochs_completed;
  ar.header["optimizer_steps"] = checkpoint.optimizer_steps;
  ar.header["config"] = checkpoint.config;
  for (const auto& p : checkpoint.parameters) ar.tensors.push_back({kParamPrefix + p.name, p.tensor});
  for (const auto& s : checkpoint.optimizer_state)
    ar.tensors.push_back({kOptimPrefix + s.name, s.tensor});
  checkpoint.content_hash = write_archive(path, ar);
}

StageCheckpoint load_checkpoint(const fs::path& path, std::optional<StageRole> expected_role) {
  TensorArchive ar = read_archive(path);
  StageCheckpoint c;
  try {
    if (ar.header.value("kind", "") != "stage_checkpoint")
      throw TrainingError(path.string() + ": not a stage checkpoint");
    c.role = parse_stage_role(ar.header.at("role").get<std::string>());
    for (const auto& [name, cfg] : ar.header.at("generators").items()) {
      nn::GeneratorConfig g;
      from_json(cfg, g);
      c.generators[name] = g;
    }
    for (const auto& [name, cfg] : ar.header.at("discriminators").items()) {
      nn::DiscriminatorConfig d;
      from_json(cfg, d);
      c.discriminators[name] = d;
    }
    c.epochs_completed = ar.header.at("epochs_completed").get<int>();
    c.optimizer_steps = ar.header.at("optimizer_steps").get<long>();
    c.config = ar.header.at("config");
  } catch (const json::exception& e) {
    throw TrainingError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  c.content_hash = ar.header.at("content_hash").get<std::string>();
  if (expected_role && *expected_role != c.role) {
    throw TrainingError(path.string() + ": checkpoint role mismatch: expected " +
                        std::string(to_string(*expected_role)) + ", found " +
                        std::string(to_string(c.role)));
  }
  for (auto& t : ar.tensors) {
    if (t.name.starts_with(kParamPrefix)) {
      c.parameters.push_back({t.name.substr(kParamPrefix.size()), std::move(t.tensor)});
    } else if (t.name.starts_with(kOptimPrefix)) {
      c.optimizer_state.push_back({t.name.substr(kOptimPrefix.size()), std::move(t.tensor)});
    }
  }
  return c;
}

// ---------------------------------------------------------------- helpers

namespace {

Tensor flip_horizontal(const Tensor& chw) {
  Tensor out(chw.shape());
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(k * h + y) * w + x] = chw[(k * h + y) * w + (w - 1 - x)];
  return out;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, int epoch,
                                           const std::string& stream) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, stream + "/epoch" + std::to_string(epoch)));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

bool flip_coin(std::uint64_t seed, int epoch, std::size_t k, const std::string& stream) {
  return derive_seed(seed, stream + "/flip/" + std::to_string(epoch) + "/" + std::to_string(k)) & 1;
}

Tensor load_batch(const data::ImageSet& set, const std::vector<std::size_t>& perm,
                  std::size_t first, std::size_t count, bool flip, std::uint64_t seed, int epoch,
                  const std::string& stream) {
  std::vector<Tensor> items;
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t k = first + j;
    Tensor chw = set.get(perm[k % perm.size()]).tensor();
    if (flip && flip_coin(seed, epoch, k, stream)) chw = flip_horizontal(chw);
    items.push_back(chw.reshaped({1, chw.dim(0), chw.dim(1), chw.dim(2)}));
  }
  for (const auto& t : items) {
    if (t.shape() != items.front().shape()) {
      throw TrainingError("images in a " + stream + " batch differ in size: " +
                          shape_str(items.front().shape()) + " vs " + shape_str(t.shape()));
    }
  }
  return Tensor::concat_batch(items);
}

nn::ParameterList prefixed(const nn::ParameterList& params, const std::string& prefix) {
  nn::ParameterList out;
  for (const auto& p : params) out.push_back({prefix + p.name, p.var});
  return out;
}

void append(nn::ParameterList& dst, const nn::ParameterList& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

void check_finite(const std::vector<std::string>& names, const std::vector<double>& values,
                  std::size_t offset, long step, int epoch) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%g", values[i]);
      throw TrainingError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                          std::to_string(epoch) + "): term " + names[offset + i] + " = " + buf);
    }
  }
}

// Evaluates a loss term; zero-weight terms are computed without a graph so
// they are logged but cannot influence any gradient.
template <typename F>
ag::Var term(double weight, F&& f) {
  if (weight == 0.0) {
    ag::NoGradGuard guard;
    return ag::Var::constant(f().value());
  }
  return f();
}

ag::Var weighted_sum(const std::vector<std::pair<double, ag::Var>>& terms) {
  ag::Var total;
  for (const auto& [w, v] : terms) {
    if (w == 0.0 || !v.requires_grad()) continue;
    ag::Var t = ag::scale(v, w);
    total = total.defined() ? ag::add(total, t) : t;
  }
  return total;
}

// Fixed-weight views for the multi-view discriminator variant.
Tensor gaussian_blur_weight(std::size_t channels) {
  const int k = 5;
  const double sigma = 1.0;
  double g[k], s = 0.0;
  for (int i = 0; i < k; ++i) {
    g[i] = std::exp(-0.5 * (i - 2) * (i - 2) / (sigma * sigma));
    s += g[i];
  }
  Tensor w({channels, channels, k, k});
  for (std::size_t c = 0; c < channels; ++c)
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x) w.at(c, c, y, x) = g[y] * g[x] / (s * s);
  return w;
}

Tensor gray_weight(std::size_t channels) {
  Tensor w({1, channels, 1, 1});
  if (channels == 3) {
    w[0] = 0.299;
    w[1] = 0.587;
    w[2] = 0.114;
  } else {
    for (std::size_t c = 0; c < channels; ++c) w[c] = 1.0 / static_cast<double>(channels);
  }
  return w;
}

Tensor sobel_weight() {
  Tensor w({2, 1, 3, 3});
  const double sx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  const double sy[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  for (int i = 0; i < 9; ++i) {
    w[i] = sx[i] / 8.0;
    w[9 + i] = sy[i] / 8.0;
  }
  return w;
}

}  // namespace

// ---------------------------------------------------------------- ImagePool

ImagePool::ImagePool(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {}

Tensor ImagePool::query(const Tensor& batch) {
  if (capacity_ == 0) return batch;
  std::vector<Tensor> out;
  for (std::size_t n = 0; n < batch.dim(0); ++n) {
    Tensor item = batch.batch_item(n);
    if (images_.size() < capacity_) {
      images_.push_back(item);
      out.push_back(item);
      continue;
    }
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (coin(rng_) < 0.5) {
      std::uniform_int_distribution<std::size_t> pick(0, images_.size() - 1);
      const std::size_t idx = pick(rng_);
      if (images_[idx].shape() == item.shape()) {
        out.push_back(images_[idx]);
        images_[idx] = item;
        continue;
      }
      images_[idx] = item;
    }
    out.push_back(item);
  }
  return Tensor::concat_batch(out);
}

// ---------------------------------------------------------------- CycleTrainer

CycleTrainer::CycleTrainer(const data::ImageSet& domain_a, const data::ImageSet& domain_b,
                           CycleStageOptions options, StageRole role)
    : a_(domain_a),
      b_(domain_b),
      options_(std::move(options)),
      role_(role),
      pool_a_(options_.replay_buffer ? options_.replay_capacity : 0,
              derive_seed(options_.schedule.seed, "pool_a")),
      pool_b_(options_.replay_buffer ? options_.replay_capacity : 0,
              derive_seed(options_.schedule.seed, "pool_b")) {
  if (role_ == StageRole::colorizer) throw std::invalid_argument("CycleTrainer cannot train a colorizer");
  if (a_.size() == 0) throw TrainingError("domain A is empty");
  if (b_.size() == 0) throw TrainingError("domain B is empty");
  options_.schedule.validate();
  options_.weights.validate();
  const auto& gcfg = options_.generator;
  if (options_.weights.lambda_identity > 0.0 && gcfg.in_channels != gcfg.out_channels) {
    throw std::invalid_argument("identity loss needs equal channel counts in both domains");
  }
  const auto ch_a = a_.get(0).channels(), ch_b = b_.get(0).channels();
  if (ch_a != static_cast<std::size_t>(gcfg.in_channels) ||
      ch_b != static_cast<std::size_t>(gcfg.out_channels)) {
    throw ShapeError("domain channels (" + std::to_string(ch_a) + ", " + std::to_string(ch_b) +
                     ") do not match generator config (" + std::to_string(gcfg.in_channels) +
                     ", " + std::to_string(gcfg.out_channels) + ")");
  }
  const std::uint64_t seed = options_.schedule.seed;
  nn::GeneratorConfig ba = gcfg;
  std::swap(ba.in_channels, ba.out_channels);
  g_ab_ = std::make_unique<nn::Generator>(gcfg, derive_seed(seed, "G_AB"));
  g_ba_ = std::make_unique<nn::Generator>(ba, derive_seed(seed, "G_BA"));

  auto make_views = [&](const std::string& name, int channels) {
    std::vector<ViewDiscriminator> views;
    auto dcfg = options_.discriminator;
    if (!options_.multiview_discriminators) {
      dcfg.in_channels = channels;
      views.push_back({name, [](const ag::Var& x) { return x; },
                       std::make_unique<nn::Discriminator>(dcfg, derive_seed(seed, name))});
      return views;
    }
    const auto c = static_cast<std::size_t>(channels);
    ag::Var blur = ag::Var::constant(gaussian_blur_weight(c));
    ag::Var gray = ag::Var::constant(gray_weight(c));
    ag::Var sobel = ag::Var::constant(sobel_weight());
    auto to_gray = [gray](const ag::Var& x) { return ag::conv2d(x, gray, ag::Var(), 1, 0); };
    dcfg.in_channels = channels;
    views.push_back({name + ".blur",
                     [blur](const ag::Var& x) {
                       return ag::conv2d(ag::reflect_pad(x, 2), blur, ag::Var(), 1, 0);
                     },
                     std::make_unique<nn::Discriminator>(dcfg, derive_seed(seed, name + ".blur"))});
    dcfg.in_channels = 1;
    views.push_back({name + ".gray", to_gray,
                     std::make_unique<nn::Discriminator>(dcfg, derive_seed(seed, name + ".gray"))});
    dcfg.in_channels = 2;
    views.push_back({name + ".grad",
                     [to_gray, sobel](const ag::Var& x) {
                       return ag::conv2d(ag::reflect_pad(to_gray(x), 1), sobel, ag::Var(), 1, 0);
                     },
                     std::make_unique<nn::Discriminator>(dcfg, derive_seed(seed, name + ".grad"))});
    return views;
  };
  d_a_ = make_views("D_A", gcfg.in_channels);
  d_b_ = make_views("D_B", gcfg.out_channels);

  opt_g_ = std::make_unique<Adam>(generator_parameters());
  opt_d_ = std::make_unique<Adam>(discriminator_parameters());

  const double la = options_.weights.lambda_adv, lc = options_.weights.lambda_cycle;
  const double li = options_.weights.lambda_identity * lc;
  log_.terms = {"g_adv_ab", "g_adv_ba", "cycle_a", "cycle_b", "identity_a", "identity_b",
                "d_a", "d_b"};
  log_.weights = {la, la, lc, lc, li, li, 0.5 * la, 0.5 * la};
  log_.n_generator_terms = 6;
}

nn::ParameterList CycleTrainer::generator_parameters() const {
  nn::ParameterList out = prefixed(g_ab_->parameters(), "G_AB/");
  append(out, prefixed(g_ba_->parameters(), "G_BA/"));
  return out;
}

nn::ParameterList CycleTrainer::discriminator_parameters() const {
  nn::ParameterList out;
  for (const auto* ds : {&d_a_, &d_b_})
    for (const auto& d : *ds) append(out, prefixed(d.net->parameters(), d.name + "/"));
  return out;
}

std::size_t CycleTrainer::steps_per_epoch() const {
  const std::size_t n = std::max(a_.size(), b_.size());
  const auto bs = static_cast<std::size_t>(options_.schedule.batch_size);
  return (n + bs - 1) / bs;
}

std::pair<Tensor, Tensor> CycleTrainer::batch(int epoch, std::size_t index) {
  const std::uint64_t seed = options_.schedule.seed;
  if (perm_epoch_ != epoch) {
    perm_a_ = epoch_permutation(a_.size(), seed, epoch, "A");
    perm_b_ = epoch_permutation(b_.size(), seed, epoch, "B");
    perm_epoch_ = epoch;
  }
  const auto bs = static_cast<std::size_t>(options_.schedule.batch_size);
  const bool flip = options_.horizontal_flip;
  return {load_batch(a_, perm_a_, index * bs, bs, flip, seed, epoch, "A"),
          load_batch(b_, perm_b_, index * bs, bs, flip, seed, epoch, "B")};
}

ag::Var CycleTrainer::adversarial_generator_term(const std::vector<ViewDiscriminator>& ds,
                                                 const ag::Var& fake) const {
  ag::Var total;
  for (const auto& d : ds) {
    ag::Var t = loss::adversarial_loss(ag::Var(), d.net->forward(d.view(fake)),
                                       options_.weights.adv_mode, loss::Side::generator);
    total = total.defined() ? ag::add(total, t) : t;
  }
  return total;
}

ag::Var CycleTrainer::discriminator_term(const std::vector<ViewDiscriminator>& ds,
                                         const Tensor& real, const Tensor& fake) const {
  ag::Var total;
  const ag::Var r = ag::Var::constant(real), f = ag::Var::constant(fake);
  for (const auto& d : ds) {
    ag::Var t = loss::adversarial_loss(d.net->forward(d.view(r)), d.net->forward(d.view(f)),
                                       options_.weights.adv_mode, loss::Side::discriminator);
    total = total.defined() ? ag::add(total, t) : t;
  }
  return total;
}

std::vector<double> CycleTrainer::generator_substep(const Tensor& a, const Tensor& b, double lr) {
  const auto& w = log_.weights;
  const ag::Var A = ag::Var::constant(a), B = ag::Var::constant(b);
  opt_g_->zero_grad();
  ag::Var fake_b = g_ab_->forward(A);
  ag::Var fake_a = g_ba_->forward(B);
  ag::Var adv_ab = term(w[0], [&] { return adversarial_generator_term(d_b_, fake_b); });
  ag::Var adv_ba = term(w[1], [&] { return adversarial_generator_term(d_a_, fake_a); });
  ag::Var cyc_a = term(w[2], [&] { return loss::cycle_consistency_loss(A, g_ba_->forward(fake_b)); });
  ag::Var cyc_b = term(w[3], [&] { return loss::cycle_consistency_loss(B, g_ab_->forward(fake_a)); });
  ag::Var idt_a, idt_b;
  if (options_.weights.lambda_identity > 0.0) {
    idt_a = term(w[4], [&] { return loss::l1_loss(A, g_ba_->forward(A)); });
    idt_b = term(w[5], [&] { return loss::l1_loss(B, g_ab_->forward(B)); });
  }
  std::vector<double> values = {adv_ab.item(), adv_ba.item(), cyc_a.item(), cyc_b.item(),
                                idt_a.defined() ? idt_a.item() : 0.0,
                                idt_b.defined() ? idt_b.item() : 0.0};
  check_finite(log_.terms, values, 0, step_, perm_epoch_);
  ag::Var total = weighted_sum({{w[0], adv_ab}, {w[1], adv_ba}, {w[2], cyc_a}, {w[3], cyc_b},
                                {w[4], idt_a}, {w[5], idt_b}});
  if (total.defined()) total.backward();
  opt_g_->step(lr);
  opt_g_->zero_grad();
  last_fake_a_ = fake_a.value();
  last_fake_b_ = fake_b.value();
  return values;
}

std::vector<double> CycleTrainer::discriminator_substep(const Tensor& a, const Tensor& b,
                                                        double lr) {
  const auto& w = log_.weights;
  if (last_fake_a_.empty() || last_fake_a_.dim(0) != b.dim(0) || last_fake_b_.dim(0) != a.dim(0)) {
    last_fake_a_ = g_ba_->infer(b);
    last_fake_b_ = g_ab_->infer(a);
  }
  const Tensor fake_a = pool_a_.query(last_fake_a_);
  const Tensor fake_b = pool_b_.query(last_fake_b_);
  last_fake_a_ = Tensor();
  last_fake_b_ = Tensor();
  opt_d_->zero_grad();
  ag::Var da = term(w[6], [&] { return discriminator_term(d_a_, a, fake_a); });
  ag::Var db = term(w[7], [&] { return discriminator_term(d_b_, b, fake_b); });
  std::vector<double> values = {da.item(), db.item()};
  check_finite(log_.terms, values, 6, step_, perm_epoch_);
  ag::Var total = weighted_sum({{w[6], da}, {w[7], db}});
  if (total.defined()) total.backward();
  opt_d_->step(lr);
  opt_d_->zero_grad();
  return values;
}

LossLog::Row CycleTrainer::train_step(int epoch, std::size_t index) {
  auto [a, b] = batch(epoch, index);
  LossLog::Row row;
  row.step = step_;
  row.epoch = epoch;
  row.lr_g = lr_at_epoch(options_.schedule, epoch, loss::Side::generator);
  row.lr_d = lr_at_epoch(options_.schedule, epoch, loss::Side::discriminator);
  row.values = generator_substep(a, b, row.lr_g);
  auto dv = discriminator_substep(a, b, row.lr_d);
  row.values.insert(row.values.end(), dv.begin(), dv.end());
  row.total = log_.weighted_total(row.values);
  row.total_d = log_.weighted_total_d(row.values);
  log_.rows.push_back(row);
  ++step_;
  return row;
}

TrainResult CycleTrainer::run(const StepCallback& on_step) {
  for (int epoch = epochs_completed_; epoch < options_.schedule.total_epochs; ++epoch) {
    for (std::size_t i = 0; i < steps_per_epoch(); ++i) {
      auto row = train_step(epoch, i);
      if (on_step) on_step(row);
    }
    epochs_completed_ = epoch + 1;
  }
  return {checkpoint(), log_};
}

StageCheckpoint CycleTrainer::checkpoint() const {
  StageCheckpoint c;
  c.role = role_;
  c.generators["G_AB"] = g_ab_->config();
  c.generators["G_BA"] = g_ba_->config();
  for (const auto* ds : {&d_a_, &d_b_})
    for (const auto& d : *ds) c.discriminators[d.name] = d.net->config();
  for (const auto& p : generator_parameters()) c.parameters.push_back({p.name, p.var.value()});
  for (const auto& p : discriminator_parameters()) c.parameters.push_back({p.name, p.var.value()});
  c.optimizer_state = opt_g_->state("opt_g/");
  auto ds = opt_d_->state("opt_d/");
  c.optimizer_state.insert(c.optimizer_state.end(), ds.begin(), ds.end());
  c.optimizer_steps = opt_g_->steps_taken();
  c.epochs_completed = epochs_completed_;
  c.config = to_json(options_);
  return c;
}

void CycleTrainer::resume(const StageCheckpoint& c) {
  if (c.role != role_) {
    throw TrainingError("checkpoint role mismatch: expected " + std::string(to_string(role_)) +
                        ", found " + std::string(to_string(c.role)));
  }
  auto gp = generator_parameters();
  auto dp = discriminator_parameters();
  nn::restore(gp, c.parameters);
  nn::restore(dp, c.parameters);
  opt_g_->load_state(c.optimizer_state, "opt_g/", c.optimizer_steps);
  opt_d_->load_state(c.optimizer_state, "opt_d/", c.optimizer_steps);
  epochs_completed_ = c.epochs_completed;
  step_ = c.optimizer_steps;
}

// ---------------------------------------------------------------- ColorizerTrainer

ColorizerTrainer::ColorizerTrainer(const data::ImageSet& ir, const data::ImageSet& rgb,
                                   ColorizerOptions options)
    : ir_(ir), rgb_(rgb), options_(std::move(options)) {
  if (ir_.size() == 0) throw TrainingError("colorizer training set is empty");
  if (ir_.size() != rgb_.size()) {
    throw TrainingError("colorizer needs paired data: " + std::to_string(ir_.size()) +
                        " IR images vs " + std::to_string(rgb_.size()) + " RGB images");
  }
  options_.schedule.validate();
  options_.weights.validate();
  auto& gcfg = options_.generator;
  const auto ch_ir = ir_.get(0).channels(), ch_rgb = rgb_.get(0).channels();
  if (ch_ir != static_cast<std::size_t>(gcfg.in_channels) ||
      ch_rgb != static_cast<std::size_t>(gcfg.out_channels)) {
    throw ShapeError("paired data channels (" + std::to_string(ch_ir) + ", " +
                     std::to_string(ch_rgb) + ") do not match generator config");
  }
  options_.discriminator.in_channels = gcfg.in_channels + gcfg.out_channels;
  const std::uint64_t seed = options_.schedule.seed;
  g_ = std::make_unique<nn::Generator>(gcfg, derive_seed(seed, "G"));
  d_ = std::make_unique<nn::Discriminator>(options_.discriminator, derive_seed(seed, "D"));
  fx_ = loss::build_feature_extractor(options_.extractor, derive_seed(seed, "perceptual"),
                                      options_.extractor_weights, options_.extractor_taps);
  opt_g_ = std::make_unique<Adam>(prefixed(g_->parameters(), "G/"));
  opt_d_ = std::make_unique<Adam>(prefixed(d_->parameters(), "D/"));
  const auto& w = options_.weights;
  log_.terms = {"g_adv", "l1", "perceptual", "tv", "d_adv"};
  log_.weights = {w.lambda_adv, w.lambda_l1, w.lambda_perceptual, w.lambda_tv, 0.5 * w.lambda_adv};
  log_.n_generator_terms = 4;
}

std::size_t ColorizerTrainer::steps_per_epoch() const {
  const auto bs = static_cast<std::size_t>(options_.schedule.batch_size);
  return (ir_.size() + bs - 1) / bs;
}

std::pair<Tensor, Tensor> ColorizerTrainer::batch(int epoch, std::size_t index) {
  const std::uint64_t seed = options_.schedule.seed;
  if (perm_epoch_ != epoch) {
    perm_ = epoch_permutation(ir_.size(), seed, epoch, "pairs");
    perm_epoch_ = epoch;
  }
  const auto bs = static_cast<std::size_t>(options_.schedule.batch_size);
  const bool flip = options_.horizontal_flip;
  // Same stream name for both halves so a pair is flipped together.
  Tensor ir = load_batch(ir_, perm_, index * bs, bs, flip, seed, epoch, "pairs");
  Tensor rgb = load_batch(rgb_, perm_, index * bs, bs, flip, seed, epoch, "pairs");
  if (ir.dim(2) != rgb.dim(2) || ir.dim(3) != rgb.dim(3)) {
    throw TrainingError("IR/RGB pair size mismatch: " + shape_str(ir.shape()) + " vs " +
                        shape_str(rgb.shape()));
  }
  return {ir, rgb};
}

std::vector<double> ColorizerTrainer::generator_substep(const Tensor& ir, const Tensor& rgb,
                                                        double lr) {
  const auto& w = log_.weights;
  const ag::Var X = ag::Var::constant(ir), Y = ag::Var::constant(rgb);
  opt_g_->zero_grad();
  ag::Var fake = g_->forward(X);
  ag::Var adv = term(w[0], [&] {
    return loss::adversarial_loss(ag::Var(), d_->forward(ag::concat_channels(X, fake)),
                                  options_.weights.adv_mode, loss::Side::generator);
  });
  ag::Var l1 = term(w[1], [&] { return loss::l1_loss(Y, fake); });
  ag::Var perc = term(w[2], [&] { return loss::perceptual_loss(Y, fake, fx_); });
  ag::Var tv = term(w[3], [&] { return loss::total_variation_loss(fake); });
  std::vector<double> values = {adv.item(), l1.item(), perc.item(), tv.item()};
  check_finite(log_.terms, values, 0, step_, perm_epoch_);
  ag::Var total = weighted_sum({{w[0], adv}, {w[1], l1}, {w[2], perc}, {w[3], tv}});
  if (total.defined()) total.backward();
  opt_g_->step(lr);
  opt_g_->zero_grad();
  last_fake_ = fake.value();
  return values;
}

std::vector<double> ColorizerTrainer::discriminator_substep(const Tensor& ir, const Tensor& rgb,
                                                            double lr) {
  const auto& w = log_.weights;
  if (last_fake_.empty() || last_fake_.dim(0) != ir.dim(0)) last_fake_ = g_->infer(ir);
  const ag::Var X = ag::Var::constant(ir);
  const ag::Var real = ag::concat_channels(X, ag::Var::constant(rgb));
  const ag::Var fake = ag::concat_channels(X, ag::Var::constant(last_fake_));
  last_fake_ = Tensor();
  opt_d_->zero_grad();
  ag::Var d = term(w[4], [&] {
    return loss::adversarial_loss(d_->forward(real), d_->forward(fake), options_.weights.adv_mode,
                                  loss::Side::discriminator);
  });
  std::vector<double> values = {d.item()};
  check_finite(log_.terms, values, 4, step_, perm_epoch_);
  ag::Var total = weighted_sum({{w[4], d}});
  if (total.defined()) total.backward();
  opt_d_->step(lr);
  opt_d_->zero_grad();
  return values;
}

LossLog::Row ColorizerTrainer::train_step(int epoch, std::size_t index) {
  auto [ir, rgb] = batch(epoch, index);
  LossLog::Row row;
  row.step = step_;
  row.epoch = epoch;
  row.lr_g = lr_at_epoch(options_.schedule, epoch, loss::Side::generator);
  row.lr_d = lr_at_epoch(options_.schedule, epoch, loss::Side::discriminator);
  row.values = generator_substep(ir, rgb, row.lr_g);
  auto dv = discriminator_substep(ir, rgb, row.lr_d);
  row.values.insert(row.values.end(), dv.begin(), dv.end());
  row.total = log_.weighted_total(row.values);
  row.total_d = log_.weighted_total_d(row.values);
  log_.rows.push_back(row);
  ++step_;
  return row;
}

TrainResult ColorizerTrainer::run(const StepCallback& on_step) {
  for (int epoch = epochs_completed_; epoch < options_.schedule.total_epochs; ++epoch) {
    for (std::size_t i = 0; i < steps_per_epoch(); ++i) {
      auto row = train_step(epoch, i);
      if (on_step) on_step(row);
    }
    epochs_completed_ = epoch + 1;
  }
  return {checkpoint(), log_};
}

StageCheckpoint ColorizerTrainer::checkpoint() const {
  StageCheckpoint c;
  c.role = StageRole::colorizer;
  c.generators["G"] = g_->config();
  c.discriminators["D"] = d_->config();
  for (const auto& p : prefixed(g_->parameters(), "G/")) c.parameters.push_back({p.name, p.var.value()});
  for (const auto& p : prefixed(d_->parameters(), "D/")) c.parameters.push_back({p.name, p.var.value()});
  c.optimizer_state = opt_g_->state("opt_g/");
  auto ds = opt_d_->state("opt_d/");
  c.optimizer_state.insert(c.optimizer_state.end(), ds.begin(), ds.end());
  c.optimizer_steps = opt_g_->steps_taken();
  c.epochs_completed = epochs_completed_;
  c.config = to_json(options_);
  return c;
}

void ColorizerTrainer::resume(const StageCheckpoint& c) {
  if (c.role != StageRole::colorizer) {
    throw TrainingError("checkpoint role mismatch: expected colorizer, found " +
                        std::string(to_string(c.role)));
  }
  nn::restore(g_->parameters(), c.parameters, "G/");
  nn::restore(d_->parameters(), c.parameters, "D/");
  opt_g_->load_state(c.optimizer_state, "opt_g/", c.optimizer_steps);
  opt_d_->load_state(c.optimizer_state, "opt_d/", c.optimizer_steps);
  epochs_completed_ = c.epochs_completed;
  step_ = c.optimizer_steps;
}

// ---------------------------------------------------------------- entry points

TrainResult train_cycle_translator(const data::ImageSet& domain_a, const data::ImageSet& domain_b,
                                   const CycleStageOptions& options, const StepCallback& on_step) {
  CycleTrainer t(domain_a, domain_b, options, StageRole::cycle_translator);
  return t.run(on_step);
}

TrainResult train_colorizer(const data::ImageSet& ir, const data::ImageSet& rgb,
                            const ColorizerOptions& options, const StepCallback& on_step) {
  ColorizerTrainer t(ir, rgb, options);
  return t.run(on_step);
}

TrainResult train_day_translator(const data::ImageSet& night_rgb, const data::ImageSet& day_rgb,
                                 const CycleStageOptions& options, const StepCallback& on_step) {
  CycleTrainer t(night_rgb, day_rgb, options, StageRole::day_translator);
  return t.run(on_step);
}

// ---------------------------------------------------------------- JSON

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed,
                std::string_view what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw std::invalid_argument("unknown key \"" + key + "\" in " + std::string(what));
    }
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json to_json(const TrainSchedule& s) {
  return {{"total_epochs", s.total_epochs},
          {"constant_epochs", s.constant_epochs},
          {"base_lr_generator", s.base_lr_generator},
          {"base_lr_discriminator", s.base_lr_discriminator},
          {"batch_size", s.batch_size},
          {"seed", s.seed}};
}

json to_json(const loss::LossWeights& w) {
  return {{"lambda_adv", w.lambda_adv},
          {"lambda_cycle", w.lambda_cycle},
          {"lambda_l1", w.lambda_l1},
          {"lambda_perceptual", w.lambda_perceptual},
          {"lambda_tv", w.lambda_tv},
          {"lambda_identity", w.lambda_identity},
          {"adv_mode", std::string(loss::to_string(w.adv_mode))}};
}

json to_json(const nn::GeneratorConfig& g) {
  return {{"in_channels", g.in_channels},   {"out_channels", g.out_channels},
          {"base_width", g.base_width},     {"n_downsample", g.n_downsample},
          {"n_resblocks", g.n_resblocks},   {"arch", std::string(nn::to_string(g.arch))}};
}

json to_json(const nn::DiscriminatorConfig& d) {
  return {{"in_channels", d.in_channels}, {"base_width", d.base_width}, {"n_layers", d.n_layers}};
}

json to_json(const CycleStageOptions& o) {
  return {{"schedule", to_json(o.schedule)},
          {"weights", to_json(o.weights)},
          {"generator", to_json(o.generator)},
          {"discriminator", to_json(o.discriminator)},
          {"replay_buffer", o.replay_buffer},
          {"replay_capacity", o.replay_capacity},
          {"multiview_discriminators", o.multiview_discriminators},
          {"horizontal_flip", o.horizontal_flip}};
}

json to_json(const ColorizerOptions& o) {
  return {{"schedule", to_json(o.schedule)},
          {"weights", to_json(o.weights)},
          {"generator", to_json(o.generator)},
          {"discriminator", to_json(o.discriminator)},
          {"extractor", o.extractor == loss::ExtractorKind::random_conv ? "random_conv" : "pretrained"},
          {"extractor_weights", o.extractor_weights},
          {"extractor_taps", o.extractor_taps},
          {"horizontal_flip", o.horizontal_flip}};
}

void from_json(const json& j, TrainSchedule& s) {
  check_keys(j, {"total_epochs", "constant_epochs", "base_lr_generator", "base_lr_discriminator",
                 "batch_size", "seed"},
             "schedule");
  read_opt(j, "total_epochs", s.total_epochs);
  read_opt(j, "constant_epochs", s.constant_epochs);
  read_opt(j, "base_lr_generator", s.base_lr_generator);
  read_opt(j, "base_lr_discriminator", s.base_lr_discriminator);
  read_opt(j, "batch_size", s.batch_size);
  read_opt(j, "seed", s.seed);
}

void from_json(const json& j, loss::LossWeights& w) {
  check_keys(j, {"lambda_adv", "lambda_cycle", "lambda_l1", "lambda_perceptual", "lambda_tv",
                 "lambda_identity", "adv_mode"},
             "weights");
  read_opt(j, "lambda_adv", w.lambda_adv);
  read_opt(j, "lambda_cycle", w.lambda_cycle);
  read_opt(j, "lambda_l1", w.lambda_l1);
  read_opt(j, "lambda_perceptual", w.lambda_perceptual);
  read_opt(j, "lambda_tv", w.lambda_tv);
  read_opt(j, "lambda_identity", w.lambda_identity);
  if (j.contains("adv_mode")) w.adv_mode = loss::parse_adv_mode(j.at("adv_mode").get<std::string>());
}

void from_json(const json& j, nn::GeneratorConfig& g) {
  check_keys(j, {"in_channels", "out_channels", "base_width", "n_downsample", "n_resblocks", "arch"},
             "generator");
  read_opt(j, "in_channels", g.in_channels);
  read_opt(j, "out_channels", g.out_channels);
  read_opt(j, "base_width", g.base_width);
  read_opt(j, "n_downsample", g.n_downsample);
  read_opt(j, "n_resblocks", g.n_resblocks);
  if (j.contains("arch")) g.arch = nn::parse_generator_arch(j.at("arch").get<std::string>());
}

void from_json(const json& j, nn::DiscriminatorConfig& d) {
  check_keys(j, {"in_channels", "base_width", "n_layers"}, "discriminator");
  read_opt(j, "in_channels", d.in_channels);
  read_opt(j, "base_width", d.base_width);
  read_opt(j, "n_layers", d.n_layers);
}

void from_json(const json& j, CycleStageOptions& o) {
  check_keys(j, {"schedule", "weights", "generator", "discriminator", "replay_buffer",
                 "replay_capacity", "multiview_discriminators", "horizontal_flip"},
             "cycle stage");
  if (j.contains("schedule")) from_json(j.at("schedule"), o.schedule);
  if (j.contains("weights")) from_json(j.at("weights"), o.weights);
  if (j.contains("generator")) from_json(j.at("generator"), o.generator);
  if (j.contains("discriminator")) from_json(j.at("discriminator"), o.discriminator);
  read_opt(j, "replay_buffer", o.replay_buffer);
  read_opt(j, "replay_capacity", o.replay_capacity);
  read_opt(j, "multiview_discriminators", o.multiview_discriminators);
  read_opt(j, "horizontal_flip", o.horizontal_flip);
}

void from_json(const json& j, ColorizerOptions& o) {
  check_keys(j, {"schedule", "weights", "generator", "discriminator", "extractor",
                 "extractor_weights", "extractor_taps", "horizontal_flip"},
             "colorizer stage");
  if (j.contains("schedule")) from_json(j.at("schedule"), o.schedule);
  if (j.contains("weights")) from_json(j.at("weights"), o.weights);
  if (j.contains("generator")) from_json(j.at("generator"), o.generator);
  if (j.contains("discriminator")) from_json(j.at("discriminator"), o.discriminator);
  if (j.contains("extractor")) {
    const auto kind = j.at("extractor").get<std::string>();
    if (kind == "random_conv") o.extractor = loss::ExtractorKind::random_conv;
    else if (kind == "pretrained") o.extractor = loss::ExtractorKind::pretrained;
    else throw std::invalid_argument("unknown extractor \"" + kind + "\"");
  }
  read_opt(j, "extractor_weights", o.extractor_weights);
  read_opt(j, "extractor_taps", o.extractor_taps);
  read_opt(j, "horizontal_flip", o.horizontal_flip);
}

}  // namespace tirgan::train
