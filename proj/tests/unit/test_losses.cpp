#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "tirgan/losses.hpp"

using namespace tirgan;
using namespace tirgan::loss;
using ag::Var;

namespace {

Var c(const Tensor& t) { return Var::constant(t); }

double ref_mean_abs(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

double ref_log_sigmoid(double x) { return -std::log1p(std::exp(-x)); }

}  // namespace

TEST_CASE("known values") {
  const Tensor zeros({1, 1, 2, 2}, 0.0);
  CHECK(adversarial_loss(c(zeros), c(zeros), AdvMode::vanilla, Side::discriminator).item() ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(adversarial_loss(Var(), c(zeros), AdvMode::vanilla, Side::generator).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(adversarial_loss(c(zeros), c(zeros), AdvMode::lsgan, Side::discriminator).item() == 1.0);
  CHECK(adversarial_loss(Var(), c(zeros), AdvMode::lsgan, Side::generator).item() == 1.0);

  const Tensor y({1, 1, 1, 5}, std::vector<double>{0, 0, 0, 0, 0});
  const Tensor y_hat({1, 1, 1, 5}, std::vector<double>{1, 0, 0, 0, 0});
  CHECK(l1_loss(c(y), c(y_hat)).item() == doctest::Approx(0.2));
  const Tensor half({1, 1, 1, 5}, 0.5);
  CHECK(cycle_consistency_loss(c(y), c(half)).item() == doctest::Approx(0.5));

  const Tensor stripes({1, 1, 2, 2}, std::vector<double>{0, 1, 0, 1});
  CHECK(total_variation_loss(c(stripes)).item() == doctest::Approx(0.5));
  CHECK(total_variation_loss(c(zeros)).item() == 0.0);
}

TEST_CASE("adversarial values against a direct formula") {
  const Tensor r = oracle::random_tensor({2, 1, 3, 3}, 1, -3, 3);
  const Tensor f = oracle::random_tensor({2, 1, 3, 3}, 2, -3, 3);
  double want_d = 0, want_g = 0, ls_d = 0, ls_g = 0;
  for (std::size_t i = 0; i < r.numel(); ++i) {
    want_d += -ref_log_sigmoid(r[i]) - ref_log_sigmoid(-f[i]);
    want_g += -ref_log_sigmoid(f[i]);
    ls_d += (r[i] - 1) * (r[i] - 1) + f[i] * f[i];
    ls_g += (f[i] - 1) * (f[i] - 1);
  }
  const double n = static_cast<double>(r.numel());
  CHECK(adversarial_loss(c(r), c(f), AdvMode::vanilla, Side::discriminator).item() ==
        doctest::Approx(want_d / n).epsilon(1e-12));
  CHECK(adversarial_loss(c(r), c(f), AdvMode::vanilla, Side::generator).item() ==
        doctest::Approx(want_g / n).epsilon(1e-12));
  CHECK(adversarial_loss(c(r), c(f), AdvMode::lsgan, Side::discriminator).item() ==
        doctest::Approx(ls_d / n).epsilon(1e-12));
  CHECK(adversarial_loss(c(r), c(f), AdvMode::lsgan, Side::generator).item() ==
        doctest::Approx(ls_g / n).epsilon(1e-12));
  CHECK_THROWS_AS(adversarial_loss(c(r), c(Tensor({1, 1, 3, 3})), AdvMode::lsgan, Side::discriminator),
                  ShapeError);
}

TEST_CASE("reconstruction loss properties") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    const Tensor a = oracle::random_tensor({2, 3, 4, 5}, 100 + seed);
    const Tensor b = oracle::random_tensor({2, 3, 4, 5}, 200 + seed);
    const double ab = l1_loss(c(a), c(b)).item();
    CHECK(ab == doctest::Approx(ref_mean_abs(a, b)).epsilon(1e-12));
    // symmetry
    CHECK(ab == doctest::Approx(l1_loss(c(b), c(a)).item()).epsilon(1e-14));
    // cycle loss is the same mean absolute error
    CHECK(cycle_consistency_loss(c(a), c(b)).item() == doctest::Approx(ab).epsilon(1e-14));
    // identity of indiscernibles
    CHECK(l1_loss(c(a), c(a)).item() == 0.0);
    // absolute homogeneity for L1 and TV
    Tensor a2 = a, b2 = b;
    for (double& v : a2.vec()) v *= -2.5;
    for (double& v : b2.vec()) v *= -2.5;
    CHECK(l1_loss(c(a2), c(b2)).item() == doctest::Approx(2.5 * ab).epsilon(1e-12));
    CHECK(total_variation_loss(c(a2)).item() ==
          doctest::Approx(2.5 * total_variation_loss(c(a)).item()).epsilon(1e-12));
    // TV ignores a constant shift
    Tensor shifted = a;
    for (double& v : shifted.vec()) v += 0.37;
    CHECK(total_variation_loss(c(shifted)).item() ==
          doctest::Approx(total_variation_loss(c(a)).item()).epsilon(1e-12));
    CHECK(total_variation_loss(c(a)).item() >= 0.0);
  }
}

TEST_CASE("loss gradients match finite differences") {
  const Tensor other = oracle::random_tensor({2, 3, 8, 8}, 7);
  const Tensor x = oracle::random_tensor({2, 3, 8, 8}, 8);
  const auto fx = FeatureExtractor::random_conv(3);
  struct Case {
    const char* name;
    std::function<Var(const Var&)> f;
  };
  const Case cases[] = {
      {"vanilla_d", [&](const Var& v) { return adversarial_loss(v, c(other), AdvMode::vanilla, Side::discriminator); }},
      {"vanilla_g", [&](const Var& v) { return adversarial_loss(Var(), v, AdvMode::vanilla, Side::generator); }},
      {"lsgan_d", [&](const Var& v) { return adversarial_loss(c(other), v, AdvMode::lsgan, Side::discriminator); }},
      {"lsgan_g", [&](const Var& v) { return adversarial_loss(Var(), v, AdvMode::lsgan, Side::generator); }},
      {"l1", [&](const Var& v) { return l1_loss(c(other), v); }},
      {"cycle", [&](const Var& v) { return cycle_consistency_loss(v, c(other)); }},
      {"tv", [&](const Var& v) { return total_variation_loss(v); }},
      {"perceptual", [&](const Var& v) { return perceptual_loss(c(other), v, fx); }},
  };
  for (const auto& cs : cases) {
    const std::string name = cs.name;
    CAPTURE(name);
    // floor sits above central-difference cancellation noise (~1e-10)
    auto r = oracle::check_input_gradient(cs.f, x, 40, 5, 1e-6, 1e-5);
    CAPTURE(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("perceptual loss") {
  const auto fx = FeatureExtractor::random_conv(11);
  const Tensor a = oracle::random_tensor({1, 3, 16, 16}, 12);
  Tensor b = a;
  CHECK(perceptual_loss(c(a), c(b), fx).item() == 0.0);
  b.at(0, 1, 7, 9) += 0.5;
  CHECK(perceptual_loss(c(a), c(b), fx).item() > 0.0);
  CHECK(fx.depth_count() == 2);

  // one-channel input is replicated to three
  const Tensor g = oracle::random_tensor({1, 1, 16, 16}, 13);
  Tensor g3({1, 3, 16, 16});
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) g3.at(0, ch, i, j) = g.at(0, 0, i, j);
  const auto f1 = fx.features(g);
  const auto f3 = fx.features(g3);
  REQUIRE(f1.size() == f3.size());
  for (std::size_t k = 0; k < f1.size(); ++k) CHECK(f1[k] == f3[k]);

  // frozen: backward through the loss leaves the extractor untouched
  const auto before = fx.weights();
  Var yhat = Var::parameter(b);
  perceptual_loss(c(a), yhat, fx).backward();
  bool nonzero = false;
  for (double v : yhat.grad().vec()) nonzero = nonzero || v != 0.0;
  CHECK(nonzero);
  const auto after = fx.weights();
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].tensor == after[i].tensor);
}

TEST_CASE("pretrained extractor from a weights archive") {
  oracle::TempDir dir("vgg");
  write_random_vgg_weights(dir / "vgg.bin", {4, 4, 6, 6, 6}, 1);
  auto fx = FeatureExtractor::pretrained(dir / "vgg.bin");
  CHECK(fx.kind() == ExtractorKind::pretrained);
  CHECK(fx.depth_count() == 4);
  const Tensor a = oracle::random_tensor({1, 3, 16, 16}, 2);
  const Tensor b = oracle::random_tensor({1, 3, 16, 16}, 3);
  CHECK(perceptual_loss(c(a), c(b), fx).item() > 0.0);
  auto fx2 = FeatureExtractor::pretrained(dir / "vgg.bin", {"relu2_2"});
  CHECK(fx2.depth_count() == 1);
  CHECK_THROWS(FeatureExtractor::pretrained(dir / "vgg.bin", {"relu9_9"}));
  CHECK_THROWS_WITH(FeatureExtractor::pretrained(dir / "missing.bin"),
                    doctest::Contains("perceptual feature weights not found"));
  CHECK_THROWS(write_random_vgg_weights(dir / "x.bin", {1, 2}, 1));
}

TEST_CASE("loss weight validation") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.lambda_l1 = -1.0;
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
  w.lambda_l1 = std::nan("");
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
  CHECK(parse_adv_mode("lsgan") == AdvMode::lsgan);
  CHECK_THROWS(parse_adv_mode("wgan"));
}
