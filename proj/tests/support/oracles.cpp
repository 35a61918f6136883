#include "oracles.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace oracle {

double raster_iou(const RBox& a, const RBox& b) {
  const long x0 = static_cast<long>(std::floor(std::min(a.x, b.x)));
  const long y0 = static_cast<long>(std::floor(std::min(a.y, b.y)));
  const long x1 = static_cast<long>(std::ceil(std::max(a.x + a.w, b.x + b.w)));
  const long y1 = static_cast<long>(std::ceil(std::max(a.y + a.h, b.y + b.h)));
  auto inside = [](const RBox& r, double px, double py) {
    return px >= r.x && px < r.x + r.w && py >= r.y && py < r.y + r.h;
  };
  long inter = 0, uni = 0;
  for (long y = y0; y < y1; ++y) {
    for (long x = x0; x < x1; ++x) {
      const double cx = x + 0.5, cy = y + 0.5;
      const bool ia = inside(a, cx, cy), ib = inside(b, cx, cy);
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double plain_iou(const RBox& a, const RBox& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

std::vector<bool> greedy_match(const std::vector<RDet>& dets, const std::vector<RGt>& gts,
                               double thr) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return dets[i].score > dets[j].score; });
  std::vector<bool> used(gts.size(), false);
  std::vector<bool> tp(dets.size(), false);
  for (std::size_t i : order) {
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image != dets[i].image) continue;
      const double v = plain_iou(dets[i].box, gts[g].box);
      if (v >= thr && v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gts.size()) {
      used[best_g] = true;
      tp[i] = true;
    }
  }
  return tp;
}

double dense_grid_ap(const std::vector<bool>& tp, std::size_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::vector<double> rec, prec;
  double ntp = 0;
  for (std::size_t k = 0; k < tp.size(); ++k) {
    ntp += tp[k] ? 1.0 : 0.0;
    rec.push_back(ntp / static_cast<double>(n_gt));
    prec.push_back(ntp / static_cast<double>(k + 1));
  }
  std::set<double> grid;
  for (int i = 0; i <= 10000; ++i) grid.insert(i * 1e-4);
  for (double r : rec) grid.insert(r);
  std::vector<double> g(grid.begin(), grid.end());
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < g.size(); ++i) {
    const double lo = g[i], hi = std::min(g[i + 1], 1.0);
    if (hi <= lo) continue;
    const double mid = 0.5 * (lo + hi);
    double p = 0.0;
    for (std::size_t k = 0; k < rec.size(); ++k)
      if (rec[k] >= mid) p = std::max(p, prec[k]);
    area += p * (hi - lo);
  }
  return area;
}

tirgan::Tensor random_tensor(tirgan::Shape shape, std::uint64_t seed, double lo, double hi) {
  tirgan::Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.vec()) v = d(rng);
  return t;
}

GradCheck check_input_gradient(const std::function<tirgan::ag::Var(const tirgan::ag::Var&)>& loss,
                               const tirgan::Tensor& x, std::size_t n_coords, std::uint64_t seed,
                               double h, double floor) {
  using tirgan::ag::Var;
  Var xv = Var::parameter(x);
  Var l = loss(xv);
  l.backward();
  const tirgan::Tensor analytic = xv.grad();

  auto value_at = [&](const tirgan::Tensor& t) {
    tirgan::ag::NoGradGuard guard;
    return loss(Var::constant(t)).item();
  };

  GradCheck out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, x.numel() - 1);
  for (std::size_t c = 0; c < n_coords; ++c) {
    const std::size_t i = pick(rng);
    tirgan::Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double numeric = (value_at(xp) - value_at(xm)) / (2.0 * h);
    const double a = analytic.empty() ? 0.0 : analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > out.max_rel_error) {
      out.max_rel_error = rel;
      std::ostringstream ss;
      ss << "coord " << i << ": analytic " << a << " numeric " << numeric;
      out.worst = ss.str();
    }
    ++out.coords;
  }
  return out;
}

TempDir::TempDir(const std::string& tag) {
  static int counter = 0;
  path_ = std::filesystem::temp_directory_path() /
          ("tirgan_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace oracle
