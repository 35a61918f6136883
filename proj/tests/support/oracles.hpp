#pragma once

// Independent reference implementations used by the tests. None of these
// call into the library code they are checking.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tirgan/autograd.hpp"

namespace oracle {

// ---- boxes / detection metrics

struct RBox {
  double x, y, w, h;
};

// Intersection-over-union by counting unit pixels covered by each box.
// Exact for integer coordinates.
double raster_iou(const RBox& a, const RBox& b);

// Straightforward IoU written independently of the library.
double plain_iou(const RBox& a, const RBox& b);

struct RDet {
  int image;
  RBox box;
  double score;
};

struct RGt {
  int image;
  RBox box;
};

// Greedy matching in descending score order (stable for ties); each detection
// takes the unmatched GT of the same image with the highest IoU >= thr.
std::vector<bool> greedy_match(const std::vector<RDet>& dets, const std::vector<RGt>& gts,
                               double thr);

// Area under the precision envelope p(r) = max{precision_k : recall_k >= r},
// integrated on a grid of step 1e-4 refined with every recall breakpoint and
// evaluated by brute force at each cell midpoint.
double dense_grid_ap(const std::vector<bool>& tp_sorted_by_score, std::size_t n_gt);

// ---- gradients

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::string worst;
};

// Compares the analytic gradient of loss(x) w.r.t. x with central finite
// differences at `n_coords` random coordinates. Relative error is
// |a - n| / max(|a|, |n|, floor).
GradCheck check_input_gradient(const std::function<tirgan::ag::Var(const tirgan::ag::Var&)>& loss,
                               const tirgan::Tensor& x, std::size_t n_coords, std::uint64_t seed,
                               double h = 1e-6, double floor = 1e-6);

tirgan::Tensor random_tensor(tirgan::Shape shape, std::uint64_t seed, double lo = -1.0,
                             double hi = 1.0);

// ---- misc

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

std::string file_bytes(const std::filesystem::path& p);

}  // namespace oracle
