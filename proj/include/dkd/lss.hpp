#pragma once

#include <cstdint>
#include <vector>

namespace dkd {

/// Latent activations of one model over an evaluation set: row-major
/// [size, dim] with bookkeeping about where the rows came from.
struct LatentCloud {
  int dim = 0;
  std::vector<double> points;
  int source_model = -1;
  int tap = -1;

  int size() const { return dim > 0 ? static_cast<int>(points.size()) / dim : 0; }
  const double* row(int i) const { return points.data() + static_cast<std::size_t>(i) * dim; }
};

/// Maximum-margin separator between two clouds. `lss` is the separation
/// width 2/||w|| when the clouds are linearly separable, else 0.
struct MarginResult {
  bool separable = false;
  bool converged = true;  // solver hit its KKT gap; distinct from separability
  std::vector<double> w;
  double b = 0.0;
  double margin = 0.0;  // 2/||w|| of the solution, regardless of separability
  double lss = 0.0;
  std::int64_t iterations = 0;
};

/// Dual-solver knobs. The hard margin is realized as a soft margin with a
/// large box constant; separability is then a statement about slacks.
struct SvmOptions {
  double c = 1e6;            // box constraint standing in for +infinity
  double eps_kkt = 1e-9;     // working-set violation gap at convergence
  std::int64_t max_iter = 1'000'000;
};

/// Maximum-margin linear separator, positive cloud vs negative cloud.
/// Separable iff the solver converged and every slack max(0, 1-y(wx+b))
/// stays below `tol`. Throws on empty clouds, dimension mismatch, or
/// non-finite points.
MarginResult hard_margin_svm(const LatentCloud& pos, const LatentCloud& neg, double tol = 1e-3,
                             const SvmOptions& opts = {});

/// One-vs-rest margin: `a` against the union of `others`.
MarginResult lss_pairwise(const LatentCloud& a, const std::vector<LatentCloud>& others,
                          double tol = 1e-3, const SvmOptions& opts = {});

/// Ensemble separation: mean over members of their one-vs-rest lss.
struct LSSReport {
  std::vector<MarginResult> per_member;
  double ensemble_lss = 0.0;
  bool all_separable = false;
  int subsampled_to = 0;  // 0 = full clouds; set by callers that subsample
};

LSSReport lss_ensemble(const std::vector<LatentCloud>& clouds, double tol = 1e-3,
                       const SvmOptions& opts = {});

/// Seed-keyed random subset of at most `max_points` rows (identity when the
/// cloud is already small enough).
LatentCloud subsample_cloud(const LatentCloud& cloud, int max_points, std::uint64_t seed);

}  // namespace dkd
