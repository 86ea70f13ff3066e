#include "dkd/lss.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "dkd/rng.hpp"

namespace dkd {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

void check_cloud(const LatentCloud& c, const char* what) {
  if (c.dim <= 0 || c.points.empty())
    throw std::invalid_argument(std::string("lss: empty ") + what + " cloud");
  if (c.points.size() % c.dim != 0)
    throw std::invalid_argument(std::string("lss: ragged ") + what + " cloud");
  for (double v : c.points)
    if (!std::isfinite(v))
      throw std::invalid_argument(std::string("lss: non-finite value in ") + what + " cloud");
}

/// Kernel columns are the solver's hot data; cache them up to a budget so
/// re-selected working indices cost O(n) instead of a fresh O(n*d) GEMV.
/// Both columns of a working pair are materialized together so the flush
/// can never invalidate one while fetching the other.
class KernelCache {
 public:
  KernelCache(const Mat& x) : x_(x) {}

  std::pair<const Vec*, const Vec*> columns(int i, int j) {
    if (!cols_.count(i) || !cols_.count(j)) {
      if (cols_.size() + 2 > kBudget) cols_.clear();
      if (!cols_.count(i)) cols_.emplace(i, x_ * x_.row(i).transpose());
      if (!cols_.count(j)) cols_.emplace(j, x_ * x_.row(j).transpose());
    }
    return {&cols_.at(i), &cols_.at(j)};
  }

 private:
  static constexpr std::size_t kBudget = 1024;
  const Mat& x_;
  std::unordered_map<int, Vec> cols_;
};

}  // namespace

MarginResult hard_margin_svm(const LatentCloud& pos, const LatentCloud& neg, double tol,
                             const SvmOptions& opts) {
  check_cloud(pos, "positive");
  check_cloud(neg, "negative");
  if (pos.dim != neg.dim) throw std::invalid_argument("lss: cloud dimension mismatch");
  if (tol <= 0.0) throw std::invalid_argument("lss: tol must be positive");

  const int np = pos.size(), nn = neg.size(), n = np + nn, d = pos.dim;
  Mat x(n, d);
  Vec y(n);
  for (int i = 0; i < np; ++i) {
    x.row(i) = Eigen::Map<const Eigen::RowVectorXd>(pos.row(i), d);
    y[i] = 1.0;
  }
  for (int i = 0; i < nn; ++i) {
    x.row(np + i) = Eigen::Map<const Eigen::RowVectorXd>(neg.row(i), d);
    y[np + i] = -1.0;
  }

  // SMO on the dual: min 1/2 a^T Q a - e^T a, Q_ij = y_i y_j x_i.x_j,
  // subject to y^T a = 0, 0 <= a <= C. G_i is the dual gradient; the
  // maximal-violating working pair comes from the usual I_up/I_low split.
  const double C = opts.c;
  Vec alpha = Vec::Zero(n);
  Vec g = Vec::Constant(n, -1.0);
  Vec w = Vec::Zero(d);
  KernelCache cache(x);

  MarginResult res;
  res.converged = false;
  std::int64_t it = 0;
  double m_val = 0.0, M_val = 0.0;
  for (; it < opts.max_iter; ++it) {
    int i = -1, j = -1;
    m_val = -std::numeric_limits<double>::infinity();
    M_val = std::numeric_limits<double>::infinity();
    for (int t = 0; t < n; ++t) {
      const double v = -y[t] * g[t];
      const bool up = (y[t] > 0.0 && alpha[t] < C) || (y[t] < 0.0 && alpha[t] > 0.0);
      const bool low = (y[t] < 0.0 && alpha[t] < C) || (y[t] > 0.0 && alpha[t] > 0.0);
      if (up && v > m_val) {
        m_val = v;
        i = t;
      }
      if (low && v < M_val) {
        M_val = v;
        j = t;
      }
    }
    if (i < 0 || j < 0 || m_val - M_val < opts.eps_kkt) {
      res.converged = true;
      break;
    }

    const auto [kip, kjp] = cache.columns(i, j);
    const Vec& ki = *kip;
    const Vec& kj = *kjp;
    double eta = ki[i] + kj[j] - 2.0 * ki[j];
    if (eta <= 0.0) eta = 1e-12;

    // Direction a_i += y_i*delta, a_j -= y_j*delta preserves y^T a.
    double delta = -(y[i] * g[i] - y[j] * g[j]) / eta;
    const auto bound = [C](double a, double s) {  // delta range keeping a + s*delta in [0,C]
      return s > 0.0 ? std::pair<double, double>{-a, C - a}
                     : std::pair<double, double>{a - C, a};
    };
    const auto [lo_i, hi_i] = bound(alpha[i], y[i]);
    const auto [lo_j, hi_j] = bound(alpha[j], -y[j]);
    delta = std::clamp(delta, std::max(lo_i, lo_j), std::min(hi_i, hi_j));
    if (delta == 0.0) break;  // boxed-in stall: leave converged=false

    alpha[i] += y[i] * delta;
    alpha[j] -= y[j] * delta;
    w.noalias() += delta * (x.row(i) - x.row(j)).transpose();
    g.noalias() += delta * y.cwiseProduct(ki - kj);

    if ((it & 0x1fff) == 0x1fff) {  // periodic refresh against fp drift
      w.noalias() = x.transpose() * alpha.cwiseProduct(y);
      g.noalias() = y.cwiseProduct(x * w) - Vec::Ones(n);
    }
  }
  res.iterations = it;

  // Recompute exactly from the final alphas, then read b off the KKT gap.
  w.noalias() = x.transpose() * alpha.cwiseProduct(y);
  g.noalias() = y.cwiseProduct(x * w) - Vec::Ones(n);
  m_val = -std::numeric_limits<double>::infinity();
  M_val = std::numeric_limits<double>::infinity();
  for (int t = 0; t < n; ++t) {
    const double v = -y[t] * g[t];
    if (((y[t] > 0.0 && alpha[t] < C) || (y[t] < 0.0 && alpha[t] > 0.0)) && v > m_val) m_val = v;
    if (((y[t] < 0.0 && alpha[t] < C) || (y[t] > 0.0 && alpha[t] > 0.0)) && v < M_val) M_val = v;
  }
  res.b = 0.5 * (m_val + M_val);
  res.w.assign(w.data(), w.data() + d);

  const double wnorm = w.norm();
  res.margin = wnorm > 1e-300 ? 2.0 / wnorm : 0.0;

  // Slacks below tol are a separability certificate on their own; the
  // converged flag separately records whether `margin` is the maximum.
  double max_slack = 0.0;
  for (int t = 0; t < n; ++t)
    max_slack = std::max(max_slack, 1.0 - y[t] * (w.dot(x.row(t)) + res.b));
  res.separable = wnorm > 1e-300 && max_slack < tol;
  res.lss = res.separable ? res.margin : 0.0;
  return res;
}

MarginResult lss_pairwise(const LatentCloud& a, const std::vector<LatentCloud>& others,
                          double tol, const SvmOptions& opts) {
  if (others.empty()) throw std::invalid_argument("lss: no opposing clouds");
  LatentCloud rest;
  rest.dim = others[0].dim;
  for (const auto& c : others) {
    check_cloud(c, "opposing");
    if (c.dim != rest.dim) throw std::invalid_argument("lss: cloud dimension mismatch");
    rest.points.insert(rest.points.end(), c.points.begin(), c.points.end());
  }
  return hard_margin_svm(a, rest, tol, opts);
}

LSSReport lss_ensemble(const std::vector<LatentCloud>& clouds, double tol,
                       const SvmOptions& opts) {
  if (clouds.size() < 2) throw std::invalid_argument("lss: ensemble needs at least two clouds");
  LSSReport report;
  report.all_separable = true;
  double sum = 0.0;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    std::vector<LatentCloud> rest;
    for (std::size_t j = 0; j < clouds.size(); ++j)
      if (j != i) rest.push_back(clouds[j]);
    report.per_member.push_back(lss_pairwise(clouds[i], rest, tol, opts));
    report.all_separable = report.all_separable && report.per_member.back().separable;
    sum += report.per_member.back().lss;
  }
  report.ensemble_lss = sum / static_cast<double>(clouds.size());
  return report;
}

LatentCloud subsample_cloud(const LatentCloud& cloud, int max_points, std::uint64_t seed) {
  check_cloud(cloud, "input");
  if (max_points <= 0) throw std::invalid_argument("lss: max_points must be positive");
  if (cloud.size() <= max_points) return cloud;
  std::vector<int> idx(cloud.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  LatentCloud out;
  out.dim = cloud.dim;
  out.source_model = cloud.source_model;
  out.tap = cloud.tap;
  for (int i = 0; i < max_points; ++i)
    out.points.insert(out.points.end(), cloud.row(idx[i]), cloud.row(idx[i]) + cloud.dim);
  return out;
}

}  // namespace dkd
